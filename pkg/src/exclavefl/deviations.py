"""Deviation injection: the orchestrator playing adversary.

Each injection perturbs exactly one kind of step. All perturbations are
deterministic so a deviating run can be replayed and diffed against its
faithful twin.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import crypto
from .attestation import SecureProcessor
from .crypto import TAG_KEY_DERIVE, hash_bytes, hash_parts
from .edr import EDR, edr_digest, edr_endorse

KINDS = (
    "forge_edr",
    "transit_tamper",
    "skip_dp",
    "drop_update",
    "dataset_swap",
    "skip_sanitization",
    "code_tamper",
)


class DeviationError(ValueError):
    pass


@dataclass(frozen=True)
class Injection:
    kind: str
    target: str
    round: int = 0
    details: dict = field(default_factory=dict, hash=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DeviationError(f"unknown deviation kind {self.kind!r}")

    def detail(self, key, default=None):
        return self.details.get(key, default)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "target": self.target, "round": self.round, "details": dict(self.details)}


@dataclass
class DeviationScript:
    injections: list[Injection] = field(default_factory=list)

    def __iter__(self):
        return iter(self.injections)

    def __len__(self):
        return len(self.injections)

    def of_kind(self, *kinds: str) -> list[Injection]:
        return [i for i in self.injections if i.kind in kinds]

    def validate(self, participants) -> None:
        for inj in self.injections:
            if inj.target not in participants:
                raise DeviationError(f"injection targets unknown participant {inj.target!r}")

    def to_dict(self) -> dict:
        return {"injections": [i.to_dict() for i in self.injections]}

    @classmethod
    def from_dict(cls, d: dict) -> "DeviationScript":
        return cls([Injection(x["kind"], x["target"], int(x.get("round", 0)), dict(x.get("details", {}))) for x in d["injections"]])


def load_script(path) -> DeviationScript:
    return DeviationScript.from_dict(json.loads(Path(path).read_text()))


def save_script(script: DeviationScript, path) -> None:
    Path(path).write_text(json.dumps(script.to_dict(), indent=2) + "\n")


@dataclass
class Step:
    """One in-flight exclave invocation, as seen by the orchestrator."""

    task_kind: str
    participant_id: str  # who executes the step
    round: int
    request: object
    response: Optional[object] = None
    skip: bool = False


def flip_byte(payload: bytes, offset: int = 4, mask: int = 0x01) -> bytes:
    """Flip bits of one byte (default: lowest mantissa bit of the first float)."""
    b = bytearray(payload)
    b[offset % len(b)] ^= mask
    return bytes(b)


def _transit_label(inj: Injection, step: Step, diff_label) -> Optional[str]:
    stage = inj.detail("stage", "aggregate")
    if step.task_kind != stage or step.round != inj.round:
        return None
    if stage == "aggregate":
        return inj.detail("label", diff_label(inj.target))
    if step.participant_id != inj.target:
        return None
    default = {"train": "model:global", "dp": diff_label(inj.target), "model_update": "model:agg_diff"}.get(stage)
    return inj.detail("label", default)


def applies(inj: Injection, step: Step, phase: str, diff_label) -> bool:
    k = inj.kind
    if phase == "request":
        if k == "transit_tamper":
            return _transit_label(inj, step, diff_label) in step.request.payloads
        if k == "drop_update":
            return step.task_kind == "aggregate" and step.round == inj.round
        if k == "skip_dp":
            return step.task_kind == "dp" and step.participant_id == inj.target and step.round == inj.round
        if k == "dataset_swap":
            return step.task_kind == "train" and step.participant_id == inj.target and step.round >= inj.round
        if k == "skip_sanitization":
            return step.task_kind == "train" and step.participant_id == inj.target and step.round >= inj.round
        return False
    if phase == "response" and k == "forge_edr":
        return (
            step.task_kind == inj.detail("task_kind", "dp")
            and step.participant_id == inj.target
            and step.round == inj.round
        )
    return False


def apply_deviation(inj: Injection, step: Step, ctx) -> Step:
    """Perturb ``step`` in place according to ``inj``.

    ``ctx`` is the running orchestrator; it supplies alternate dataset images
    and participant keys (a deviating participant holds its own issuer key).
    """
    from .exclave import diff_label

    req = step.request
    k = inj.kind
    if k == "transit_tamper":
        label = _transit_label(inj, step, diff_label)
        req.payloads[label] = flip_byte(req.payloads[label], inj.detail("offset", 4), inj.detail("mask", 0x01))
    elif k == "drop_update":
        req.payloads.pop(diff_label(inj.target), None)
    elif k == "skip_dp":
        step.skip = True
    elif k == "dataset_swap":
        req.dataset, req.expected_commitment = ctx.swapped_dataset(inj)
        req.dataset_path = None
    elif k == "skip_sanitization":
        req.dataset, req.expected_commitment = ctx.raw_dataset(inj.target)
        req.dataset_path = None
    elif k == "forge_edr":
        _forge(inj, step, ctx)
    return step


def _forge(inj: Injection, step: Step, ctx) -> None:
    """Claim a tampered output and re-sign the record with an unendorsed key."""
    resp = step.response
    honest = resp.endorsed_edr.edr
    payloads = {label: flip_byte(p) for label, p in resp.payloads.items()}
    outputs = dict(honest.outputs)
    outputs.update({label: hash_bytes(p) for label, p in payloads.items()})
    forged = EDR(honest.exclave_id, honest.participant_id, honest.task_kind, honest.round, honest.inputs, honest.code, outputs)

    seed_base = hash_parts(TAG_KEY_DERIVE, b"forge", repr(sorted(inj.to_dict().items())).encode())
    rogue_root = crypto.keygen(seed_base)
    sp = SecureProcessor(rogue_root, hash_bytes(seed_base))
    sp.measure_code(honest.code)
    report = sp.attest(edr_digest(forged))
    resp.endorsed_edr = edr_endorse(forged, report, ctx.issuer_key(inj.target), inj.target)
    resp.payloads = payloads
