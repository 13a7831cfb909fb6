"""Exclave data records: canonical form, issuer endorsement, append-only store."""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Optional, Union

from . import crypto
from .attestation import ZERO, AttestationReport, pcr_extend, verify_report
from .crypto import TAG_ISSUER, Digest, KeyPair, b64d, b64e, from_hex, to_hex

TASK_KINDS = ("sanitize", "train", "dp", "aggregate", "model_update")
SANITIZE_ROUND = -1


class EDRError(Exception):
    pass


class DigestMismatch(EDRError):
    pass


def _check_label(label: str) -> None:
    if not isinstance(label, str) or ":" not in label or any(not p for p in label.split(":")):
        raise ValueError(f"bad label {label!r}: expected '<role>:<property>'")


def _frozen_map(m: Mapping[str, Digest]) -> Mapping[str, Digest]:
    if not m:
        raise ValueError("EDR maps must be non-empty")
    for k, v in m.items():
        _check_label(k)
        if not isinstance(v, bytes) or len(v) != 32:
            raise ValueError(f"value for {k!r} is not a 32-byte digest")
    return MappingProxyType(dict(sorted(m.items())))


@dataclass(frozen=True)
class EDR:
    exclave_id: str
    participant_id: str
    task_kind: str
    round: int
    inputs: Mapping[str, Digest]
    code: Digest
    outputs: Mapping[str, Digest]

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.task_kind!r}")
        if type(self.round) is not int or self.round < SANITIZE_ROUND:
            raise ValueError(f"bad round {self.round!r}")
        if not self.exclave_id or not self.participant_id:
            raise ValueError("exclave_id and participant_id must be non-empty")
        if not isinstance(self.code, bytes) or len(self.code) != 32:
            raise ValueError("code must be a 32-byte digest")
        object.__setattr__(self, "inputs", _frozen_map(self.inputs))
        object.__setattr__(self, "outputs", _frozen_map(self.outputs))

    def __hash__(self):
        return hash(edr_digest(self))

    def __eq__(self, other):
        if not isinstance(other, EDR):
            return NotImplemented
        return edr_canonicalize(self) == edr_canonicalize(other)

    def to_dict(self) -> dict:
        return {
            "code": to_hex(self.code),
            "exclave_id": self.exclave_id,
            "inputs": {k: to_hex(v) for k, v in self.inputs.items()},
            "outputs": {k: to_hex(v) for k, v in self.outputs.items()},
            "participant_id": self.participant_id,
            "round": self.round,
            "task_kind": self.task_kind,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EDR":
        if set(d) != {"code", "exclave_id", "inputs", "outputs", "participant_id", "round", "task_kind"}:
            raise ValueError("unexpected EDR fields")
        return cls(
            exclave_id=d["exclave_id"],
            participant_id=d["participant_id"],
            task_kind=d["task_kind"],
            round=d["round"],
            inputs={k: from_hex(v) for k, v in d["inputs"].items()},
            code=from_hex(d["code"]),
            outputs={k: from_hex(v) for k, v in d["outputs"].items()},
        )


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def edr_canonicalize(edr: EDR) -> bytes:
    return canonical_json(edr.to_dict())


def edr_digest(edr: EDR) -> Digest:
    return crypto.hash_bytes(edr_canonicalize(edr))


def issuer_message(digest: Digest) -> bytes:
    return TAG_ISSUER + digest


@dataclass(frozen=True)
class EndorsedEDR:
    edr: EDR
    report: AttestationReport
    issuer_id: str
    issuer_sig: bytes

    @property
    def digest(self) -> Digest:
        return edr_digest(self.edr)

    def to_dict(self) -> dict:
        return {
            "edr": self.edr.to_dict(),
            "report": self.report.to_dict(),
            "issuer_id": self.issuer_id,
            "issuer_sig": b64e(self.issuer_sig),
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict()).decode("utf-8")

    @classmethod
    def from_json(cls, line: str) -> "EndorsedEDR":
        """Strict parse: the line must be exactly the canonical encoding."""
        d = json.loads(line)
        if not isinstance(d, dict) or set(d) != {"edr", "report", "issuer_id", "issuer_sig"}:
            raise ValueError("unexpected envelope fields")
        if not isinstance(d["issuer_id"], str):
            raise ValueError("issuer_id must be a string")
        e = cls(
            edr=EDR.from_dict(d["edr"]),
            report=AttestationReport.from_dict(d["report"]),
            issuer_id=d["issuer_id"],
            issuer_sig=b64d(d["issuer_sig"]),
        )
        if e.to_json() != line.rstrip("\n"):
            raise ValueError("envelope is not in canonical form")
        return e


def edr_endorse(edr: EDR, report: AttestationReport, issuer: KeyPair, issuer_id: str) -> EndorsedEDR:
    d = edr_digest(edr)
    if report.edr_digest != d:
        raise DigestMismatch("attestation report covers a different EDR")
    return EndorsedEDR(edr, report, issuer_id, crypto.sign(issuer, issuer_message(d)))


def edr_verify(e: EndorsedEDR, platform_root_pub: bytes, issuer_registry: Mapping[str, bytes]) -> bool:
    """Report chain valid, report bound to this EDR and its code, issuer signature valid."""
    try:
        d = edr_digest(e.edr)
        if e.report.edr_digest != d:
            return False
        # PCR11 holds exactly one launch measurement: the EDR's code digest
        if e.report.pcr11 != pcr_extend(ZERO, e.edr.code):
            return False
        if not verify_report(e.report, platform_root_pub):
            return False
        key = issuer_registry.get(e.issuer_id)
        if key is None:
            return False
        return crypto.verify(key, issuer_message(d), e.issuer_sig)
    except (AttributeError, TypeError, ValueError):
        return False


class EDRStore:
    """Append-only record store, optionally mirrored to an ndjson file."""

    def __init__(self, path: Optional[Union[str, os.PathLike]] = None, truncate: bool = True):
        self._records: list[EndorsedEDR] = []
        self._lock = threading.Lock()
        self.path = Path(path) if path is not None else None
        if self.path is not None and truncate:
            self.path.write_text("")

    def append(self, e: EndorsedEDR) -> int:
        line = e.to_json() + "\n"
        with self._lock:
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as f:
                    f.write(line)
            self._records.append(e)
            return len(self._records) - 1

    def snapshot(self) -> tuple[EndorsedEDR, ...]:
        with self._lock:
            return tuple(self._records)

    def __len__(self) -> int:
        return len(self._records)


def store_append(store: EDRStore, e: EndorsedEDR) -> int:
    return store.append(e)


def store_snapshot(store: EDRStore) -> tuple[EndorsedEDR, ...]:
    return store.snapshot()


def read_store_lines(path: Union[str, os.PathLike]) -> list[str]:
    """Raw non-empty lines of an ``edrs.ndjson`` file."""
    with open(path, encoding="utf-8") as f:
        return [ln.rstrip("\n") for ln in f if ln.strip()]


def write_store(records: Iterable[EndorsedEDR], path: Union[str, os.PathLike]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in records:
            f.write(e.to_json() + "\n")
