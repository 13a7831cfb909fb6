"""Simulated exclave: runs one task kind, hashes everything crossing its boundary,
and returns the outputs with an attested, issuer-endorsed EDR.

The orchestrator can only reach an exclave through :meth:`Exclave.handle_task`,
passing and receiving plain values. That boundary stands in for memory
isolation.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from typing import Mapping, Optional

from . import crypto, tasks
from .attestation import SecureProcessor
from .crypto import Digest, KeyPair, b64d, b64e, hash_bytes, to_hex
from .edr import EDR, EndorsedEDR, edr_digest, edr_endorse
from .storage import (
    DataCommitment,
    DatasetImage,
    code_measurement,
    load_image,
    mount_dataset,
    pack_dataset,
)

log = logging.getLogger(__name__)

DATASET_LABEL = "dataset:commitment"
GLOBAL_LABEL = "model:global"
AGG_LABEL = "model:agg_diff"
DIFF_PREFIX = "model:diff:"


def diff_label(participant_id: str) -> str:
    return DIFF_PREFIX + participant_id


def params_label(task_kind: str) -> str:
    return "params:" + task_kind


class TaskKindMismatch(Exception):
    pass


class BadRequest(Exception):
    pass


@dataclass
class ExclaveConfig:
    exclave_id: str
    participant_id: str
    task_kind: str
    code_image: bytes
    issuer: KeyPair
    platform_root: KeyPair  # the simulated vendor key that endorses processors at launch
    attestation_seed: bytes

    @property
    def platform_root_pub(self) -> bytes:
        return self.platform_root.verify_key


@dataclass
class TaskRequest:
    task_kind: str
    round: int
    payloads: dict[str, bytes]
    dataset: Optional[DatasetImage] = None
    expected_commitment: Optional[DataCommitment] = None
    dataset_path: Optional[str] = None

    def to_dict(self) -> dict:
        d = {
            "task_kind": self.task_kind,
            "round": self.round,
            "payloads": {k: b64e(v) for k, v in sorted(self.payloads.items())},
            "dataset": None,
        }
        if self.expected_commitment is not None:
            c = self.expected_commitment
            d["dataset"] = {
                "path": self.dataset_path,
                "root": to_hex(c.root),
                "salt": c.salt.hex(),
                "commitment": to_hex(c.commitment),
            }
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, s: str) -> "TaskRequest":
        d = json.loads(s)
        req = cls(d["task_kind"], d["round"], {k: b64d(v) for k, v in d["payloads"].items()})
        ds = d.get("dataset")
        if ds is not None:
            req.expected_commitment = DataCommitment(
                root=crypto.from_hex(ds["root"]), salt=bytes.fromhex(ds["salt"]), commitment=crypto.from_hex(ds["commitment"])
            )
            req.dataset_path = ds.get("path")
            if req.dataset_path:
                req.dataset = load_image(req.dataset_path)
        return req


@dataclass
class TaskResponse:
    payloads: dict[str, bytes]
    endorsed_edr: EndorsedEDR
    storage: dict[str, DatasetImage] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "payloads": {k: b64e(v) for k, v in sorted(self.payloads.items())},
            "storage": {k: img.sidecar() for k, img in sorted(self.storage.items())},
            "endorsed_edr": self.endorsed_edr.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def _one(payloads: Mapping[str, bytes], label: str) -> bytes:
    try:
        return payloads[label]
    except KeyError:
        raise BadRequest(f"missing payload {label!r}") from None


class Exclave:
    def __init__(self, config: ExclaveConfig):
        self.config = config
        self.code_digest = code_measurement(config.code_image)
        self._sp = SecureProcessor(config.platform_root, config.attestation_seed)
        self._sp.measure_code(self.code_digest)
        self._lock = threading.Lock()

    @property
    def exclave_id(self) -> str:
        return self.config.exclave_id

    @property
    def pcr11(self) -> Digest:
        return self._sp.pcr[11]

    def __repr__(self) -> str:
        return f"Exclave({self.config.exclave_id!r}, code={self.code_digest.hex()[:12]})"

    def handle_task(self, req: TaskRequest) -> TaskResponse:
        cfg = self.config
        if req.task_kind != cfg.task_kind:
            raise TaskKindMismatch(f"{cfg.exclave_id} runs {cfg.task_kind!r}, got {req.task_kind!r}")
        with self._lock:
            # hash the exact bytes the task will consume
            payloads = {k: bytes(v) for k, v in req.payloads.items()}
            inputs = {k: hash_bytes(v) for k, v in payloads.items()}
            handle = None
            if cfg.task_kind in ("train", "sanitize"):
                if req.dataset is None or req.expected_commitment is None:
                    raise BadRequest(f"{cfg.task_kind} needs a dataset and its expected commitment")
                handle = mount_dataset(req.dataset, req.expected_commitment)
                inputs[DATASET_LABEL] = handle.commitment.commitment

            out_payloads, storage, outputs = self._run(req, payloads, handle)
            outputs.update({k: hash_bytes(v) for k, v in out_payloads.items()})

            edr = EDR(
                exclave_id=cfg.exclave_id,
                participant_id=cfg.participant_id,
                task_kind=cfg.task_kind,
                round=req.round,
                inputs=inputs,
                code=self.code_digest,
                outputs=outputs,
            )
            report = self._sp.attest(edr_digest(edr))
            endorsed = edr_endorse(edr, report, cfg.issuer, cfg.participant_id)
            log.debug("%s round %d -> %s", cfg.exclave_id, req.round, endorsed.digest.hex()[:12])
            return TaskResponse(out_payloads, endorsed, storage)

    def _run(self, req, payloads, handle):
        kind = self.config.task_kind
        pid = self.config.participant_id
        if kind == "train":
            hp = tasks.Hyperparams.from_bytes(_one(payloads, params_label("train")))
            glob = tasks.model_from_bytes(_one(payloads, GLOBAL_LABEL))
            diff = tasks.local_train(glob, handle, hp)
            return {diff_label(pid): tasks.model_to_bytes(diff)}, {}, {}
        if kind == "dp":
            labels = [k for k in payloads if k.startswith(DIFF_PREFIX)]
            if len(labels) != 1:
                raise BadRequest(f"dp expects exactly one model diff, got {labels}")
            dp = tasks.DpParams.from_bytes(_one(payloads, params_label("dp")))
            out = tasks.svt_dp(tasks.model_from_bytes(payloads[labels[0]]), dp)
            return {labels[0]: tasks.model_to_bytes(out)}, {}, {}
        if kind == "aggregate":
            labels = sorted(k for k in payloads if k.startswith(DIFF_PREFIX))
            if not labels:
                raise BadRequest("aggregation received no model diffs")
            agg = tasks.aggregate_fedavg([(tasks.model_from_bytes(payloads[k]), 1.0) for k in labels])
            return {AGG_LABEL: tasks.model_to_bytes(agg)}, {}, {}
        if kind == "model_update":
            prev = tasks.model_from_bytes(_one(payloads, GLOBAL_LABEL))
            agg = tasks.model_from_bytes(_one(payloads, AGG_LABEL))
            return {GLOBAL_LABEL: tasks.model_to_bytes(tasks.model_update(prev, agg))}, {}, {}
        if kind == "sanitize":
            params = json.loads(_one(payloads, params_label("sanitize")))
            denylist = [bytes.fromhex(p) for p in params["denylist"]]
            rows, texts = handle.read_all()
            rows, texts = tasks.sanitize(rows, texts, denylist)
            image, commitment = pack_dataset(
                rows,
                bytes.fromhex(params["salt"]),
                texts=texts if handle.text_width else None,
                text_width=handle.text_width,
            )
            return {}, {DATASET_LABEL: image}, {DATASET_LABEL: commitment.commitment}
        raise TaskKindMismatch(kind)


def exclave_launch(config: ExclaveConfig) -> Exclave:
    return Exclave(config)


def handle_task(exclave: Exclave, request: TaskRequest) -> TaskResponse:
    return exclave.handle_task(request)
