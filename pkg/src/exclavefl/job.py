"""Job descriptions: who participates, what runs, and which code is acceptable.

A job file is JSON. Dataset paths are relative to the job file. The
``simulation_keys`` section holds the seeds the simulated participants and
platform sign with; the auditor never reads it.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import crypto, tasks
from .crypto import TAG_KEY_DERIVE, TAG_SEED_DERIVE, Digest, b64d, b64e, from_hex, hash_parts, to_hex
from .storage import DataCommitment, code_measurement, load_image, pack_dataset, save_image

PIPELINE = ("train", "dp", "aggregate", "model_update")
SANITIZED_PIPELINE = ("sanitize",) + PIPELINE
MODEL_PROVIDER_KINDS = ("aggregate", "model_update")


class JobError(ValueError):
    pass


@dataclass
class ProviderSpec:
    participant_id: str
    dataset: str
    commitment: Digest
    issuer_pub: bytes


@dataclass
class JobDescription:
    job_id: str
    providers: list[ProviderSpec]
    model_provider_id: str
    model_provider_pub: bytes
    rounds: int
    pipeline: list[str]
    model_dim: int
    model_seed: int
    hyperparams: tasks.Hyperparams
    dp: tasks.DpParams
    code_allowlist: dict[str, list[Digest]]
    platform_root_pub: bytes
    prng: str = tasks.PRNG_ALGORITHM
    denylist: list[str] = field(default_factory=list)
    sanitize_seed: int = 0
    simulation_keys: Optional[dict] = None
    base_dir: Path = field(default_factory=Path.cwd, compare=False)

    def __post_init__(self):
        ids = [p.participant_id for p in self.providers]
        if not ids:
            raise JobError("job needs at least one data provider")
        if len(set(ids)) != len(ids) or self.model_provider_id in ids:
            raise JobError("participant ids must be unique")
        if self.rounds < 1:
            raise JobError("rounds must be >= 1")
        if tuple(self.pipeline) not in (PIPELINE, SANITIZED_PIPELINE):
            raise JobError(f"unsupported pipeline {self.pipeline}")
        for kind in self.pipeline:
            if not self.code_allowlist.get(kind):
                raise JobError(f"empty code allowlist for {kind!r}")
        if self.prng != tasks.PRNG_ALGORITHM:
            raise JobError(f"unsupported prng {self.prng!r}")

    # -- derived values ------------------------------------------------

    @property
    def provider_ids(self) -> list[str]:
        return [p.participant_id for p in self.providers]

    @property
    def sanitization_required(self) -> bool:
        return "sanitize" in self.pipeline

    @property
    def issuer_registry(self) -> dict[str, bytes]:
        reg = {p.participant_id: p.issuer_pub for p in self.providers}
        reg[self.model_provider_id] = self.model_provider_pub
        return reg

    def initial_model(self) -> np.ndarray:
        return tasks.initial_model(self.model_dim, self.model_seed)

    def initial_model_digest(self) -> Digest:
        return crypto.hash_bytes(tasks.model_to_bytes(self.initial_model()))

    def dataset_path(self, pid: str) -> Path:
        spec = next(p for p in self.providers if p.participant_id == pid)
        return (self.base_dir / spec.dataset).resolve()

    def train_params(self, pid: str, rnd: int) -> tasks.Hyperparams:
        hp = self.hyperparams
        return tasks.Hyperparams(hp.learning_rate, hp.steps, hp.batch_size, hp.l2, crypto.derive_seed(hp.seed, "train", pid, rnd))

    def dp_params(self, pid: str, rnd: int) -> tasks.DpParams:
        dp = self.dp
        return tasks.DpParams(dp.threshold, dp.scale, dp.max_releases, dp.release_scale, crypto.derive_seed(dp.seed, "dp", pid, rnd))

    def sanitize_params(self, pid: str) -> bytes:
        salt = hash_parts(TAG_SEED_DERIVE, self.sanitize_seed.to_bytes(8, "big"), b"salt", pid.encode())[:16]
        body = {"denylist": [d.encode().hex() for d in self.denylist], "salt": salt.hex()}
        return json.dumps(body, sort_keys=True, separators=(",", ":")).encode()

    # -- simulation keys (never used by the auditor) -------------------

    def _sim(self) -> dict:
        if not self.simulation_keys:
            raise JobError("job has no simulation_keys; it cannot be executed")
        return self.simulation_keys

    def platform_key(self) -> crypto.KeyPair:
        return crypto.keygen(bytes.fromhex(self._sim()["platform"]))

    def issuer_key(self, pid: str) -> crypto.KeyPair:
        return crypto.keygen(bytes.fromhex(self._sim()["participants"][pid]))

    def attestation_seed(self, exclave_id: str) -> bytes:
        return hash_parts(TAG_KEY_DERIVE, bytes.fromhex(self._sim()["platform"]), b"attest:" + exclave_id.encode())

    # -- JSON ------------------------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "job_id": self.job_id,
            "rounds": self.rounds,
            "pipeline": list(self.pipeline),
            "providers": [
                {
                    "participant_id": p.participant_id,
                    "dataset": p.dataset,
                    "commitment": to_hex(p.commitment),
                    "issuer_pub": b64e(p.issuer_pub),
                }
                for p in self.providers
            ],
            "model_provider": {"participant_id": self.model_provider_id, "issuer_pub": b64e(self.model_provider_pub)},
            "initial_model": {"dim": self.model_dim, "seed": self.model_seed},
            "hyperparams": json.loads(self.hyperparams.to_bytes()),
            "dp": json.loads(self.dp.to_bytes()),
            "sanitize": {"denylist": list(self.denylist), "seed": self.sanitize_seed},
            "code_allowlist": {k: [to_hex(x) for x in v] for k, v in sorted(self.code_allowlist.items())},
            "prng": self.prng,
            "platform_root_pub": b64e(self.platform_root_pub),
        }
        if self.simulation_keys is not None:
            d["simulation_keys"] = self.simulation_keys
        return d

    @classmethod
    def from_dict(cls, d: dict, base_dir: Union[str, os.PathLike] = ".") -> "JobDescription":
        try:
            san = d.get("sanitize") or {}
            return cls(
                job_id=d["job_id"],
                providers=[
                    ProviderSpec(p["participant_id"], p["dataset"], from_hex(p["commitment"]), b64d(p["issuer_pub"]))
                    for p in d["providers"]
                ],
                model_provider_id=d["model_provider"]["participant_id"],
                model_provider_pub=b64d(d["model_provider"]["issuer_pub"]),
                rounds=int(d["rounds"]),
                pipeline=list(d["pipeline"]),
                model_dim=int(d["initial_model"]["dim"]),
                model_seed=int(d["initial_model"]["seed"]),
                hyperparams=tasks.Hyperparams(**d["hyperparams"]),
                dp=tasks.DpParams(**d["dp"]),
                code_allowlist={k: [from_hex(x) for x in v] for k, v in d["code_allowlist"].items()},
                platform_root_pub=b64d(d["platform_root_pub"]),
                prng=d.get("prng", tasks.PRNG_ALGORITHM),
                denylist=list(san.get("denylist", [])),
                sanitize_seed=int(san.get("seed", 0)),
                simulation_keys=d.get("simulation_keys"),
                base_dir=Path(base_dir),
            )
        except (KeyError, TypeError) as e:
            raise JobError(f"malformed job description: {e!r}") from e


def load_job(path: Union[str, os.PathLike]) -> JobDescription:
    path = Path(path)
    return JobDescription.from_dict(json.loads(path.read_text()), base_dir=path.parent)


def save_job(job: JobDescription, path: Union[str, os.PathLike]) -> Path:
    path = Path(path)
    path.write_text(json.dumps(job.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def default_allowlist(kinds=SANITIZED_PIPELINE) -> dict[str, list[Digest]]:
    return {k: [code_measurement(tasks.code_image(k))] for k in kinds}


def synthetic_records(n: int, dim: int, seed: int, bad_fraction: float = 0.0):
    """Linearly separable-ish rows (features, then a +/-1 label) with a text column."""
    rng = np.random.default_rng(seed)
    w_true = rng.normal(size=dim - 1)
    X = rng.normal(size=(n, dim - 1))
    y = np.where(X @ w_true + 0.3 * rng.normal(size=n) > 0, 1.0, -1.0)
    bad = rng.random(n) < bad_fraction
    texts = [(b"row %d BAD content" % i) if bad[i] else (b"row %d fine" % i) for i in range(n)]
    return np.column_stack([X, y]), texts


def make_demo_job(
    out_dir: Union[str, os.PathLike],
    providers: int = 4,
    rounds: int = 3,
    records: int = 256,
    dim: int = 17,
    seed: int = 0,
    sanitize: bool = False,
    hyperparams: Optional[tasks.Hyperparams] = None,
    dp: Optional[tasks.DpParams] = None,
) -> Path:
    """Write synthetic datasets and a runnable ``job.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    master = hash_parts(TAG_SEED_DERIVE, seed.to_bytes(8, "big"), b"demo-job")
    sim = {"platform": hash_parts(TAG_KEY_DERIVE, master, b"platform").hex(), "participants": {}}
    pids = [f"provider{i + 1}" for i in range(providers)]
    mp_id = "modelprovider"
    specs = []
    for i, pid in enumerate(pids):
        sim["participants"][pid] = hash_parts(TAG_KEY_DERIVE, master, pid.encode()).hex()
        rows, texts = synthetic_records(records, dim, crypto.derive_seed(seed, "data", pid), 0.1 if sanitize else 0.0)
        salt = hash_parts(TAG_SEED_DERIVE, master, b"salt:" + pid.encode())[:16]
        image, commitment = pack_dataset(rows, salt, texts=texts, text_width=32)
        name = f"{pid}.vfld"
        save_image(image, out / name)
        specs.append(ProviderSpec(pid, name, commitment.commitment, crypto.keygen(bytes.fromhex(sim["participants"][pid])).verify_key))
    sim["participants"][mp_id] = hash_parts(TAG_KEY_DERIVE, master, mp_id.encode()).hex()

    job = JobDescription(
        job_id=f"demo-{seed}",
        providers=specs,
        model_provider_id=mp_id,
        model_provider_pub=crypto.keygen(bytes.fromhex(sim["participants"][mp_id])).verify_key,
        rounds=rounds,
        pipeline=list(SANITIZED_PIPELINE if sanitize else PIPELINE),
        model_dim=dim,
        model_seed=crypto.derive_seed(seed, "model"),
        hyperparams=hyperparams or tasks.Hyperparams(seed=crypto.derive_seed(seed, "hp")),
        dp=dp or tasks.DpParams(seed=crypto.derive_seed(seed, "dp")),
        code_allowlist=default_allowlist(SANITIZED_PIPELINE if sanitize else PIPELINE),
        platform_root_pub=crypto.keygen(bytes.fromhex(sim["platform"])).verify_key,
        denylist=["BAD"] if sanitize else [],
        sanitize_seed=crypto.derive_seed(seed, "sanitize"),
        simulation_keys=sim,
        base_dir=out,
    )
    return save_job(job, out / "job.json")


def registered_commitment(job: JobDescription, pid: str) -> DataCommitment:
    """Registered commitment plus the root/salt the provider's image carries."""
    image = load_image(job.dataset_path(pid))
    c = image.commitment
    spec = next(p for p in job.providers if p.participant_id == pid)
    return DataCommitment(root=c.root, salt=c.salt, commitment=spec.commitment)
