"""Deterministic FL tasks: local training, SVT-DP, FedAvg, model update, sanitization.

Models are float64 vectors; on the wire they are a little-endian u32
dimension followed by little-endian IEEE-754 doubles. Those exact bytes are
what exclaves hash into their records.
"""

from __future__ import annotations

import inspect
import json
import struct
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from ._backend import kernels
from .storage import DatasetHandle

PRNG_ALGORITHM = "splitmix64"


class TaskError(Exception):
    pass


class DimensionMismatch(TaskError, ValueError):
    pass


# -- model payloads --------------------------------------------------------


def model_to_bytes(v) -> bytes:
    arr = np.ascontiguousarray(v, dtype="<f8")
    if arr.ndim != 1:
        raise ValueError("model must be a 1-D vector")
    return struct.pack("<I", arr.shape[0]) + arr.tobytes()


def model_from_bytes(b: bytes) -> np.ndarray:
    if len(b) < 4:
        raise ValueError("model payload too short")
    (d,) = struct.unpack_from("<I", b)
    if len(b) != 4 + 8 * d:
        raise ValueError(f"model payload length {len(b)} does not match dimension {d}")
    return np.frombuffer(b, dtype="<f8", offset=4).astype(np.float64)


def initial_model(dim: int, seed: int, scale: float = 0.01) -> np.ndarray:
    """Seeded starting weights, uniform in (-scale, scale)."""
    u = kernels.uniform_samples(seed, dim)
    return (2.0 * u - 1.0) * scale


# -- parameters ------------------------------------------------------------


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 0.1
    steps: int = 20
    batch_size: int = 32
    l2: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.steps < 0 or self.batch_size < 1 or self.l2 < 0:
            raise ValueError(f"invalid hyperparameters: {self}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a u64")

    def to_bytes(self) -> bytes:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_bytes(cls, b: bytes) -> "Hyperparams":
        return cls(**json.loads(b))


@dataclass(frozen=True)
class DpParams:
    threshold: float = 0.0
    scale: float = 1e-3
    max_releases: int = 8
    release_scale: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.scale < 0 or self.max_releases < 0 or self.release_scale < 0:
            raise ValueError(f"invalid DP parameters: {self}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a u64")

    def to_bytes(self) -> bytes:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_bytes(cls, b: bytes) -> "DpParams":
        return cls(**json.loads(b))


# -- tasks -----------------------------------------------------------------


def _labels_to_signs(labels) -> np.ndarray:
    return np.where(np.asarray(labels) > 0, 1.0, -1.0)


def local_train(global_model, data: DatasetHandle, hp: Hyperparams) -> np.ndarray:
    """Mini-batch gradient descent on the logistic loss; returns the weight diff."""
    w = np.asarray(global_model, dtype=np.float64)
    if data.record_width != w.shape[0]:
        raise DimensionMismatch(f"dataset has {data.record_width - 1} features, model expects {w.shape[0] - 1}")
    rows, _ = data.read_all()
    X = np.ascontiguousarray(rows[:, :-1])
    y = _labels_to_signs(rows[:, -1])
    w_final = kernels.logistic_train(w, X, y, hp.learning_rate, hp.steps, hp.batch_size, hp.l2, hp.seed)
    diff = w_final - w
    if not np.all(np.isfinite(diff)):
        raise TaskError("training produced non-finite weights")
    return diff


def logistic_grad(w, X, y, l2: float) -> np.ndarray:
    return kernels.logistic_grad(np.asarray(w, dtype=np.float64), X, _labels_to_signs(y), l2)


def laplace_samples(seed: int, scale: float, n: int) -> np.ndarray:
    return kernels.laplace_samples(seed, scale, n)


def svt_dp(diff, dp: DpParams) -> np.ndarray:
    """Sparse-vector release: at most ``max_releases`` noisy coordinates survive."""
    return kernels.svt_dp(np.asarray(diff, dtype=np.float64), dp.threshold, dp.scale, dp.max_releases, dp.release_scale, dp.seed)


def aggregate_fedavg(updates: Sequence[tuple[np.ndarray, float]]) -> np.ndarray:
    if not updates:
        raise TaskError("aggregation needs at least one update")
    dims = {np.shape(v) for v, _ in updates}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise DimensionMismatch(f"updates have differing shapes: {sorted(dims)}")
    weights = [float(w) for _, w in updates]
    if any(not w > 0 for w in weights):
        raise ValueError("aggregation weights must be positive")
    return kernels.fedavg(np.stack([np.asarray(v, dtype=np.float64) for v, _ in updates]), weights)


def model_update(prev_global, agg_diff) -> np.ndarray:
    prev = np.asarray(prev_global, dtype=np.float64)
    diff = np.asarray(agg_diff, dtype=np.float64)
    if prev.shape != diff.shape:
        raise DimensionMismatch(f"{prev.shape} vs {diff.shape}")
    return prev + diff


def sanitize(rows, texts: Sequence[bytes], denylist: Sequence[bytes]) -> tuple[np.ndarray, list[bytes]]:
    """Drop every record whose text contains a denylisted substring."""
    rows = np.asarray(rows, dtype=np.float64)
    keep = [i for i, t in enumerate(texts) if not any(p in t for p in denylist)]
    return rows[keep], [texts[i] for i in keep]


TASK_FUNCTIONS = {
    "sanitize": sanitize,
    "train": local_train,
    "dp": svt_dp,
    "aggregate": aggregate_fedavg,
    "model_update": model_update,
}


def code_image(task_kind: str) -> bytes:
    """The byte image an exclave of ``task_kind`` is launched from."""
    fn = TASK_FUNCTIONS[task_kind]
    src = inspect.getsource(fn).encode("utf-8")
    return b"EXCLAVEFL-CODE\x00" + task_kind.encode() + b"\x00" + src
