"""Pure-Python numeric kernels (fallback for the compiled ``_kernels``).

Both implementations must agree bit for bit: every summation runs left to
right in the same order and every transcendental goes through libm
``exp``/``log`` exactly once per use.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
TWO_M52 = 2.0**-52

BACKEND = "python"


class SplitMix64:
    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * MIX1) & MASK64
        z = ((z ^ (z >> 27)) * MIX2) & MASK64
        return z ^ (z >> 31)

    def next_open01(self) -> float:
        # 52 random bits plus a half step: strictly inside (0, 1), exact in a double
        return ((self.next_u64() >> 12) + 0.5) * TWO_M52

    def laplace(self, scale: float) -> float:
        u = self.next_open01()
        if u < 0.5:
            return scale * math.log(2.0 * u)
        return -scale * math.log(2.0 - 2.0 * u)

    def below(self, n: int) -> int:
        return self.next_u64() % n


def u64_stream(seed: int, n: int) -> np.ndarray:
    g = SplitMix64(seed)
    return np.array([g.next_u64() for _ in range(n)], dtype=np.uint64)


def uniform_samples(seed: int, n: int) -> np.ndarray:
    g = SplitMix64(seed)
    return np.array([g.next_open01() for _ in range(n)], dtype=np.float64)


def laplace_samples(seed: int, scale: float, n: int) -> np.ndarray:
    g = SplitMix64(seed)
    return np.array([g.laplace(scale) for _ in range(n)], dtype=np.float64)


def _shuffle(g: SplitMix64, perm: list) -> None:
    for i in range(len(perm) - 1, 0, -1):
        j = g.below(i + 1)
        perm[i], perm[j] = perm[j], perm[i]


def permutation(seed: int, n: int) -> np.ndarray:
    perm = list(range(n))
    _shuffle(SplitMix64(seed), perm)
    return np.array(perm, dtype=np.int64)


def svt_dp(diff, threshold: float, scale: float, max_releases: int, release_scale: float, seed: int) -> np.ndarray:
    x = [float(v) for v in diff]
    if scale == 0.0:
        return np.array(x, dtype=np.float64)
    g = SplitMix64(seed)
    rho = g.laplace(scale)
    noisy_t = threshold + rho
    out = [0.0] * len(x)
    released = 0
    for i, v in enumerate(x):
        nu = g.laplace(2.0 * scale)
        if abs(v) + nu >= noisy_t and released < max_releases:
            out[i] = v + g.laplace(release_scale)
            released += 1
    return np.array(out, dtype=np.float64)


def _sigmoid(t: float) -> float:
    if t >= 0.0:
        return 1.0 / (1.0 + math.exp(-t))
    e = math.exp(t)
    return e / (1.0 + e)


def _accumulate(g: list, w: list, row: list, y: float) -> None:
    d = len(w)
    z = 0.0
    for j in range(d - 1):
        z += row[j] * w[j]
    z += w[d - 1]
    coef = -y * _sigmoid(-(y * z))
    for j in range(d - 1):
        g[j] += coef * row[j]
    g[d - 1] += coef


def logistic_grad(w, X, y, l2: float) -> np.ndarray:
    """Gradient of the mean l2-regularized logistic loss; last weight is the bias."""
    w = [float(v) for v in w]
    rows = np.asarray(X, dtype=np.float64).tolist()
    ys = [float(v) for v in y]
    g = [0.0] * len(w)
    for row, yi in zip(rows, ys):
        _accumulate(g, w, row, yi)
    n = len(rows)
    return np.array([g[j] / n + l2 * w[j] for j in range(len(w))], dtype=np.float64)


def logistic_train(w0, X, y, lr: float, steps: int, batch_size: int, l2: float, seed: int) -> np.ndarray:
    w = [float(v) for v in w0]
    rows = np.asarray(X, dtype=np.float64).tolist()
    ys = [float(v) for v in y]
    n, d = len(rows), len(w)
    g_rng = SplitMix64(seed)
    perm = list(range(n))
    pos = n
    for _ in range(steps):
        g = [0.0] * d
        for _ in range(batch_size):
            if pos == n:
                perm = list(range(n))
                _shuffle(g_rng, perm)
                pos = 0
            i = perm[pos]
            pos += 1
            _accumulate(g, w, rows[i], ys[i])
        for j in range(d):
            g[j] = g[j] / batch_size + l2 * w[j]
        for j in range(d):
            w[j] -= lr * g[j]
    return np.array(w, dtype=np.float64)


def fedavg(vectors, weights) -> np.ndarray:
    """Weighted running mean, left to right: m += (w_k / W_k) * (v_k - m).

    Equal to sum(w_k v_k) / sum(w_k) up to rounding, and exact when every
    vector is the same.
    """
    vs = np.asarray(vectors, dtype=np.float64).tolist()
    ws = [float(v) for v in weights]
    acc = list(vs[0])
    total = ws[0]
    for vk, wk in zip(vs[1:], ws[1:]):
        total += wk
        r = wk / total
        for j in range(len(acc)):
            acc[j] += r * (vk[j] - acc[j])
    return np.array(acc, dtype=np.float64)
