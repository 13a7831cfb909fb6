# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled numeric kernels. Mirrors _pykernels.py operation for operation."""

import numpy as np

from libc.math cimport exp, log, fabs
from libc.stdint cimport uint64_t, int64_t

BACKEND = "cython"

cdef uint64_t GAMMA = 0x9E3779B97F4A7C15ULL
cdef uint64_t MIX1 = 0xBF58476D1CE4E5B9ULL
cdef uint64_t MIX2 = 0x94D049BB133111EBULL
cdef double TWO_M52 = 2.220446049250313e-16


cdef inline uint64_t sm_next(uint64_t* state) noexcept nogil:
    state[0] += GAMMA
    cdef uint64_t z = state[0]
    z = (z ^ (z >> 30)) * MIX1
    z = (z ^ (z >> 27)) * MIX2
    return z ^ (z >> 31)


cdef inline double sm_open01(uint64_t* state) noexcept nogil:
    return (<double>(sm_next(state) >> 12) + 0.5) * TWO_M52


cdef inline double sm_laplace(uint64_t* state, double scale) noexcept nogil:
    cdef double u = sm_open01(state)
    if u < 0.5:
        return scale * log(2.0 * u)
    return -scale * log(2.0 - 2.0 * u)


cdef inline void sm_shuffle(uint64_t* state, int64_t[::1] perm) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef int64_t tmp
    i = perm.shape[0] - 1
    while i > 0:
        j = <Py_ssize_t>(sm_next(state) % <uint64_t>(i + 1))
        tmp = perm[i]
        perm[i] = perm[j]
        perm[j] = tmp
        i -= 1


cdef inline double sigmoid(double t) noexcept nogil:
    cdef double e
    if t >= 0.0:
        return 1.0 / (1.0 + exp(-t))
    e = exp(t)
    return e / (1.0 + e)


cdef inline void accumulate(double[::1] g, double[::1] w, const double[:, ::1] X,
                            Py_ssize_t i, double y) noexcept nogil:
    cdef Py_ssize_t j, d = w.shape[0]
    cdef double z = 0.0, coef
    for j in range(d - 1):
        z += X[i, j] * w[j]
    z += w[d - 1]
    coef = -y * sigmoid(-(y * z))
    for j in range(d - 1):
        g[j] += coef * X[i, j]
    g[d - 1] += coef


def u64_stream(uint64_t seed, Py_ssize_t n):
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] o = out
    cdef uint64_t state = seed
    cdef Py_ssize_t i
    for i in range(n):
        o[i] = sm_next(&state)
    return out


def uniform_samples(uint64_t seed, Py_ssize_t n):
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef uint64_t state = seed
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            o[i] = sm_open01(&state)
    return out


def laplace_samples(uint64_t seed, double scale, Py_ssize_t n):
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef uint64_t state = seed
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            o[i] = sm_laplace(&state, scale)
    return out


def permutation(uint64_t seed, Py_ssize_t n):
    out = np.arange(n, dtype=np.int64)
    cdef uint64_t state = seed
    sm_shuffle(&state, out)
    return out


def svt_dp(diff, double threshold, double scale, long long max_releases,
           double release_scale, uint64_t seed):
    cdef const double[::1] x = np.ascontiguousarray(diff, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], i
    if scale == 0.0:
        return np.array(x, dtype=np.float64)
    out = np.zeros(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef uint64_t state = seed
    cdef double noisy_t, nu
    cdef long long released = 0
    with nogil:
        noisy_t = threshold + sm_laplace(&state, scale)
        for i in range(n):
            nu = sm_laplace(&state, 2.0 * scale)
            if fabs(x[i]) + nu >= noisy_t and released < max_releases:
                o[i] = x[i] + sm_laplace(&state, release_scale)
                released += 1
    return out


def logistic_grad(w, X, y, double l2):
    cdef double[::1] wv = np.array(w, dtype=np.float64)
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t n = Xv.shape[0], d = wv.shape[0], i, j
    out = np.zeros(d, dtype=np.float64)
    cdef double[::1] g = out
    for i in range(n):
        accumulate(g, wv, Xv, i, yv[i])
    for j in range(d):
        g[j] = g[j] / n + l2 * wv[j]
    return out


def logistic_train(w0, X, y, double lr, long long steps, long long batch_size,
                   double l2, uint64_t seed):
    w_arr = np.array(w0, dtype=np.float64)
    cdef double[::1] w = w_arr
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t n = Xv.shape[0], d = w.shape[0], j, pos = n, i
    cdef long long s, k
    perm_arr = np.arange(n, dtype=np.int64)
    cdef int64_t[::1] perm = perm_arr
    g_arr = np.zeros(d, dtype=np.float64)
    cdef double[::1] g = g_arr
    cdef uint64_t state = seed
    for s in range(steps):
        for j in range(d):
            g[j] = 0.0
        for k in range(batch_size):
            if pos == n:
                for j in range(n):
                    perm[j] = j
                sm_shuffle(&state, perm)
                pos = 0
            i = perm[pos]
            pos += 1
            accumulate(g, w, Xv, i, yv[i])
        for j in range(d):
            g[j] = g[j] / batch_size + l2 * w[j]
        for j in range(d):
            w[j] -= lr * g[j]
    return w_arr


def fedavg(vectors, weights):
    """Weighted running mean, left to right: m += (w_k / W_k) * (v_k - m)."""
    cdef const double[:, ::1] V = np.ascontiguousarray(vectors, dtype=np.float64)
    cdef const double[::1] W = np.ascontiguousarray(weights, dtype=np.float64)
    cdef Py_ssize_t m = V.shape[0], d = V.shape[1], k, j
    cdef double total = W[0], r
    out = np.array(V[0], dtype=np.float64)
    cdef double[::1] acc = out
    for k in range(1, m):
        total += W[k]
        r = W[k] / total
        for j in range(d):
            acc[j] += r * (V[k, j] - acc[j])
    return out
