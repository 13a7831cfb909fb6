"""Compare the compiled and pure-Python kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 3] [--scale 1.0] [--json out.json]

Each kernel is timed on identical inputs under both backends; outputs are
checked for bit equality before any timing is reported.
"""

import argparse
import json
import sys
import time

import numpy as np

from exclavefl import _pykernels

try:
    from exclavefl import _kernels
except ImportError:
    _kernels = None


def workloads(scale: float):
    rng = np.random.default_rng(0)
    n = max(1, int(200_000 * scale))
    X = rng.normal(size=(256, 16))
    y = np.where(rng.random(256) > 0.5, 1.0, -1.0)
    w = np.zeros(17)
    diff = rng.normal(scale=0.01, size=max(1, int(50_000 * scale)))
    vecs = rng.normal(size=(16, max(1, int(10_000 * scale))))
    return {
        "laplace_samples": (7, 0.5, n),
        "permutation": (7, n),
        "svt_dp": (diff, 0.0, 1e-3, 64, 1e-3, 7),
        "logistic_train": (w, X, y, 0.1, max(1, int(20 * scale)) * 10, 32, 1e-3, 7),
        "logistic_grad": (w, X, y, 1e-3),
        "fedavg": (vecs, [1.0] * len(vecs)),
    }


def best_time(fn, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--scale", type=float, default=1.0, help="workload size multiplier")
    p.add_argument("--json", help="also write results here")
    args = p.parse_args(argv)
    if _kernels is None:
        print("compiled backend not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1

    rows = []
    print(f"{'kernel':<18}{'python s':>12}{'cython s':>12}{'speedup':>10}")
    for name, call_args in workloads(args.scale).items():
        a = getattr(_pykernels, name)(*call_args)
        b = getattr(_kernels, name)(*call_args)
        if np.asarray(a).tobytes() != np.asarray(b).tobytes():
            print(f"{name}: backends disagree", file=sys.stderr)
            return 2
        tp = best_time(getattr(_pykernels, name), call_args, args.repeat)
        tc = best_time(getattr(_kernels, name), call_args, args.repeat)
        rows.append({"kernel": name, "python_s": tp, "cython_s": tc, "speedup": tp / tc})
        print(f"{name:<18}{tp:>12.4f}{tc:>12.5f}{tp / tc:>9.1f}x")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
