"""Time the numba kernels against the pure-numpy fallbacks.

Runs each hot kernel (pairwise squared distances, fixed-width neighbor
selection, gradient scatter-add) on benchmark-sized inputs under both
implementations, checks they agree, and prints a timing table.

Usage:
    python benchmarks/bench_backends.py [--points 2048] [--repeat 5]

The numba column requires numba to be importable; compilation time is
excluded (one warm-up call per kernel).
"""

import argparse
import time

import numpy as np

from mnew import backend


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--points", type=int, default=2048)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    if not backend._numba_available():
        print("numba is not importable; nothing to compare")
        return 1

    rng = np.random.default_rng(0)
    n = args.points
    cases = []

    for d, label in ((3, "coordinates"), (64, "features")):
        pts = np.ascontiguousarray(rng.normal(size=(n, d)))
        nb = _time(lambda: backend._pairwise_nb(pts), args.repeat)
        np_ = _time(lambda: backend._pairwise_np(pts), args.repeat)
        dev = np.abs(backend._pairwise_nb(pts) - backend._pairwise_np(pts)).max()
        cases.append((f"pairwise [{n}x{d}] ({label})", nb, np_, dev))

    dist = backend._pairwise_np(np.ascontiguousarray(rng.normal(size=(n, 3))))
    for k, bound in ((16, np.inf), (16, 4.0)):
        kind = "knn" if np.isinf(bound) else "radius"
        nb = _time(lambda: backend._select_nb(dist, k, bound), args.repeat)
        np_ = _time(lambda: backend._select_np(dist, k, bound), args.repeat)
        ia, ca = backend._select_nb(dist, k, bound)
        ib, cb = backend._select_np(dist, k, bound)
        dev = 0.0 if (ia == ib).all() and (ca == cb).all() else float("nan")
        cases.append((f"select k={k} ({kind})", nb, np_, dev))

    idx = rng.integers(0, n, size=n * 24)
    src = np.ascontiguousarray(rng.normal(size=(n * 24, 64)))
    nb = _time(lambda: backend._scatter_nb(n, idx, src), args.repeat)
    np_ = _time(lambda: backend._scatter_np(n, idx, src), args.repeat)
    dev = np.abs(backend._scatter_nb(n, idx, src) - backend._scatter_np(n, idx, src)).max()
    cases.append((f"scatter-add [{n * 24}x64]", nb, np_, dev))

    print(f"{'kernel':<34} {'numba':>9} {'numpy':>9} {'speedup':>8} {'max dev':>9}")
    for name, nb, np_, dev in cases:
        print(f"{name:<34} {nb * 1e3:>7.1f}ms {np_ * 1e3:>7.1f}ms {np_ / nb:>7.1f}x {dev:>9.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
