"""Numba-accelerated inner loops with pure-numpy fallbacks.

The expensive non-BLAS work in this package is the O(N^2) pairwise scan
family: squared-distance matrices, fixed-width neighbor selection, and the
scatter-add that backs the gradient of neighbor gathering.  Dense matrix
products stay on numpy/BLAS in both modes; only these scan kernels switch.

The backend is chosen once, at first import, from the ``MNEW_BACKEND``
environment variable:

* ``auto`` (default) - numba kernels when numba imports, numpy otherwise
* ``numba``          - require numba, fail loudly if missing
* ``numpy``          - force the vectorized numpy fallbacks

``benchmarks/bench_backends.py`` times the two implementations against each
other and checks that they agree.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = ["BACKEND", "pairwise_sq_dist", "select_neighbors", "scatter_add_rows"]


def _choose_backend() -> str:
    req = os.environ.get("MNEW_BACKEND", "auto").strip().lower()
    if req not in ("auto", "numba", "numpy"):
        raise ValueError(
            f"MNEW_BACKEND must be 'auto', 'numba' or 'numpy', got {req!r}"
        )
    if req == "numpy":
        return "numpy"
    if not _numba_available():
        if req == "numba":
            raise RuntimeError("MNEW_BACKEND=numba but numba is not importable")
        return "numpy"
    return "numba"


def _numba_available() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


# ---------------------------------------------------------------------------
# numpy fallbacks
# ---------------------------------------------------------------------------


def _pairwise_np(points: np.ndarray) -> np.ndarray:
    n, d = points.shape
    out = np.empty((n, n), dtype=np.float64)
    # row chunks keep the [chunk, n, d] temporary around ~32 MB
    chunk = max(1, int(4_000_000 // max(n * d, 1)))
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        diff = points[s:e, None, :] - points[None, :, :]
        np.einsum("ijk,ijk->ij", diff, diff, out=out[s:e])
    np.fill_diagonal(out, 0.0)
    return out


def _select_np(dist: np.ndarray, k: int, bound: float):
    n = dist.shape[0]
    k_eff = min(k, n - 1)
    d = dist.copy()
    np.fill_diagonal(d, np.inf)
    # stable sort so equal distances keep ascending-index order
    order = np.argsort(d, axis=1, kind="stable")[:, :k_eff]
    dord = np.take_along_axis(d, order, axis=1)
    valid = dord <= bound
    idx = np.where(valid, order, -1)
    if k_eff < k:
        idx = np.concatenate([idx, np.full((n, k - k_eff), -1, np.int64)], axis=1)
    return idx.astype(np.int64, copy=False), valid.sum(axis=1).astype(np.int64)


def _scatter_np(n_rows: int, idx: np.ndarray, src: np.ndarray) -> np.ndarray:
    out = np.empty((n_rows, src.shape[1]), dtype=np.float64)
    for c in range(src.shape[1]):
        out[:, c] = np.bincount(idx, weights=src[:, c], minlength=n_rows)
    return out


# ---------------------------------------------------------------------------
# numba kernels (compiled lazily on first call, cached on disk)
# ---------------------------------------------------------------------------

if _numba_available():
    from numba import njit, prange

    @njit(cache=True, parallel=True)
    def _pairwise_nb(points):  # pragma: no cover - exercised via wrapper
        n, d = points.shape
        out = np.zeros((n, n), dtype=np.float64)
        for i in prange(n):
            for j in range(i + 1, n):
                acc = 0.0
                for c in range(d):
                    t = points[i, c] - points[j, c]
                    acc += t * t
                out[i, j] = acc
                out[j, i] = acc
        return out

    @njit(cache=True, parallel=True)
    def _select_nb(dist, k, bound):  # pragma: no cover - exercised via wrapper
        n = dist.shape[0]
        idx = np.full((n, k), -1, dtype=np.int64)
        count = np.zeros(n, dtype=np.int64)
        for i in prange(n):
            vals = np.empty(k, dtype=np.float64)
            cols = np.empty(k, dtype=np.int64)
            m = 0
            for j in range(n):
                if j == i:
                    continue
                dv = dist[i, j]
                if dv > bound:
                    continue
                if m == k:
                    # candidates arrive with ascending j, so on a tie the
                    # stored column always wins
                    if dv >= vals[m - 1]:
                        continue
                    p = m - 1
                else:
                    p = m
                    m += 1
                while p > 0 and vals[p - 1] > dv:
                    vals[p] = vals[p - 1]
                    cols[p] = cols[p - 1]
                    p -= 1
                vals[p] = dv
                cols[p] = j
            for s in range(m):
                idx[i, s] = cols[s]
            count[i] = m
        return idx, count

    @njit(cache=True)
    def _scatter_nb(n_rows, idx, src):  # pragma: no cover - exercised via wrapper
        out = np.zeros((n_rows, src.shape[1]), dtype=np.float64)
        for i in range(idx.shape[0]):
            r = idx[i]
            for c in range(src.shape[1]):
                out[r, c] += src[i, c]
        return out


BACKEND = _choose_backend()


def pairwise_sq_dist(points: np.ndarray) -> np.ndarray:
    """All-pairs squared Euclidean distances, exact difference form.

    Returns an [N, N] float64 matrix with a forced-zero diagonal.  The
    accumulation order matches a naive double loop, so the result is exactly
    symmetric.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    if BACKEND == "numba":
        return _pairwise_nb(points)
    return _pairwise_np(points)


def select_neighbors(dist: np.ndarray, k: int, bound: float = np.inf):
    """Per row: up to ``k`` smallest non-self entries with value <= bound.

    Ordering is by (value, column) ascending, so equal distances break
    toward the lower column index.  Returns ``(idx, count)`` where ``idx``
    is [N, k] int64 padded with -1 beyond ``count[i]`` valid slots.
    """
    dist = np.ascontiguousarray(dist, dtype=np.float64)
    if k < 1:
        raise ValueError(f"selection width must be >= 1, got {k}")
    if BACKEND == "numba":
        return _select_nb(dist, k, float(bound))
    return _select_np(dist, k, float(bound))


def scatter_add_rows(n_rows: int, idx: np.ndarray, src: np.ndarray) -> np.ndarray:
    """Sum rows of ``src`` into an [n_rows, D] accumulator at positions ``idx``."""
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    src = np.ascontiguousarray(src, dtype=np.float64)
    if BACKEND == "numba":
        return _scatter_nb(n_rows, idx, src)
    return _scatter_np(n_rows, idx, src)
