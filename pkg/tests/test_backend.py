"""Agreement between the numba kernels and the numpy fallbacks."""

import numpy as np
import numpy.testing as npt
import pytest

from mnew import backend

needs_numba = pytest.mark.skipif(
    not backend._numba_available(), reason="numba not installed"
)


def test_backend_choice_is_reported():
    assert backend.BACKEND in ("numba", "numpy")


@needs_numba
def test_pairwise_agreement():
    rng = np.random.default_rng(61)
    for n, d in ((2, 1), (17, 3), (64, 8), (120, 32)):
        pts = np.ascontiguousarray(rng.normal(size=(n, d)))
        npt.assert_allclose(
            backend._pairwise_nb(pts), backend._pairwise_np(pts), rtol=0, atol=1e-12
        )


@needs_numba
def test_selection_agreement():
    rng = np.random.default_rng(62)
    for _ in range(30):
        n = int(rng.integers(3, 50))
        dist = backend._pairwise_np(np.ascontiguousarray(rng.normal(size=(n, 3))))
        k = int(rng.integers(1, n + 2))
        bound = float(rng.uniform(0.1, 4.0)) if rng.uniform() < 0.5 else np.inf
        ia, ca = backend._select_nb(dist, k, bound)
        ib, cb = backend._select_np(dist, k, bound)
        npt.assert_array_equal(ia, ib)
        npt.assert_array_equal(ca, cb)


@needs_numba
def test_selection_agreement_with_ties():
    dist = backend._pairwise_np(np.zeros((6, 2)))
    ia, ca = backend._select_nb(dist, 3, np.inf)
    ib, cb = backend._select_np(dist, 3, np.inf)
    npt.assert_array_equal(ia, ib)
    npt.assert_array_equal(ca, cb)


@needs_numba
def test_scatter_agreement():
    rng = np.random.default_rng(63)
    idx = rng.integers(0, 20, size=300)
    src = rng.normal(size=(300, 7))
    npt.assert_array_equal(
        backend._scatter_nb(20, idx, src), backend._scatter_np(20, idx, src)
    )


def test_scatter_accumulates_repeats():
    idx = np.array([2, 2, 2, 0])
    src = np.ones((4, 2))
    out = backend.scatter_add_rows(3, idx, src)
    npt.assert_array_equal(out, [[1.0, 1.0], [0.0, 0.0], [3.0, 3.0]])


def test_select_rejects_bad_width():
    with pytest.raises(ValueError, match="width"):
        backend.select_neighbors(np.zeros((3, 3)), 0)
