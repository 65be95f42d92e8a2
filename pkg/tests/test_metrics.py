"""Metrics against a per-point tally oracle, plus the binned breakdown."""

import numpy as np
import numpy.testing as npt
import pytest

from mnew.metrics import (
    binned_accuracy,
    compute_metrics,
    normalize_sparsity,
    point_sparsity,
)


from oracles import tally_metrics as tally_oracle


class TestComputeMetrics:
    def test_perfect_prediction(self):
        truth = np.array([0, 1, 2, 1, 0])
        r = compute_metrics(truth, truth, 3)
        assert r.oa == 1.0 and r.miou == 1.0
        assert r.iou_defined.all()
        npt.assert_array_equal(r.per_class_iou, np.ones(3))

    def test_hand_confusion(self):
        r = compute_metrics([0, 1, 0, 1], [0, 0, 1, 1], 2)
        assert r.oa == 0.5
        npt.assert_allclose(r.per_class_iou, [1 / 3, 1 / 3])
        npt.assert_allclose(r.miou, 1 / 3)
        npt.assert_array_equal(r.confusion, [[1, 1], [1, 1]])

    def test_absent_class_is_undefined_and_excluded(self):
        r = compute_metrics([0, 0, 1], [0, 1, 1], 4)
        assert not r.iou_defined[2] and not r.iou_defined[3]
        assert np.isnan(r.per_class_iou[2])
        npt.assert_allclose(r.miou, np.nanmean(r.per_class_iou[:2]))

    def test_matches_tally_oracle(self):
        rng = np.random.default_rng(71)
        for _ in range(100):
            c = int(rng.integers(2, 7))
            n = int(rng.integers(1, 200))
            truth = rng.integers(0, c, n)
            pred = np.where(rng.uniform(size=n) < 0.7, truth, rng.integers(0, c, n))
            r = compute_metrics(pred, truth, c)
            conf, oa, iou, defined, miou = tally_oracle(pred, truth, c)
            npt.assert_array_equal(r.confusion, conf)
            assert r.oa == oa
            npt.assert_array_equal(r.iou_defined, defined)
            npt.assert_allclose(r.per_class_iou[defined], iou[defined], atol=1e-15)
            npt.assert_allclose(r.miou, miou, atol=1e-15)
            assert r.confusion.sum() == n

    def test_class_relabeling_permutes_iou(self):
        rng = np.random.default_rng(72)
        truth = rng.integers(0, 4, 300)
        pred = rng.integers(0, 4, 300)
        base = compute_metrics(pred, truth, 4)
        perm = np.array([2, 0, 3, 1])
        permuted = compute_metrics(perm[pred], perm[truth], 4)
        npt.assert_allclose(permuted.miou, base.miou, atol=1e-15)
        npt.assert_allclose(
            np.sort(permuted.per_class_iou), np.sort(base.per_class_iou), atol=1e-15
        )

    def test_ignore_class0_restricts_miou_only(self):
        truth = np.array([0, 0, 1, 1, 2, 2])
        pred = np.array([0, 1, 1, 1, 2, 0])
        full = compute_metrics(pred, truth, 3)
        restricted = compute_metrics(pred, truth, 3, ignore_class0=True)
        assert restricted.oa == full.oa
        npt.assert_array_equal(restricted.confusion, full.confusion)
        npt.assert_allclose(restricted.miou, np.nanmean(full.per_class_iou[1:]))

    def test_errors(self):
        with pytest.raises(ValueError, match="shape"):
            compute_metrics([0, 1], [0], 2)
        with pytest.raises(ValueError, match="labels outside"):
            compute_metrics([0, 5], [0, 1], 2)


class TestBinnedAccuracy:
    def test_single_bin_equals_global_oa(self):
        rng = np.random.default_rng(73)
        xyz = rng.normal(size=(50, 3))
        truth = rng.integers(0, 3, 50)
        pred = np.where(rng.uniform(size=50) < 0.6, truth, 0)
        sparsity = rng.uniform(size=50)
        dist_bins, _ = binned_accuracy(pred, truth, xyz, sparsity, distance_edges=[0.0, 1e9])
        assert dist_bins[0].count == 50
        npt.assert_allclose(dist_bins[0].oa, (pred == truth).mean())

    def test_two_points_two_bins(self):
        xyz = np.array([[5.0, 0, 0], [55.0, 0, 0]])
        dist_bins, _ = binned_accuracy(
            [0, 0], [0, 1], xyz, [0.1, 0.9], distance_edges=[0.0, 50.0, 100.0]
        )
        assert [b.count for b in dist_bins] == [1, 1]
        assert dist_bins[0].oa == 1.0 and dist_bins[1].oa == 0.0

    def test_partition_law(self):
        rng = np.random.default_rng(74)
        n = 500
        xyz = rng.normal(size=(n, 3)) * 30
        pred = rng.integers(0, 3, n)
        truth = rng.integers(0, 3, n)
        sparsity = rng.uniform(size=n)
        dist_bins, sp_bins = binned_accuracy(pred, truth, xyz, sparsity)
        assert sum(b.count for b in dist_bins) == n
        assert sum(b.count for b in sp_bins) == n

    def test_empty_bin_reported_undefined(self):
        xyz = np.array([[1.0, 0, 0], [2.0, 0, 0]])
        dist_bins, _ = binned_accuracy(
            [0, 0], [0, 0], xyz, [0.0, 1.0], distance_edges=[0.0, 10.0, 20.0, 30.0]
        )
        assert dist_bins[0].count == 2
        assert dist_bins[1].count == 0 and np.isnan(dist_bins[1].oa)

    def test_sparsity_normalization(self):
        s = np.array([3.0, 5.0, 7.0])
        npt.assert_allclose(normalize_sparsity(s), [0.0, 0.5, 1.0])
        npt.assert_array_equal(normalize_sparsity(np.full(4, 2.2)), np.zeros(4))

    def test_bad_edges_rejected(self):
        with pytest.raises(ValueError, match="edges"):
            binned_accuracy([0], [0], np.zeros((1, 3)), [0.5], distance_edges=[1.0, 0.5])


def test_point_sparsity_shape_and_finiteness():
    rng = np.random.default_rng(75)
    xyz = rng.normal(size=(64, 3)) * 5
    sp = point_sparsity(xyz)
    assert sp.shape == (64,)
    assert np.isfinite(sp).all()
