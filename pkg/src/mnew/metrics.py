"""Segmentation metrics and the distance/sparsity-binned breakdown.

The headline numbers are overall accuracy (fraction of correctly labeled
points) and mean IoU (per-class TP / (TP + FP + FN), averaged over the
classes for which that denominator is non-zero).  The binned breakdown
slices accuracy by a point's range from the sensor and by its local
sparsity, the two axes along which swept-LiDAR performance drifts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mnew.neighborhood import (
    compute_sparsity,
    default_sigma_geometry,
    pairwise_sq_dist,
    select_radius,
)

__all__ = [
    "BinStat",
    "EvalReport",
    "compute_metrics",
    "binned_accuracy",
    "point_sparsity",
    "normalize_sparsity",
    "PROFILE_RADII",
    "DISTANCE_EDGES",
    "SPARSITY_BIN_COUNT",
]

# selection used whenever sparsity is profiled on raw clouds (no model):
# a tight kernel keeps the ring-spacing gradient sharp and saturates truly
# isolated points instead of blurring them into their neighbors
PROFILE_RADII = ((1.0, 16), (2.0, 16))

DISTANCE_EDGES = tuple(np.arange(0.0, 65.0, 5.0))
SPARSITY_BIN_COUNT = 10


@dataclass
class BinStat:
    lower: float
    count: int
    oa: float  # nan when the bin is empty


@dataclass
class EvalReport:
    """Confusion matrix (rows = truth), OA, per-class IoU and bin curves."""

    confusion: np.ndarray
    oa: float
    per_class_iou: np.ndarray
    iou_defined: np.ndarray
    miou: float
    distance_bins: list = field(default_factory=list)
    sparsity_bins: list = field(default_factory=list)


def compute_metrics(pred, truth, num_classes: int, ignore_class0: bool = False) -> EvalReport:
    """Confusion matrix, OA and IoU family for one prediction/truth pair.

    ``ignore_class0`` drops class 0 from the mIoU average only; OA and the
    confusion matrix always include every point.
    """
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ValueError(f"shape mismatch: pred {pred.shape}, truth {truth.shape}")
    c = int(num_classes)
    if pred.size and (
        pred.min() < 0 or pred.max() >= c or truth.min() < 0 or truth.max() >= c
    ):
        raise ValueError(f"labels outside [0, {c})")
    confusion = np.bincount(truth * c + pred, minlength=c * c).reshape(c, c)
    total = confusion.sum()
    oa = float(np.trace(confusion) / total) if total else float("nan")
    tp = np.diag(confusion).astype(np.float64)
    denom = confusion.sum(axis=0) + confusion.sum(axis=1) - tp
    defined = denom > 0
    iou = np.where(defined, tp / np.where(defined, denom, 1.0), np.nan)
    averaged = defined.copy()
    if ignore_class0:
        averaged[0] = False
    miou = float(iou[averaged].mean()) if averaged.any() else float("nan")
    return EvalReport(confusion, oa, iou, defined, miou)


def _bin_stats(values, correct, edges) -> list:
    edges = np.asarray(edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2 or (np.diff(edges) <= 0).any():
        raise ValueError("bin edges must be strictly increasing with >= 2 entries")
    # outer bins absorb out-of-range values so the bins always partition
    idx = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, edges.size - 2)
    out = []
    for b in range(edges.size - 1):
        sel = idx == b
        n = int(sel.sum())
        oa = float(correct[sel].mean()) if n else float("nan")
        out.append(BinStat(float(edges[b]), n, oa))
    return out


def normalize_sparsity(sparsity: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1] over the evaluation set."""
    s = np.asarray(sparsity, dtype=np.float64)
    lo, hi = s.min(), s.max()
    if hi <= lo:
        return np.zeros_like(s)
    return (s - lo) / (hi - lo)


def binned_accuracy(
    pred,
    truth,
    xyz,
    sparsity,
    distance_edges=DISTANCE_EDGES,
    sparsity_bin_count: int = SPARSITY_BIN_COUNT,
):
    """Accuracy, bin by bin: membership by full 3-d range from the sensor,
    and by min-max-normalized sparsity.  Returns (distance_bins,
    sparsity_bins); empty bins report count 0 and undefined OA."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    correct = (pred == truth).astype(np.float64)
    distance = np.sqrt((xyz**2).sum(axis=1))
    dist_bins = _bin_stats(distance, correct, distance_edges)
    norm = normalize_sparsity(sparsity)
    sp_edges = np.linspace(0.0, 1.0, sparsity_bin_count + 1)
    sp_bins = _bin_stats(norm, correct, sp_edges)
    return dist_bins, sp_bins


def point_sparsity(xyz, radii=PROFILE_RADII, sigma: float | None = None) -> np.ndarray:
    """Per-point stabilized sparsity of a raw cloud, using the profiling
    radius set and its default bandwidth (half the smallest radius)."""
    dm = pairwise_sq_dist(np.asarray(xyz, dtype=np.float64), "geometry")
    sel = select_radius(dm, radii)
    if sigma is None:
        sigma = default_sigma_geometry(radii)
    return compute_sparsity(dm, sel, sigma).point_values
