"""Spatial and feature-space neighborhood machinery.

Two search domains share one representation: squared Euclidean pairwise
distances.  In coordinate space smaller means nearer; in feature space
smaller means more similar.  Selections are fixed-width index/mask arrays
(one block of slots per radius or per-k scale), with shortfall padded by
the query's own index and masked out, which keeps every downstream tensor
rectangular and makes padding inert under masked pooling.

Gathering distances or sparsity values produces plain numpy arrays: they
enter the network as constants.  Gathering point features
(:func:`gather_edges`) is differentiable and recorded on the active tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mnew import backend
from mnew.autodiff import Tensor, concat, gather_rows, reshape, sub

__all__ = [
    "DistanceMatrix",
    "NeighborhoodSelection",
    "EdgeEmbedding",
    "SparsityField",
    "pairwise_sq_dist",
    "select_radius",
    "select_knn",
    "gather_edges",
    "gather_pairs",
    "compute_sparsity",
    "default_sigma_geometry",
    "sigma_from_selection",
]


@dataclass
class DistanceMatrix:
    """Symmetric [N, N] squared distances with a forced-zero diagonal."""

    values: np.ndarray
    domain: str = "geometry"

    @property
    def n_points(self) -> int:
        return self.values.shape[0]


@dataclass
class NeighborhoodSelection:
    """Fixed-width neighbor slots for every query point.

    ``indices`` is [N, N_n] int64; ``valid`` marks real neighbors, padded
    slots point back at the query itself.  ``scale_of_slot`` maps each slot
    column to the radius/k scale it belongs to.
    """

    indices: np.ndarray
    valid: np.ndarray
    scale_of_slot: np.ndarray
    domain: str

    @property
    def n_slots(self) -> int:
        return self.indices.shape[1]


@dataclass
class EdgeEmbedding:
    """Per-slot pair (neighbor value, neighbor - query) on the channel axis."""

    values: Tensor
    selection: NeighborhoodSelection


@dataclass
class SparsityField:
    """Negative-log (or literal reciprocal-log) mean kernel density.

    ``point_values`` holds one sparsity scalar per query; ``slot_values`` is
    that scalar broadcast across the query's neighbor slots, which is the
    layout the gating transform consumes.  ``nonfinite`` flags queries where
    the literal variant degenerates.
    """

    slot_values: np.ndarray
    point_values: np.ndarray
    sigma: float
    variant: str
    nonfinite: np.ndarray = field(default=None)


def pairwise_sq_dist(points: np.ndarray, domain: str = "geometry") -> DistanceMatrix:
    """Entry (i, j) = sum_d (p_id - p_jd)^2, exactly symmetric, zero diagonal."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 2:
        raise ValueError(f"need an [N>=2, D] point array, got shape {points.shape}")
    if not np.isfinite(points).all():
        raise ValueError("pairwise_sq_dist: non-finite input coordinates")
    return DistanceMatrix(backend.pairwise_sq_dist(points), domain)


def _assemble(dm, per_scale, domain: str) -> NeighborhoodSelection:
    n = dm.values.shape[0]
    idx_blocks, valid_blocks, scale_ids = [], [], []
    for scale, (idx, count) in enumerate(per_scale):
        k = idx.shape[1]
        valid = idx >= 0
        rows = np.broadcast_to(np.arange(n)[:, None], idx.shape)
        idx_blocks.append(np.where(valid, idx, rows))
        valid_blocks.append(valid)
        scale_ids.append(np.full(k, scale, dtype=np.int64))
    return NeighborhoodSelection(
        indices=np.ascontiguousarray(np.concatenate(idx_blocks, axis=1)),
        valid=np.ascontiguousarray(np.concatenate(valid_blocks, axis=1)),
        scale_of_slot=np.concatenate(scale_ids),
        domain=domain,
    )


def select_radius(dm: DistanceMatrix, radii) -> NeighborhoodSelection:
    """Multi-radius selection: per scale (radius, width), the up-to-``width``
    nearest non-self points with squared distance <= radius^2, ordered by
    (distance, index).  Empty scales come back fully padded.
    """
    radii = [(float(r), int(k)) for r, k in radii]
    if not radii:
        raise ValueError("select_radius: need at least one (radius, width) scale")
    rs = [r for r, _ in radii]
    if any(r <= 0 for r in rs) or any(b >= a for b, a in zip(rs, rs[1:])):
        raise ValueError(f"radii must be positive and strictly increasing, got {rs}")
    if any(k < 1 for _, k in radii):
        raise ValueError("selection widths must be >= 1")
    per_scale = [
        backend.select_neighbors(dm.values, k, bound=r * r) for r, k in radii
    ]
    return _assemble(dm, per_scale, dm.domain)


def select_knn(dm: DistanceMatrix, ks) -> NeighborhoodSelection:
    """Multi-kNN selection: per scale k_i, the k_i smallest non-self
    distances, ties broken toward the lower point index.  Scales are
    gathered independently, so slots may repeat across scales.
    """
    ks = [int(k) for k in ks]
    n = dm.n_points
    if not ks or any(k < 1 for k in ks):
        raise ValueError(f"k values must be >= 1, got {ks}")
    if any(k >= n for k in ks):
        raise ValueError(f"k must be < N_p={n}, got {ks}")
    per_scale = [backend.select_neighbors(dm.values, k) for k in ks]
    return _assemble(dm, per_scale, dm.domain)


def gather_edges(inputs: Tensor, sel: NeighborhoodSelection) -> EdgeEmbedding:
    """Build the [N, N_n, 2*D] edge tensor (neighbor value, neighbor - query).

    Differentiable: gradients flow to both the neighbor rows and the query
    rows.  Padded slots index the query itself, so their difference half is
    exactly zero and their absolute half carries the query's own features.
    """
    inputs = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
    n, d = inputs.shape
    absolute = gather_rows(inputs, sel.indices)
    difference = sub(absolute, reshape(inputs, (n, 1, d)))
    return EdgeEmbedding(concat([absolute, difference], axis=2), sel)


def gather_pairs(dm: DistanceMatrix, sel: NeighborhoodSelection) -> np.ndarray:
    """Per-slot Euclidean (square-rooted) distance aligned with ``sel``,
    zero at padded slots.  Returned as a plain [N, N_n, 1] constant."""
    rows = np.arange(dm.n_points)[:, None]
    d = np.sqrt(dm.values[rows, sel.indices])
    d = np.where(sel.valid, d, 0.0)
    return d[:, :, None]


def default_sigma_geometry(radii) -> float:
    """Kernel bandwidth for coordinate-space sparsity: half the smallest radius."""
    return 0.5 * min(float(r) for r, _ in radii)


def sigma_from_selection(dm: DistanceMatrix, sel: NeighborhoodSelection) -> float:
    """Bandwidth for feature-space sparsity: median selected distance.

    Recomputed per forward pass and treated as a constant; floored so a
    degenerate all-coincident selection cannot produce sigma = 0.
    """
    rows = np.arange(dm.n_points)[:, None]
    d = np.sqrt(dm.values[rows, sel.indices])[sel.valid]
    if d.size == 0:
        return 1e-6
    return max(float(np.median(d)), 1e-6)


def compute_sparsity(
    dm: DistanceMatrix,
    sel: NeighborhoodSelection,
    sigma: float,
    variant: str = "stabilized",
) -> SparsityField:
    """Per-query sparsity from the mean Gaussian kernel density of its
    selected neighbors.

    Per valid slot, density = exp(-d^2 / (2 sigma^2)) / sqrt(2 pi sigma^2).

    * ``stabilized`` (default): -log(mean density + 1e-12).  Finite for all
      inputs (a query with no valid neighbor saturates at -log(1e-12)) and
      strictly decreasing in the mean density.
    * ``literal``: (mean of log(sum of densities))^-1 with the mean taken
      over the valid-slot count.  Singular when the log term approaches
      zero; such queries are flagged in ``nonfinite`` instead of raising.
    """
    sigma = float(sigma)
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if variant not in ("stabilized", "literal"):
        raise ValueError(f"unknown sparsity variant: {variant!r}")
    rows = np.arange(dm.n_points)[:, None]
    d2 = dm.values[rows, sel.indices]
    norm = 1.0 / np.sqrt(2.0 * np.pi * sigma * sigma)
    dens = norm * np.exp(-d2 / (2.0 * sigma * sigma))
    dens = np.where(sel.valid, dens, 0.0)
    n_valid = sel.valid.sum(axis=1)
    total = dens.sum(axis=1)

    if variant == "stabilized":
        mean = total / np.maximum(n_valid, 1)
        mean = np.where(n_valid == 0, 0.0, mean)
        point = -np.log(mean + 1e-12)
        flags = np.zeros(dm.n_points, dtype=bool)
    else:
        if (n_valid == 0).any():
            raise ValueError(
                "literal sparsity requires at least one valid neighbor per query"
            )
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            log_total = np.log(total)
            point = 1.0 / (log_total / n_valid)
        flags = (np.abs(log_total) <= 1e-9) | ~np.isfinite(point)

    slot = np.broadcast_to(point[:, None], sel.indices.shape).copy()
    return SparsityField(slot, point, sigma, variant, flags)
