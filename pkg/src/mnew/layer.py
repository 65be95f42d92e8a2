"""One MNEW stage: dual-domain neighborhood embedding with learned gates.

Per enabled domain the pipeline is

    pairwise distances -> fixed-width selection -> edge gathering
    -> distance/similarity attention gate -> shared-perceptron lift
    -> sparsity gate -> masked mean pool over the neighbor axis

and the per-domain pooled features are concatenated on the channel axis.
The coordinate domain selects by multiple radii on xyz and is static across
stages; the feature domain selects by multiple kNN on the current features
and therefore rewires itself as features evolve.

Edge tensors pair the neighbor's current feature vector with a difference
term: xyz differences in the coordinate domain, feature differences in the
feature domain.  That keeps the coordinate branch insensitive to rigid
translations of the cloud.

Both gates are tiny sigmoid-output perceptrons over a per-slot scalar
(distance for attention, local sparsity for density weighting).  In the
coordinate domain those scalars derive from xyz, which is network input, so
they are constants.  In the feature domain they derive from the learned
features and carry exact gradients back into earlier stages; only the
discrete neighbor choice and the adaptive kernel bandwidth are held
constant.  Final gate layers start at zero, i.e. every gate opens at 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mnew.autodiff import (
    ParameterRegistry,
    PerceptronStack,
    Tensor,
    add,
    broadcast_to,
    concat,
    exp,
    gather_rows,
    log,
    mul,
    reduce,
    reshape,
    sqrt_safe,
    sub,
)
from mnew.neighborhood import (
    DistanceMatrix,
    NeighborhoodSelection,
    default_sigma_geometry,
    pairwise_sq_dist,
    select_knn,
    select_radius,
    sigma_from_selection,
)

__all__ = [
    "AblationSwitches",
    "MnewLayerConfig",
    "MnewLayer",
    "attention_weight",
    "sparsity_weight",
]


@dataclass(frozen=True)
class AblationSwitches:
    """Feature toggles for the ablation matrix; at least one domain stays on."""

    use_geometry: bool = True
    use_feature: bool = True
    use_attention: bool = True
    use_sparsity: bool = True

    def __post_init__(self):
        if not (self.use_geometry or self.use_feature):
            raise ValueError("at least one of use_geometry/use_feature must be on")

    def n_domains(self) -> int:
        return int(self.use_geometry) + int(self.use_feature)


@dataclass(frozen=True)
class MnewLayerConfig:
    """Neighborhood budget and channel width of one MNEW stage.

    ``radii`` lists (radius_in_meters, slot_width) scales for the coordinate
    domain; ``ks`` lists the per-scale neighbor counts for the feature
    domain.  ``sigma_geo``/``sigma_feat`` of None select the adaptive
    defaults (half the smallest radius, resp. the median selected feature
    distance of the current pass).
    """

    radii: tuple = ((0.5, 8), (1.0, 8))
    ks: tuple = (8, 8)
    d_conv: int = 16
    gate_hidden: int = 8
    sigma_geo: float | None = None
    sigma_feat: float | None = None
    sparsity_variant: str = "stabilized"


def attention_weight(pairs, gate: PerceptronStack, valid: np.ndarray) -> Tensor:
    """Per-slot attention weight in (0, 1) from a distance scalar [N, N_n, 1];
    padded slots are forced to exactly zero.

    ``pairs`` may be a constant array (coordinate domain) or a tensor that
    itself depends on learned features (feature domain); gradients flow
    through it accordingly.
    """
    t = gate(pairs if isinstance(pairs, Tensor) else Tensor(pairs))
    return mul(t, Tensor(valid[:, :, None].astype(np.float64)))


def sparsity_weight(activations: Tensor, sparsity_slots, gate: PerceptronStack,
                    valid: np.ndarray) -> Tensor:
    """Scale per-slot activations by a learned gate of the local sparsity."""
    s = sparsity_slots if isinstance(sparsity_slots, Tensor) else Tensor(sparsity_slots)
    if s.ndim == 2:
        s = reshape(s, (s.shape[0], s.shape[1], 1))
    w = mul(gate(s), Tensor(valid[:, :, None].astype(np.float64)))
    return mul(w, activations)


class MnewLayer:
    """Parameters and forward pass of one MNEW stage.

    Parameters for both domains are always built (ablation switches are a
    forward-time choice), registered under ``<name>/geo|feat/...``.
    """

    def __init__(
        self,
        name: str,
        d_in: int,
        config: MnewLayerConfig,
        registry: ParameterRegistry,
        rng: np.random.Generator,
    ):
        self.name = name
        self.d_in = int(d_in)
        self.config = config
        dc = config.d_conv
        gh = config.gate_hidden
        # both gates open at 0.5, so the gated pipeline attenuates by 4x at
        # initialization; a gain of 2 per embedding layer restores unit scale
        self.embed_geo = PerceptronStack(
            f"{name}/geo/embed", (self.d_in + 3, dc, dc), ("relu", "relu"),
            registry, rng, init_gain=2.0,
        )
        self.embed_feat = PerceptronStack(
            f"{name}/feat/embed", (2 * self.d_in, dc, dc), ("relu", "relu"),
            registry, rng, init_gain=2.0,
        )
        gate = lambda n: PerceptronStack(
            n, (1, gh, 1), ("relu", "sigmoid"), registry, rng, zero_last=True
        )
        self.att_geo = gate(f"{name}/geo/att")
        self.att_feat = gate(f"{name}/feat/att")
        self.sp_geo = gate(f"{name}/geo/sparsity")
        self.sp_feat = gate(f"{name}/feat/sparsity")

    def out_dim(self, switches: AblationSwitches) -> int:
        return self.config.d_conv * switches.n_domains()

    def stacks(self) -> list[PerceptronStack]:
        return [
            self.embed_geo,
            self.embed_feat,
            self.att_geo,
            self.att_feat,
            self.sp_geo,
            self.sp_feat,
        ]

    # -- forward ------------------------------------------------------------

    def forward(
        self,
        xyz: np.ndarray,
        features: Tensor,
        switches: AblationSwitches,
        geometry: tuple[DistanceMatrix, NeighborhoodSelection] | None = None,
    ) -> Tensor:
        """[N, d_in] features -> [N, d_conv * enabled_domains].

        ``geometry`` optionally carries a precomputed coordinate-domain
        (distance matrix, selection) pair; it is static per cloud, so
        callers running many passes over one cloud can reuse it.
        """
        cfg = self.config
        outputs = []
        if switches.use_geometry:
            if geometry is None:
                dm = pairwise_sq_dist(xyz, "geometry")
                sel = select_radius(dm, cfg.radii)
            else:
                dm, sel = geometry
            diff = Tensor(xyz[sel.indices] - xyz[:, None, :])
            sigma = cfg.sigma_geo
            if sigma is None:
                sigma = default_sigma_geometry(cfg.radii)
            outputs.append(
                self._domain(
                    sel, features, diff, self.embed_geo,
                    self.att_geo, self.sp_geo, sigma, switches,
                )
            )
        if switches.use_feature:
            dm = pairwise_sq_dist(features.data, "feature")
            sel = select_knn(dm, cfg.ks)
            sigma = cfg.sigma_feat
            if sigma is None:
                sigma = sigma_from_selection(dm, sel)
            outputs.append(
                self._domain(
                    sel, features, None, self.embed_feat,
                    self.att_feat, self.sp_feat, sigma, switches,
                )
            )
        return outputs[0] if len(outputs) == 1 else concat(outputs, axis=1)

    def _domain(self, sel, features, const_diff, embed, att_gate, sp_gate,
                sigma, switches) -> Tensor:
        """One domain's pipeline.  ``const_diff`` carries the xyz offsets in
        the coordinate domain (a constant tensor); the feature domain derives
        its difference half from the features, so gate inputs built from it
        (distances, densities) propagate gradients back into earlier stages.
        Neighbor indices and masks are always discrete constants.
        """
        n, d = features.shape
        absolute = gather_rows(features, sel.indices)
        if const_diff is None:
            diff = sub(absolute, reshape(features, (n, 1, d)))
        else:
            diff = const_diff
        x0 = concat([absolute, diff], axis=2)

        d2 = None
        if switches.use_attention or switches.use_sparsity:
            # per-slot squared distance recomputed from the gathered
            # differences (identical values to the selection matrix)
            d2 = reduce(mul(diff, diff), axis=2, mode="sum")
        if switches.use_attention:
            pairs = reshape(sqrt_safe(d2), (n, sel.n_slots, 1))
            w = attention_weight(pairs, att_gate, sel.valid)
            x0 = mul(w, x0)
        h = embed(x0)
        if switches.use_sparsity:
            slots = self._sparsity_slots(d2, sel, sigma)
            h = sparsity_weight(h, slots, sp_gate, sel.valid)
        return reduce(h, axis=1, mode="mean", mask=sel.valid, empty=0.0)

    def _sparsity_slots(self, d2: Tensor, sel, sigma: float) -> Tensor:
        """Stabilized sparsity (negative-log mean Gaussian density over valid
        slots), broadcast back onto the slot axis.  Matches
        :func:`mnew.neighborhood.compute_sparsity` numerically while staying
        on the tape."""
        if self.config.sparsity_variant != "stabilized":
            raise ValueError(
                "only the stabilized sparsity variant is differentiable; "
                "the literal form is available via neighborhood.compute_sparsity"
            )
        n = d2.shape[0]
        norm = 1.0 / np.sqrt(2.0 * np.pi * sigma * sigma)
        dens = mul(exp(mul(d2, -1.0 / (2.0 * sigma * sigma))), norm)
        mean = reduce(dens, axis=1, mode="mean", mask=sel.valid, empty=0.0)
        point = mul(log(add(mean, 1e-12)), -1.0)
        return broadcast_to(reshape(point, (n, 1, 1)), (n, sel.n_slots, 1))
