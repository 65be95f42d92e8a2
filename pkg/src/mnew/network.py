"""Dilated segmentation network: three stacked MNEW stages, a global
max-pooled descriptor, and a pointwise classification head.

The point count never changes end to end.  Stage outputs L1/L2/L3 keep
per-point resolution; the global feature G3 comes from two shared
perceptrons over L3, a max pool across all points, and two fully-connected
layers on the pooled vector.  Every point's descriptor is
concat(L1, L2, L3, G3) and the head maps it to class logits.

Training is plain SGD with momentum on cross-entropy plus an L2 penalty
over perceptron weight matrices (biases excluded).
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from mnew.autodiff import (
    SGD,
    ParameterRegistry,
    PerceptronStack,
    Tape,
    Tensor,
    add,
    broadcast_to,
    concat,
    mul,
    reduce,
    reshape,
    softmax_cross_entropy,
)
from mnew.checkpoint import load_into, save_checkpoint
from mnew.layer import AblationSwitches, MnewLayer, MnewLayerConfig
from mnew.neighborhood import pairwise_sq_dist, select_radius

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "SegmentationOutput",
    "MnewNetwork",
    "TrainingDiverged",
    "TrainResult",
    "loss_total",
    "train",
    "predict",
    "evaluate_clouds",
    "default_layer_configs",
    "model_config_to_dict",
    "model_config_from_dict",
    "config_hash",
]


def default_layer_configs() -> tuple[MnewLayerConfig, ...]:
    """Desk-scale stage plan: neighbor budget and width grow with depth."""
    return (
        MnewLayerConfig(radii=((0.5, 8), (1.0, 8)), ks=(8, 8), d_conv=16),
        MnewLayerConfig(radii=((1.0, 10), (2.0, 10)), ks=(10, 10), d_conv=24),
        MnewLayerConfig(radii=((2.0, 12), (4.0, 12)), ks=(12, 12), d_conv=32),
    )


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to rebuild a network deterministically."""

    num_points: int = 2048
    num_classes: int = 5
    feat_dim: int = 3
    seed: int = 0
    reg_lambda: float = 1e-4
    # unit-range inputs keep SGD stable; the benchmark's range/distance
    # features span [0, 60] m
    feature_scale: tuple = (1.0, 1.0 / 60.0, 1.0 / 60.0)
    layers: tuple = field(default_factory=default_layer_configs)
    global_widths: tuple = (128, 128)
    global_fc: tuple = (64, 48)
    head_widths: tuple = (96, 48)
    switches: AblationSwitches = field(default_factory=AblationSwitches)

    def __post_init__(self):
        if self.num_points < 8:
            raise ValueError(f"num_points must be >= 8, got {self.num_points}")
        if self.reg_lambda < 0:
            raise ValueError(f"reg_lambda must be >= 0, got {self.reg_lambda}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.feature_scale is not None and len(self.feature_scale) != self.feat_dim:
            raise ValueError(
                f"feature_scale length {len(self.feature_scale)} != feat_dim {self.feat_dim}"
            )
        if len(self.layers) != 3:
            raise ValueError("exactly three MNEW stages are supported")


@dataclass
class SegmentationOutput:
    """Logits plus the intermediate features tests and reports inspect."""

    logits: Tensor
    labels: np.ndarray
    l1: np.ndarray
    l2: np.ndarray
    l3: np.ndarray
    g3: np.ndarray


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite training loss at epoch {epoch}: {value}")
        self.epoch = epoch


class MnewNetwork:
    """Three MNEW stages + global pathway + head, one parameter registry."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.registry = ParameterRegistry()
        rng = np.random.default_rng(config.seed)
        sw = config.switches
        d = config.feat_dim
        self.stages: list[MnewLayer] = []
        for i, lc in enumerate(config.layers):
            stage = MnewLayer(f"l{i + 1}", d, lc, self.registry, rng)
            self.stages.append(stage)
            d = stage.out_dim(sw)
        gw = config.global_widths
        self.global_pre = PerceptronStack(
            "global/pre", (d,) + tuple(gw), ("relu",) * len(gw), self.registry, rng
        )
        gfc = config.global_fc
        self.global_fc = PerceptronStack(
            "global/fc", (gw[-1],) + tuple(gfc), ("relu",) * len(gfc), self.registry, rng
        )
        width = sum(s.out_dim(sw) for s in self.stages) + gfc[-1]
        hw = config.head_widths
        self.head = PerceptronStack(
            "head",
            (width,) + tuple(hw) + (config.num_classes,),
            ("relu",) * len(hw) + ("none",),
            self.registry,
            rng,
        )

    # -- forward ------------------------------------------------------------

    def forward(self, xyz: np.ndarray, features: np.ndarray) -> SegmentationOutput:
        cfg = self.config
        n = xyz.shape[0]
        if n != cfg.num_points:
            raise ValueError(f"expected exactly {cfg.num_points} points, got {n}")
        if n != features.shape[0]:
            raise ValueError(f"xyz has {n} points but features {features.shape[0]}")
        if features.shape[1] != cfg.feat_dim:
            raise ValueError(
                f"expected {cfg.feat_dim} input features, got {features.shape[1]}"
            )
        feats = np.asarray(features, dtype=np.float64)
        if cfg.feature_scale is not None:
            feats = feats * np.asarray(cfg.feature_scale, dtype=np.float64)
        x = Tensor(feats)
        sw = cfg.switches
        geometry_pairs = self._geometry_pairs(xyz) if sw.use_geometry else [None] * 3

        per_stage = []
        for stage, geo in zip(self.stages, geometry_pairs):
            x = stage.forward(xyz, x, sw, geometry=geo)
            per_stage.append(x)

        g = self.global_pre(per_stage[-1])
        pooled = reshape(reduce(g, axis=0, mode="max"), (1, g.shape[1]))
        g3 = self.global_fc(pooled)
        tiled = broadcast_to(g3, (n, g3.shape[1]))
        descriptor = concat(per_stage + [tiled], axis=1)
        logits = self.head(descriptor)
        return SegmentationOutput(
            logits=logits,
            labels=np.argmax(logits.data, axis=1),
            l1=per_stage[0].data,
            l2=per_stage[1].data,
            l3=per_stage[2].data,
            g3=g3.data[0],
        )

    def _geometry_pairs(self, xyz: np.ndarray):
        """Coordinate-domain distances/selections are static across stages:
        compute the matrix once and select per stage budget."""
        dm = pairwise_sq_dist(xyz, "geometry")
        return [(dm, select_radius(dm, s.config.radii)) for s in self.stages]

    # -- parameters ----------------------------------------------------------

    def parameters(self):
        return list(self.registry)

    def weight_params(self):
        stacks = []
        for s in self.stages:
            stacks.extend(s.stacks())
        stacks += [self.global_pre, self.global_fc, self.head]
        out = []
        for st in stacks:
            out.extend(st.weight_params())
        return out

    def save(self, path) -> None:
        save_checkpoint(path, self.registry)

    def load(self, path) -> None:
        load_into(self.registry, path)


def loss_total(logits: Tensor, labels: np.ndarray, network: MnewNetwork,
               reg_lambda: float | None = None, class_weights=None) -> Tensor:
    """Cross-entropy plus lambda * sum of squared perceptron weights."""
    lam = network.config.reg_lambda if reg_lambda is None else float(reg_lambda)
    if lam < 0:
        raise ValueError(f"reg_lambda must be >= 0, got {lam}")
    total = softmax_cross_entropy(logits, labels, class_weights)
    if lam == 0.0:
        return total
    for w in network.weight_params():
        sq = mul(w, w)
        total = add(total, mul(reduce(reshape(sq, (-1,)), 0, "sum"), lam))
    return total


# ---------------------------------------------------------------------------
# training / inference
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    lr: float = 1e-2
    momentum: float = 0.9
    lr_halve_every: int = 10
    seed: int = 0
    # optional early stop once validation reaches both targets
    target_oa: float | None = None
    target_miou: float | None = None
    # optional early stop on train-set accuracy (memorization checks)
    target_train_oa: float | None = None
    # None: plain cross-entropy; "balanced": weight classes by inverse
    # frequency over the training split (mean-one normalized)
    class_weighting: str | None = None


@dataclass
class TrainResult:
    log: list
    best_epoch: int
    best_oa: float
    best_miou: float
    checkpoint: Path | None
    network: MnewNetwork
    train_oa: float | None = None  # set when target_train_oa is tracked


LOG_HEADER = ("epoch", "train_loss", "valid_OA", "valid_mIoU", "wall_seconds")


def train(train_clouds, valid_clouds, model_config: ModelConfig,
          train_config: TrainConfig = TrainConfig(), out_dir=None) -> TrainResult:
    """Seeded epoch loop: shuffle, forward, loss, backward, momentum update.

    Logs one row per epoch and keeps the best-validation-mIoU checkpoint
    (written to ``out_dir`` when given).  Raises TrainingDiverged on a
    non-finite loss.
    """
    if not train_clouds or not valid_clouds:
        raise ValueError("train and valid splits must both be non-empty")
    if train_config.epochs < 1:
        raise ValueError("epochs must be >= 1")
    ids = {c.frame_id for c in train_clouds} & {c.frame_id for c in valid_clouds}
    if ids:
        raise ValueError(f"train/valid splits overlap: {sorted(ids)[:4]}")

    net = MnewNetwork(model_config)
    opt = SGD(net.parameters(), lr=train_config.lr, momentum=train_config.momentum)
    rng = np.random.default_rng(train_config.seed)
    class_weights = _class_weights(train_clouds, model_config.num_classes,
                                   train_config.class_weighting)

    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_path = None
    log_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = out_dir / "best.ckpt"
        log_path = out_dir / "train_log.csv"
        (out_dir / "config.json").write_text(
            json.dumps(model_config_to_dict(model_config), indent=2) + "\n"
        )

    log_rows = []
    best = (-1.0, -1.0, -1)  # (miou, oa, epoch)
    train_oa = None
    n = len(train_clouds)
    bs = max(1, train_config.batch_size)
    for epoch in range(train_config.epochs):
        t0 = time.perf_counter()
        opt.lr = train_config.lr * (0.5 ** (epoch // train_config.lr_halve_every))
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, bs):
            batch = order[start : start + bs]
            opt.zero_grad()
            for ci in batch:
                cloud = train_clouds[ci]
                with Tape() as tape:
                    out = net.forward(cloud.xyz, cloud.features)
                    loss = loss_total(out.logits, cloud.labels, net,
                                      class_weights=class_weights)
                    scaled = mul(loss, 1.0 / len(batch))
                tape.backward(scaled)
                losses.append(loss.item())
                if not np.isfinite(losses[-1]):
                    raise TrainingDiverged(epoch, losses[-1])
            opt.step()
        oa, miou = evaluate_clouds(net, valid_clouds)
        row = (epoch, float(np.mean(losses)), oa, miou, time.perf_counter() - t0)
        log_rows.append(row)
        if log_path is not None:
            _write_log(log_path, log_rows)
        if (miou, oa) > best[:2]:
            best = (miou, oa, epoch)
            if ckpt_path is not None:
                net.save(ckpt_path)
            best_state = {k: v.tensor.data.copy() for k, v in net.registry.items()}
        if train_config.target_train_oa is not None:
            train_oa, _ = evaluate_clouds(net, train_clouds)
            if train_oa >= train_config.target_train_oa:
                break
        if (
            train_config.target_oa is not None
            and train_config.target_miou is not None
            and oa >= train_config.target_oa
            and miou >= train_config.target_miou
        ):
            break

    if train_config.target_train_oa is None:
        # hand back the best-validation parameters; memorization runs keep
        # the final state instead, since best-valid may predate it
        for name, data in best_state.items():
            net.registry[name].tensor.data = data
    return TrainResult(
        log=log_rows,
        best_epoch=best[2],
        best_oa=best[1],
        best_miou=best[0],
        checkpoint=ckpt_path,
        network=net,
        train_oa=train_oa,
    )


def _class_weights(clouds, num_classes: int, mode: str | None):
    if mode is None:
        return None
    if mode != "balanced":
        raise ValueError(f"unknown class_weighting mode: {mode!r}")
    counts = np.zeros(num_classes, dtype=np.int64)
    for c in clouds:
        counts += np.bincount(c.labels, minlength=num_classes)
    present = counts > 0
    w = np.zeros(num_classes)
    w[present] = counts.sum() / (present.sum() * counts[present])
    return w


def _write_log(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
        for r in rows:
            writer.writerow([r[0], f"{r[1]:.8f}", f"{r[2]:.6f}", f"{r[3]:.6f}", f"{r[4]:.3f}"])


def predict(net: MnewNetwork, cloud) -> np.ndarray:
    """Deterministic per-point labels (argmax, ties to the lowest class)."""
    return net.forward(cloud.xyz, cloud.features).labels


def evaluate_clouds(net: MnewNetwork, clouds) -> tuple[float, float]:
    """Pooled overall accuracy and mean IoU over a list of clouds."""
    c = net.config.num_classes
    confusion = np.zeros((c, c), dtype=np.int64)
    for cloud in clouds:
        pred = predict(net, cloud)
        idx = cloud.labels * c + pred
        confusion += np.bincount(idx, minlength=c * c).reshape(c, c)
    report = compute_metrics_from_confusion(confusion)
    return report[0], report[1]


def compute_metrics_from_confusion(confusion: np.ndarray) -> tuple[float, float]:
    total = confusion.sum()
    oa = float(np.trace(confusion) / total) if total else 0.0
    tp = np.diag(confusion).astype(np.float64)
    denom = confusion.sum(axis=0) + confusion.sum(axis=1) - tp
    defined = denom > 0
    iou = np.where(defined, tp / np.where(defined, denom, 1.0), np.nan)
    miou = float(np.nanmean(iou)) if defined.any() else 0.0
    return oa, miou


# ---------------------------------------------------------------------------
# config (de)serialization
# ---------------------------------------------------------------------------


def model_config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "num_points": cfg.num_points,
        "num_classes": cfg.num_classes,
        "feat_dim": cfg.feat_dim,
        "seed": cfg.seed,
        "reg_lambda": cfg.reg_lambda,
        "feature_scale": list(cfg.feature_scale) if cfg.feature_scale else None,
        "layers": [
            {
                "radii": [[r, k] for r, k in lc.radii],
                "ks": list(lc.ks),
                "d_conv": lc.d_conv,
                "gate_hidden": lc.gate_hidden,
                "sigma_geo": lc.sigma_geo,
                "sigma_feat": lc.sigma_feat,
                "sparsity_variant": lc.sparsity_variant,
            }
            for lc in cfg.layers
        ],
        "global_widths": list(cfg.global_widths),
        "global_fc": list(cfg.global_fc),
        "head_widths": list(cfg.head_widths),
        "switches": {
            "use_geometry": cfg.switches.use_geometry,
            "use_feature": cfg.switches.use_feature,
            "use_attention": cfg.switches.use_attention,
            "use_sparsity": cfg.switches.use_sparsity,
        },
    }


def model_config_from_dict(d: dict) -> ModelConfig:
    from mnew.config import ConfigError, check_keys

    check_keys(
        d,
        {
            "num_points", "num_classes", "feat_dim", "seed", "reg_lambda",
            "feature_scale", "layers", "global_widths", "global_fc",
            "head_widths", "switches",
        },
        "model",
    )
    base = ModelConfig()
    layers = d.get("layers")
    if layers is not None:
        parsed = []
        for i, ld in enumerate(layers):
            check_keys(
                ld,
                {"radii", "ks", "d_conv", "gate_hidden", "sigma_geo",
                 "sigma_feat", "sparsity_variant"},
                f"model.layers[{i}]",
            )
            ref = default_layer_configs()[min(i, 2)]
            parsed.append(
                MnewLayerConfig(
                    radii=tuple((float(r), int(k)) for r, k in ld.get("radii", ref.radii)),
                    ks=tuple(int(k) for k in ld.get("ks", ref.ks)),
                    d_conv=int(ld.get("d_conv", ref.d_conv)),
                    gate_hidden=int(ld.get("gate_hidden", ref.gate_hidden)),
                    sigma_geo=ld.get("sigma_geo"),
                    sigma_feat=ld.get("sigma_feat"),
                    sparsity_variant=ld.get("sparsity_variant", ref.sparsity_variant),
                )
            )
        if len(parsed) != 3:
            raise ConfigError(f"model.layers must list 3 stages, got {len(parsed)}")
        layers = tuple(parsed)
    sw = d.get("switches")
    if sw is not None:
        check_keys(
            sw,
            {"use_geometry", "use_feature", "use_attention", "use_sparsity"},
            "model.switches",
        )
        sw = AblationSwitches(
            use_geometry=bool(sw.get("use_geometry", True)),
            use_feature=bool(sw.get("use_feature", True)),
            use_attention=bool(sw.get("use_attention", True)),
            use_sparsity=bool(sw.get("use_sparsity", True)),
        )
    fs = d.get("feature_scale", base.feature_scale)
    return ModelConfig(
        num_points=int(d.get("num_points", base.num_points)),
        num_classes=int(d.get("num_classes", base.num_classes)),
        feat_dim=int(d.get("feat_dim", base.feat_dim)),
        seed=int(d.get("seed", base.seed)),
        reg_lambda=float(d.get("reg_lambda", base.reg_lambda)),
        feature_scale=tuple(fs) if fs is not None else None,
        layers=layers if layers is not None else base.layers,
        global_widths=tuple(d.get("global_widths", base.global_widths)),
        global_fc=tuple(d.get("global_fc", base.global_fc)),
        head_widths=tuple(d.get("head_widths", base.head_widths)),
        switches=sw if sw is not None else base.switches,
    )


def config_hash(cfg: ModelConfig) -> str:
    import hashlib

    blob = json.dumps(model_config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
