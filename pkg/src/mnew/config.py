"""Run configuration: one JSON document covering the model, the training
schedule, dataset paths and evaluation knobs.

Unknown keys are rejected at every level, so typos fail loudly instead of
silently falling back to defaults.  Every key has a default; a missing
section or file simply means "all defaults".  The full schema with defaults
is documented in the README and can be produced with
``json.dumps(run_config_to_dict(RunConfig()), indent=2)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from mnew.metrics import DISTANCE_EDGES, SPARSITY_BIN_COUNT
from mnew.network import (
    ModelConfig,
    TrainConfig,
    model_config_from_dict,
    model_config_to_dict,
)

__all__ = ["ConfigError", "EvalConfig", "RunConfig", "check_keys",
           "load_run_config", "run_config_from_dict", "run_config_to_dict"]


class ConfigError(ValueError):
    """Bad configuration file content."""


def check_keys(d: dict, allowed: set, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown config key(s) under {where}: {', '.join(unknown)}")


@dataclass(frozen=True)
class EvalConfig:
    ignore_class0: bool = False
    distance_edges: tuple = DISTANCE_EDGES
    sparsity_bin_count: int = SPARSITY_BIN_COUNT


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data_dir: str | None = None
    out_dir: str | None = None


def run_config_from_dict(d: dict) -> RunConfig:
    check_keys(d, {"model", "train", "eval", "data", "output"}, "top level")
    model = model_config_from_dict(d.get("model", {}))

    t = d.get("train", {})
    check_keys(
        t,
        {"epochs", "batch_size", "lr", "momentum", "lr_halve_every", "seed",
         "target_oa", "target_miou", "target_train_oa", "class_weighting"},
        "train",
    )
    base_t = TrainConfig()
    train = TrainConfig(
        epochs=int(t.get("epochs", base_t.epochs)),
        batch_size=int(t.get("batch_size", base_t.batch_size)),
        lr=float(t.get("lr", base_t.lr)),
        momentum=float(t.get("momentum", base_t.momentum)),
        lr_halve_every=int(t.get("lr_halve_every", base_t.lr_halve_every)),
        seed=int(t.get("seed", base_t.seed)),
        target_oa=_opt_float(t.get("target_oa")),
        target_miou=_opt_float(t.get("target_miou")),
        target_train_oa=_opt_float(t.get("target_train_oa")),
        class_weighting=t.get("class_weighting"),
    )

    e = d.get("eval", {})
    check_keys(e, {"ignore_class0", "distance_edges", "sparsity_bin_count"}, "eval")
    base_e = EvalConfig()
    evaluation = EvalConfig(
        ignore_class0=bool(e.get("ignore_class0", base_e.ignore_class0)),
        distance_edges=tuple(e.get("distance_edges", base_e.distance_edges)),
        sparsity_bin_count=int(e.get("sparsity_bin_count", base_e.sparsity_bin_count)),
    )

    data = d.get("data", {})
    check_keys(data, {"dir"}, "data")
    output = d.get("output", {})
    check_keys(output, {"dir"}, "output")
    return RunConfig(
        model=model,
        train=train,
        eval=evaluation,
        data_dir=data.get("dir"),
        out_dir=output.get("dir"),
    )


def _opt_float(v):
    return None if v is None else float(v)


def run_config_to_dict(cfg: RunConfig) -> dict:
    return {
        "model": model_config_to_dict(cfg.model),
        "train": {
            "epochs": cfg.train.epochs,
            "batch_size": cfg.train.batch_size,
            "lr": cfg.train.lr,
            "momentum": cfg.train.momentum,
            "lr_halve_every": cfg.train.lr_halve_every,
            "seed": cfg.train.seed,
            "target_oa": cfg.train.target_oa,
            "target_miou": cfg.train.target_miou,
            "target_train_oa": cfg.train.target_train_oa,
            "class_weighting": cfg.train.class_weighting,
        },
        "eval": {
            "ignore_class0": cfg.eval.ignore_class0,
            "distance_edges": list(cfg.eval.distance_edges),
            "sparsity_bin_count": cfg.eval.sparsity_bin_count,
        },
        "data": {"dir": cfg.data_dir},
        "output": {"dir": cfg.out_dir},
    }


def load_run_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return run_config_from_dict(doc)
