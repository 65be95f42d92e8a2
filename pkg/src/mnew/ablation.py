"""Ablation runner: the six-row switch matrix over domains and gates.

Rows: coordinate domain only, feature domain only, both domains, both plus
distance/similarity attention, both plus sparsity weighting, and the full
model.  Each row trains fresh networks (one per seed) and reports the mean
best-validation OA / mIoU across seeds.
"""

from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path

import numpy as np

from mnew.layer import AblationSwitches
from mnew.network import ModelConfig, TrainConfig, train

__all__ = ["ABLATION_ROWS", "ABLATION_CSV_HEADER", "run_ablation", "write_ablation_csv"]

ABLATION_ROWS = (
    ("geo", AblationSwitches(True, False, False, False)),
    ("feat", AblationSwitches(False, True, False, False)),
    ("geo+feat", AblationSwitches(True, True, False, False)),
    ("geo+feat+att", AblationSwitches(True, True, True, False)),
    ("geo+feat+sparsity", AblationSwitches(True, True, False, True)),
    ("full", AblationSwitches(True, True, True, True)),
)

ABLATION_CSV_HEADER = (
    "config",
    "use_geometry",
    "use_feature",
    "use_attention",
    "use_sparsity",
    "seeds",
    "mean_oa",
    "mean_miou",
    "error",
)


def run_ablation(
    train_clouds,
    valid_clouds,
    model_config: ModelConfig,
    train_config: TrainConfig,
    seeds,
    out_csv=None,
) -> list[dict]:
    """Train/evaluate every switch row for every seed.

    A row whose training fails (e.g. divergence) is annotated with the error
    and keeps its place: the CSV always has exactly six data rows.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("run_ablation needs at least one seed")
    rows = []
    for name, switches in ABLATION_ROWS:
        oas, mious, error = [], [], ""
        for seed in seeds:
            cfg = replace(model_config, switches=switches, seed=seed)
            tcfg = replace(train_config, seed=seed)
            try:
                result = train(train_clouds, valid_clouds, cfg, tcfg, out_dir=None)
            except Exception as exc:  # propagate per row, keep the table whole
                error = f"{type(exc).__name__}: {exc}"
                break
            oas.append(result.best_oa)
            mious.append(result.best_miou)
        rows.append(
            {
                "config": name,
                "use_geometry": switches.use_geometry,
                "use_feature": switches.use_feature,
                "use_attention": switches.use_attention,
                "use_sparsity": switches.use_sparsity,
                "seeds": len(oas),
                "mean_oa": float(np.mean(oas)) if oas else float("nan"),
                "mean_miou": float(np.mean(mious)) if mious else float("nan"),
                "error": error,
            }
        )
    if out_csv is not None:
        write_ablation_csv(out_csv, rows)
    return rows


def write_ablation_csv(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ABLATION_CSV_HEADER)
        for r in rows:
            writer.writerow(
                [
                    r["config"],
                    int(r["use_geometry"]),
                    int(r["use_feature"]),
                    int(r["use_attention"]),
                    int(r["use_sparsity"]),
                    r["seeds"],
                    _fmt(r["mean_oa"]),
                    _fmt(r["mean_miou"]),
                    r["error"],
                ]
            )


def _fmt(v: float) -> str:
    return "nan" if np.isnan(v) else f"{v:.6f}"
