"""Command-line entry point.

Subcommands:

    gen      generate the synthetic benchmark suite
    train    train a network on a generated dataset
    eval     evaluate a checkpoint; writes metrics/bins/confusion CSVs + plot
    ablate   run the six-row switch matrix and write ablation.csv
    profile  dataset-only distance/sparsity histograms (no model needed)

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from mnew.ablation import run_ablation
from mnew.checkpoint import CheckpointError
from mnew.config import (
    ConfigError,
    RunConfig,
    load_run_config,
    run_config_to_dict,
)
from mnew.metrics import (
    binned_accuracy,
    compute_metrics,
    normalize_sparsity,
    point_sparsity,
)
from mnew.network import (
    MnewNetwork,
    TrainingDiverged,
    model_config_from_dict,
    predict,
    train,
)
from mnew.synthdata import CloudFormatError, load_dataset, make_benchmark

__all__ = ["main"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"usage error: {message}", file=sys.stderr)
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="mnew", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate the synthetic benchmark suite")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    g.add_argument("--frames-train", type=int, default=64, help="training frames (default 64)")
    g.add_argument("--frames-valid", type=int, default=16, help="validation frames (default 16)")
    g.add_argument("--points", type=int, default=2048, help="points per frame (default 2048)")
    g.set_defaults(func=_cmd_gen)

    t = sub.add_parser("train", help="train on a generated dataset")
    t.add_argument("--data", required=True, help="dataset directory (from gen)")
    t.add_argument("--out", required=True, help="output directory for checkpoint/logs")
    t.add_argument("--config", help="run-config JSON file")
    t.add_argument("--epochs", type=int, help="override train.epochs")
    t.add_argument("--seed", type=int, help="override train.seed and model.seed")
    t.add_argument("--lr", type=float, help="override train.lr")
    t.add_argument("--batch-size", type=int, help="override train.batch_size")
    t.add_argument("--target-oa", type=float, help="early-stop validation OA target")
    t.add_argument("--target-miou", type=float, help="early-stop validation mIoU target")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--ckpt", required=True, help="checkpoint file (best.ckpt)")
    e.add_argument("--out", required=True, help="directory for report files")
    e.add_argument("--config", help="run-config JSON (default: config.json next to ckpt)")
    e.add_argument("--split", default="valid", choices=("train", "valid"),
                   help="dataset split to evaluate (default valid)")
    e.add_argument("--ignore-class0", action="store_true",
                   help="exclude class 0 from the mIoU average only")
    e.set_defaults(func=_cmd_eval)

    a = sub.add_parser("ablate", help="run the six-row ablation matrix")
    a.add_argument("--data", required=True, help="dataset directory")
    a.add_argument("--out", required=True, help="directory for ablation.csv")
    a.add_argument("--config", help="run-config JSON file")
    a.add_argument("--seeds", default="0,1,2", help="comma-separated seeds (default 0,1,2)")
    a.add_argument("--epochs", type=int, help="override train.epochs for every row")
    a.set_defaults(func=_cmd_ablate)

    f = sub.add_parser("profile", help="dataset distance/sparsity histograms")
    f.add_argument("--data", required=True, help="dataset directory")
    f.add_argument("--out", required=True, help="directory for histogram CSVs")
    f.add_argument("--split", choices=("train", "valid"),
                   help="restrict to one split (default: all frames)")
    f.set_defaults(func=_cmd_profile)
    return p


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except _UsageError:
        return 1
    except SystemExit as exc:  # --help and friends
        code = exc.code or 0
        return int(code) if isinstance(code, int) else 1
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, CloudFormatError, TrainingDiverged,
            OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_gen(args) -> int:
    make_benchmark(
        args.out,
        seed=args.seed,
        n_train=args.frames_train,
        n_valid=args.frames_valid,
        n_points=args.points,
    )
    print(f"wrote {args.frames_train}+{args.frames_valid} frames to {args.out}")
    return 0


def _load_run_config(path) -> RunConfig:
    return load_run_config(path) if path else RunConfig()


def _cmd_train(args) -> int:
    cfg = _load_run_config(args.config)
    names, train_clouds = load_dataset(args.data, "train")
    _, valid_clouds = load_dataset(args.data, "valid")
    model = replace(
        cfg.model,
        num_classes=len(names),
        num_points=train_clouds[0].n_points,
        feat_dim=train_clouds[0].features.shape[1],
    )
    tc = cfg.train
    if args.epochs is not None:
        tc = replace(tc, epochs=args.epochs)
    if args.seed is not None:
        tc = replace(tc, seed=args.seed)
        model = replace(model, seed=args.seed)
    if args.lr is not None:
        tc = replace(tc, lr=args.lr)
    if args.batch_size is not None:
        tc = replace(tc, batch_size=args.batch_size)
    if args.target_oa is not None:
        tc = replace(tc, target_oa=args.target_oa)
    if args.target_miou is not None:
        tc = replace(tc, target_miou=args.target_miou)
    result = train(train_clouds, valid_clouds, model, tc, out_dir=args.out)
    print(
        f"best epoch {result.best_epoch}: OA {result.best_oa:.4f}, "
        f"mIoU {result.best_miou:.4f} -> {result.checkpoint}"
    )
    return 0


def _cmd_eval(args) -> int:
    ckpt = Path(args.ckpt)
    if args.config:
        model = _load_run_config(args.config).model
    else:
        sibling = ckpt.parent / "config.json"
        if not sibling.exists():
            raise ConfigError(
                f"no --config given and {sibling} not found next to the checkpoint"
            )
        model = model_config_from_dict(json.loads(sibling.read_text()))
    names, clouds = load_dataset(args.data, args.split)
    net = MnewNetwork(model)
    net.load(ckpt)

    preds, truths, xyzs, sparsity = [], [], [], []
    for cloud in clouds:
        preds.append(predict(net, cloud))
        truths.append(cloud.labels)
        xyzs.append(cloud.xyz)
        sparsity.append(point_sparsity(cloud.xyz))
    pred = np.concatenate(preds)
    truth = np.concatenate(truths)
    xyz = np.concatenate(xyzs)
    sparse = np.concatenate(sparsity)

    report = compute_metrics(pred, truth, len(names), ignore_class0=args.ignore_class0)
    report.distance_bins, report.sparsity_bins = binned_accuracy(pred, truth, xyz, sparse)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", report, names)
    write_bins_csv(out / "bins_distance.csv", report.distance_bins)
    write_bins_csv(out / "bins_sparsity.csv", report.sparsity_bins)
    write_confusion_csv(out / "confusion.csv", report.confusion, names)
    _plot_report(out / "report.png", report, xyz, sparse)
    print(f"OA {report.oa:.4f}, mIoU {report.miou:.4f} -> {out}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load_run_config(args.config)
    names, train_clouds = load_dataset(args.data, "train")
    _, valid_clouds = load_dataset(args.data, "valid")
    model = replace(
        cfg.model,
        num_classes=len(names),
        num_points=train_clouds[0].n_points,
        feat_dim=train_clouds[0].features.shape[1],
    )
    tc = cfg.train if args.epochs is None else replace(cfg.train, epochs=args.epochs)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(train_clouds, valid_clouds, model, tc, seeds,
                        out_csv=out / "ablation.csv")
    for r in rows:
        note = f"  [{r['error']}]" if r["error"] else ""
        print(f"{r['config']:>20}: OA {r['mean_oa']:.4f}  mIoU {r['mean_miou']:.4f}{note}")
    return 0


def _cmd_profile(args) -> int:
    _, clouds = load_dataset(args.data, args.split)
    xyz = np.concatenate([c.xyz for c in clouds])
    sparse = np.concatenate([point_sparsity(c.xyz) for c in clouds])
    distance = np.sqrt((xyz**2).sum(axis=1))

    from mnew.metrics import DISTANCE_EDGES, SPARSITY_BIN_COUNT, _bin_stats

    ones = np.ones_like(distance)
    dist_bins = _bin_stats(distance, ones, DISTANCE_EDGES)
    sp_bins = _bin_stats(
        normalize_sparsity(sparse), ones, np.linspace(0.0, 1.0, SPARSITY_BIN_COUNT + 1)
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, bins in (("distance_hist.csv", dist_bins), ("sparsity_hist.csv", sp_bins)):
        with open(out / name, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("bin_lower", "count"))
            for b in bins:
                writer.writerow((f"{b.lower:.6f}", b.count))
    print(f"profiled {len(clouds)} frames, {distance.size} points -> {out}")
    return 0


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------


def write_metrics_csv(path, report, class_names) -> None:
    """Schema: metric,value — OA, mIoU, then one iou_<class> row per class
    (undefined IoUs written as nan)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("metric", "value"))
        writer.writerow(("oa", f"{report.oa:.10f}"))
        writer.writerow(("miou", f"{report.miou:.10f}"))
        for name, iou, defined in zip(class_names, report.per_class_iou, report.iou_defined):
            writer.writerow((f"iou_{name}", f"{iou:.10f}" if defined else "nan"))


def write_bins_csv(path, bins) -> None:
    """Schema: bin_lower,count,oa (oa is nan for empty bins)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("bin_lower", "count", "oa"))
        for b in bins:
            oa = "nan" if np.isnan(b.oa) else f"{b.oa:.10f}"
            writer.writerow((f"{b.lower:.6f}", b.count, oa))


def write_confusion_csv(path, confusion, class_names) -> None:
    """C x C integer grid, truth rows by prediction columns, named both ways."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("truth\\pred",) + tuple(class_names))
        for name, row in zip(class_names, confusion):
            writer.writerow((name,) + tuple(int(v) for v in row))


def _plot_report(path, report, xyz, sparsity) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    distance = np.sqrt((xyz**2).sum(axis=1))
    norm = normalize_sparsity(sparsity)
    fig, axes = plt.subplots(2, 2, figsize=(10, 7))

    axes[0, 0].hist(distance, bins=24, color="#4878d0")
    axes[0, 0].set_title("points by distance (m)")
    _bin_curve(axes[0, 1], report.distance_bins, "OA by distance (m)")
    axes[1, 0].hist(norm, bins=20, color="#4878d0")
    axes[1, 0].set_title("points by normalized sparsity")
    _bin_curve(axes[1, 1], report.sparsity_bins, "OA by normalized sparsity")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _bin_curve(ax, bins, title) -> None:
    xs = [b.lower for b in bins if b.count > 0]
    ys = [b.oa for b in bins if b.count > 0]
    ax.plot(xs, ys, marker="o", color="#d65f5f")
    ax.set_ylim(0.0, 1.05)
    ax.set_title(title)


if __name__ == "__main__":
    sys.exit(main())
