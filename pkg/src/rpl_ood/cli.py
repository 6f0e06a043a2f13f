"""Command-line entry point.

Exit codes: 0 success, 1 other failure, 2 configuration error, 3 invariant
violation.  Relative output paths resolve under ``$RPL_OUTPUT_ROOT``
(default: the current directory).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, InvariantViolation, RplError

OUTPUT_ROOT_ENV = "RPL_OUTPUT_ROOT"
EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_INVARIANT = 0, 1, 2, 3

logger = logging.getLogger("rpl_ood")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "."))


def resolve_out(path: str | Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else output_root() / p


# --- flags -------------------------------------------------------------------

def _train_flag_fields():
    from .training import TrainConfig

    return [f for f in dataclasses.fields(TrainConfig) if f.type in ("int", "float", "str", "bool", int, float, str, bool)]


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training (mirror TrainConfig fields; override the config file)")
    for f in _train_flag_fields():
        flag = "--" + f.name.replace("_", "-")
        kind = f.type if isinstance(f.type, str) else f.type.__name__
        if kind == "bool":
            g.add_argument(flag, dest=f"train__{f.name}", action=argparse.BooleanOptionalAction, default=None)
        else:
            g.add_argument(flag, dest=f"train__{f.name}", type={"int": int, "float": float, "str": str}[kind], default=None)


def _add_common(p: argparse.ArgumentParser, train_flags: bool = False) -> None:
    p.add_argument("--config", help="INI experiment config")
    p.add_argument(
        "--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override any config value"
    )
    if train_flags:
        _add_train_flags(p)


def _experiment(args):
    from .config import load_config, merge, parse_overrides

    overrides = parse_overrides(args.set)
    flags = {k.split("__", 1)[1]: v for k, v in vars(args).items() if k.startswith("train__") and v is not None}
    if flags:
        overrides = merge(overrides, {"train": flags})
    return load_config(args.config, overrides)


def _load_data(path):
    from .synthdata import read_dataset

    path = Path(path)
    if not (path / "manifest.json").is_file():
        raise ConfigError(f"{path} is not a dataset directory (run gen-data first)")
    return read_dataset(path)


# --- subcommands -------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .synthdata import generate_all, write_dataset

    exp = _experiment(args)
    out = resolve_out(args.out)
    write_dataset(out, exp.dataset, generate_all(exp.dataset))
    print(f"dataset written to {out}")
    return EXIT_OK


def cmd_train_seg(args) -> int:
    from .metrics import miou
    from .segnet import build_segnet, pretrain_segnet, save_segnet
    from .training import closed_set_maps

    exp = _experiment(args)
    dcfg, data = _load_data(resolve_out(args.data))
    net, losses = pretrain_segnet(build_segnet(exp.arch), data["inlier_train"], exp.pretrain, dcfg.crop_size)
    out = resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_segnet(net, out)
    val = data["inlier_val"]
    score = miou(np.stack(closed_set_maps(net, val)), np.stack([s.label for s in val]), dcfg.num_classes)
    print(f"segnet saved to {out}; final loss {losses[-1] if losses else float('nan'):.4f}; inlier_val mIoU {score:.4f}")
    return EXIT_OK


def cmd_train_rpl(args) -> int:
    from .segnet import load_segnet
    from .training import train_rpl

    exp = _experiment(args)
    dcfg, data = _load_data(resolve_out(args.data))
    seg = load_segnet(resolve_out(args.seg))
    run_dir = resolve_out(args.run_dir)
    rec = train_rpl(seg, data, dcfg, exp.train, run_dir=run_dir)
    _print_metrics_csv({"oe_val": rec.metrics["oe_val"]})
    print(f"run written to {run_dir}", file=sys.stderr)
    return EXIT_OK


def cmd_replay(args) -> int:
    from .segnet import load_segnet
    from .training import load_run_config, replay

    run_dir = resolve_out(args.run_dir)
    config = load_run_config(run_dir)
    _, data = _load_data(resolve_out(args.data))
    seg = load_segnet(resolve_out(args.seg))
    rec = replay(seg, data, config)
    recorded = json.loads((run_dir / "metrics.json").read_text())
    same = recorded == json.loads(json.dumps(rec.metrics))
    print(f"replay {'matches' if same else 'DIFFERS FROM'} recorded metrics")
    if not same:
        raise InvariantViolation("replayed metrics differ from the recorded run")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .inference import SmoothConfig
    from .rplmodule import load_rpl
    from .segnet import load_segnet
    from .training import evaluate

    exp = _experiment(args)
    dcfg, data = _load_data(resolve_out(args.data))
    seg = load_segnet(resolve_out(args.seg))
    rpl = load_rpl(resolve_out(args.rpl), seg) if args.rpl else None
    smooth = SmoothConfig(exp.train.smooth.kernel_size, exp.train.smooth.sigma)
    res = evaluate(seg, rpl, data, dcfg, smooth, split=args.split)
    metrics = {args.split: res.report.to_dict()}
    _print_metrics_csv(metrics)
    if args.out:
        out = resolve_out(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        _write_metrics_csv(metrics, out)
    return EXIT_OK


def cmd_predict(args) -> int:
    from PIL import Image

    from .inference import SmoothConfig, export_prediction, predict
    from .rplmodule import load_rpl
    from .segnet import images_to_tensor, load_segnet

    exp = _experiment(args)
    seg = load_segnet(resolve_out(args.seg))
    rpl = load_rpl(resolve_out(args.rpl), seg) if args.rpl else None
    out = resolve_out(args.out)
    for path in args.images:
        try:
            arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
        except OSError as exc:
            raise InputError(f"cannot read image {path}: {exc}") from exc
        pred = predict(seg, rpl, images_to_tensor([arr.astype(np.float32)]), exp.train.smooth)
        paths = export_prediction(pred, out, Path(path).stem, meta={"source": str(path)})
        print(paths["scores"])
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import SUITES, run_suite, summarise, write_runs, write_table
    from .plotting import plot_energy_histograms, plot_metric_bars
    from .segnet import load_segnet

    exp = _experiment(args)
    dcfg, data = _load_data(resolve_out(args.data))
    seg = load_segnet(resolve_out(args.seg))
    seeds = [int(s) for s in args.seeds.split(",")]
    arms = SUITES[args.suite]()
    out = resolve_out(args.out)
    runs = run_suite(seg, data, dcfg, exp.train, arms, seeds, out_dir=out, keep_results=True)
    rows = summarise(runs, [a.name for a in arms])
    write_table(rows, out / f"{args.suite}.csv")
    write_runs(runs, out / f"{args.suite}_runs.jsonl")
    for metric in ("fpr95", "auprc", "auroc"):
        plot_metric_bars(rows, metric, out / f"{args.suite}_{metric}.png")
    if args.suite == "loss-toggles":
        first = {r.arm: r.result for r in runs if r.ok and r.seed == seeds[0]}
        pair = {k: (first[k].inlier_energy, first[k].outlier_energy) for k in ("hinge", "PE") if k in first}
        if pair:
            plot_energy_histograms(pair, out / "energy_hist_pe_vs_hinge.png")
    with open(out / f"{args.suite}.csv") as fh:
        sys.stdout.write(fh.read())
    return EXIT_OK


def cmd_plot(args) -> int:
    from .inference import predict_batch
    from .plotting import plot_energy_histograms, save_heatmap, save_overlay_panel
    from .rplmodule import load_rpl
    from .segnet import images_to_tensor, load_segnet
    from .training import evaluate

    exp = _experiment(args)
    dcfg, data = _load_data(resolve_out(args.data))
    seg = load_segnet(resolve_out(args.seg))
    rpl = load_rpl(resolve_out(args.rpl), seg)
    out = resolve_out(args.out)
    samples = data[args.split][: args.n]
    preds = predict_batch(seg, rpl, images_to_tensor([s.image for s in samples]), exp.train.smooth)
    for i, (s, p) in enumerate(zip(samples, preds)):
        save_heatmap(p.anomaly_scores.smoothed, out / f"heatmap_{i:03d}.png")
        save_overlay_panel(s.image, p.anomaly_scores.smoothed, getattr(s, "mask", None), out / f"panel_{i:03d}.png")
    arms = {"adapter": evaluate(seg, rpl, data, dcfg, exp.train.smooth, split=args.split)}
    if args.compare_rpl:
        arms["comparison"] = evaluate(seg, load_rpl(resolve_out(args.compare_rpl), seg), data, dcfg, exp.train.smooth, split=args.split)
    hists = plot_energy_histograms({k: (v.inlier_energy, v.outlier_energy) for k, v in arms.items()}, out / "energy_hist.png")
    with open(out / "energy_hist.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "bin_lo", "bin_hi", "inlier_count", "outlier_count"])
        for name, h in hists.items():
            for j in range(len(h.inlier_counts)):
                w.writerow([name, f"{h.edges[j]:.6f}", f"{h.edges[j + 1]:.6f}", int(h.inlier_counts[j]), int(h.outlier_counts[j])])
    print(f"figures written to {out}")
    return EXIT_OK


METRIC_CSV_COLUMNS = ["split", "fpr95", "auprc", "auroc", "f1_star", "miou", "n_pixels", "n_outlier"]


def _metric_rows(metrics: dict):
    yield METRIC_CSV_COLUMNS
    for split, m in metrics.items():
        yield [split] + [m.get(c) for c in METRIC_CSV_COLUMNS[1:]]


def _print_metrics_csv(metrics: dict) -> None:
    csv.writer(sys.stdout).writerows(_metric_rows(metrics))


def _write_metrics_csv(metrics: dict, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(_metric_rows(metrics))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rpl-ood", description="Residual pattern learning for pixel-wise OoD detection")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    _add_common(p)
    p.add_argument("--out", default="data")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-seg", help="pretrain and freeze the closed-set segnet")
    _add_common(p)
    p.add_argument("--data", default="data")
    p.add_argument("--out", default="segnet.npz")
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("train-rpl", help="train the residual adapter against a frozen segnet")
    _add_common(p, train_flags=True)
    p.add_argument("--data", default="data")
    p.add_argument("--seg", default="segnet.npz")
    p.add_argument("--run-dir", default="runs/rpl")
    p.set_defaults(func=cmd_train_rpl)

    p = sub.add_parser("replay", help="re-run a recorded training run and compare metrics")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--data", default="data")
    p.add_argument("--seg", default="segnet.npz")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("eval", help="pixel-level metrics on a split (CSV to stdout)")
    _add_common(p, train_flags=True)
    p.add_argument("--data", default="data")
    p.add_argument("--seg", default="segnet.npz")
    p.add_argument("--rpl", help="adapter checkpoint; omit to score the frozen energy")
    p.add_argument("--split", default="oe_val")
    p.add_argument("--out", help="also write the CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="class map and anomaly scores for image files")
    _add_common(p, train_flags=True)
    p.add_argument("images", nargs="+")
    p.add_argument("--seg", default="segnet.npz")
    p.add_argument("--rpl")
    p.add_argument("--out", default="predictions")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="run an ablation suite and emit a CSV table plus figures")
    _add_common(p, train_flags=True)
    p.add_argument("--suite", choices=["loss-toggles", "anchor-sets", "depth", "projector"], default="loss-toggles")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--data", default="data")
    p.add_argument("--seg", default="segnet.npz")
    p.add_argument("--out", default="ablation")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="heatmaps and energy histograms for a trained adapter")
    _add_common(p, train_flags=True)
    p.add_argument("--data", default="data")
    p.add_argument("--seg", default="segnet.npz")
    p.add_argument("--rpl", required=True)
    p.add_argument("--compare-rpl", help="second adapter (e.g. the hinge arm) for the histogram")
    p.add_argument("--split", default="oe_val")
    p.add_argument("-n", type=int, default=8, help="number of heatmaps")
    p.add_argument("--out", default="figures")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ConfigError, InputError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RplError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
