"""Ablation sweeps: loss toggles, anchor/contrastive sets, embedding depth, projector.

Every arm runs with the same seed list so rows are paired comparisons.
Failed runs are recorded with their error and the sweep carries on.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .corocl import ablation_variants
from .errors import RplError
from .segnet import SegNet
from .synthdata import DatasetConfig
from .training import EvalResult, TrainConfig, evaluate, train_rpl

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("fpr95", "auprc", "auroc", "f1_star", "energy_smd")


@dataclass(frozen=True)
class Arm:
    name: str
    overrides: dict = field(default_factory=dict)  # merged into the base TrainConfig dict
    trained: bool = True  # False: score with the frozen segnet's own energy


def _loss_toggles(pe=False, ds=False, corocl=False, hinge=False, direct=False) -> dict:
    return {"use_pe": pe, "use_ds": ds, "use_corocl": corocl, "use_hinge": hinge, "direct": direct}


def loss_toggle_arms() -> list[Arm]:
    """Loss-toggle rows in table order; the entropy-maximisation row is not implemented."""
    return [
        Arm("frozen-energy", trained=False),
        Arm("hinge", _loss_toggles(hinge=True)),
        Arm("PE", _loss_toggles(pe=True)),
        Arm("PE+DS", _loss_toggles(pe=True, ds=True)),
        Arm("PE+DS+CoroCL", _loss_toggles(pe=True, ds=True, corocl=True)),
        Arm("direct(PE)", _loss_toggles(pe=True, direct=True)),
    ]


def anchor_set_arms() -> list[Arm]:
    arms = []
    for v in ablation_variants():
        sampling = {"anchor_source": list(v.anchor_source), "contrastive_source": list(v.contrastive_source), "name": v.name}
        arms.append(Arm(v.name, {**_loss_toggles(pe=True, ds=True, corocl=True), "sampling": sampling}))
    return arms


def depth_arms(depths: Sequence[int] = (16, 32, 48, 64)) -> list[Arm]:
    """Embedding-depth sweep; 48 is the head-input width of the default segnet."""
    return [Arm(f"R={d}", {**_loss_toggles(pe=True, ds=True, corocl=True), "rpl": {"embed_dim": d}}) for d in depths]


def projector_arms() -> list[Arm]:
    full = _loss_toggles(pe=True, ds=True, corocl=True)
    return [
        Arm("2 layers (w/o BN)", {**full, "rpl": {"proj_layers": 2, "proj_bn": False}}),
        Arm("2 layers (w/ BN)", {**full, "rpl": {"proj_layers": 2, "proj_bn": True}}),
        Arm("single-layer", {**full, "rpl": {"proj_layers": 1}}),
    ]


SUITES: dict[str, Callable[[], list[Arm]]] = {
    "loss-toggles": loss_toggle_arms,
    "anchor-sets": anchor_set_arms,
    "depth": depth_arms,
    "projector": projector_arms,
}


@dataclass
class AblationRun:
    arm: str
    seed: int
    metrics: dict | None
    error: str | None = None
    result: EvalResult | None = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.error is None


def arm_config(base: TrainConfig, arm: Arm, seed: int) -> TrainConfig:
    d = base.to_dict()
    for k, v in arm.overrides.items():
        if isinstance(v, dict):
            d[k] = {**d[k], **v}
        else:
            d[k] = v
    d["seed"] = seed
    return TrainConfig.from_dict(d)


def run_suite(
    seg: SegNet,
    data: dict[str, list],
    dataset_cfg: DatasetConfig,
    base: TrainConfig,
    arms: Iterable[Arm],
    seeds: Sequence[int],
    out_dir: str | Path | None = None,
    keep_results: bool = False,
) -> list[AblationRun]:
    runs: list[AblationRun] = []
    for arm in arms:
        for seed in seeds:
            runs.append(_run_arm(seg, data, dataset_cfg, base, arm, seed, out_dir, keep_results))
            r = runs[-1]
            logger.info("arm %s seed %d: %s", arm.name, seed, r.metrics if r.ok else f"FAILED {r.error}")
    return runs


def _run_arm(seg, data, dataset_cfg, base, arm: Arm, seed: int, out_dir, keep_results) -> AblationRun:
    try:
        cfg = arm_config(base, arm, seed)
        if not arm.trained:
            res = evaluate(seg, None, data, dataset_cfg, cfg.smooth)
        else:
            run_dir = None
            if out_dir is not None:
                run_dir = Path(out_dir) / "runs" / f"{_slug(arm.name)}-seed{seed}"
            rec = train_rpl(seg, data, dataset_cfg, cfg, run_dir=run_dir, evaluate_splits=False)
            res = evaluate(seg, rec.rpl, data, dataset_cfg, cfg.smooth, direct=cfg.direct)
        from .metrics import standardized_mean_difference

        metrics = res.report.to_dict()
        metrics["energy_smd"] = standardized_mean_difference(res.inlier_energy, res.outlier_energy)
        return AblationRun(arm.name, seed, metrics, result=res if keep_results else None)
    except (RplError, ValueError, RuntimeError, ArithmeticError) as exc:
        logger.warning("arm %s seed %d failed: %s", arm.name, seed, exc)
        return AblationRun(arm.name, seed, None, error=f"{type(exc).__name__}: {exc}")


def summarise(runs: Sequence[AblationRun], arm_order: Sequence[str] | None = None) -> list[dict]:
    """Per-arm medians over successful seeds, in ``arm_order`` (default: first appearance)."""
    order = list(arm_order) if arm_order is not None else list(dict.fromkeys(r.arm for r in runs))
    rows = []
    for name in order:
        mine = [r for r in runs if r.arm == name]
        ok = [r for r in mine if r.ok]
        row = {"name": name, "n_seeds": len(mine), "n_ok": len(ok)}
        for col in METRIC_COLUMNS:
            vals = [r.metrics[col] for r in ok if r.metrics.get(col) is not None]
            row[col] = float(np.median(vals)) if vals else None
        errors = sorted({r.error for r in mine if not r.ok})
        row["errors"] = "; ".join(errors)
        rows.append(row)
    return rows


def write_table(rows: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["name", "n_seeds", "n_ok", *METRIC_COLUMNS, "errors"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in rows:
            w.writerow({c: _fmt(row.get(c)) for c in cols})
    return path


def write_runs(runs: Sequence[AblationRun], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in runs:
            fh.write(json.dumps({"arm": r.arm, "seed": r.seed, "metrics": r.metrics, "error": r.error}) + "\n")
    return path


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return "" if v is None else v


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "-" for c in name).strip("-").lower()


def replace_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return dataclasses.replace(cfg, seed=seed)
