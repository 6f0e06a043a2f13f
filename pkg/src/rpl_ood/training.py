"""Adapter training loop, evaluation and run records."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .corocl import SamplingConfig, corocl_loss, sample_embeddings
from .errors import ConfigError, InvariantViolation, TrainingError
from .inference import SmoothConfig, predict_batch
from .losses import LossConfig, LossReport, energy, rpl_loss
from .metrics import MetricsReport, ScoredPixels, anomaly_report, miou
from .rplmodule import RplConfig, RplModule, build_rpl, forward_direct, forward_residual, project_embeddings, save_rpl
from .segnet import SegNet, forward_closed_set, images_to_tensor
from .synthdata import DatasetConfig, sample_oe_batch

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 0.01
    head_lr_multiplier: float = 10.0
    poly_power: float = 0.9
    batch_size: int = 8
    momentum: float = 0.9
    weight_decay: float = 0.0
    optimizer: str = "sgd"
    seed: int = 0
    use_pe: bool = True
    use_ds: bool = True
    use_corocl: bool = True
    use_hinge: bool = False
    direct: bool = False
    loss: LossConfig = LossConfig()
    sampling: SamplingConfig = SamplingConfig()
    smooth: SmoothConfig = SmoothConfig()
    rpl: RplConfig = RplConfig()

    def validate(self) -> "TrainConfig":
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.use_pe and self.use_hinge:
            raise ConfigError("positive energy and hinge energy losses are alternative outlier terms")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        self.loss.validate()
        self.sampling.validate()
        self.smooth.validate()
        return self

    @property
    def outlier_term(self) -> str:
        return "pe" if self.use_pe else "hinge" if self.use_hinge else "none"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sampling"]["anchor_source"] = list(self.sampling.anchor_source)
        d["sampling"]["contrastive_source"] = list(self.sampling.contrastive_source)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        nested = {"loss": LossConfig, "sampling": SamplingConfig, "smooth": SmoothConfig, "rpl": RplConfig}
        for key, sub in nested.items():
            if key in d and isinstance(d[key], dict):
                kw = dict(d[key])
                for k in ("anchor_source", "contrastive_source"):
                    if k in kw:
                        kw[k] = tuple(kw[k]) if not isinstance(kw[k], str) else (kw[k],)
                d[key] = sub(**kw)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d).validate()


def poly_lr(base_lr: float, step: int, max_steps: int, power: float = 0.9) -> float:
    return base_lr * (1.0 - step / max_steps) ** power


@dataclass
class EvalResult:
    report: MetricsReport
    inlier_energy: np.ndarray
    outlier_energy: np.ndarray
    class_maps: list[np.ndarray] = field(repr=False, default_factory=list)


@dataclass
class RunRecord:
    config: dict
    log: list[dict]
    rpl: RplModule
    metrics: dict[str, dict]
    env: dict
    run_dir: Path | None = None

    def final_metrics(self, split: str = "oe_val") -> dict:
        return self.metrics[split]


def _env_stamp(seed: int) -> dict:
    return {
        "seed": seed,
        "torch": torch.__version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "threads": torch.get_num_threads(),
    }


def _masks(samples) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.int64))


class _RunLock:
    """Exclusive marker file so two processes never write one run directory."""

    def __init__(self, run_dir: Path):
        self.path = run_dir / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise ConfigError(f"run directory {self.path.parent} is in use by another process") from exc
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        os.close(self.fd)
        self.path.unlink(missing_ok=True)


def train_rpl(
    seg: SegNet,
    data: dict[str, list],
    dataset_cfg: DatasetConfig,
    cfg: TrainConfig,
    run_dir: str | Path | None = None,
    evaluate_splits: bool = True,
) -> RunRecord:
    """Optimise adapter and projector only, with the frozen segnet checked every step."""
    cfg.validate()
    if seg.checksum is None:
        raise InvariantViolation("segnet must be frozen (checksum recorded) before adapter training")
    if not seg.verify_frozen():
        raise InvariantViolation("segnet parameters differ from the recorded checksum")
    run_dir = Path(run_dir) if run_dir is not None else None
    lock = _RunLock(run_dir) if run_dir is not None else None
    if lock is not None:
        lock.__enter__()
    try:
        return _train(seg, data, dataset_cfg, cfg, run_dir, evaluate_splits)
    finally:
        if lock is not None:
            lock.__exit__(None, None, None)


def _train(seg, data, dataset_cfg, cfg: TrainConfig, run_dir, evaluate_splits) -> RunRecord:
    rng = np.random.default_rng([cfg.seed, 17])
    rpl = build_rpl(seg, dataclasses.replace(cfg.rpl, seed=cfg.seed))
    rpl.train()
    head_params = list(rpl.head.parameters()) + list(rpl.proj.parameters())
    groups = [
        {"params": list(rpl.main.parameters()), "lr": cfg.lr, "base_lr": cfg.lr},
        {"params": head_params, "lr": cfg.lr * cfg.head_lr_multiplier, "base_lr": cfg.lr * cfg.head_lr_multiplier},
    ]
    if cfg.optimizer == "sgd":
        opt = torch.optim.SGD(groups, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    else:
        opt = torch.optim.Adam(groups, lr=cfg.lr, weight_decay=cfg.weight_decay)

    inliers, outliers = data["inlier_train"], data["outlier_train"]
    log: list[dict] = []
    log_fh = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(run_dir / "train_log.jsonl", "w")
    try:
        for step in range(cfg.steps):
            for g in opt.param_groups:
                g["lr"] = poly_lr(g["base_lr"], step, cfg.steps, cfg.poly_power)
            oe, vanilla = sample_oe_batch(inliers, outliers, dataset_cfg, cfg.batch_size, rng)
            x = images_to_tensor([s.image for s in oe])
            mask = _masks(oe)
            closed = forward_closed_set(seg, x)
            if cfg.direct:
                logits_hat = forward_direct(seg, rpl, x, closed=closed)
                ra = rpl.main(closed.z) if cfg.use_corocl else None
            else:
                fwd = forward_residual(seg, rpl, x, closed=closed)
                logits_hat, ra = fwd.logits, fwd.residual_features
            parts = rpl_loss(logits_hat, closed.logits, mask, cfg.loss, use_ds=cfg.use_ds, outlier_term=cfg.outlier_term)
            total = parts["l_rpl"]
            l_cl = torch.zeros((), dtype=total.dtype)
            cells = {}
            if cfg.use_corocl:
                x_out = images_to_tensor([s.image for s in vanilla])
                mask_out = torch.from_numpy(
                    np.stack([s.label == dataset_cfg.outlier_label for s in vanilla]).astype(np.int64)
                )
                z_out, _ = _encode_frozen(seg, x_out)
                emb_oe = project_embeddings(rpl, ra)
                emb_out = project_embeddings(rpl, rpl.main(z_out))
                anchors, contrastives, info = sample_embeddings(emb_oe, mask, emb_out, mask_out, cfg.sampling, rng=rng)
                l_cl = corocl_loss(anchors, contrastives, cfg.loss.tau)
                total = total + l_cl
                cells = info.cell_sizes
            if not torch.isfinite(total):
                raise TrainingError(
                    f"non-finite loss at step {step}: l_in={parts['l_in'].item():.4g} l_out={parts['l_out'].item():.4g} "
                    f"l_corocl={l_cl.item():.4g}"
                )
            opt.zero_grad()
            total.backward()
            opt.step()
            if not seg.verify_frozen():
                raise InvariantViolation(f"segnet checksum drifted at step {step}")
            n_out = int(mask.sum())
            rep = LossReport(
                l_in=parts["l_in"].item(),
                l_out=parts["l_out"].item(),
                l_rpl=parts["l_rpl"].item(),
                l_corocl=l_cl.item(),
                total=total.item(),
                n_inlier=int(mask.numel() - n_out),
                n_outlier=n_out,
            )
            entry = {"step": step, "lr": opt.param_groups[0]["lr"], **dataclasses.asdict(rep)}
            if cells:
                entry["cells"] = cells
            log.append(entry)
            if log_fh is not None:
                log_fh.write(json.dumps(entry) + "\n")
            if step % 250 == 0:
                logger.info("step %d total %.4f l_in %.4f l_out %.4f l_cl %.4f", step, rep.total, rep.l_in, rep.l_out, rep.l_corocl)
    finally:
        if log_fh is not None:
            log_fh.close()

    rpl.eval()
    metrics = {}
    if evaluate_splits:
        res = evaluate(seg, rpl, data, dataset_cfg, cfg.smooth, direct=cfg.direct)
        metrics["oe_val"] = res.report.to_dict()
        metrics["oe_val"]["energy_smd"] = _smd(res)
        metrics["oe_val"]["energy_mean_inlier"] = float(res.inlier_energy.mean())
        metrics["oe_val"]["energy_mean_outlier"] = float(res.outlier_energy.mean())
    config = {
        "dataset": dataset_cfg.to_dict(),
        "train": cfg.to_dict(),
        "arch": seg.cfg.to_dict(),
        "segnet_checksum": seg.checksum,
    }
    record = RunRecord(config=config, log=log, rpl=rpl, metrics=metrics, env=_env_stamp(cfg.seed), run_dir=run_dir)
    if run_dir is not None:
        write_run(record)
    return record


@torch.no_grad()
def _encode_frozen(seg: SegNet, x: torch.Tensor):
    return seg.encode(x)


def _smd(res: EvalResult) -> float:
    from .metrics import standardized_mean_difference

    return standardized_mean_difference(res.inlier_energy, res.outlier_energy)


@torch.no_grad()
def _direct_scores(seg, rpl, images, smooth):
    from .inference import EnergyMap, Prediction, gaussian_smooth

    closed = forward_closed_set(seg, images)
    raw = energy(forward_direct(seg, rpl, images, closed=closed).double()).numpy()
    cls = (closed.logits.argmax(dim=1) + 1).to(torch.uint8).numpy()
    return [
        Prediction(cls[i], EnergyMap(raw[i], gaussian_smooth(raw[i], smooth.kernel_size, smooth.sigma), smooth.kernel_size, smooth.sigma))
        for i in range(images.shape[0])
    ]


def evaluate(
    seg: SegNet,
    rpl: RplModule | None,
    data: dict[str, list],
    dataset_cfg: DatasetConfig,
    smooth: SmoothConfig = SmoothConfig(),
    split: str = "oe_val",
    inlier_split: str = "inlier_val",
    direct: bool = False,
    batch_size: int = 16,
) -> EvalResult:
    """Pool smoothed energy scores over ``split`` and score closed-set mIoU on ``inlier_split``."""
    samples = data[split]
    if not samples:
        raise ConfigError(f"split {split!r} is empty")
    scores, labels, raw_in, raw_out = [], [], [], []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        x = images_to_tensor([s.image for s in chunk])
        preds = _direct_scores(seg, rpl, x, smooth) if direct else predict_batch(seg, rpl, x, smooth)
        for s, p in zip(chunk, preds):
            m = s.mask.astype(bool)
            scores.append(p.anomaly_scores.smoothed.ravel())
            labels.append(m.ravel())
            raw_in.append(p.anomaly_scores.raw[~m])
            raw_out.append(p.anomaly_scores.raw[m])
    sp = ScoredPixels(np.concatenate(scores), np.concatenate(labels))

    class_maps = closed_set_maps(seg, data[inlier_split]) if data.get(inlier_split) else []
    miou_value = None
    if class_maps:
        gt = np.stack([s.label for s in data[inlier_split]])
        miou_value = miou(np.stack(class_maps), gt, dataset_cfg.num_classes)
    return EvalResult(
        report=anomaly_report(sp, miou_value),
        inlier_energy=np.concatenate(raw_in),
        outlier_energy=np.concatenate(raw_out),
        class_maps=class_maps,
    )


@torch.no_grad()
def closed_set_maps(seg: SegNet, samples, batch_size: int = 16) -> list[np.ndarray]:
    maps = []
    for i in range(0, len(samples), batch_size):
        x = images_to_tensor([s.image for s in samples[i : i + batch_size]])
        logits = forward_closed_set(seg, x).logits
        maps.extend((logits.argmax(dim=1) + 1).to(torch.uint8).numpy())
    return maps


def write_run(record: RunRecord) -> Path:
    run_dir = record.run_dir
    assert run_dir is not None
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(record.config, indent=2, sort_keys=True))
    (run_dir / "metrics.json").write_text(json.dumps(record.metrics, indent=2, sort_keys=True))
    (run_dir / "env.json").write_text(json.dumps(record.env, indent=2, sort_keys=True))
    save_rpl(record.rpl, run_dir / "rpl.npz", meta={"segnet_checksum": record.config["segnet_checksum"]})
    return run_dir


def replay(seg: SegNet, data: dict[str, list], config: dict, run_dir: str | Path | None = None) -> RunRecord:
    """Re-run a recorded (config, seed) against the same frozen segnet."""
    if config.get("segnet_checksum") != seg.checksum:
        raise ConfigError("replay needs the segnet the run was trained against (checksum differs)")
    dataset_cfg = DatasetConfig.from_dict(config["dataset"])
    return train_rpl(seg, data, dataset_cfg, TrainConfig.from_dict(config["train"]), run_dir=run_dir)


def load_run_config(run_dir: str | Path) -> dict:
    path = Path(run_dir) / "config.json"
    if not path.is_file():
        raise ConfigError(f"{run_dir} has no config.json")
    return json.loads(path.read_text())
