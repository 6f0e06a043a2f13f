"""Closed-set prediction plus smoothed energy anomaly maps."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .errors import ConfigError
from .losses import energy
from .rplmodule import RplModule, forward_residual
from .segnet import SegNet, forward_closed_set


@dataclass(frozen=True)
class SmoothConfig:
    kernel_size: int = 7
    sigma: float = 1.0

    def validate(self) -> "SmoothConfig":
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")
        return self


@dataclass
class EnergyMap:
    raw: np.ndarray  # (H, W)
    smoothed: np.ndarray
    kernel_size: int
    sigma: float


@dataclass
class Prediction:
    class_map: np.ndarray  # (H, W) uint8, values in 1..C
    anomaly_scores: EnergyMap


def gaussian_kernel1d(kernel_size: int, sigma: float) -> np.ndarray:
    SmoothConfig(kernel_size, sigma).validate()
    r = kernel_size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(raw: np.ndarray, kernel_size: int = 7, sigma: float = 1.0) -> np.ndarray:
    """Separable Gaussian blur over the last two axes, reflect-padded."""
    k = gaussian_kernel1d(kernel_size, sigma)
    out = np.asarray(raw, dtype=np.float64)
    if kernel_size == 1:
        return out.copy()
    out = ndimage.correlate1d(out, k, axis=-1, mode="reflect")
    return ndimage.correlate1d(out, k, axis=-2, mode="reflect")


@torch.no_grad()
def predict_batch(
    seg: SegNet, rpl: RplModule | None, images: torch.Tensor, smooth: SmoothConfig = SmoothConfig()
) -> list[Prediction]:
    """Class maps from the frozen path; anomaly scores from the residual path.

    With ``rpl=None`` the scores are the energy of the frozen logits.
    """
    smooth.validate()
    closed = forward_closed_set(seg, images)
    if rpl is None:
        logits_hat = closed.logits
    else:
        rpl.eval()
        logits_hat = forward_residual(seg, rpl, images, closed=closed).logits
    class_maps = (closed.logits.argmax(dim=1) + 1).to(torch.uint8).numpy()
    raw = energy(logits_hat.double()).numpy()
    preds = []
    for i in range(images.shape[0]):
        sm = gaussian_smooth(raw[i], smooth.kernel_size, smooth.sigma)
        preds.append(Prediction(class_maps[i], EnergyMap(raw[i], sm, smooth.kernel_size, smooth.sigma)))
    return preds


def predict(seg: SegNet, rpl: RplModule | None, image: torch.Tensor, smooth: SmoothConfig = SmoothConfig()) -> Prediction:
    if image.ndim == 3:
        image = image[None]
    return predict_batch(seg, rpl, image, smooth)[0]


def normalise_for_display(scores: np.ndarray) -> np.ndarray:
    """Min-max scale to uint8; a constant map becomes all zeros."""
    lo, hi = float(scores.min()), float(scores.max())
    if hi <= lo:
        return np.zeros(scores.shape, dtype=np.uint8)
    return np.round((scores - lo) / (hi - lo) * 255.0).astype(np.uint8)


def export_prediction(pred: Prediction, out_dir: str | Path, stem: str, meta: dict | None = None) -> dict[str, Path]:
    """Write class PNG, float32 score array, 8-bit score PNG and a JSON sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "class_map": out_dir / f"{stem}_class.png",
        "scores": out_dir / f"{stem}_scores.npy",
        "scores_png": out_dir / f"{stem}_scores.png",
        "meta": out_dir / f"{stem}.json",
    }
    Image.fromarray(pred.class_map.astype(np.uint8), mode="L").save(paths["class_map"])
    np.save(paths["scores"], pred.anomaly_scores.smoothed.astype(np.float32))
    Image.fromarray(normalise_for_display(pred.anomaly_scores.smoothed), mode="L").save(paths["scores_png"])
    sidecar = {
        "smoothing": {"kernel_size": pred.anomaly_scores.kernel_size, "sigma": pred.anomaly_scores.sigma},
        "score_range": [float(pred.anomaly_scores.smoothed.min()), float(pred.anomaly_scores.smoothed.max())],
        **(meta or {}),
    }
    paths["meta"].write_text(json.dumps(sidecar, indent=2))
    return paths

