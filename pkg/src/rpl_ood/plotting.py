"""Figures: per-image anomaly heatmaps and inlier/outlier energy histograms."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .inference import normalise_for_display  # noqa: E402


def heatmap_rgb(scores: np.ndarray, cmap: str = "magma") -> np.ndarray:
    """Colour-mapped uint8 RGB image with exactly the shape of ``scores``."""
    grey = normalise_for_display(np.asarray(scores, dtype=np.float64))
    rgba = matplotlib.colormaps[cmap](grey)
    return (rgba[..., :3] * 255).round().astype(np.uint8)


def save_heatmap(scores: np.ndarray, path: str | Path, cmap: str = "magma") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(heatmap_rgb(scores, cmap), mode="RGB").save(path)
    return path


def save_overlay_panel(image: np.ndarray, scores: np.ndarray, mask: np.ndarray | None, path: str | Path) -> Path:
    """Image | heatmap | mask strip for quick inspection."""
    panels = [(np.clip(image, 0, 1) * 255).round().astype(np.uint8), heatmap_rgb(scores)]
    if mask is not None:
        panels.append(np.repeat((np.asarray(mask) > 0)[..., None] * 255, 3, axis=2).astype(np.uint8))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.concatenate(panels, axis=1), mode="RGB").save(path)
    return path


@dataclass
class EnergyHistogram:
    edges: np.ndarray
    inlier_counts: np.ndarray
    outlier_counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.inlier_counts.sum() + self.outlier_counts.sum())


def energy_histogram(inlier: np.ndarray, outlier: np.ndarray, bins: int = 60) -> EnergyHistogram:
    """Shared-edge histograms covering every value, so counts sum to the pixel count."""
    inlier = np.asarray(inlier, dtype=np.float64).ravel()
    outlier = np.asarray(outlier, dtype=np.float64).ravel()
    both = np.concatenate([inlier, outlier])
    lo, hi = (float(both.min()), float(both.max())) if both.size else (0.0, 1.0)
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    return EnergyHistogram(edges, np.histogram(inlier, edges)[0], np.histogram(outlier, edges)[0])


def plot_energy_histograms(
    arms: Mapping[str, tuple[np.ndarray, np.ndarray]], path: str | Path, bins: int = 60
) -> dict[str, EnergyHistogram]:
    """One density panel per arm (inlier vs outlier pixel energy)."""
    hists = {name: energy_histogram(i, o, bins) for name, (i, o) in arms.items()}
    fig, axes = plt.subplots(1, len(hists), figsize=(4.5 * len(hists), 3.2), squeeze=False)
    for ax, (name, h) in zip(axes[0], hists.items()):
        width = np.diff(h.edges)
        for counts, label, colour in ((h.inlier_counts, "inlier", "tab:blue"), (h.outlier_counts, "outlier", "tab:red")):
            dens = counts / max(counts.sum(), 1) / width
            ax.bar(h.edges[:-1], dens, width=width, align="edge", alpha=0.55, color=colour, label=label)
        ax.set_title(name)
        ax.set_xlabel("energy")
    axes[0][0].set_ylabel("density")
    axes[0][0].legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return hists


def plot_metric_bars(rows: Sequence[dict], metric: str, path: str | Path) -> Path:
    """Bar chart of one metric across ablation rows (expects ``name`` and ``metric`` keys)."""
    names = [r["name"] for r in rows]
    vals = [r.get(metric, np.nan) for r in rows]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(rows)), 3.2))
    ax.bar(range(len(rows)), [np.nan if v is None else v for v in vals], color="tab:gray")
    ax.set_xticks(range(len(rows)), names, rotation=30, ha="right")
    ax.set_ylabel(metric)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
