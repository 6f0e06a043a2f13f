"""Synthetic inlier scenes, outlier objects and outlier-exposure compositing.

Inlier scenes are Voronoi partitions whose cells carry one of ``C`` class
textures.  Classes come in pairs that share a hue and differ only in stripe
orientation, so the closed-set model has to read texture, not just colour.
Outlier samples are star-shaped blobs with ring/dot/checker textures on a
smooth "foreign context" backdrop.  Their colours are mostly borrowed from the
inlier palette, which keeps the frozen model's energy a weak detector.

All images are stored as float32 in [0, 1] quantised to multiples of 1/255 so
that a PNG round trip is lossless.
"""

from __future__ import annotations

import colorsys
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError, InputError, PlacementError

DEFAULT_SCALE_RATIOS = (0.1, 0.125, 0.25, 0.5, 0.75)
IGNORE_LABEL = 255

_SPLIT_CODES = {"inlier_train": 1, "inlier_val": 2, "outlier_train": 3, "outlier_val": 4, "oe_val": 5}


@dataclass(frozen=True)
class InlierSample:
    image: np.ndarray  # (H, W, 3) float32
    label: np.ndarray  # (H, W) uint8, values in 1..C


@dataclass(frozen=True)
class OutlierSample:
    image: np.ndarray
    label: np.ndarray  # values in {0, P}


@dataclass(frozen=True)
class OESample:
    image: np.ndarray
    label: np.ndarray  # values in 1..C or P
    mask: np.ndarray  # (H, W) uint8, 1 where label == P


@dataclass(frozen=True)
class DatasetConfig:
    num_classes: int = 4
    outlier_label: int = 254
    image_size: int = 80
    crop_size: int = 64
    scale_ratios: tuple[float, ...] = DEFAULT_SCALE_RATIOS
    seed: int = 0
    n_train: int = 200
    n_val: int = 40
    n_outlier_train: int = 100
    n_outlier_val: int = 40
    objects_per_image: int = 1
    palette_share: float = 0.75  # fraction of outlier blobs coloured like an inlier class
    stripe_amplitude: float = 0.15  # inlier texture contrast
    outlier_texture_gain: float = 0.3  # outlier pattern contrast, relative to its colour

    def validate(self) -> "DatasetConfig":
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if not self.num_classes < self.outlier_label < IGNORE_LABEL:
            raise ConfigError(
                f"outlier_label must satisfy C < P < {IGNORE_LABEL}; got C={self.num_classes}, P={self.outlier_label}"
            )
        if self.crop_size < 32:
            raise ConfigError(f"crop_size must be >= 32, got {self.crop_size}")
        if self.image_size < self.crop_size:
            raise ConfigError(f"image_size {self.image_size} smaller than crop_size {self.crop_size}")
        if not self.scale_ratios or any(not 0.0 < s <= 1.0 for s in self.scale_ratios):
            raise ConfigError(f"scale_ratios must be nonempty with values in (0, 1]; got {self.scale_ratios}")
        for name in ("n_train", "n_val", "n_outlier_train", "n_outlier_val"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.objects_per_image < 1:
            raise ConfigError("objects_per_image must be >= 1")
        if not 0.0 <= self.palette_share <= 1.0:
            raise ConfigError(f"palette_share must be in [0, 1], got {self.palette_share}")
        if self.stripe_amplitude < 0 or self.outlier_texture_gain < 0:
            raise ConfigError("texture amplitudes must be >= 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        if "scale_ratios" in d:
            d["scale_ratios"] = tuple(float(s) for s in d["scale_ratios"])
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown dataset config keys: {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scale_ratios"] = list(self.scale_ratios)
        return d


def _rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, _SPLIT_CODES[split], index])


def _quantise(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def class_palette(num_classes: int) -> np.ndarray:
    """Base RGB colour per inlier class; classes 2k and 2k+1 share a hue."""
    n_hues = (num_classes + 1) // 2
    return np.array([colorsys.hsv_to_rgb((c // 2) / n_hues, 0.6, 0.75) for c in range(num_classes)], dtype=np.float64)


def _class_texture(c: int, yy, xx, rng) -> np.ndarray:
    # stripes; the two classes of a hue pair are orthogonal
    theta = np.pi / 2 * (c % 2) + np.pi / 4 * ((c // 2) % 2)
    period = 5.0
    phase = rng.uniform(0, 2 * np.pi)
    proj = np.cos(theta) * xx + np.sin(theta) * yy
    return np.sin(2 * np.pi * proj / period + phase)


def _inlier_scene(cfg: DatasetConfig, rng: np.random.Generator) -> InlierSample:
    size = cfg.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    n_cells = int(rng.integers(5, 10))
    seeds = rng.uniform(0, size, size=(n_cells, 2))
    cell_class = rng.integers(0, cfg.num_classes, size=n_cells)
    d2 = (yy[None] - seeds[:, 0, None, None]) ** 2 + (xx[None] - seeds[:, 1, None, None]) ** 2
    owner = np.argmin(d2, axis=0)
    classes = cell_class[owner]

    palette = class_palette(cfg.num_classes)
    img = np.empty((size, size, 3))
    for cell in range(n_cells):
        sel = owner == cell
        if not sel.any():
            continue
        c = int(cell_class[cell])
        tex = _class_texture(c, yy, xx, rng)
        base = palette[c] * rng.uniform(0.9, 1.1)
        img[sel] = base + cfg.stripe_amplitude * tex[sel, None]
    img += rng.normal(0.0, 0.03, size=img.shape)
    return InlierSample(image=_quantise(img), label=(classes + 1).astype(np.uint8))


def _smooth_backdrop(size: int, rng: np.random.Generator) -> np.ndarray:
    coarse = rng.uniform(0.1, 0.9, size=(1, 3, 4, 4))
    up = F.interpolate(torch.from_numpy(coarse), size=(size, size), mode="bicubic", align_corners=False)
    return up[0].permute(1, 2, 0).numpy()


def _blob_mask(size: int, frac: float, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    radius = np.sqrt(frac * size * size / np.pi)
    cy, cx = rng.uniform(radius * 0.6, size - radius * 0.6, size=2)
    ang = np.arctan2(yy - cy, xx - cx)
    r = np.hypot(yy - cy, xx - cx)
    k = rng.integers(2, 6)
    wobble = 1.0 + 0.3 * np.sin(k * ang + rng.uniform(0, 2 * np.pi)) + 0.1 * np.cos(
        (k + 1) * ang + rng.uniform(0, 2 * np.pi)
    )
    return r <= radius * wobble


def _outlier_texture(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    period = rng.uniform(4.0, 8.0)
    if kind == 0:  # concentric rings
        cy, cx = rng.uniform(0, size, size=2)
        return np.sin(2 * np.pi * np.hypot(yy - cy, xx - cx) / period)
    if kind == 1:  # dots
        return 2.0 * (np.sin(2 * np.pi * yy / period) * np.sin(2 * np.pi * xx / period) > 0.5) - 1.0
    # checkerboard
    return 2.0 * ((np.floor(yy / (period / 2)) + np.floor(xx / (period / 2))) % 2) - 1.0


def blob_area_fraction(sample: OutlierSample, outlier_label: int) -> float:
    """Fraction of the lattice covered by outlier-labelled pixels."""
    return float(np.mean(sample.label == outlier_label))


def _outlier_object(cfg: DatasetConfig, rng: np.random.Generator) -> OutlierSample:
    size = cfg.image_size
    palette = class_palette(max(cfg.num_classes, 1))
    img = _smooth_backdrop(size, rng)
    fg = np.zeros((size, size), dtype=bool)
    n_blobs = int(rng.integers(1, 3))
    for _ in range(100):
        fg[:] = False
        for _ in range(n_blobs):
            fg |= _blob_mask(size, rng.uniform(0.1, 0.45) / n_blobs, rng)
        if 0.02 <= fg.mean() <= 0.5:
            break
    else:  # pragma: no cover - the sampling bounds make this unreachable in practice
        raise RuntimeError("could not sample a blob within the area bounds")

    # one colour, usually an inlier class colour, brightness-modulated by a
    # foreign high-contrast pattern
    if rng.uniform() < cfg.palette_share:
        colour = palette[rng.integers(0, len(palette))] * rng.uniform(0.9, 1.1)
    else:
        colour = np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.3, 0.9), rng.uniform(0.4, 0.9)))
    tex = _outlier_texture(int(rng.integers(0, 3)), size, rng)
    obj = colour * (1.0 + cfg.outlier_texture_gain * tex[..., None]) + rng.normal(0.0, 0.03, size=(size, size, 3))
    img = np.where(fg[..., None], obj, img + rng.normal(0.0, 0.02, size=img.shape))
    label = np.where(fg, cfg.outlier_label, 0).astype(np.uint8)
    return OutlierSample(image=_quantise(img), label=label)


def generate_inlier_dataset(cfg: DatasetConfig, split: str = "train") -> list[InlierSample]:
    """Deterministic inlier scenes for ``split`` in {"train", "val"}."""
    cfg.validate()
    n = cfg.n_train if split == "train" else cfg.n_val
    key = f"inlier_{split}"
    if key not in _SPLIT_CODES:
        raise ConfigError(f"unknown split {split!r}")
    return [_inlier_scene(cfg, _rng(cfg.seed, key, i)) for i in range(n)]


def generate_outlier_dataset(cfg: DatasetConfig, split: str = "train") -> list[OutlierSample]:
    cfg.validate()
    n = cfg.n_outlier_train if split == "train" else cfg.n_outlier_val
    key = f"outlier_{split}"
    if key not in _SPLIT_CODES:
        raise ConfigError(f"unknown split {split!r}")
    return [_outlier_object(cfg, _rng(cfg.seed, key, i)) for i in range(n)]


def _resize(arr: np.ndarray, size: tuple[int, int], nearest: bool) -> np.ndarray:
    if arr.shape[:2] == size:
        return arr
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
    t = t[None, None] if arr.ndim == 2 else t.permute(2, 0, 1)[None]
    if nearest:
        out = F.interpolate(t, size=size, mode="nearest")
    else:
        out = F.interpolate(t, size=size, mode="bilinear", align_corners=False, antialias=True)
    out = out[0, 0] if arr.ndim == 2 else out[0].permute(1, 2, 0)
    return out.numpy()


def scale_outlier(outlier: OutlierSample, scale: float) -> OutlierSample:
    if not 0.0 < scale <= 1.0:
        raise ConfigError(f"scale must be in (0, 1], got {scale}")
    h, w = outlier.label.shape
    size = (max(1, int(round(h * scale))), max(1, int(round(w * scale))))
    image = _quantise(_resize(outlier.image, size, nearest=False))
    label = _resize(outlier.label, size, nearest=True).astype(np.uint8)
    return OutlierSample(image=image, label=label)


def mix_oe(
    inlier: InlierSample | OESample,
    outlier: OutlierSample,
    scale: float,
    placement_seed: int,
    outlier_label: int | None = None,
) -> OESample:
    """Paste the scaled outlier's foreground into ``inlier``.

    ``outlier_label`` defaults to the largest label present in the outlier.
    Passing an existing OESample as ``inlier`` adds a further object.
    """
    scaled = scale_outlier(outlier, scale)
    oh, ow = scaled.label.shape
    h, w = inlier.label.shape
    if oh > h or ow > w:
        raise PlacementError(f"scaled outlier {oh}x{ow} does not fit into {h}x{w}")
    if outlier_label is None:
        outlier_label = int(outlier.label.max())
    rng = np.random.default_rng(placement_seed)
    top = int(rng.integers(0, h - oh + 1))
    left = int(rng.integers(0, w - ow + 1))

    placed_img = np.zeros_like(inlier.image)
    placed_lbl = np.zeros_like(inlier.label)
    placed_img[top : top + oh, left : left + ow] = scaled.image
    placed_lbl[top : top + oh, left : left + ow] = scaled.label
    m = (placed_lbl == outlier_label) if outlier_label > 0 else np.zeros_like(placed_lbl, dtype=bool)

    prev_mask = inlier.mask.astype(bool) if isinstance(inlier, OESample) else np.zeros_like(m)
    image = np.where(m[..., None], placed_img, inlier.image)
    label = np.where(m, placed_lbl, inlier.label).astype(np.uint8)
    mask = (m | prev_mask).astype(np.uint8)
    return OESample(image=image, label=label, mask=mask)


def crop_offsets(shape: tuple[int, int], crop_size: int, seed: int) -> tuple[int, int]:
    h, w = shape
    if crop_size > min(h, w):
        raise InputError(f"crop {crop_size} larger than image {h}x{w}")
    rng = np.random.default_rng(seed)
    return int(rng.integers(0, h - crop_size + 1)), int(rng.integers(0, w - crop_size + 1))


def crop_at(sample, top: int, left: int, crop_size: int):
    fields = {}
    for f in dataclasses.fields(sample):
        arr = getattr(sample, f.name)
        fields[f.name] = arr[top : top + crop_size, left : left + crop_size]
    return type(sample)(**fields)


def augment_crop(sample, crop_size: int, seed: int):
    """Aligned random crop of every array field of ``sample``."""
    top, left = crop_offsets(sample.label.shape, crop_size, seed)
    return crop_at(sample, top, left, crop_size)


def pad_or_center_crop(sample: OutlierSample, size: int) -> OutlierSample:
    """Vanilla outlier image brought to ``size`` x ``size`` for the contrastive branch."""
    out = {}
    for f in dataclasses.fields(sample):
        arr = getattr(sample, f.name)
        h, w = arr.shape[:2]
        if h >= size:
            t = (h - size) // 2
            arr = arr[t : t + size]
        else:
            pad = [(0, 0)] * arr.ndim
            pad[0] = ((size - h) // 2, size - h - (size - h) // 2)
            arr = np.pad(arr, pad)
        if w >= size:
            l = (w - size) // 2
            arr = arr[:, l : l + size]
        else:
            pad = [(0, 0)] * arr.ndim
            pad[1] = ((size - w) // 2, size - w - (size - w) // 2)
            arr = np.pad(arr, pad)
        out[f.name] = arr
    return OutlierSample(**out)


def build_oe_split(
    inliers: Sequence[InlierSample], outliers: Sequence[OutlierSample], cfg: DatasetConfig, seed: int
) -> list[OESample]:
    """Fixed OE composite set (one or more objects per inlier image)."""
    if not outliers:
        raise ConfigError("need at least one outlier sample to build an OE split")
    rng = np.random.default_rng([seed, _SPLIT_CODES["oe_val"]])
    result = []
    for inl in inliers:
        sample: InlierSample | OESample = inl
        for _ in range(cfg.objects_per_image):
            j = int(rng.integers(0, len(outliers)))
            scale = float(cfg.scale_ratios[int(rng.integers(0, len(cfg.scale_ratios)))])
            sample = mix_oe(sample, outliers[j], scale, int(rng.integers(0, 2**31)), cfg.outlier_label)
        result.append(sample)
    return result


def sample_oe_batch(
    inliers: Sequence[InlierSample],
    outliers: Sequence[OutlierSample],
    cfg: DatasetConfig,
    batch_size: int,
    rng: np.random.Generator,
) -> tuple[list[OESample], list[OutlierSample]]:
    """One training batch: cropped OE composites plus vanilla outlier images."""
    oe, vanilla = [], []
    for _ in range(batch_size):
        inl = augment_crop(inliers[int(rng.integers(0, len(inliers)))], cfg.crop_size, int(rng.integers(0, 2**31)))
        sample: InlierSample | OESample = inl
        for _ in range(cfg.objects_per_image):
            out = outliers[int(rng.integers(0, len(outliers)))]
            scale = float(cfg.scale_ratios[int(rng.integers(0, len(cfg.scale_ratios)))])
            sample = mix_oe(sample, out, scale, int(rng.integers(0, 2**31)), cfg.outlier_label)
        oe.append(sample)
        vanilla.append(pad_or_center_crop(outliers[int(rng.integers(0, len(outliers)))], cfg.crop_size))
    return oe, vanilla


# --- dataset directory I/O -------------------------------------------------


def _save_png(path: Path, arr: np.ndarray) -> None:
    if arr.ndim == 3:
        Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="RGB").save(path)
    else:
        Image.fromarray(arr.astype(np.uint8), mode="L").save(path)


def _load_png(path: Path, rgb: bool) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if rgb:
        return (arr.astype(np.float64) / 255.0).astype(np.float32)
    return arr.astype(np.uint8)


def write_dataset(root: str | Path, cfg: DatasetConfig, splits: dict[str, list]) -> Path:
    """Write splits as PNG triples plus ``manifest.json``.

    Layout: ``<root>/<split>/{images,labels,masks}/<idx>.png``.
    """
    root = Path(root)
    manifest = {"format": "rpl-ood-dataset/1", "config": cfg.to_dict(), "splits": {}}
    for name, samples in splits.items():
        entries = []
        for sub in ("images", "labels", "masks"):
            (root / name / sub).mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(samples):
            stem = f"{i:05d}.png"
            entry = {"image": f"{name}/images/{stem}", "label": f"{name}/labels/{stem}"}
            _save_png(root / entry["image"], s.image)
            _save_png(root / entry["label"], s.label)
            if isinstance(s, OESample):
                entry["mask"] = f"{name}/masks/{stem}"
                _save_png(root / entry["mask"], s.mask)
            entries.append(entry)
        kind = type(samples[0]).__name__ if samples else "InlierSample"
        manifest["splits"][name] = {"kind": kind, "samples": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root


def read_dataset(root: str | Path) -> tuple[DatasetConfig, dict[str, list]]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    cfg = DatasetConfig.from_dict(manifest["config"])
    kinds = {"InlierSample": InlierSample, "OutlierSample": OutlierSample, "OESample": OESample}
    splits = {}
    for name, spec in manifest["splits"].items():
        cls = kinds[spec["kind"]]
        samples = []
        for entry in spec["samples"]:
            kw = {"image": _load_png(root / entry["image"], True), "label": _load_png(root / entry["label"], False)}
            if cls is OESample:
                kw["mask"] = _load_png(root / entry["mask"], False)
            samples.append(cls(**kw))
        splits[name] = samples
    return cfg, splits


def generate_all(cfg: DatasetConfig) -> dict[str, list]:
    """Every split used by training and evaluation, keyed by split name."""
    inl_val = generate_inlier_dataset(cfg, "val")
    out_val = generate_outlier_dataset(cfg, "val")
    return {
        "inlier_train": generate_inlier_dataset(cfg, "train"),
        "inlier_val": inl_val,
        "outlier_train": generate_outlier_dataset(cfg, "train"),
        "outlier_val": out_val,
        "oe_val": build_oe_split(inl_val, out_val, cfg, cfg.seed),
    }
