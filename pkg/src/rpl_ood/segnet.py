"""Closed-set segmentation network (encoder, multi-dilation feature block, head).

Layout mirrors a DeepLabV3+ decoder at desk scale::

    x --enc1(s2)--> low --enc2(s2)--> --enc3(s2 or s1)--> z   (Z channels, 1/8 or 1/4)
    z --feature block (dilations 1,2,4, fuse)--> a            (K channels, same stride)
    head_in = cat(up(a, 1/2), skip(low))                      (K + S channels, 1/2)
    logits  = up(head(head_in), 1/1)                          (C channels)

The residual adapter adds its output to ``head_in``.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_tensors, save_tensors, tensor_checksum
from .errors import ConfigError, InputError, TrainingError

logger = logging.getLogger(__name__)

PARAM_GROUPS = ("fcn", "aspp", "seg")


@dataclass(frozen=True)
class ArchConfig:
    num_classes: int = 4
    in_channels: int = 3
    stage_channels: tuple[int, int, int] = (16, 32, 64)
    dilations: tuple[int, ...] = (1, 2, 4)
    feature_dim: int = 32
    skip_dim: int = 16
    output_stride: int = 4
    head_hidden: int = 0  # width of a 3x3 conv before the 1x1 classifier; 0 -> linear head
    seed: int = 0

    @property
    def z_dim(self) -> int:
        return self.stage_channels[-1]

    @property
    def head_dim(self) -> int:
        return self.feature_dim + self.skip_dim

    def validate(self) -> "ArchConfig":
        dims = (self.num_classes, self.in_channels, self.feature_dim, self.skip_dim, *self.stage_channels)
        if any(int(d) < 1 for d in dims):
            raise ConfigError(f"channel sizes must be positive: {self}")
        if len(self.stage_channels) != 3:
            raise ConfigError("encoder needs exactly three stages")
        if self.head_hidden < 0:
            raise ConfigError(f"head_hidden must be >= 0, got {self.head_hidden}")
        if self.output_stride not in (4, 8):
            raise ConfigError(f"output_stride must be 4 or 8, got {self.output_stride}")
        if not self.dilations or any(d < 1 for d in self.dilations):
            raise ConfigError(f"dilation rates must be a nonempty list of positive ints, got {self.dilations}")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        for k in ("stage_channels", "dilations"):
            if k in d:
                d[k] = tuple(int(v) for v in d[k])
        return cls(**d).validate()


class FeatureBlock(nn.Module):
    """Parallel dilated 3x3 convolutions, concatenated and fused by a 1x1 conv."""

    def __init__(self, in_ch: int, out_ch: int, dilations: Sequence[int]):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Conv2d(in_ch, out_ch, 3, padding=d, dilation=d) for d in dilations
        )
        self.fuse = nn.Conv2d(out_ch * len(dilations), out_ch, 1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        feats = torch.cat([F.relu(b(z)) for b in self.branches], dim=1)
        return F.relu(self.fuse(feats))


def _stage(cin: int, cout: int, stride: int = 2) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.ReLU(), nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU()
    )


class SegHead(nn.Module):
    """Decoder head: optional 3x3 conv + ReLU, then the 1x1 classifier."""

    def __init__(self, in_ch: int, num_classes: int, hidden: int):
        super().__init__()
        self.hidden = nn.Conv2d(in_ch, hidden, 3, padding=1) if hidden else None
        self.classifier = nn.Conv2d(hidden or in_ch, num_classes, 1)

    def forward(self, h: torch.Tensor, detach_params: bool = False) -> torch.Tensor:
        def conv(m: nn.Conv2d, t: torch.Tensor) -> torch.Tensor:
            if not detach_params:
                return m(t)
            # weights read detached so no loss can route gradient into them
            return F.conv2d(t, m.weight.detach(), m.bias.detach(), padding=m.padding)

        if self.hidden is not None:
            h = F.relu(conv(self.hidden, h))
        return conv(self.classifier, h)


@dataclass
class SegForwardCache:
    z: torch.Tensor
    low: torch.Tensor
    aspp: torch.Tensor
    head_input: torch.Tensor
    logits: torch.Tensor


class SegNet(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3 = cfg.stage_channels
        self.encoder = nn.ModuleDict(
            {"stage1": _stage(cfg.in_channels, c1), "stage2": _stage(c1, c2), "stage3": _stage(c2, c3, 2 if cfg.output_stride == 8 else 1)}
        )
        self.aspp = FeatureBlock(c3, cfg.feature_dim, cfg.dilations)
        self.skip = nn.Conv2d(c1, cfg.skip_dim, 1)
        self.head = SegHead(cfg.head_dim, cfg.num_classes, cfg.head_hidden)
        self.checksum: str | None = None

    def param_group(self, name: str) -> str:
        if name.startswith("encoder."):
            return "fcn"
        if name.startswith("aspp."):
            return "aspp"
        return "seg"

    def check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise InputError(f"expected (N, {self.cfg.in_channels}, H, W) input, got {tuple(x.shape)}")

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        self.check_input(x)
        low = self.encoder["stage1"](x)
        z = self.encoder["stage3"](self.encoder["stage2"](low))
        return z, low

    def head_input(self, z: torch.Tensor, low: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        a = self.aspp(z)
        up = F.interpolate(a, size=low.shape[-2:], mode="bilinear", align_corners=False)
        return torch.cat([up, F.relu(self.skip(low))], dim=1), a

    def decode(self, head_in: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
        logits = self.head(head_in, detach_params=True)
        return F.interpolate(logits, size=size, mode="bilinear", align_corners=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z, low = self.encode(x)
        head_in, _ = self.head_input(z, low)
        logits = self.head(head_in)
        return F.interpolate(logits, size=x.shape[-2:], mode="bilinear", align_corners=False)

    def freeze(self) -> "SegNet":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        self.checksum = self.compute_checksum()
        return self

    def compute_checksum(self) -> str:
        return tensor_checksum(self.named_parameters())

    def verify_frozen(self) -> bool:
        return self.checksum is not None and self.compute_checksum() == self.checksum


def build_segnet(cfg: ArchConfig | None = None) -> SegNet:
    cfg = (cfg or ArchConfig()).validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        net = SegNet(cfg)
    return net


@torch.no_grad()
def forward_closed_set(net: SegNet, image: torch.Tensor) -> SegForwardCache:
    """Frozen closed-set forward; caches intermediate features for the adapter."""
    z, low = net.encode(image)
    head_in, a = net.head_input(z, low)
    logits = net.decode(head_in, image.shape[-2:])
    return SegForwardCache(z=z, low=low, aspp=a, head_input=head_in, logits=logits)


def images_to_tensor(images: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    """Stack HWC float images into an NCHW tensor."""
    arr = np.stack([np.asarray(im) for im in images]).astype(np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous().to(dtype)


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1500
    lr: float = 2e-3
    batch_size: int = 8
    seed: int = 0


def pretrain_segnet(net: SegNet, dataset, cfg: PretrainConfig, crop_size: int | None = None) -> tuple[SegNet, list[float]]:
    """Cross-entropy training on inlier samples, then freeze.

    ``dataset`` is a sequence of InlierSample.  Returns the frozen net and the
    per-step loss curve.
    """
    from .synthdata import augment_crop

    if not dataset and cfg.steps > 0:
        raise ConfigError("pretraining needs a nonempty dataset")
    rng = np.random.default_rng(cfg.seed)
    net.train()
    for p in net.parameters():
        p.requires_grad_(True)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda i: (1 - i / max(cfg.steps, 1)) ** 0.9)
    losses = []
    for step in range(cfg.steps):
        batch = [dataset[int(i)] for i in rng.integers(0, len(dataset), size=cfg.batch_size)]
        if crop_size is not None:
            batch = [augment_crop(s, crop_size, int(rng.integers(0, 2**31))) for s in batch]
        x = images_to_tensor([s.image for s in batch])
        y = torch.from_numpy(np.stack([s.label for s in batch]).astype(np.int64)) - 1
        loss = F.cross_entropy(net(x), y)
        if not torch.isfinite(loss):
            raise TrainingError(f"segnet pretraining diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
        if step % 250 == 0:
            logger.info("pretrain step %d loss %.4f", step, losses[-1])
    return net.freeze(), losses


def save_segnet(net: SegNet, path: str | Path) -> Path:
    tensors = dict(net.named_parameters())
    groups = {n: net.param_group(n) for n in tensors}
    meta = {"kind": "segnet", "arch": net.cfg.to_dict(), "checksum": net.checksum or net.compute_checksum()}
    return save_tensors(path, tensors, groups, meta)


def load_segnet(path: str | Path) -> SegNet:
    tensors, manifest = load_tensors(path)
    meta = manifest["meta"]
    if meta.get("kind") != "segnet":
        raise ConfigError(f"{path} is not a segnet checkpoint")
    net = build_segnet(ArchConfig.from_dict(meta["arch"]))
    net.load_state_dict(tensors)
    net.freeze()
    if net.checksum != meta["checksum"]:
        raise ConfigError(f"checksum mismatch when loading {path}")
    return net
