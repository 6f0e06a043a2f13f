"""Residual pattern adapter attached to a frozen :class:`SegNet`.

``main`` mirrors the frozen feature block and starts from a copy of its
weights; ``head`` is a bare 1x1 conv expanding ``K -> K + S`` so its output
can be added to the frozen head input; ``proj`` maps main-layer features to
L2-normalised pixel embeddings for the contrastive loss.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_tensors, save_tensors, tensor_checksum
from .errors import ConfigError
from .segnet import FeatureBlock, SegForwardCache, SegNet, forward_closed_set

RPL_GROUPS = ("rpl_a", "rpl_b", "proj")


@dataclass(frozen=True)
class RplConfig:
    embed_dim: int | None = None  # None -> head-input width of the segnet
    proj_layers: int = 1
    proj_bn: bool = False
    proj_bias: bool = True
    head_init: str = "zero"  # "zero" starts from the frozen energy; "he" is fan-in scaled
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RplConfig":
        return cls(**d)


def _he_init(m: nn.Module) -> None:
    if isinstance(m, nn.Conv2d):
        nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
        if m.bias is not None:
            nn.init.zeros_(m.bias)


class Projector(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, layers: int = 1, bn: bool = False, bias: bool = True):
        super().__init__()
        if layers == 1:
            self.net = nn.Conv2d(in_ch, out_ch, 1, bias=bias)
        elif layers == 2:
            mods: list[nn.Module] = [nn.Conv2d(in_ch, in_ch, 1, bias=bias)]
            if bn:
                mods.append(nn.BatchNorm2d(in_ch))
            mods += [nn.ReLU(), nn.Conv2d(in_ch, out_ch, 1, bias=bias)]
            self.net = nn.Sequential(*mods)
        else:
            raise ConfigError(f"projector supports 1 or 2 layers, got {layers}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class RplModule(nn.Module):
    def __init__(self, seg_cfg, cfg: RplConfig):
        super().__init__()
        self.cfg = cfg
        self.seg_cfg = seg_cfg
        self.main = FeatureBlock(seg_cfg.z_dim, seg_cfg.feature_dim, seg_cfg.dilations)
        self.head = nn.Conv2d(seg_cfg.feature_dim, seg_cfg.head_dim, 1)
        embed = cfg.embed_dim or seg_cfg.head_dim
        self.proj = Projector(seg_cfg.feature_dim, embed, cfg.proj_layers, cfg.proj_bn, cfg.proj_bias)

    @property
    def embed_dim(self) -> int:
        return self.cfg.embed_dim or self.seg_cfg.head_dim

    def param_group(self, name: str) -> str:
        if name.startswith("main."):
            return "rpl_a"
        if name.startswith("head."):
            return "rpl_b"
        return "proj"

    def residual(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(main-layer features, head output)`` at the lattice of ``z``."""
        ra = self.main(z)
        return ra, self.head(ra)


def build_rpl(seg: SegNet, cfg: RplConfig | None = None) -> RplModule:
    """Adapter whose main layers copy the frozen feature block weights."""
    cfg = cfg or RplConfig()
    if cfg.embed_dim is not None and cfg.embed_dim < 1:
        raise ConfigError(f"embed_dim must be positive, got {cfg.embed_dim}")
    if cfg.head_init not in ("he", "zero"):
        raise ConfigError(f"head_init must be 'he' or 'zero', got {cfg.head_init!r}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        rpl = RplModule(seg.cfg, cfg)
        rpl.head.apply(_he_init)
        rpl.proj.apply(_he_init)
        if cfg.head_init == "zero":
            nn.init.zeros_(rpl.head.weight)
            nn.init.zeros_(rpl.head.bias)
    src = seg.aspp.state_dict()
    dst = rpl.main.state_dict()
    if {k: v.shape for k, v in src.items()} != {k: v.shape for k, v in dst.items()}:
        raise ConfigError("adapter main layers do not match the segnet feature block")
    rpl.main.load_state_dict(copy.deepcopy(src))
    rpl.to(next(seg.parameters()).dtype)
    return rpl


@dataclass
class RplForward:
    residual_features: torch.Tensor  # main-layer output, (N, K, h, w)
    residual: torch.Tensor  # head output upsampled to the head-input lattice
    logits: torch.Tensor  # (N, C, H, W)
    closed: SegForwardCache
    embeddings: torch.Tensor | None = None


def forward_residual(
    seg: SegNet, rpl: RplModule, image: torch.Tensor, closed: SegForwardCache | None = None, embed: bool = False
) -> RplForward:
    """Frozen head applied to (frozen head input + adapter residual)."""
    if closed is None:
        closed = forward_closed_set(seg, image)
    ra, rb = rpl.residual(closed.z)
    r = F.interpolate(rb, size=closed.head_input.shape[-2:], mode="bilinear", align_corners=False)
    logits = seg.decode(closed.head_input + r, image.shape[-2:])
    emb = project_embeddings(rpl, ra) if embed else None
    return RplForward(residual_features=ra, residual=r, logits=logits, closed=closed, embeddings=emb)


def project_embeddings(rpl: RplModule, residual_features: torch.Tensor) -> torch.Tensor:
    """Per-pixel unit-norm embeddings, (N, R, h, w)."""
    return F.normalize(rpl.proj(residual_features), dim=1, eps=1e-12)


def forward_direct(seg: SegNet, rpl: RplModule, image: torch.Tensor, closed: SegForwardCache | None = None) -> torch.Tensor:
    """Ablation baseline: classify the adapter output alone with the frozen head.

    Skips the addition to the frozen head input, so the adapter has to act as
    an independent classifier.
    """
    if closed is None:
        closed = forward_closed_set(seg, image)
    _, rb = rpl.residual(closed.z)
    r = F.interpolate(rb, size=closed.head_input.shape[-2:], mode="bilinear", align_corners=False)
    return seg.decode(r, image.shape[-2:])


def rpl_checksum(rpl: RplModule) -> str:
    return tensor_checksum(rpl.named_parameters())


def save_rpl(rpl: RplModule, path: str | Path, meta: dict | None = None) -> Path:
    tensors = dict(rpl.state_dict())
    groups = {n: rpl.param_group(n) for n in tensors}
    m = {"kind": "rpl", "rpl": rpl.cfg.to_dict(), "arch": rpl.seg_cfg.to_dict(), **(meta or {})}
    return save_tensors(path, tensors, groups, m)


def load_rpl(path: str | Path, seg: SegNet, drop_projector: bool = True) -> RplModule:
    """Load an adapter; the projector group is skipped unless asked for."""
    tensors, manifest = load_tensors(path, drop_groups=("proj",) if drop_projector else ())
    meta = manifest["meta"]
    if meta.get("kind") != "rpl":
        raise ConfigError(f"{path} is not an adapter checkpoint")
    rpl = build_rpl(seg, RplConfig.from_dict(meta["rpl"]))
    missing, unexpected = rpl.load_state_dict(tensors, strict=False)
    if unexpected or any(rpl.param_group(k) != "proj" for k in missing):
        raise ConfigError(f"checkpoint {path} does not match the adapter layout")
    return rpl
