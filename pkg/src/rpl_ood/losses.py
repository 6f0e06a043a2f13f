"""Training objectives on (N, C, H, W) logits and (N, H, W) binary masks.

Pixel sums are reduced in one of two ways.  "lattice" divides by the whole
lattice, so the inlier and outlier terms keep the relative weight of a plain
sum.  "contributing" (the default) divides each term by its own pixel count,
which keeps alpha meaningful whatever the outlier share of a batch.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError, NumericError

DEFAULT_ALPHA = 0.05
DEFAULT_T = 1.0
DEFAULT_TAU = 0.10


@dataclass(frozen=True)
class LossConfig:
    alpha: float = DEFAULT_ALPHA
    t: float = DEFAULT_T
    tau: float = DEFAULT_TAU
    m_in: float = -3.0
    m_out: float = -1.0
    soft_target: bool = False
    reduction: str = "contributing"  # or "lattice"

    def validate(self) -> "LossConfig":
        for name in ("alpha", "t", "tau"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.reduction not in REDUCTIONS:
            raise ConfigError(f"unknown reduction {self.reduction!r}")
        return self


REDUCTIONS = ("lattice", "contributing")


def _reduce(per_pixel: torch.Tensor, weight: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "lattice":
        return (weight * per_pixel).mean()
    if reduction == "contributing":
        return (weight * per_pixel).sum() / weight.sum().clamp_min(1.0)
    raise ConfigError(f"unknown reduction {reduction!r}")


@dataclass
class LossReport:
    l_in: float = 0.0
    l_out: float = 0.0
    l_rpl: float = 0.0
    l_corocl: float = 0.0
    total: float = 0.0
    n_inlier: int = 0
    n_outlier: int = 0

    def to_json(self, **extra) -> str:
        return json.dumps({**extra, **dataclasses.asdict(self)})


def _check_pair(logits: torch.Tensor, mask: torch.Tensor) -> None:
    if logits.ndim != 4 or mask.shape != (logits.shape[0], *logits.shape[2:]):
        raise InputError(f"mask {tuple(mask.shape)} not aligned with logits {tuple(logits.shape)}")


def energy(logits: torch.Tensor, dim: int = 1) -> torch.Tensor:
    """Free energy ``-log sum_i exp(x_i)`` along ``dim``."""
    if logits.shape[dim] < 1:
        raise InputError("energy needs at least one class")
    if not torch.isfinite(logits).all():
        raise NumericError("energy of non-finite logits")
    return -torch.logsumexp(logits, dim=dim)


def entropy(logits: torch.Tensor, dim: int = 1) -> torch.Tensor:
    logp = F.log_softmax(logits, dim=dim)
    return -(logp.exp() * logp).sum(dim=dim)


def positive_energy_loss(logits_hat: torch.Tensor, mask: torch.Tensor, reduction: str = "contributing") -> torch.Tensor:
    """``max(-m * E, 0)`` summed over outlier pixels, then reduced."""
    _check_pair(logits_hat, mask)
    m = mask.to(logits_hat.dtype)
    return _reduce(F.relu(-energy(logits_hat)), m, reduction)


def hinge_energy_loss(
    logits_hat: torch.Tensor, mask: torch.Tensor, m_in: float, m_out: float, reduction: str = "contributing"
) -> torch.Tensor:
    """Squared two-sided energy hinge.

    Inlier energy above ``m_in`` and outlier energy below ``m_out`` are
    penalised quadratically.
    """
    _check_pair(logits_hat, mask)
    m = mask.to(logits_hat.dtype)
    e = energy(logits_hat)
    return _reduce(F.relu(e - m_in) ** 2, 1 - m, reduction) + _reduce(F.relu(m_out - e) ** 2, m, reduction)


def dissimilarity(a: torch.Tensor, b: torch.Tensor, t: float) -> torch.Tensor:
    return ((a - b) / t) ** 2


def inlier_loss(
    logits_hat: torch.Tensor,
    logits_tilde: torch.Tensor,
    mask: torch.Tensor,
    t: float = DEFAULT_T,
    use_reg: bool = True,
    soft_target: bool = False,
    reduction: str = "contributing",
) -> torch.Tensor:
    """Cross-entropy towards the frozen prediction plus the entropy-gap penalty, over inlier pixels."""
    _check_pair(logits_hat, mask)
    if logits_tilde.shape != logits_hat.shape:
        raise InputError("logits_hat and logits_tilde differ in shape")
    if not t > 0:
        raise ConfigError(f"t must be > 0, got {t}")
    target = logits_tilde.detach()
    logp_hat = F.log_softmax(logits_hat, dim=1)
    if soft_target:
        ce = -(F.softmax(target, dim=1) * logp_hat).sum(dim=1)
    else:
        ce = F.nll_loss(logp_hat, target.argmax(dim=1), reduction="none")
    per_pixel = ce
    if use_reg:
        per_pixel = per_pixel + dissimilarity(entropy(target), entropy(logits_hat), t)
    return _reduce(per_pixel, 1 - mask.to(logits_hat.dtype), reduction)


def rpl_loss(
    logits_hat: torch.Tensor,
    logits_tilde: torch.Tensor,
    mask: torch.Tensor,
    cfg: LossConfig = LossConfig(),
    use_ds: bool = True,
    outlier_term: str = "pe",
) -> dict[str, torch.Tensor]:
    """``l_in + alpha * l_out``; ``outlier_term`` is "pe", "hinge" or "none"."""
    l_in = inlier_loss(logits_hat, logits_tilde, mask, cfg.t, use_reg=use_ds, soft_target=cfg.soft_target, reduction=cfg.reduction)
    if outlier_term == "pe":
        l_out = positive_energy_loss(logits_hat, mask, cfg.reduction)
    elif outlier_term == "hinge":
        l_out = hinge_energy_loss(logits_hat, mask, cfg.m_in, cfg.m_out, cfg.reduction)
    elif outlier_term == "none":
        l_out = (logits_hat * 0).sum()
    else:
        raise ConfigError(f"unknown outlier term {outlier_term!r}")
    return {"l_in": l_in, "l_out": l_out, "l_rpl": l_in + cfg.alpha * l_out}

