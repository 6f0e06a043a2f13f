"""Context-robust contrastive loss over sampled pixel embeddings.

Embeddings come from two contexts: ``oe`` (inlier scenes with pasted
outliers) and ``out`` (vanilla outlier images).  Each pixel also carries a
class tag, inlier (0) or outlier (1), from the binary mask.  A *cell* is one
``(context, class)`` combination; sampling draws up to ``budget`` rows per
cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError

CONTEXTS = {"oe": 0, "out": 1}
CLASSES = {"inlier": 0, "outlier": 1}


def expand_cells(sources) -> tuple[tuple[str, str], ...]:
    """``("oe", "out:inlier")`` -> ``(("oe","inlier"), ("oe","outlier"), ("out","inlier"))``."""
    if isinstance(sources, str):
        sources = (sources,)
    cells: list[tuple[str, str]] = []
    for src in sources:
        if src == "both":
            parts = [(c, k) for c in CONTEXTS for k in CLASSES]
        elif ":" in src:
            ctx, cls = src.split(":", 1)
            parts = [(ctx, cls)]
        else:
            parts = [(src, k) for k in CLASSES]
        for ctx, cls in parts:
            if ctx not in CONTEXTS or cls not in CLASSES:
                raise ConfigError(f"unknown embedding cell {src!r}")
            if (ctx, cls) not in cells:
                cells.append((ctx, cls))
    return tuple(cells)


@dataclass(frozen=True)
class SamplingConfig:
    budget: int = 512
    anchor_source: tuple[str, ...] = ("oe",)
    contrastive_source: tuple[str, ...] = ("oe", "out")
    seed: int = 0
    name: str = "default"

    def validate(self) -> "SamplingConfig":
        if self.budget < 1:
            raise ConfigError(f"budget must be >= 1, got {self.budget}")
        if not expand_cells(self.anchor_source) or not expand_cells(self.contrastive_source):
            raise ConfigError("anchor and contrastive sources must be nonempty")
        return self

    @property
    def anchor_cells(self):
        return expand_cells(self.anchor_source)

    @property
    def contrastive_cells(self):
        return expand_cells(self.contrastive_source)


@dataclass
class EmbeddingBatch:
    vectors: torch.Tensor  # (N, R), unit norm
    class_tag: torch.Tensor  # (N,) long, 0 inlier / 1 outlier
    context_tag: torch.Tensor  # (N,) long, 0 oe / 1 out
    provenance: torch.Tensor  # (N, 3) long: context, sample index, flat pixel index
    weight: torch.Tensor | None = None  # (N,) draw multiplicity; None means all ones

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def counts(self) -> torch.Tensor:
        if self.weight is None:
            return torch.ones(len(self), dtype=self.vectors.dtype)
        return self.weight.to(self.vectors.dtype)

    def expanded(self) -> "EmbeddingBatch":
        """Rows repeated by multiplicity (the literal with-replacement draw)."""
        if self.weight is None:
            return self
        rep = self.weight.long()
        return EmbeddingBatch(
            self.vectors.repeat_interleave(rep, dim=0),
            self.class_tag.repeat_interleave(rep),
            self.context_tag.repeat_interleave(rep),
            self.provenance.repeat_interleave(rep, dim=0),
        )


@dataclass
class SamplingInfo:
    cell_sizes: dict[str, int] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)


def downsample_mask(mask: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbour resize of an (N, H, W) binary mask."""
    return F.interpolate(mask[:, None].float(), size=size, mode="nearest")[:, 0].long()


def _flatten(emb: torch.Tensor, mask: torch.Tensor):
    if emb.ndim != 4:
        raise InputError(f"embeddings must be (N, R, h, w), got {tuple(emb.shape)}")
    n, r, h, w = emb.shape
    m = downsample_mask(mask, (h, w)) if mask.shape[-2:] != (h, w) else mask.long()
    vec = emb.permute(0, 2, 3, 1).reshape(-1, r)
    sample = torch.arange(n).repeat_interleave(h * w)
    pixel = torch.arange(h * w).repeat(n)
    return vec, m.reshape(-1), sample, pixel


def _draw(pool: np.ndarray, budget: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Budget-sized draw returned as (unique pixel indices, multiplicities)."""
    if len(pool) >= budget:
        return rng.choice(pool, size=budget, replace=False), np.ones(budget, dtype=np.int64)
    drawn = rng.choice(pool, size=budget, replace=True)
    uniq, counts = np.unique(drawn, return_counts=True)
    return uniq, counts


def sample_embeddings(
    embeddings_oe: torch.Tensor,
    mask_oe: torch.Tensor,
    embeddings_out: torch.Tensor | None,
    mask_out: torch.Tensor | None,
    cfg: SamplingConfig,
    rng: np.random.Generator | None = None,
) -> tuple[EmbeddingBatch, EmbeddingBatch, SamplingInfo]:
    """Draw anchor and contrastive sets; empty cells are skipped and reported.

    A cell with fewer pixels than ``budget`` is drawn with replacement; repeated
    pixels are returned once with their multiplicity in ``weight``.
    """
    cfg.validate()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    flat = {"oe": _flatten(embeddings_oe, mask_oe)}
    if embeddings_out is not None:
        flat["out"] = _flatten(embeddings_out, mask_out)
    info = SamplingInfo()

    def gather(cells, role):
        parts = []
        for ctx, cls in cells:
            key = f"{role}:{ctx}:{cls}"
            if ctx not in flat:
                info.cell_sizes[key] = 0
                info.skipped.append(key)
                continue
            vec, m, sample, pixel = flat[ctx]
            pool = np.flatnonzero(m.numpy() == CLASSES[cls])
            info.cell_sizes[key] = int(len(pool))
            if len(pool) == 0:
                info.skipped.append(key)
                continue
            drawn, counts = _draw(pool, cfg.budget, rng)
            idx = torch.from_numpy(drawn)
            k = len(idx)
            prov = torch.stack([torch.full((k,), CONTEXTS[ctx]), sample[idx], pixel[idx]], dim=1)
            parts.append(
                (vec[idx], torch.full((k,), CLASSES[cls]), torch.full((k,), CONTEXTS[ctx]), prov, torch.from_numpy(counts))
            )
        if not parts:
            dim = embeddings_oe.shape[1]
            empty = torch.zeros(0, dtype=torch.long)
            return EmbeddingBatch(
                embeddings_oe.new_zeros(0, dim), empty, empty, torch.zeros(0, 3, dtype=torch.long), empty
            )
        return EmbeddingBatch(*(torch.cat(cols) for cols in zip(*parts)))

    anchors = gather(cfg.anchor_cells, "anchor")
    contrastives = gather(cfg.contrastive_cells, "contrastive")
    return anchors, contrastives, info


def corocl_loss(anchors: EmbeddingBatch, contrastives: EmbeddingBatch, tau: float) -> torch.Tensor:
    """Mean over (anchor, positive) pairs of
    ``-log(exp(a.p/tau) / (exp(a.p/tau) + sum_n exp(a.n/tau)))``.

    Positives share the anchor's class tag (the anchor's own pixel excluded),
    negatives carry the other tag.  Other positives stay out of the
    denominator.  Row multiplicities (``weight``) count as repeated rows.
    """
    if not tau > 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    a, c = anchors.vectors, contrastives.vectors
    if len(anchors) == 0 or len(contrastives) == 0:
        return (a.sum() + c.sum()) * 0
    wa, wc = anchors.counts.to(a.dtype), contrastives.counts.to(a.dtype)
    sim = a @ c.T / tau
    same = anchors.class_tag[:, None] == contrastives.class_tag[None, :]
    self_pair = _provenance_key(anchors)[:, None] == _provenance_key(contrastives)[None, :]
    pos = same & ~self_pair
    neg = ~same
    has_neg = neg.any(dim=1)
    # multiplicities enter the negative sum as log-weights; rows without
    # negatives are zero-filled to keep logsumexp finite and masked out below
    neg_logits = (sim + wc.log()[None, :]).masked_fill(~neg, float("-inf")).masked_fill(~has_neg[:, None], 0.0)
    lse_neg = torch.logsumexp(neg_logits, dim=1)
    x = lse_neg[:, None] - sim
    pair = torch.logaddexp(torch.zeros_like(x), x)
    pair = torch.where(has_neg[:, None], pair, torch.zeros_like(pair))
    pair_w = (wa[:, None] * wc[None, :]) * pos
    n_pairs = pair_w.sum()
    if n_pairs == 0:
        return sim.sum() * 0
    return (pair * pair_w).sum() / n_pairs


def _provenance_key(batch: EmbeddingBatch) -> torch.Tensor:
    p = batch.provenance.long()
    return (p[:, 0] << 40) | (p[:, 1] << 20) | p[:, 2]


def ablation_variants(base: SamplingConfig | None = None) -> list[SamplingConfig]:
    """Anchor/contrastive source combinations, in table order.

    The fourth entry is the default construction.
    """
    base = base or SamplingConfig()
    rows = [
        ("oe/oe", ("oe",), ("oe",)),
        ("out/out", ("out",), ("out",)),
        ("oe/oe+out:inlier", ("oe",), ("oe", "out:inlier")),
        ("oe/oe+out", ("oe",), ("oe", "out")),
        ("both/both", ("oe", "out"), ("oe", "out")),
    ]
    return [
        SamplingConfig(budget=base.budget, anchor_source=a, contrastive_source=c, seed=base.seed, name=n).validate()
        for n, a, c in rows
    ]
