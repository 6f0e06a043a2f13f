import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rpl_ood.corocl import (
    EmbeddingBatch,
    SamplingConfig,
    ablation_variants,
    corocl_loss,
    downsample_mask,
    expand_cells,
    sample_embeddings,
)
from rpl_ood.errors import ConfigError

from oracles import central_diff, corocl_double_loop, rel_error


def batch(vectors, cls, ids=None, weight=None):
    v = torch.as_tensor(np.asarray(vectors), dtype=torch.float64)
    n = v.shape[0]
    ids = list(range(n)) if ids is None else ids
    prov = torch.tensor([[0, 0, i] for i in ids], dtype=torch.long).view(n, 3)
    w = None if weight is None else torch.as_tensor(weight)
    return EmbeddingBatch(v, torch.as_tensor(cls).long(), torch.zeros(n, dtype=torch.long), prov, w)


def unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def oracle(a: EmbeddingBatch, c: EmbeddingBatch, tau):
    a, c = a.expanded(), c.expanded()
    key = lambda b: [tuple(p) for p in b.provenance.tolist()]
    return corocl_double_loop(
        a.vectors.numpy(), a.class_tag.tolist(), key(a), c.vectors.numpy(), c.class_tag.tolist(), key(c), tau
    )


def test_no_negatives_gives_zero():
    a = batch([[1.0, 0.0]], [0], ids=[0])
    c = batch([[0.6, 0.8]], [0], ids=[1])
    assert corocl_loss(a, c, 0.1).item() == 0.0


def test_two_row_symmetric_case_is_log2():
    a = batch([[1.0, 0.0, 0.0]], [0], ids=[0])
    c = batch([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], [0, 1], ids=[1, 2])
    assert abs(corocl_loss(a, c, 0.1).item() - math.log(2.0)) <= 1e-9


def test_anchor_is_not_its_own_positive():
    v = [[1.0, 0.0], [0.0, 1.0]]
    a = batch(v[:1], [0], ids=[0])
    c = batch(v, [0, 1], ids=[0, 1])  # the only same-class row is the anchor itself
    assert corocl_loss(a, c, 0.1).item() == 0.0


def test_empty_sets_give_zero():
    empty = batch(np.zeros((0, 3)), [])
    full = batch([[1.0, 0.0, 0.0]], [0])
    assert corocl_loss(empty, full, 0.1).item() == 0.0
    assert corocl_loss(full, empty, 0.1).item() == 0.0


def test_tau_must_be_positive():
    with pytest.raises(ConfigError):
        corocl_loss(batch([[1.0]], [0]), batch([[1.0]], [1]), 0.0)


def test_random_batch_of_eight_matches_double_loop():
    rng = np.random.default_rng(0)
    a = batch(unit_rows(rng, 8, 5), rng.integers(0, 2, 8), ids=list(range(8)))
    c = batch(unit_rows(rng, 8, 5), rng.integers(0, 2, 8), ids=list(range(4, 12)))
    assert abs(corocl_loss(a, c, 0.1).item() - oracle(a, c, 0.1)) <= 1e-6


@settings(max_examples=200, deadline=None)
@given(
    st.integers(1, 8),
    st.integers(1, 8),
    st.integers(0, 2**31),
    st.floats(0.05, 1.0),
)
def test_vectorised_equals_double_loop(n_a, n_c, seed, tau):
    rng = np.random.default_rng(seed)
    # shared id pool so anchors and contrastives overlap sometimes
    a = batch(unit_rows(rng, n_a, 4), rng.integers(0, 2, n_a), ids=rng.choice(20, n_a, replace=False).tolist())
    c_ids = rng.choice(20, n_c, replace=False).tolist()
    c = batch(unit_rows(rng, n_c, 4), rng.integers(0, 2, n_c), ids=c_ids)
    # a shared pixel must carry the same vector and tag in both sets
    for i, aid in enumerate(a.provenance[:, 2].tolist()):
        if aid in c_ids:
            j = c_ids.index(aid)
            c.vectors[j] = a.vectors[i]
            c.class_tag[j] = a.class_tag[i]
    got = corocl_loss(a, c, tau).item()
    want = oracle(a, c, tau)
    assert got >= 0.0
    assert abs(got - want) <= 1e-6 * max(1.0, abs(want))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_multiplicity_weights_equal_repeated_rows(n_a, n_c, seed):
    rng = np.random.default_rng(seed)
    a = batch(unit_rows(rng, n_a, 3), rng.integers(0, 2, n_a), ids=list(range(n_a)), weight=rng.integers(1, 4, n_a))
    c = batch(
        unit_rows(rng, n_c, 3), rng.integers(0, 2, n_c), ids=list(range(100, 100 + n_c)), weight=rng.integers(1, 4, n_c)
    )
    got = corocl_loss(a, c, 0.1).item()
    assert abs(got - oracle(a, c, 0.1)) <= 1e-6 * max(1.0, got)
    assert abs(got - corocl_loss(a.expanded(), c.expanded(), 0.1).item()) <= 1e-9 * max(1.0, got)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_contrastive_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    a = batch(unit_rows(rng, 5, 4), rng.integers(0, 2, 5), ids=list(range(5)))
    c = batch(unit_rows(rng, 9, 4), rng.integers(0, 2, 9), ids=list(range(10, 19)))
    perm = torch.from_numpy(rng.permutation(9))
    cp = EmbeddingBatch(c.vectors[perm], c.class_tag[perm], c.context_tag[perm], c.provenance[perm])
    assert abs(corocl_loss(a, c, 0.1).item() - corocl_loss(a, cp, 0.1).item()) <= 1e-6


def test_gradients_match_central_differences():
    rng = np.random.default_rng(4)
    av, cv = unit_rows(rng, 4, 3), unit_rows(rng, 6, 3)
    acls, ccls = [0, 1, 0, 1], [0, 0, 1, 1, 0, 1]

    def f(avec, cvec):
        return corocl_loss(batch(avec, acls), batch(cvec, ccls, ids=list(range(10, 16))), 0.5)

    a = torch.tensor(av, requires_grad=True)
    c = torch.tensor(cv, requires_grad=True)
    loss = corocl_loss(
        EmbeddingBatch(a, torch.tensor(acls), torch.zeros(4, dtype=torch.long), batch(av, acls).provenance),
        EmbeddingBatch(c, torch.tensor(ccls), torch.zeros(6, dtype=torch.long), batch(cv, ccls, ids=list(range(10, 16))).provenance),
        0.5,
    )
    loss.backward()
    ga = central_diff(lambda x: f(x, cv).item(), av)
    gc = central_diff(lambda x: f(av, x).item(), cv)
    assert rel_error(a.grad.numpy(), ga) < 1e-4
    assert rel_error(c.grad.numpy(), gc) < 1e-4


# --- sampling -----------------------------------------------------------------

def _emb(n, r, h, w, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.nn.functional.normalize(torch.randn(n, r, h, w, generator=g, dtype=torch.float64), dim=1)


def test_budget_one_gives_four_contrastive_rows():
    mask_oe = torch.tensor([[[0, 1]]])
    mask_out = torch.tensor([[[1, 0]]])
    cfg = SamplingConfig(budget=1)
    anchors, contrastives, info = sample_embeddings(_emb(1, 3, 1, 2), mask_oe, _emb(1, 3, 1, 2, 1), mask_out, cfg)
    assert len(contrastives) == 4
    assert sorted(zip(contrastives.context_tag.tolist(), contrastives.class_tag.tolist())) == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert len(anchors) == 2 and set(anchors.context_tag.tolist()) == {0}


def test_no_outlier_pixels_leaves_inlier_anchors_only():
    z = torch.zeros(2, 4, 4, dtype=torch.long)
    anchors, contrastives, info = sample_embeddings(_emb(2, 3, 4, 4), z, _emb(2, 3, 4, 4, 1), z, SamplingConfig(budget=8))
    assert set(anchors.class_tag.tolist()) == {0}
    assert "anchor:oe:outlier" in info.skipped
    assert torch.isfinite(corocl_loss(anchors, contrastives, 0.1))


def test_sampling_is_deterministic_under_seed():
    m = (torch.rand(2, 6, 6, generator=torch.Generator().manual_seed(0)) < 0.3).long()
    runs = [sample_embeddings(_emb(2, 3, 6, 6), m, _emb(2, 3, 6, 6, 1), m, SamplingConfig(budget=5, seed=3)) for _ in range(2)]
    assert torch.equal(runs[0][0].provenance, runs[1][0].provenance)
    assert torch.equal(runs[0][1].provenance, runs[1][1].provenance)


def test_sampling_without_replacement_when_pool_is_large():
    m = torch.zeros(1, 8, 8, dtype=torch.long)
    anchors, _, _ = sample_embeddings(_emb(1, 3, 8, 8), m, None, None, SamplingConfig(budget=10, anchor_source=("oe:inlier",)))
    assert len(anchors) == 10 and len(set(anchors.provenance[:, 2].tolist())) == 10
    assert anchors.counts.sum().item() == 10


def test_sampling_with_replacement_when_pool_is_small():
    m = torch.zeros(1, 2, 2, dtype=torch.long)
    anchors, _, info = sample_embeddings(_emb(1, 3, 2, 2), m, None, None, SamplingConfig(budget=9, anchor_source=("oe:inlier",)))
    assert info.cell_sizes["anchor:oe:inlier"] == 4
    assert anchors.counts.sum().item() == 9
    assert len(anchors) <= 4


def test_sampled_rows_are_unit_norm_and_tags_follow_mask():
    m = (torch.rand(2, 6, 6, generator=torch.Generator().manual_seed(2)) < 0.5).long()
    emb = _emb(2, 4, 6, 6)
    anchors, _, _ = sample_embeddings(emb, m, None, None, SamplingConfig(budget=6))
    assert torch.allclose(anchors.vectors.norm(dim=1), torch.ones(len(anchors), dtype=torch.float64), atol=1e-5)
    for (ctx, s, p), tag in zip(anchors.provenance.tolist(), anchors.class_tag.tolist()):
        assert m[s].reshape(-1)[p].item() == tag


def test_downsample_mask_stays_binary():
    m = (torch.rand(2, 16, 16) < 0.3).long()
    d = downsample_mask(m, (4, 4))
    assert d.shape == (2, 4, 4) and set(d.unique().tolist()) <= {0, 1}


def test_cells():
    assert expand_cells("both") == (("oe", "inlier"), ("oe", "outlier"), ("out", "inlier"), ("out", "outlier"))
    assert expand_cells(("oe", "out:inlier")) == (("oe", "inlier"), ("oe", "outlier"), ("out", "inlier"))
    with pytest.raises(ConfigError):
        expand_cells("city")
    with pytest.raises(ConfigError):
        SamplingConfig(budget=0).validate()


def test_ablation_variants():
    variants = ablation_variants()
    assert len(variants) == 5
    default = SamplingConfig()
    assert default.anchor_source == ("oe",) and set(default.contrastive_source) == {"oe", "out"}
    assert sum(v.anchor_cells == default.anchor_cells and v.contrastive_cells == default.contrastive_cells for v in variants) == 1
    for v in variants:
        v.validate()
