import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cgqr.encoder import FeatureSet
from cgqr.errors import ShapeError
from cgqr.refinement import (
    ContourCrossAttention,
    FusedTokens,
    PyramidFusion,
    QueryEmbedding,
    attention_refine,
    flatten,
    load_attention_trace,
    save_attention_trace,
    unflatten,
)
from oracles import attention_oracle, central_difference, relative_error


# -- query embedding -------------------------------------------------------------

def test_zero_descriptor_gives_bias():
    emb = QueryEmbedding(8, n_base=4)
    bank = emb(torch.zeros(1, 3, 6))
    for k in range(3):
        assert torch.equal(bank.contour_queries[0, k], emb.proj.bias)


def test_embedding_is_affine():
    emb = QueryEmbedding(8).double()
    d = torch.randn(1, 3, 6, dtype=torch.float64)
    q = lambda x: emb(x).contour_queries
    torch.testing.assert_close(q(2 * d) - q(d), q(d) - q(torch.zeros_like(d)), rtol=0, atol=1e-12)


def test_bank_shape_and_flags():
    bank = QueryEmbedding(8, n_base=4)(torch.randn(2, 3, 6))
    assert bank.queries.shape == (2, 7, 8) and bank.M == 7
    assert bank.is_contour.tolist() == [True] * 3 + [False] * 4


def test_wrong_descriptor_arity():
    with pytest.raises(ShapeError):
        QueryEmbedding(8)(torch.randn(1, 3, 5))


def test_no_contour_queries_bank():
    emb = QueryEmbedding(8, n_base=4, use_contour=False)
    bank = emb(None, batch_size=2)
    assert bank.queries.shape == (2, 4, 8) and bank.n_contour == 0
    assert emb.proj is None


# -- pyramid fusion --------------------------------------------------------------

def _features(c=(16, 32, 64), sizes=(16, 8, 4), zero=False):
    make = torch.zeros if zero else torch.randn
    return FeatureSet(*(make(1, ch, s, s) for ch, s in zip(c, sizes)))


def test_fusion_zero_in_zero_out():
    out = PyramidFusion((16, 32, 64), 32)(_features(zero=True))
    assert torch.count_nonzero(out.tokens) == 0


def test_fusion_token_shape():
    out = PyramidFusion((16, 32, 64), 32)(_features())
    assert out.tokens.shape == (1, 256, 32) and out.spatial_shape == (16, 16)


def test_fusion_single_branch_path():
    fusion = PyramidFusion((16, 32, 64), 32)
    feats = _features()
    only_first = FeatureSet(feats.f1, torch.zeros_like(feats.f2), torch.zeros_like(feats.f3))
    expected = flatten(fusion.align[0](feats.f1)).tokens
    assert torch.equal(fusion(only_first).tokens, expected)


def test_fusion_without_pyramid_uses_first_branch_only():
    fusion = PyramidFusion((16, 32, 64), 32, use_all_branches=False)
    assert len(fusion.align) == 1
    feats = _features()
    assert torch.equal(fusion(feats).tokens, flatten(fusion.align[0](feats.f1)).tokens)


def test_fusion_upsampling_is_nearest():
    fusion = PyramidFusion((1, 1, 1), 1)
    with torch.no_grad():
        for conv in fusion.align:
            conv.weight.fill_(1.0)
    f2 = torch.arange(4.0).view(1, 1, 2, 2)
    feats = FeatureSet(torch.zeros(1, 1, 4, 4), f2, torch.zeros(1, 1, 1, 1))
    grid = unflatten(fusion(feats))
    expected = torch.repeat_interleave(torch.repeat_interleave(f2, 2, -1), 2, -2)
    assert torch.equal(grid, expected)


# -- flatten / unflatten -----------------------------------------------------------

def test_flatten_row_major_and_inverse():
    grid = torch.randn(2, 3, 4, 5)
    t = flatten(grid)
    assert t.tokens.shape == (2, 20, 3)
    assert torch.equal(t.tokens[1, 2 * 5 + 3], grid[1, :, 2, 3])
    assert torch.equal(unflatten(t), grid)


def test_fused_tokens_validation():
    with pytest.raises(ShapeError):
        FusedTokens(torch.zeros(1, 10, 4), (3, 3))


# -- cross-attention -----------------------------------------------------------

def test_zero_gate_is_identity():
    att = ContourCrossAttention(8)
    assert att.gamma.item() == 0.0
    tokens = FusedTokens(torch.randn(2, 12, 8), (3, 4))
    bank = QueryEmbedding(8)(torch.randn(2, 3, 6))
    refined, trace = att(tokens, bank)
    assert torch.equal(refined.tokens, tokens.tokens)
    assert refined.spatial_shape == (3, 4)
    assert trace.weights.shape == (2, 7, 12)


def test_equal_logits_give_uniform_weights():
    one = torch.ones(1, 1)
    _, w, _, _ = attention_refine(torch.zeros(2, 1), torch.ones(1, 1), one, one, one, one, 0.0)
    assert w.tolist() == [[0.5, 0.5]]


def test_two_token_example_matches_scalar_evaluation():
    one = torch.ones(1, 1, dtype=torch.float64)
    tokens = torch.tensor([[1.0], [-1.0]], dtype=torch.float64)
    query = torch.tensor([[1.0]], dtype=torch.float64)
    refined, w, h, m = attention_refine(tokens, query, one, one, one, one, 1.0)
    e2 = math.exp(2)
    np.testing.assert_allclose(w.numpy(), [[e2 / (1 + e2), 1 / (1 + e2)]], rtol=0, atol=1e-12)
    A, H, M, R = attention_oracle(tokens.numpy(), query.numpy(), [[1]], [[1]], [[1]], [[1]], 1.0)
    for got, want in ((w, A), (h, H), (m, M), (refined, R)):
        np.testing.assert_allclose(got.numpy(), want, rtol=0, atol=1e-12)


def test_random_attention_matches_scalar_evaluation():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n, m, d = (int(v) for v in rng.integers(1, 6, 3))
        arrs = [rng.standard_normal(s) for s in ((n, d), (m, d), (d, d), (d, d), (d, d), (d, d))]
        gamma = float(rng.standard_normal())
        got = attention_refine(*(torch.from_numpy(a) for a in arrs), gamma)
        A, H, M, R = attention_oracle(*arrs, gamma)
        for g, want in zip((got[1], got[2], got[3], got[0]), (A, H, M, R)):
            np.testing.assert_allclose(g.numpy(), want, rtol=0, atol=1e-12)


def test_dim_mismatch():
    w = torch.eye(4)
    with pytest.raises(ShapeError):
        attention_refine(torch.zeros(3, 4), torch.zeros(2, 5), w, w, w, w, 0.0)


@given(st.integers(1, 12), st.integers(1, 40), st.integers(1, 16), st.floats(0.1, 20), st.integers(0, 2**31))
@settings(max_examples=100, deadline=None)
def test_softmax_rows_are_distributions(m, n, d, scale, seed):
    g = torch.Generator().manual_seed(seed)
    t = torch.randn(n, d, generator=g) * scale
    q = torch.randn(m, d, generator=g) * scale
    w = [torch.randn(d, d, generator=g) for _ in range(4)]
    _, weights, _, _ = attention_refine(t, q, *w, 1.0)
    assert torch.all(weights >= 0)
    assert torch.allclose(weights.sum(-1), torch.ones(m), atol=1e-5)


def test_attention_block_gradients_finite_difference():
    """All five projections (descriptor map, W_Q, W_K, W_V, W_M) and the gate."""
    torch.manual_seed(11)
    d = 4
    emb = QueryEmbedding(d, n_base=2).double()
    att = ContourCrossAttention(d, gamma_init=0.7).double()
    tokens = FusedTokens(torch.randn(1, 9, d, dtype=torch.float64), (3, 3))
    desc = torch.rand(1, 3, 6, dtype=torch.float64)
    probe = torch.randn(1, 9, d, dtype=torch.float64)

    def loss():
        refined, _ = att(tokens, emb(desc))
        return (refined.tokens * probe).sum()

    params = [emb.proj.weight, emb.proj.bias, att.w_q, att.w_k, att.w_v, att.w_m, att.gamma]
    analytic = torch.autograd.grad(loss(), params)
    numeric = central_difference(loss, [p.data for p in params])
    assert relative_error(analytic, numeric) < 1e-5
    for a, n in zip(analytic, numeric):  # every block individually, too
        assert relative_error([a], [n]) < 1e-5


def test_attention_trace_roundtrip(tmp_path):
    att = ContourCrossAttention(4)
    _, trace = att(FusedTokens(torch.randn(2, 6, 4), (2, 3)), QueryEmbedding(4)(torch.randn(2, 3, 6)))
    save_attention_trace(trace, tmp_path / "tr", index=1)
    back = load_attention_trace(tmp_path / "tr")
    np.testing.assert_array_equal(back["weights"], trace.weights[1].detach().numpy())
    np.testing.assert_array_equal(back["modulation"], trace.modulation[1].detach().numpy())
    assert back["context"].shape == (7, 4)
