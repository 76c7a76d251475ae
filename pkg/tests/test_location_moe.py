import math

import numpy as np
import pytest
import torch

from nextlocmoe.location_moe import (
    FunctionExperts,
    FunctionRouting,
    LocationSemanticsMoE,
    apply_function_expert,
    enhance_spatial_embedding,
    init_function_experts,
    route_functions,
    top_k_mask,
)
from nextlocmoe.taxonomy import HashingTextEncoder, function_descriptions

import oracles

# Largest pairwise cosine similarity between the function-expert biases built
# from the bundled descriptions with the default hashing encoder (d=64, seed 0)
# and d_xy=128; measured once and frozen.
MAX_BIAS_COSINE = 0.5510


@pytest.fixture
def moe():
    torch.manual_seed(0)
    return LocationSemanticsMoE(record_dim=176, d_hist=64, d_xy=128, n_experts=5, k=2).double()


def _routing(logits, k):
    p = np.array(oracles.softmax_mp(logits))
    return FunctionRouting(np.asarray(logits), p, tuple(oracles.top_k(list(p), k)))


# ---------------------------------------------------------------- routing

def test_zero_router_uniform_and_tie_break(moe):
    with torch.no_grad():
        moe.router.fc2.weight.zero_()
        moe.router.fc2.bias.zero_()
    r = route_functions(torch.randn(176, dtype=torch.float64), torch.randn(64, dtype=torch.float64), moe)
    np.testing.assert_allclose(r.probs, [0.2] * 5, rtol=0, atol=1e-15)
    assert r.selected == (0, 1)


def test_analytic_softmax(moe):
    with torch.no_grad():
        moe.router.fc2.weight.zero_()
        moe.router.fc2.bias.copy_(torch.tensor([math.log(2), 0, 0, 0, 0], dtype=torch.float64))
    r = route_functions(torch.zeros(176, dtype=torch.float64), torch.zeros(64, dtype=torch.float64), moe)
    np.testing.assert_allclose(r.probs, [2 / 6, 1 / 6, 1 / 6, 1 / 6, 1 / 6], rtol=0, atol=1e-15)
    assert r.selected == (0, 1)


def test_softmax_matches_high_precision(moe):
    g = torch.Generator().manual_seed(3)
    for _ in range(200):
        e = torch.randn(176, generator=g, dtype=torch.float64) * 3
        h = torch.randn(64, generator=g, dtype=torch.float64) * 3
        r = route_functions(e, h, moe)
        np.testing.assert_allclose(r.probs, oracles.softmax_mp(r.logits), rtol=0, atol=1e-9)
        assert abs(r.probs.sum() - 1) < 1e-12 and (r.probs > 0).all()
        assert list(r.selected) == oracles.top_k(list(r.probs), 2)


def test_router_dimension_mismatch(moe):
    with pytest.raises(ValueError):
        route_functions(torch.zeros(170, dtype=torch.float64), torch.zeros(64, dtype=torch.float64), moe)


def test_top_k_mask_properties():
    g = torch.Generator().manual_seed(0)
    for k in range(1, 6):
        p = torch.softmax(torch.randn(300, 5, generator=g), -1)
        m = top_k_mask(p, k)
        assert (m.sum(-1) == k).all()
        sel_min = torch.where(m, p, torch.inf).min(-1).values
        unsel_max = torch.where(m, -torch.inf, p).max(-1).values
        assert (sel_min >= unsel_max).all()


def test_shift_invariance(moe):
    g = torch.Generator().manual_seed(1)
    logits = torch.randn(50, 5, generator=g, dtype=torch.float64)
    p1, p2 = torch.softmax(logits, -1), torch.softmax(logits + 17.0, -1)
    torch.testing.assert_close(p1, p2, rtol=0, atol=1e-9)
    assert torch.equal(top_k_mask(p1, 2), top_k_mask(p2, 2))


def test_top_k_ties_prefer_lower_index():
    p = torch.tensor([[0.1, 0.3, 0.3, 0.3, 0.0]])
    assert top_k_mask(p, 2).tolist() == [[False, True, True, False, False]]


# ---------------------------------------------------------------- experts

def test_zero_weight_gives_bias():
    ex = FunctionExperts(5, 8).double()
    with torch.no_grad():
        ex.weight.zero_()
    for i in range(5):
        assert torch.equal(apply_function_expert(ex, i, 0.3, 0.9), ex.bias[i])


def test_origin_gives_bias():
    ex = FunctionExperts(5, 8).double()
    for i in range(5):
        assert torch.equal(apply_function_expert(ex, i, 0.0, 0.0), ex.bias[i])


def test_expert_matches_matmul():
    rng = np.random.default_rng(0)
    ex = FunctionExperts(5, 16).double()
    with torch.no_grad():
        ex.weight.copy_(torch.as_tensor(rng.normal(size=(5, 16, 2))))
        ex.bias.copy_(torch.as_tensor(rng.normal(size=(5, 16))))
    W, b = ex.weight.detach().numpy(), ex.bias.detach().numpy()
    for _ in range(100):
        i, (x, y) = int(rng.integers(5)), rng.uniform(-1, 1, 2)
        expected = [W[i, r, 0] * x + W[i, r, 1] * y + b[i, r] for r in range(16)]
        np.testing.assert_allclose(apply_function_expert(ex, i, x, y).detach().numpy(), expected, rtol=0, atol=1e-12)


def test_expert_index_out_of_range():
    with pytest.raises(IndexError):
        apply_function_expert(FunctionExperts(5, 4), 5, 0.0, 0.0)


# ---------------------------------------------------------------- enhancement

def test_zero_experts_are_neutral(moe):
    with torch.no_grad():
        moe.experts.weight.zero_()
        moe.experts.bias.zero_()
    g = torch.Generator().manual_seed(0)
    shared = torch.randn(3, 5, 128, generator=g, dtype=torch.float64)
    out, *_ = moe(torch.rand(3, 5, 2, generator=g, dtype=torch.float64),
                  torch.randn(3, 5, 176, generator=g, dtype=torch.float64),
                  torch.randn(3, 64, generator=g, dtype=torch.float64), shared)
    assert torch.equal(out, shared)


def test_all_experts_uniform_probability():
    ex = FunctionExperts(5, 6).double()
    with torch.no_grad():
        ex.bias.normal_()
    shared = torch.arange(6, dtype=torch.float64)
    routing = FunctionRouting(np.zeros(5), np.full(5, 0.2), (0, 1, 2, 3, 4))
    out = enhance_spatial_embedding((0.4, 0.6), routing, shared, ex)
    expected = shared + 0.2 * sum(apply_function_expert(ex, i, 0.4, 0.6) for i in range(5))
    torch.testing.assert_close(out, expected, rtol=0, atol=1e-12)


def test_enhancement_matches_oracle():
    rng = np.random.default_rng(42)
    ex = FunctionExperts(5, 12).double()
    for _ in range(300):
        W, b = rng.normal(size=(5, 12, 2)), rng.normal(size=(5, 12))
        with torch.no_grad():
            ex.weight.copy_(torch.as_tensor(W))
            ex.bias.copy_(torch.as_tensor(b))
        logits, xy, shared = rng.normal(size=5) * 2, rng.uniform(0, 1, 2), rng.normal(size=12)
        got = enhance_spatial_embedding(tuple(xy), _routing(logits, 2), torch.as_tensor(shared), ex)
        want = oracles.enhanced_spatial(xy, logits, W, b, shared, 2)
        np.testing.assert_allclose(got.detach().numpy(), want, rtol=0, atol=1e-9)


def test_batched_module_matches_single_record_path(moe):
    g = torch.Generator().manual_seed(5)
    xy = torch.rand(4, 3, 2, generator=g, dtype=torch.float64)
    e_c0 = torch.randn(4, 3, 176, generator=g, dtype=torch.float64)
    h = torch.randn(4, 64, generator=g, dtype=torch.float64)
    shared = torch.randn(4, 3, 128, generator=g, dtype=torch.float64)
    out, logits, probs, sel = moe(xy, e_c0, h, shared)
    for b in range(4):
        for n in range(3):
            r = route_functions(e_c0[b, n], h[b], moe)
            assert set(r.selected) == set(torch.nonzero(sel[b, n]).flatten().tolist())
            single = enhance_spatial_embedding(tuple(xy[b, n].tolist()), r, shared[b, n], moe.experts)
            torch.testing.assert_close(out[b, n], single, rtol=0, atol=1e-10)


def test_no_renormalization_shrinks_diffuse_mix():
    ex = FunctionExperts(5, 3).double()
    with torch.no_grad():
        ex.weight.zero_()
        ex.bias.fill_(1.0)
    routing = FunctionRouting(np.zeros(5), np.full(5, 0.2), (0, 1))
    out = enhance_spatial_embedding((0.0, 0.0), routing, torch.zeros(3, dtype=torch.float64), ex)
    torch.testing.assert_close(out, torch.full((3,), 0.4, dtype=torch.float64))


# ---------------------------------------------------------------- semantic init

def test_identical_descriptions_identical_biases():
    ex = FunctionExperts(5, 32)
    init_function_experts(ex, ["same words here"] * 2 + ["a", "b", "c"], HashingTextEncoder(64, 0), seed=0)
    assert torch.equal(ex.bias[0], ex.bias[1])


def test_init_reproducible():
    a, b = FunctionExperts(5, 32), FunctionExperts(5, 32)
    texts = function_descriptions()
    init_function_experts(a, texts, HashingTextEncoder(64, 0), seed=1)
    init_function_experts(b, texts, HashingTextEncoder(64, 0), seed=1)
    assert torch.equal(a.bias, b.bias)


def test_init_wrong_count():
    with pytest.raises(ValueError):
        init_function_experts(FunctionExperts(5, 8), ["only one"], HashingTextEncoder(64, 0))


def test_bundled_descriptions_give_distinct_biases():
    ex = FunctionExperts(5, 128)
    init_function_experts(ex, function_descriptions(), HashingTextEncoder(64, 0), seed=0)
    b = torch.nn.functional.normalize(ex.bias.detach().double(), dim=1)
    cos = (b @ b.T).fill_diagonal_(-1).max().item()
    assert cos < 0.99
    assert cos == pytest.approx(MAX_BIAS_COSINE, abs=5e-5)
