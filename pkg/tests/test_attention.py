import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from semocc import attention as at
from semocc.oracles import compare, naive_linear_attention


def _qkv(m, c, seed, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(m, c, generator=g, dtype=dtype) for _ in range(3)]


@settings(max_examples=25, deadline=None)
@given(m=st.integers(1, 40), c=st.integers(1, 12), seed=st.integers(0, 10_000))
def test_linear_attention_matches_naive(m, c, seed):
    q, k, v = _qkv(m, c, seed)
    rep = compare("attn", at.linear_attention(q, k, v, c).numpy(),
                  naive_linear_attention(q.numpy(), k.numpy(), v.numpy(), c), 1e-10)
    assert rep.passed, rep.to_json()


def test_attention_rows_are_convex_combinations():
    q, k, v = _qkv(30, 5, 1)
    out = at.linear_attention(q, k, v, 5)
    lo, hi = v.min(0).values, v.max(0).values
    assert torch.all(out >= lo - 1e-12) and torch.all(out <= hi + 1e-12)


def test_constant_values_give_constant_output():
    q, k, _ = _qkv(20, 4, 2)
    v = torch.ones(20, 4) * torch.tensor([1.0, -2.0, 3.0, 0.5])
    out = at.linear_attention(q.float(), k.float(), v, 4)
    assert torch.allclose(out, v, atol=1e-6)


def test_single_point_returns_its_value():
    q, k, v = _qkv(1, 6, 3)
    assert torch.allclose(at.linear_attention(q, k, v, 6), v)


def test_permutation_equivariance():
    q, k, v = _qkv(25, 4, 4)
    perm = torch.randperm(25, generator=torch.Generator().manual_seed(0))
    a = at.linear_attention(q, k, v, 4)[perm]
    b = at.linear_attention(q[perm], k[perm], v[perm], 4)
    assert torch.allclose(a, b)


def test_chunked_identity_plan_equals_full():
    q, k, v = _qkv(50, 4, 5)
    full = at.linear_attention(q, k, v, 4)
    assert torch.allclose(at.chunked_attention(q, k, v, 4, at.ChunkPlan.identity(50)), full)


def test_chunked_equals_per_chunk_naive():
    q, k, v = _qkv(23, 3, 6)
    plan = at.ChunkPlan.random(23, chunk_size=5, seed=9)
    out = at.chunked_attention(q, k, v, 3, plan)
    ref = np.zeros((23, 3))
    for idx in plan.chunks():
        i = idx.numpy()
        ref[i] = naive_linear_attention(q[i].numpy(), k[i].numpy(), v[i].numpy(), 3)
    assert compare("chunked", out.numpy(), ref, 1e-10).passed


def test_chunk_plan_is_seeded_partition():
    a = at.ChunkPlan.random(100, 16, seed=3)
    b = at.ChunkPlan.random(100, 16, seed=3)
    assert torch.equal(a.permutation, b.permutation)
    assert sorted(torch.cat(a.chunks()).tolist()) == list(range(100))
    assert [len(c) for c in a.chunks()] == [16] * 6 + [4]


def test_project_qkv_shapes_and_keys():
    p = at.SpatialAttention(6, 4, 5)
    q, k, v = at.project_qkv(torch.randn(3, 6), torch.randn(3, 4), p)
    assert q.shape == k.shape == v.shape == (3, 5)
    p2 = at.SpatialAttention(6, 4, 5, text_keys=False)
    assert p2.k.in_features == 6
    with pytest.raises(ValueError):
        at.project_qkv(torch.randn(3, 7), torch.randn(3, 4), p)
    assert p.scale == 5.0


def test_project_qkv_golden():
    torch.manual_seed(3)
    p = at.SpatialAttention(6, 4, 5).double()
    g = torch.Generator().manual_seed(11)
    V = torch.randn(2, 6, generator=g, dtype=torch.float64)
    C = torch.randn(2, 4, generator=g, dtype=torch.float64)
    q, k, vv = (x.detach().numpy() for x in at.project_qkv(V, C, p))
    assert np.allclose(q[0], [-0.3864447249526902, 0.2883529718005485, -0.32703217201409335,
                              0.5763181815121279, -0.7863126793306437], atol=1e-12)
    assert np.allclose(k[1], [-0.28154802542671464, -0.22211787587221127, 0.319346037354086,
                              0.462013211941551, -0.05392802329490909], atol=1e-12)
    assert np.allclose(vv[0], [0.7992734415906576, -0.9671063345807001, -0.9437657049292338,
                               1.8940095219349122, 0.15411801941315917], atol=1e-12)


def test_density_head_non_negative_and_threshold():
    p = at.SpatialAttention(4, 2, 3)
    sigma = at.density_head(torch.randn(100, 3) * 10, p)
    assert sigma.shape == (100,) and torch.all(sigma >= 0)
    occ = at.occupancy_from_density(torch.tensor([0.2, 0.5, 0.7]), 0.5)
    assert occ.tolist() == [False, False, True]
    with pytest.raises(ValueError):
        at.occupancy_from_density(sigma, 0.0)


def test_softplus_at_zero_is_log2():
    p = at.SpatialAttention(4, 2, 3)
    with torch.no_grad():
        p.density.weight.zero_()
        p.density.bias.zero_()
    assert torch.allclose(at.density_head(torch.randn(4, 3), p), torch.full((4,), math.log(2)))
