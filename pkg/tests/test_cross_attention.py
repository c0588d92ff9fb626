import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from retina_wsss.cross_attention import CrossAttention, CrossAttentionBlock, FeatureExchange
from retina_wsss.encoder import init_weights
from retina_wsss.errors import ConfigError, DimensionError


@pytest.fixture(autouse=True)
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def _attn(dim=4, heads=2, seed=0):
    a = CrossAttention(dim, heads)
    init_weights(a, torch.Generator().manual_seed(seed), std=0.5)
    return a


def test_single_token_is_projected_value():
    a = _attn()
    q, kv = torch.randn(1, 1, 4), torch.randn(1, 1, 4)
    z, aff = a(q, kv, return_affinity=True)
    assert torch.allclose(aff, torch.ones_like(aff))
    assert torch.allclose(z, a.proj(a.w_v(kv)))


def test_zero_query_gives_uniform_rows():
    a = _attn()
    _, aff = a(torch.zeros(2, 6, 4), torch.randn(2, 6, 4), return_affinity=True)
    assert torch.allclose(aff, torch.full_like(aff, 1 / 6))


def test_two_token_hand_oracle():
    a = CrossAttention(2, 1)
    with torch.no_grad():
        a.w_q.weight.copy_(torch.tensor([[1.0, 0.0], [0.0, 1.0]]))
        a.w_k.weight.copy_(torch.tensor([[2.0, 0.0], [0.0, 0.0]]))
        a.w_v.weight.copy_(torch.tensor([[1.0, 1.0], [0.0, 1.0]]))
        a.proj.weight.copy_(torch.eye(2))
        a.proj.bias.zero_()
    q = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]])
    kv = torch.tensor([[[1.0, 0.0], [0.0, 2.0]]])
    # keys (2,0),(0,0); values (1,0),(2,2); scale sqrt(2)
    w = 1 / (1 + math.exp(-2 / math.sqrt(2)))
    expected = torch.tensor([[[w * 1 + (1 - w) * 2, (1 - w) * 2], [1.5, 1.0]]])
    assert torch.allclose(a(q, kv), expected, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_affinity_rows_sum_to_one(n, seed):
    g = torch.Generator().manual_seed(seed)
    a = _attn(8, 2, seed)
    _, aff = a(torch.randn(3, n, 8, generator=g) * 10, torch.randn(3, n, 8, generator=g) * 10,
               return_affinity=True)
    assert torch.all((aff.sum(-1) - 1).abs() <= 1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_token_equivariance(seed):
    g = torch.Generator().manual_seed(seed)
    a = _attn(4, 2, seed)
    q, kv = torch.randn(1, 7, 4, generator=g), torch.randn(1, 7, 4, generator=g)
    perm = torch.randperm(7, generator=g)
    assert torch.allclose(a(q[:, perm], kv[:, perm]), a(q, kv)[:, perm], atol=1e-12)


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        _attn()(torch.zeros(1, 2, 4), torch.zeros(1, 3, 4))
    with pytest.raises(ConfigError):
        CrossAttention(5, 2)


def test_residual_identity_when_outputs_zeroed():
    blk = CrossAttentionBlock(4, 2)
    init_weights(blk, torch.Generator().manual_seed(0), std=0.5)
    with torch.no_grad():
        for lin in (blk.attn.proj, blk.mlp.fc2):
            lin.weight.zero_()
            lin.bias.zero_()
    target = torch.randn(2, 4, 3, 3)
    assert torch.equal(blk(target, torch.randn(2, 4, 3, 3)), target)


def test_tied_parameters_are_symmetric():
    ex = FeatureExchange((4, 8, 16, 32), (1, 2, 2, 4))
    init_weights(ex, torch.Generator().manual_seed(0), std=0.3)
    ex.blocks["2"]["structural"].load_state_dict(ex.blocks["2"]["primary"].state_dict())
    f = torch.randn(1, 8, 2, 2)
    zp, zt = ex(2, f, f.clone())
    assert torch.equal(zp, zt)


def test_queries_come_from_other_branch():
    blk = CrossAttentionBlock(4, 1)
    init_weights(blk, torch.Generator().manual_seed(1), std=0.5)
    captured = {}
    blk.attn.register_forward_hook(lambda m, args, out: captured.update(q=args[0], kv=args[1]))
    target, other = torch.randn(1, 4, 2, 2), torch.randn(1, 4, 2, 2)
    blk(target, other)
    assert torch.allclose(captured["q"], blk.norm_q(other.flatten(2).transpose(1, 2)))
    assert torch.allclose(captured["kv"], blk.norm_kv(target.flatten(2).transpose(1, 2)))


@pytest.mark.parametrize("s", [1, 4])
def test_exchange_outside_stages(s):
    ex = FeatureExchange((4, 8, 16, 32), (1, 2, 2, 4))
    with pytest.raises(ConfigError):
        ex(s, torch.zeros(1, 4, 2, 2), torch.zeros(1, 4, 2, 2))


def test_gradcheck_two_by_two_tokens():
    blk = CrossAttentionBlock(4, 2)
    init_weights(blk, torch.Generator().manual_seed(0), std=0.4)
    g = torch.Generator().manual_seed(1)
    target = torch.randn(1, 4, 2, 2, generator=g, requires_grad=True)
    other = torch.randn(1, 4, 2, 2, generator=g, requires_grad=True)
    assert torch.autograd.gradcheck(blk, (target, other), eps=1e-6, atol=1e-8, rtol=1e-4)
