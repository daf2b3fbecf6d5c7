import math

import pytest
import torch

from lpdm.model import (ResidualBlock, SelfAttention, UNet, UNetConfig, count_parameters,
                        sinusoidal_embedding)
from oracles import directional_fd_check, sinusoidal_scalar

# counted once from the constructed models, frozen as regression values
DEFAULT_PARAM_COUNT = 77_238_275
MINIATURE_PARAM_COUNT = 324_035


def test_embedding_at_zero():
    e = sinusoidal_embedding(0, 128)
    assert torch.all(e[:64] == 0)
    assert torch.all(e[64:] == 1)


@pytest.mark.parametrize("t, dim", [(1, 4), (300, 128), (999, 32)])
def test_embedding_matches_scalar_oracle(t, dim):
    expected = torch.tensor(sinusoidal_scalar(t, dim), dtype=torch.float32)
    torch.testing.assert_close(sinusoidal_embedding(t, dim), expected, atol=1e-6, rtol=0)


def test_embeddings_pairwise_distinct():
    e = sinusoidal_embedding(torch.arange(1, 1001), 128).double()
    d = torch.cdist(e, e)
    d.fill_diagonal_(math.inf)
    assert d.min() > 1e-3


def test_embedding_rejects_odd_dim():
    with pytest.raises(ValueError):
        sinusoidal_embedding(3, 7)


def test_residual_block_zero_branch_is_skip():
    torch.manual_seed(0)
    block = ResidualBlock(16, 32, 64, groups=4)
    with torch.no_grad():
        for conv in (block.conv1, block.conv2):
            conv.weight.zero_()
            conv.bias.zero_()
    x, emb = torch.randn(2, 16, 8, 8), torch.randn(2, 64)
    torch.testing.assert_close(block(x, emb), block.skip(x))


def test_residual_block_shape():
    block = ResidualBlock(128, 128, 512, groups=32)
    out = block(torch.randn(1, 128, 16, 16), torch.randn(1, 512))
    assert out.shape == (1, 128, 16, 16)


def test_residual_block_channel_mismatch():
    block = ResidualBlock(16, 16, 8, groups=4)
    with pytest.raises(ValueError, match="channels"):
        block(torch.randn(1, 8, 4, 4), torch.randn(1, 8))


def _randomize_zero_init(module, std=0.05):
    with torch.no_grad():
        for p in module.parameters():
            if torch.all(p == 0):
                p.normal_(0, std)


def test_residual_block_gradient_matches_finite_differences():
    torch.manual_seed(1)
    block = ResidualBlock(8, 16, 32, groups=4)
    _randomize_zero_init(block)
    x, emb, w = torch.randn(2, 8, 8, 8), torch.randn(2, 32), torch.randn(2, 16, 8, 8).double()
    checks = directional_fd_check(block, lambda f: (f(x, emb).double() * w).sum(), probes=10, seed=3)
    for ad, fd in checks:
        assert abs(fd - ad) <= 1e-3 * abs(ad), (ad, fd)


def test_attention_zero_projection_is_identity():
    attn = SelfAttention(32, 8, groups=4)
    x = torch.randn(2, 32, 4, 4)
    assert torch.equal(attn(x), x)


def test_attention_weights_normalized():
    torch.manual_seed(0)
    attn = SelfAttention(32, 8, groups=4)
    _, w = attn(torch.randn(2, 32, 4, 4), return_weights=True)
    assert w.shape == (2, 8, 16, 16)
    torch.testing.assert_close(w.sum(-1), torch.ones(2, 8, 16), atol=1e-6, rtol=0)


def test_attention_matches_reference_sdpa():
    torch.manual_seed(0)
    attn = SelfAttention(32, 4, groups=4)
    _randomize_zero_init(attn)
    x = torch.randn(1, 32, 4, 4)
    q, k, v = attn.qkv(attn.norm(x)).reshape(1, 3, 4, 8, 16).unbind(1)
    ref = torch.nn.functional.scaled_dot_product_attention(q.transpose(-1, -2), k.transpose(-1, -2),
                                                           v.transpose(-1, -2))
    expected = x + attn.proj(ref.transpose(-1, -2).reshape(1, 32, 4, 4))
    torch.testing.assert_close(attn(x), expected, atol=1e-5, rtol=1e-5)


def test_attention_latent_shape():
    attn = SelfAttention(512, 8, groups=32)
    assert attn(torch.randn(1, 512, 16, 16)).shape == (1, 512, 16, 16)


def test_attention_heads_must_divide():
    with pytest.raises(ValueError):
        SelfAttention(30, 8, groups=2)


@pytest.mark.parametrize("bad", [
    dict(stage_channels=[8, 16, 32]), dict(stage_channels=[8, 16, 32, 36], groupnorm_groups=8),
    dict(stage_channels=[8, 16, 32, 30], groupnorm_groups=2), dict(in_channels=4),
])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        UNetConfig.miniature(**bad)


def test_miniature_forward_shapes(mini_model):
    for size in (16, 32, 48):
        for t in (0, 1, 300, 999):
            out = mini_model(torch.randn(1, 6, size, size), t)
            assert out.shape == (1, 3, size, size)
            assert torch.isfinite(out).all()


def test_forward_rejects_bad_inputs(mini_model):
    with pytest.raises(ValueError, match="divisible"):
        mini_model(torch.randn(1, 6, 40, 32), 5)
    with pytest.raises(ValueError, match="channels"):
        mini_model(torch.randn(1, 3, 32, 32), 5)


def test_unconditional_model_takes_three_channels():
    m = UNet(UNetConfig.miniature(in_channels=3))
    assert m(torch.randn(1, 3, 16, 16), 10).shape == (1, 3, 16, 16)


def test_determinism(mini_model):
    _randomize_zero_init(mini_model)
    x = torch.randn(2, 6, 32, 32)
    assert torch.equal(mini_model(x, 300), mini_model(x, 300))


def test_timestep_sensitivity(mini_model):
    _randomize_zero_init(mini_model)
    x = torch.randn(1, 6, 32, 32)
    assert not torch.allclose(mini_model(x, 1), mini_model(x, 999))


def test_per_sample_timesteps(mini_model):
    _randomize_zero_init(mini_model)
    x = torch.randn(2, 6, 16, 16)
    batched = mini_model(x, torch.tensor([3, 700]))
    torch.testing.assert_close(batched[0], mini_model(x[:1], 3)[0], atol=1e-5, rtol=1e-5)
    torch.testing.assert_close(batched[1], mini_model(x[1:], 700)[0], atol=1e-5, rtol=1e-5)


def test_zero_initialised_output():
    m = UNet(UNetConfig.miniature())
    assert torch.all(m(torch.randn(1, 6, 16, 16), 5) == 0)


def test_parameter_counts():
    assert count_parameters(UNet(UNetConfig.miniature())) == MINIATURE_PARAM_COUNT
    assert count_parameters(UNet()) == DEFAULT_PARAM_COUNT


def test_parameter_count_is_pure_function_of_config():
    torch.manual_seed(0)
    a = count_parameters(UNet(UNetConfig.miniature()))
    torch.manual_seed(99)
    assert count_parameters(UNet(UNetConfig.miniature())) == a
