import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from invmark.errors import ConfigError, NumericError, ShapeError
from invmark.tensor_core import (
    ChannelFC,
    Conv2d,
    ModelConfig,
    MultiHeadAttention,
    PatchGrid,
    TransformerBlock,
    add_positional,
    dropout,
    init_parameters,
    patchify,
    space_to_depth,
    unpatchify,
)


def test_patchify_cover_and_watermark_shapes():
    toks, grid = patchify(torch.zeros(128, 128, 3), 16)
    assert toks.shape == (64, 768)
    assert grid == PatchGrid(8, 8, 16, 3)
    toks, _ = patchify(torch.zeros(8, 8, 1), 1)
    assert toks.shape == (64, 1)


def test_patchify_row_major_tokens():
    img = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
    toks, grid = patchify(img, 1)
    assert toks.tolist() == [[1.0], [2.0], [3.0], [4.0]]
    assert unpatchify(toks, grid).reshape(2, 2).tolist() == [[1.0, 2.0], [3.0, 4.0]]


def test_patch_layout_is_row_major_inside_patch_channel_fastest():
    img = torch.arange(4 * 4 * 2, dtype=torch.float64).reshape(4, 4, 2)
    toks, _ = patchify(img, 2)
    # token 1 is the top-right 2x2 patch
    expected = torch.cat([img[0, 2], img[0, 3], img[1, 2], img[1, 3]])
    assert torch.equal(toks[1], expected)


def test_unpatchify_grid_to_image():
    img = torch.rand(128, 128, 3)
    toks, grid = patchify(img, 16)
    assert unpatchify(toks, PatchGrid(8, 8, 16, 3)).shape == (128, 128, 3)
    assert torch.equal(unpatchify(toks, grid), img)


@settings(max_examples=40, deadline=None)
@given(
    rows=st.integers(1, 4), cols=st.integers(1, 4), patch=st.integers(1, 5),
    channels=st.integers(1, 4), batch=st.integers(0, 2),
)
def test_patchify_round_trip_exact(rows, cols, patch, channels, batch):
    lead = (batch,) if batch else ()
    img = torch.rand(*lead, rows * patch, cols * patch, channels, dtype=torch.float64)
    toks, grid = patchify(img, patch)
    assert toks.shape[-2:] == (rows * cols, patch * patch * channels)
    assert torch.equal(unpatchify(toks, grid), img)


def test_patchify_errors():
    with pytest.raises(ShapeError):
        patchify(torch.zeros(10, 10, 3), 16)
    toks, grid = patchify(torch.zeros(16, 16, 3), 4)
    with pytest.raises(ShapeError):
        unpatchify(toks, None)
    with pytest.raises(ShapeError):
        unpatchify(toks[:, :5], grid)


def test_space_to_depth_shape():
    assert space_to_depth(torch.zeros(2, 128, 128, 3), 16).shape == (2, 8, 8, 768)


def test_add_positional():
    toks = torch.rand(64, 768)
    assert torch.equal(add_positional(toks, torch.zeros(64, 768)), toks)
    table = torch.rand(64, 768)
    assert torch.equal(add_positional(torch.zeros(64, 768), table), table)
    assert add_positional(toks, table).shape == (64, 768)
    with pytest.raises(ShapeError):
        add_positional(toks, torch.zeros(63, 768))


def _seeded(module, seed=0):
    init_parameters(module, torch.Generator().manual_seed(seed))
    return module.double()


def test_attention_single_kv_token_returns_its_value():
    mha = _seeded(MultiHeadAttention(4, 4, 4, 2))
    with torch.no_grad():
        for lin in (mha.to_v, mha.to_out):
            lin.weight.copy_(torch.eye(4))
            lin.bias.zero_()
    q = torch.rand(5, 4, dtype=torch.float64)
    kv = torch.rand(1, 4, dtype=torch.float64)
    out = mha(q, kv)
    assert torch.allclose(out, kv.expand(5, 4), atol=1e-12)


def test_attention_identical_keys_split_evenly():
    mha = _seeded(MultiHeadAttention(3, 3, 4, 2))
    kv = torch.rand(1, 3, dtype=torch.float64).repeat(2, 1)
    w = mha.attention_weights(torch.rand(6, 3, dtype=torch.float64), kv)
    assert torch.allclose(w, torch.full_like(w, 0.5), atol=1e-12)


def test_attention_paper_widths():
    mha = _seeded(MultiHeadAttention(512, 512, 512, 2))
    assert mha(torch.rand(64, 512, dtype=torch.float64), torch.rand(64, 512, dtype=torch.float64)).shape == (64, 512)


def test_cross_attention_output_projects_to_query_branch():
    mha = _seeded(MultiHeadAttention(768, 16, 512, 2, out_dim=768))
    assert mha(torch.rand(2, 64, 768, dtype=torch.float64), torch.rand(2, 64, 16, dtype=torch.float64)).shape == (2, 64, 768)


@settings(max_examples=25, deadline=None)
@given(nq=st.integers(1, 9), nkv=st.integers(1, 9), seed=st.integers(0, 10_000))
def test_attention_rows_sum_to_one(nq, nkv, seed):
    g = torch.Generator().manual_seed(seed)
    mha = MultiHeadAttention(6, 5, 8, 2)
    init_parameters(mha, g)
    w = mha.attention_weights(torch.randn(nq, 6, generator=g) * 3, torch.randn(nkv, 5, generator=g) * 3)
    assert w.shape == (2, nq, nkv)
    assert torch.allclose(w.sum(-1), torch.ones(2, nq), atol=1e-6)


def test_attention_rejects_nan():
    mha = MultiHeadAttention(4, 4, 4, 2)
    q = torch.rand(3, 4)
    q[0, 0] = math.nan
    with pytest.raises(NumericError):
        mha(q, torch.rand(3, 4))


def test_attention_heads_must_divide_width():
    with pytest.raises(ConfigError):
        MultiHeadAttention(4, 4, 5, 2)


def test_transformer_block_shape_and_determinism():
    block = _seeded(TransformerBlock(512, 2))
    x = torch.rand(64, 512, dtype=torch.float64)
    a, b = block(x), block(x)
    assert a.shape == (64, 512)
    assert torch.equal(a, b)
    with pytest.raises(ShapeError):
        block(torch.rand(64, 256, dtype=torch.float64))


def test_channel_fc_examples():
    fc = ChannelFC(5, 5).double()
    with torch.no_grad():
        fc.weight.copy_(torch.eye(5))
        fc.bias.zero_()
    x = torch.rand(7, 5, dtype=torch.float64)
    assert torch.equal(fc(x), x)

    fc = _seeded(ChannelFC(784, 768))
    assert fc(torch.rand(64, 784, dtype=torch.float64)).shape == (64, 768)

    fc = ChannelFC(3, 2).double()
    with torch.no_grad():
        fc.weight.zero_()
        fc.bias.copy_(torch.tensor([1.5, -2.0]))
    assert torch.equal(fc(torch.rand(4, 3, dtype=torch.float64)), torch.tensor([[1.5, -2.0]] * 4, dtype=torch.float64))
    with pytest.raises(ShapeError):
        fc(torch.rand(4, 4, dtype=torch.float64))


def test_channel_fc_applies_same_map_to_every_token():
    fc = _seeded(ChannelFC(6, 3))
    x = torch.rand(5, 6, dtype=torch.float64)
    out = fc(x)
    for i in range(5):
        assert torch.allclose(out[i], fc(x[i : i + 1])[0])


def test_conv2d_examples():
    conv = Conv2d(4, 4, 1).double()
    with torch.no_grad():
        conv.weight.copy_(torch.eye(4).reshape(4, 4, 1, 1))
        conv.bias.zero_()
    x = torch.rand(2, 6, 6, 4, dtype=torch.float64)
    assert torch.equal(conv(x), x)
    conv = _seeded(Conv2d(48, 64, 3))
    assert conv(torch.rand(1, 8, 8, 48, dtype=torch.float64)).shape == (1, 8, 8, 64)
    with pytest.raises(ConfigError):
        Conv2d(3, 3, 2)


def test_dropout_identity_cases():
    x = torch.rand(100)
    assert torch.equal(dropout(x, 0.0, True), x)
    assert torch.equal(dropout(x, 0.0, False), x)
    assert torch.equal(dropout(x, 0.2, False), x)
    with pytest.raises(ConfigError):
        dropout(x, 1.0, True)


def test_dropout_kept_fraction_and_determinism():
    n, rate = 1_000_000, 0.2
    x = torch.ones(n)
    a = dropout(x, rate, True, torch.Generator().manual_seed(7))
    b = dropout(x, rate, True, torch.Generator().manual_seed(7))
    assert torch.equal(a, b)
    kept = int((a != 0).sum())
    sigma = math.sqrt(n * rate * (1 - rate))
    assert abs(kept - 0.8 * n) <= 3 * sigma
    assert torch.allclose(a[a != 0], torch.full((kept,), 1 / 0.8))


def test_model_config_defaults_and_validation():
    cfg = ModelConfig()
    assert (cfg.cover_tokens, cfg.cover_token_dim, cfg.wm_tokens) == (64, 768, 64)
    assert cfg.cover_token_dim + cfg.wm_embed_dim == 784
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig(image_size=100)
    with pytest.raises(ConfigError):
        ModelConfig(attn_dim=511)
    with pytest.raises(ConfigError):
        ModelConfig(wm_size=4)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bogus": 1})


def test_init_is_seed_deterministic():
    a = _seeded(TransformerBlock(8, 2), seed=3)
    b = _seeded(TransformerBlock(8, 2), seed=3)
    for (na, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb), na
