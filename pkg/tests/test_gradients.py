"""Autograd versus central differences (step 1e-5, float64) on reduced shapes."""

import pytest
import torch

from conftest import rand_bits, rand_images
from invmark import objectives as obj
from invmark.codec import Decoder, Encoder
from invmark.embedder import ConvEmbedder, CrossAttentionEmbedder
from invmark.extractor import Extractor
from invmark.gradcheck import check_gradients, module_gradient_errors, numerical_gradient, projected, relative_error
from invmark.tensor_core import ChannelFC, Conv2d, MultiHeadAttention, TransformerBlock, init_parameters

TOL = 1e-4


def _init(module, seed=0):
    init_parameters(module, torch.Generator().manual_seed(seed), pos_std=0.3)
    return module.double()


def _leaf(*shape, seed=0, scale=1.0):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(*shape, generator=g, dtype=torch.float64) * scale).requires_grad_(True)


def _assert_small(errors):
    worst = max(errors.values())
    assert worst <= TOL, {k: v for k, v in errors.items() if v > TOL}


def test_oracle_on_known_function():
    x = _leaf(5)
    num = numerical_gradient(lambda: (x**3).sum(), x)
    assert relative_error(3 * x.detach() ** 2, num) < 1e-9


def test_mha_gradients():
    mha = _init(MultiHeadAttention(5, 3, 6, 2, out_dim=4))
    q, kv = _leaf(4, 5, seed=1), _leaf(3, 3, seed=2)
    _assert_small(module_gradient_errors(mha, lambda: projected(mha(q, kv)), extra={"q": q, "kv": kv}))


def test_transformer_block_gradients():
    block = _init(TransformerBlock(8, 2))
    x = _leaf(5, 8, seed=3)
    _assert_small(module_gradient_errors(block, lambda: projected(block(x)), extra={"x": x}))


def test_channel_fc_gradients():
    fc = _init(ChannelFC(6, 4))
    x = _leaf(5, 6, seed=4)
    _assert_small(module_gradient_errors(fc, lambda: projected(fc(x)), extra={"x": x}))


def test_conv2d_gradients():
    conv = _init(Conv2d(3, 4, 3))
    x = _leaf(1, 6, 6, 3, seed=5)
    _assert_small(module_gradient_errors(conv, lambda: projected(conv(x)), extra={"x": x}))


def test_mse_and_embedder_loss_gradients():
    c, m = _leaf(2, 4, 4, 3, seed=6), _leaf(2, 4, 4, 3, seed=7)
    _assert_small(check_gradients(lambda: obj.embedder_loss(c, m), {"C": c, "M": m}))
    obj.embedder_loss(c, m).backward()
    # analytic derivative wrt M is 2(M - C)/n
    m.grad = None
    obj.embedder_loss(c, m).backward()
    assert torch.allclose(m.grad, 2 * (m - c).detach() / m.numel(), rtol=1e-12)


def test_extractor_pretrain_loss_gradient():
    w = rand_bits(2, 4, seed=1).double()
    w_hat = _leaf(2, 4, 4, seed=8)
    _assert_small(check_gradients(lambda: obj.extractor_pretrain_loss(w, w_hat), {"W'": w_hat}))


def test_triplet_loss_gradient_active_region():
    a, p, n = _leaf(3, 4, 5, seed=9), _leaf(3, 4, 5, seed=10), _leaf(3, 4, 5, seed=11)
    # a large margin keeps every hinge strictly active, away from the kink
    _assert_small(check_gradients(lambda: obj.triplet_loss(a, p, n, margin=10.0), {"a": a, "p": p, "n": n}))


def test_extractor_final_loss_gradient():
    ws = [rand_bits(2, 4, seed=s).double() for s in (1, 2, 3)]
    es = [_leaf(2, 4, 4, seed=s) for s in (12, 13, 14)]
    _assert_small(check_gradients(lambda: obj.extractor_final_loss(ws, es), dict(zip("ape", es))))


def test_cross_embedder_gradients(small_cfg):
    emb = _init(CrossAttentionEmbedder(small_cfg), seed=1)
    with torch.no_grad():
        emb.fuse.weight.mul_(0.05)
        emb.fuse.bias.fill_(0.5)  # keep outputs inside the clamp
    cover = rand_images(1, 32, seed=2).double() * 0.5 + 0.25
    wm = rand_bits(1, 4, seed=3).double()
    out = emb(cover, wm)
    assert 0 < out.min() and out.max() < 1
    _assert_small(module_gradient_errors(emb, lambda: obj.embedder_loss(cover, emb(cover, wm))))


def test_conv_embedder_gradients(tiny_cfg):
    emb = _init(ConvEmbedder(tiny_cfg), seed=2)
    with torch.no_grad():
        emb.out.weight.mul_(0.1)
        emb.out.bias.fill_(0.5)
    cover = rand_images(1, 16, seed=4).double()
    wm = rand_bits(1, 4, seed=5).double()
    _assert_small(module_gradient_errors(emb, lambda: obj.embedder_loss(cover, emb(cover, wm))))


def test_encoder_gradients(tiny_cfg):
    enc = _init(Encoder(tiny_cfg), seed=3)
    x = rand_images(1, 16, seed=6).double()
    _assert_small(module_gradient_errors(enc, lambda: projected(enc(x))))


def test_decoder_gradients(tiny_cfg):
    dec = _init(Decoder(tiny_cfg), seed=4)
    ids = _leaf(1, tiny_cfg.cover_tokens, tiny_cfg.attn_dim, seed=15)
    _assert_small(module_gradient_errors(dec, lambda: projected(dec(ids)), extra={"ID": ids}))


def test_extractor_gradients(tiny_cfg):
    ext = _init(Extractor(tiny_cfg), seed=5)
    x = rand_images(2, 16, seed=7).double()
    w = rand_bits(2, 4, seed=8).double()
    _assert_small(module_gradient_errors(ext, lambda: obj.extractor_pretrain_loss(w, ext(x))))


def test_check_requires_float64():
    x = torch.zeros(2, requires_grad=True)
    with pytest.raises(TypeError):
        check_gradients(lambda: x.sum(), {"x": x})
