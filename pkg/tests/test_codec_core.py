"""Codec core: masking, quantization, padding, nets, bias substitution."""

import numpy as np
import pytest
import torch

from metacodec import codec as cc
from metacodec.metrics import to_tensor

from conftest import make_tiny_codec, rand_image


def test_config_validation():
    with pytest.raises(ValueError):
        cc.CodecConfig(bits_b=9)
    with pytest.raises(ValueError):
        cc.CodecConfig(bits_b=0)
    with pytest.raises(ValueError):
        cc.CodecConfig(downsample_s=6)
    with pytest.raises(ValueError):
        cc.CodecConfig(zeta=0.0)
    with pytest.raises(ValueError):
        cc.CodecConfig(channels_c=0)


def test_round_half_away_from_zero():
    x = torch.tensor([0.5, 1.5, 2.5, -0.5, -1.5, 0.49, -0.49])
    out = cc.round_away(x)
    assert torch.equal(out, torch.tensor([1.0, 2.0, 3.0, -1.0, -2.0, 0.0, -0.0]))


def test_latent_shapes(rng):
    codec = make_tiny_codec(channels=8, stride=8)
    x = to_tensor(rand_image(rng, 64, 64))
    assert codec.encode_latent(x).shape == (1, 8, 8, 8)
    codec1 = make_tiny_codec(channels=1, stride=8)
    x = to_tensor(rand_image(rng, 256, 256))
    assert codec1.encode_latent(x).shape == (1, 1, 32, 32)


def test_zero_weight_encoder_outputs_half(rng):
    codec = make_tiny_codec()
    with torch.no_grad():
        for p in codec.encoder.parameters():
            p.zero_()
    x = to_tensor(rand_image(rng))
    y = codec.encode_latent(x)
    assert torch.allclose(y, torch.full_like(y, 0.5))


def test_encode_rejects_unaligned(rng):
    codec = make_tiny_codec(stride=8)
    with pytest.raises(ValueError, match="divisible"):
        codec.encode_latent(to_tensor(rand_image(rng, 60, 64)))


def test_tau_quantization_grid():
    tau = torch.full((1, 1, 2, 2), 0.37)
    assert torch.allclose(cc.quantize_tau(tau, 8), torch.full_like(tau, 3 / 8))
    assert torch.allclose(cc.quantize_tau(torch.ones_like(tau), 8), torch.ones_like(tau))
    assert torch.allclose(cc.quantize_tau(torch.zeros_like(tau), 8), torch.zeros_like(tau))


def test_expand_mask_examples():
    tau_q = torch.full((1, 1, 1, 1), 0.5)
    m = cc.expand_mask(tau_q, 8).squeeze()
    assert torch.equal(m, torch.tensor([1.0, 1, 1, 1, 0, 0, 0, 0]))
    assert cc.expand_mask(torch.zeros(1, 1, 1, 1), 8).sum() == 0
    assert cc.expand_mask(torch.ones(1, 1, 1, 1), 8).sum() == 8


@pytest.mark.parametrize("c", [1, 3, 6, 8])
def test_mask_semantics_exhaustive(c):
    # every grid point tau_q = k/c: prefix property and count == round(c * tau)
    for k in range(c + 1):
        tau_q = torch.full((1, 1, 1, 1), k / c)
        m = cc.expand_mask(tau_q, c).view(c)
        count = int(m.sum())
        assert count == round(c * (k / c))
        assert torch.all(m[:count] == 1) and torch.all(m[count:] == 0)


def test_apply_mask_identity_zero_idempotent(rng):
    y = torch.rand(1, 4, 3, 3)
    ones = torch.ones_like(y)
    zeros = torch.zeros_like(y)
    assert torch.equal(cc.apply_mask(y, ones), y)
    assert torch.equal(cc.apply_mask(y, zeros), zeros)
    m = (torch.rand_like(y) > 0.5).float()
    assert torch.equal(cc.apply_mask(cc.apply_mask(y, m), m), cc.apply_mask(y, m))
    with pytest.raises(ValueError, match="shape"):
        cc.apply_mask(y, torch.ones(1, 3, 3, 3))


def test_importance_constraint_values():
    tau = torch.full((1, 1, 4, 4), 0.4)
    assert float(cc.importance_constraint(tau, 0.4)) == pytest.approx(0.0, abs=1e-6)
    tau = torch.full((1, 1, 4, 4), 0.7)
    assert float(cc.importance_constraint(tau, 0.4)) == pytest.approx(0.3, abs=1e-6)
    tau = torch.full((1, 1, 4, 4), 0.1)
    assert float(cc.importance_constraint(tau, 0.4)) == pytest.approx(0.3, abs=1e-6)


def test_quantize_examples():
    assert int(cc.quantize(torch.tensor([[0.34]]), 2)) == 1
    assert int(cc.quantize(torch.tensor([[1.0]]), 8)) == 255
    assert int(cc.quantize(torch.tensor([[0.0]]), 8)) == 0


def test_dequantize_examples_and_round_trip(rng):
    assert float(cc.dequantize(torch.tensor([1]), 2)) == pytest.approx(1 / 3)
    assert float(cc.dequantize(torch.tensor([255]), 8)) == 1.0
    assert int(cc.quantize(cc.dequantize(torch.tensor([7]), 4), 4)) == 7
    with pytest.raises(ValueError, match="symbol"):
        cc.dequantize(torch.tensor([16]), 4)
    for b in range(1, 9):
        y = torch.rand(200)
        z = cc.quantize(y, b)
        z2 = cc.quantize(cc.dequantize(z, b), b)
        assert torch.equal(z, z2), f"idempotence failed at b={b}"


def test_straight_through_gradient_identity():
    # gradient into y equals the upstream gradient at the quantized point
    y = torch.rand(64, dtype=torch.float64, requires_grad=True)
    u = cc.quantize_ste(y, 4)
    w = torch.randn(64, dtype=torch.float64)
    loss = (w * u ** 2).sum()
    (g,) = torch.autograd.grad(loss, y)
    upstream = 2 * w * u.detach()  # dloss/du
    assert torch.allclose(g, upstream, atol=0, rtol=1e-12)


def test_quantize_pair_consistency(rng):
    y = torch.rand(5, 3, 4, 4)
    u, z = cc.quantize_pair(y, 5)
    assert torch.equal((u * 31).round().long(), z)
    assert torch.equal(u, cc.quantize_ste(y, 5))
    assert torch.equal(z, cc.quantize(y, 5))


def test_masked_positions_stay_zero(rng):
    codec = make_tiny_codec(channels=4, zeta=0.5)
    x = to_tensor(rand_image(rng))
    y_tilde, tau, tau_q, m = codec.masked_latent(x)
    u, z = cc.quantize_pair(y_tilde, codec.cfg.bits_b)
    hole = m == 0
    assert torch.all(y_tilde[hole] == 0)
    assert torch.all(z[hole] == 0)
    assert torch.all(u[hole] == 0)


def test_mask_ste_forward_matches_hard(rng):
    codec = make_tiny_codec(channels=6)
    x = to_tensor(rand_image(rng))
    y_tilde, tau, tau_q, m = codec.masked_latent(x)
    assert torch.equal(m.detach(), cc.expand_mask(tau_q.detach(), 6))


def test_pad_image_and_crop(rng):
    x = to_tensor(rand_image(rng, 60, 60))
    padded, crop = cc.pad_image(x, 8)
    assert padded.shape[-2:] == (64, 64)
    assert crop == (60, 60)
    assert torch.equal(cc.crop_image(padded, crop), x)
    # replicate content on the padded border
    assert torch.equal(padded[..., 60:, :60], x[..., 59:60, :].expand(-1, -1, 4, 60))

    aligned, crop = cc.pad_image(x[..., :56, :56], 8)
    assert aligned.shape[-2:] == (56, 56)

    one = to_tensor(rand_image(rng, 1, 1))
    padded, crop = cc.pad_image(one, 8)
    assert padded.shape[-2:] == (8, 8) and crop == (1, 1)


def test_decode_shape_and_range(rng):
    codec = make_tiny_codec(channels=8, stride=8)
    y = torch.rand(1, 8, 8, 8)
    with torch.no_grad():
        img = codec.decode_image(y)
    assert img.shape == (1, 3, 64, 64)
    assert float(img.min()) >= 0.0 and float(img.max()) <= 1.0


def test_bias_substitution_default_identity(rng):
    codec = make_tiny_codec()
    y = torch.rand(1, 2, 4, 4)
    default_vec = cc.get_bias_vector(codec.decoder)
    with torch.no_grad():
        a = codec.decode_image(y)
        b = codec.decode_image(y, biases=default_vec)
        c = codec.decode_image(y)
    assert torch.equal(a, b)
    assert torch.equal(a, c)  # substitution restored state


def test_bias_substitution_wrong_length_raises(rng):
    codec = make_tiny_codec()
    y = torch.rand(1, 2, 4, 4)
    with pytest.raises(ValueError, match="bias vector length"):
        codec.decode_image(y, biases=np.zeros(3, dtype=np.float32))


def test_bias_layout_covers_all_biases():
    codec = make_tiny_codec()
    layout, total = cc.bias_layout(codec.decoder)
    assert total == sum(ln for _, _, ln in layout)
    assert total == cc.get_bias_vector(codec.decoder).size
    ends = [off + ln for _, off, ln in layout]
    starts = [off for _, off, _ in layout]
    assert starts == [0] + ends[:-1]
