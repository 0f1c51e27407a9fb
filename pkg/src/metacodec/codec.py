"""Auto-encoder codec core: encoder/importance/decoder nets, channel masking,
uniform scalar quantization with straight-through gradients, image padding.

Tensor conventions: images are float tensors (B, 3, H, W) in [0, 1]; latents
are (B, C, h, w) with h = H/s, w = W/s.  Symbols are int64 in [0, 2**b - 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class CodecConfig:
    channels_c: int = 8
    bits_b: int = 8
    downsample_s: int = 8
    hidden_channels: int = 32
    zeta: float = 0.9

    def __post_init__(self):
        if self.channels_c < 1:
            raise ValueError("channels_c must be >= 1")
        if not 1 <= self.bits_b <= 8:
            raise ValueError("bits_b must be in [1, 8]")
        s = self.downsample_s
        if s < 1 or (s & (s - 1)) != 0:
            raise ValueError("downsample_s must be a positive power of two")
        if not 0.0 < self.zeta <= 1.0:
            raise ValueError("zeta must be in (0, 1]")


def round_away(x: torch.Tensor) -> torch.Tensor:
    """Round half away from zero (platform-independent, unlike banker's rounding)."""
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


def ste_round_away(x: torch.Tensor) -> torch.Tensor:
    """round_away in the forward pass, identity in the backward pass."""
    return x + (round_away(x) - x).detach()


def quantize(y: torch.Tensor, bits: int) -> torch.Tensor:
    """Masked latent -> integer symbols in [0, 2**bits - 1] (no gradient)."""
    levels = (1 << bits) - 1
    return round_away(y.detach().clamp(0.0, 1.0) * levels).long()


def dequantize(z: torch.Tensor, bits: int) -> torch.Tensor:
    """Symbols -> grid values k / (2**bits - 1); inverse of quantize on its range."""
    levels = (1 << bits) - 1
    if z.min() < 0 or z.max() > levels:
        raise ValueError(f"symbol outside [0, {levels}]")
    return z.to(torch.get_default_dtype()) / levels


def quantize_ste(y: torch.Tensor, bits: int) -> torch.Tensor:
    """Quantize-dequantize with a straight-through backward (identity on [0,1])."""
    levels = (1 << bits) - 1
    return ste_round_away(y.clamp(0.0, 1.0) * levels) / levels


def quantize_pair(y: torch.Tensor, bits: int):
    """(straight-through grid values, matching integer symbols) from one rounding."""
    levels = (1 << bits) - 1
    scaled = y.clamp(0.0, 1.0) * levels
    rounded = round_away(scaled)
    u = (scaled + (rounded - scaled).detach()) / levels
    return u, rounded.detach().long()


def quantize_tau(tau: torch.Tensor, c: int) -> torch.Tensor:
    """Importance map onto the grid {0, 1/c, ..., 1}, straight-through backward."""
    return ste_round_away(tau * c) / c


def expand_mask(tau_q: torch.Tensor, c: int) -> torch.Tensor:
    """Binary channel mask: m[..., k, i, j] = 1 iff k < c * tau_q[..., i, j].

    tau_q: (..., 1, h, w); returns (..., c, h, w).
    """
    k = torch.arange(c, dtype=tau_q.dtype, device=tau_q.device).view(
        *([1] * (tau_q.dim() - 3)), c, 1, 1
    )
    return (k < c * tau_q).to(tau_q.dtype)


def expand_mask_ste(tau: torch.Tensor, tau_q: torch.Tensor, c: int) -> torch.Tensor:
    """Mask whose forward value follows tau_q but whose backward pass sees the
    piecewise-linear ramp clamp(c*tau - k, 0, 1) so the importance net receives
    a usable gradient through the (otherwise flat) threshold."""
    hard = expand_mask(tau_q, c)
    k = torch.arange(c, dtype=tau.dtype, device=tau.device).view(
        *([1] * (tau.dim() - 3)), c, 1, 1
    )
    soft = (c * tau - k).clamp(0.0, 1.0)
    return hard + soft - soft.detach()


def apply_mask(y: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    if y.shape != m.shape:
        raise ValueError(f"latent shape {tuple(y.shape)} != mask shape {tuple(m.shape)}")
    return y * m


def importance_constraint(tau: torch.Tensor, zeta: float) -> torch.Tensor:
    """| mean(tau) - zeta |, per item if batched, then averaged."""
    if tau.dim() == 4:
        per_item = tau.mean(dim=(1, 2, 3))
    else:
        per_item = tau.mean().unsqueeze(0)
    return (per_item - zeta).abs().mean()


def pad_image(x: torch.Tensor, s: int):
    """Replicate-pad right/bottom to multiples of s; returns (padded, (H, W))."""
    h, w = x.shape[-2], x.shape[-1]
    ph = (-h) % s
    pw = (-w) % s
    if ph == 0 and pw == 0:
        return x, (h, w)
    return F.pad(x, (0, pw, 0, ph), mode="replicate"), (h, w)


def crop_image(x: torch.Tensor, crop) -> torch.Tensor:
    h, w = crop
    return x[..., :h, :w]


def _conv(cin, cout, k, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, padding_mode="replicate")


class Encoder(nn.Module):
    """log2(s) stride-2 conv blocks, 1x1 sigmoid head -> latent in [0, 1]."""

    def __init__(self, out_channels: int, stride: int, hidden: int):
        super().__init__()
        layers = []
        cin = 3
        for _ in range(int(math.log2(stride))):
            layers += [_conv(cin, hidden, 3, stride=2), nn.LeakyReLU(0.2)]
            cin = hidden
        layers += [nn.Conv2d(cin, out_channels, 1), nn.Sigmoid()]
        self.net = nn.Sequential(*layers)
        self.stride = stride

    def forward(self, x):
        if x.shape[-2] % self.stride or x.shape[-1] % self.stride:
            raise ValueError(
                f"input dims {tuple(x.shape[-2:])} not divisible by stride {self.stride}"
            )
        return self.net(x)


class Decoder(nn.Module):
    """Mirror of the encoder: nearest-neighbor upsample + conv blocks, sigmoid output."""

    def __init__(self, in_channels: int, stride: int, hidden: int):
        super().__init__()
        layers = [_conv(in_channels, hidden, 3), nn.LeakyReLU(0.2)]
        for _ in range(int(math.log2(stride))):
            layers += [nn.Upsample(scale_factor=2, mode="nearest"), _conv(hidden, hidden, 3), nn.LeakyReLU(0.2)]
        layers += [_conv(hidden, 3, 3), nn.Sigmoid()]
        self.net = nn.Sequential(*layers)

    def forward(self, y):
        return self.net(y)


class Codec(nn.Module):
    """The four networks plus configs, bundled so checkpoints stay coherent.

    encoder / importance consume images; decoder consumes dequantized latents;
    probmodel (attached by the caller, see probmodel.ProbModel) prices symbols.
    """

    def __init__(self, cfg: CodecConfig, probmodel: nn.Module):
        super().__init__()
        self.cfg = cfg
        self.pcfg = probmodel.cfg
        self.encoder = Encoder(cfg.channels_c, cfg.downsample_s, cfg.hidden_channels)
        self.importance = Encoder(1, cfg.downsample_s, cfg.hidden_channels)
        self.decoder = Decoder(cfg.channels_c, cfg.downsample_s, cfg.hidden_channels)
        self.probmodel = probmodel

    def encode_latent(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def importance_map(self, x: torch.Tensor):
        tau = self.importance(x)
        return tau, quantize_tau(tau, self.cfg.channels_c)

    def masked_latent(self, x: torch.Tensor):
        """E(x) * m with the straight-through mask; returns (y_tilde, tau, tau_q, m)."""
        y = self.encode_latent(x)
        tau, tau_q = self.importance_map(x)
        m = expand_mask_ste(tau, tau_q, self.cfg.channels_c)
        return apply_mask(y, m), tau, tau_q, m

    def decode_image(self, y_hat: torch.Tensor, biases: np.ndarray | None = None) -> torch.Tensor:
        if biases is None:
            return self.decoder(y_hat)
        with substituted_biases(self.decoder, biases):
            return self.decoder(y_hat)


def bias_layout(decoder: nn.Module):
    """Deterministic (name, offset, length) layout over all conv bias terms."""
    layout = []
    off = 0
    for name, p in decoder.named_parameters():
        if name.endswith(".bias"):
            layout.append((name, off, p.numel()))
            off += p.numel()
    return layout, off


def get_bias_vector(decoder: nn.Module) -> np.ndarray:
    parts = [
        p.detach().cpu().numpy().ravel()
        for name, p in decoder.named_parameters()
        if name.endswith(".bias")
    ]
    return np.concatenate(parts).astype(np.float32)


class substituted_biases:
    """Temporarily replace every conv bias in `decoder` with slices of `vec`."""

    def __init__(self, decoder: nn.Module, vec: np.ndarray):
        self.decoder = decoder
        layout, total = bias_layout(decoder)
        vec = np.asarray(vec, dtype=np.float32).ravel()
        if vec.size != total:
            raise ValueError(f"bias vector length {vec.size} != decoder bias count {total}")
        self.layout = layout
        self.vec = vec
        self._saved = None

    def __enter__(self):
        params = dict(self.decoder.named_parameters())
        self._saved = {name: params[name].detach().clone() for name, _, _ in self.layout}
        with torch.no_grad():
            for name, off, ln in self.layout:
                p = params[name]
                p.copy_(torch.from_numpy(self.vec[off : off + ln]).view_as(p))
        return self

    def __exit__(self, *exc):
        params = dict(self.decoder.named_parameters())
        with torch.no_grad():
            for name, _, _ in self.layout:
                params[name].copy_(self._saved[name])
        return False
