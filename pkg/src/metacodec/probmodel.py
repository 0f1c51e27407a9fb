"""Multi-scale progressive probability model.

The symbol tensor z(0) is nearest-neighbor downsampled (top-left anchor of
each 2x2 block) into levels z(1)..z(M).  The last level is priced at b bits
per element (uniform); every other level is predicted from the level above:
anchors (even,even) are copies of the upper level and never coded, the
remaining positions are coded in three groups by 2x2 phase, (even,odd) then
(odd,even) then (odd,odd).  One shared conv net maps (current estimate,
availability mask, running context) -> per-element mixture-of-logistics
parameters plus the next context tensor.

Probability floor: every symbol keeps at least one count out of 2**16, i.e.
p_floor = (1 - A/2**16) * p + 1/2**16 with alphabet size A.  Training rate
and coding CDFs share this convention so the estimate matches the payload.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .entropy.coder import PROB_TOTAL

LOG_SCALE_MIN = -7.0
GROUP_PHASES = ((0, 1), (1, 0), (1, 1))  # (row parity, col parity) coding order


@dataclass
class ProbModelConfig:
    num_scales_M: int = 3
    mixtures_K: int = 5
    context_channels: int = 16
    hidden_layers: int = 4

    def __post_init__(self):
        if self.num_scales_M < 1:
            raise ValueError("num_scales_M must be >= 1")


@dataclass
class MixtureParams:
    """Per-element mixture parameters, each tensor shaped (B, K, C, h, w)."""

    logits: torch.Tensor
    means: torch.Tensor
    log_scales: torch.Tensor

    def weights(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=1)

    def at_positions(self, rows: np.ndarray, cols: np.ndarray):
        """Gather (N*C, K) arrays in raster order, channels innermost."""
        # t[0, :, :, rows, cols] is (K, C, N) -> (N, C, K) -> (N*C, K)
        sel = lambda t: t[0, :, :, rows, cols].permute(2, 1, 0).reshape(-1, t.shape[1])
        return sel(self.logits), sel(self.means), sel(self.log_scales)


def build_pyramid(z, M: int):
    """Levels z(0)..z(M); level i is the top-left element of each 2x2 block of
    level i-1 (equivalently strided slicing, since replicate padding on the
    right/bottom never displaces the top-left anchors)."""
    levels = [z]
    for _ in range(M):
        levels.append(levels[-1][..., ::2, ::2] if torch.is_tensor(z) else levels[-1][::2, ::2])
    return levels


def pyramid_dims(h: int, w: int, M: int):
    dims = [(h, w)]
    for _ in range(M):
        ph, pw = dims[-1]
        dims.append(((ph + 1) // 2, (pw + 1) // 2))
    return dims


def anchor_mask(h: int, w: int) -> np.ndarray:
    m = np.zeros((h, w), dtype=bool)
    m[0::2, 0::2] = True
    return m


def group_masks(h: int, w: int):
    out = []
    for pr, pc in GROUP_PHASES:
        m = np.zeros((h, w), dtype=bool)
        m[pr::2, pc::2] = True
        out.append(m)
    return out


def partition_groups(shape):
    """(anchors, [g1, g2, g3]) boolean masks over a (h, w) grid: disjoint,
    their union covers every position."""
    h, w = shape
    return anchor_mask(h, w), group_masks(h, w)


class ProbModel(nn.Module):
    """Shared parameter-prediction net: inputs (z_hat, avail, q), outputs
    mixture params for every element plus the next context tensor."""

    def __init__(self, latent_channels: int, cfg: ProbModelConfig | None = None):
        super().__init__()
        cfg = cfg or ProbModelConfig()
        self.cfg = cfg
        self.latent_channels = latent_channels
        c, k, ctx = latent_channels, cfg.mixtures_K, cfg.context_channels
        body = []
        cin = c + 1 + ctx
        for _ in range(cfg.hidden_layers):
            body += [
                nn.Conv2d(cin, ctx, 3, padding=1, padding_mode="replicate"),
                nn.LeakyReLU(0.2),
            ]
            cin = ctx
        self.body = nn.Sequential(*body)
        self.head_params = nn.Conv2d(ctx, 3 * k * c, 1)
        self.head_context = nn.Conv2d(ctx, ctx, 1)
        with torch.no_grad():
            kc = k * c
            self.head_params.bias[:kc].zero_()           # mixture logits -> uniform
            self.head_params.bias[kc : 2 * kc].fill_(0.5)  # means mid-range
            self.head_params.bias[2 * kc :].fill_(math.log(0.3))

    def forward(self, z_hat: torch.Tensor, avail: torch.Tensor, q: torch.Tensor):
        if z_hat.shape[-2:] != avail.shape[-2:] or z_hat.shape[-2:] != q.shape[-2:]:
            raise ValueError("z_hat / availability / context spatial dims disagree")
        feat = self.body(torch.cat([z_hat, avail, q], dim=1))
        raw = self.head_params(feat)
        b, _, h, w = raw.shape
        raw = raw.view(b, 3, self.cfg.mixtures_K, self.latent_channels, h, w)
        params = MixtureParams(
            logits=raw[:, 0],
            means=raw[:, 1],
            log_scales=raw[:, 2].clamp(min=LOG_SCALE_MIN),
        )
        return params, self.head_context(feat)

    # alias matching the operation's name in the docs
    predict_group_params = forward


def _upsample_to(x: torch.Tensor, h: int, w: int) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="nearest")[..., :h, :w]


def _bin_edges(u: torch.Tensor, bits: int):
    half = 0.5 / ((1 << bits) - 1)
    return u - half, u + half


def mixture_bin_prob(
    params: MixtureParams, u: torch.Tensor, z: torch.Tensor, bits: int
) -> torch.Tensor:
    """P(symbol) for each element: difference of logistic CDFs at the bin
    edges around the grid value u = z / (2**b - 1); edge bins extend to inf.

    u, z: (B, C, h, w); returns (B, C, h, w).
    """
    lo, hi = _bin_edges(u.unsqueeze(1), bits)
    inv_s = torch.exp(-params.log_scales)
    cdf_lo = torch.sigmoid((lo - params.means) * inv_s)
    cdf_hi = torch.sigmoid((hi - params.means) * inv_s)
    zk = z.unsqueeze(1)
    cdf_lo = torch.where(zk == 0, torch.zeros_like(cdf_lo), cdf_lo)
    cdf_hi = torch.where(zk == (1 << bits) - 1, torch.ones_like(cdf_hi), cdf_hi)
    p = (params.weights() * (cdf_hi - cdf_lo).clamp(min=0.0)).sum(dim=1)
    return p


def mixture_pmf_rows(logits, means, log_scales, bits: int, chunk: int = 4096) -> np.ndarray:
    """Full pmf rows (N, 2**bits) in float64 for CDF building.

    logits/means/log_scales: (N, K) tensors.  The shared interior bin edges
    make the row sum telescope to sigma(+inf) - sigma(-inf) = 1 exactly (up
    to float64 rounding), one sigmoid per edge.
    """
    alphabet = 1 << bits
    # interior edges (a + 0.5) / (A - 1) for a = 0..A-2
    edges = (torch.arange(alphabet - 1, dtype=torch.float64) + 0.5) / (alphabet - 1)
    out = np.empty((means.shape[0], alphabet), dtype=np.float64)
    for start in range(0, means.shape[0], chunk):
        mu = means[start : start + chunk].double().unsqueeze(-1)
        inv_s = torch.exp(-log_scales[start : start + chunk].double()).unsqueeze(-1)
        w = torch.softmax(logits[start : start + chunk].double(), dim=-1).unsqueeze(-1)
        cdf = torch.sigmoid((edges - mu) * inv_s)
        pad = cdf.new_zeros(cdf.shape[0], cdf.shape[1], 1)
        cdf = torch.cat([pad, cdf, pad + 1.0], dim=-1)
        p = (w * (cdf[..., 1:] - cdf[..., :-1]).clamp(min=0.0)).sum(dim=-2)
        out[start : start + chunk] = p.cpu().numpy()
    return out


def discretized_logistic_pmf(weights, means, scales, symbol: int, bits: int) -> float:
    """Reference single-element pmf (weights already normalized)."""
    alphabet = 1 << bits
    if not 0 <= symbol < alphabet:
        raise ValueError(f"symbol {symbol} outside [0, {alphabet - 1}]")
    u = symbol / (alphabet - 1)
    half = 0.5 / (alphabet - 1)
    total = 0.0
    for w, mu, s in zip(weights, means, scales):
        c_hi = 1.0 if symbol == alphabet - 1 else 1.0 / (1.0 + math.exp(-(u + half - mu) / s))
        c_lo = 0.0 if symbol == 0 else 1.0 / (1.0 + math.exp(-(u - half - mu) / s))
        total += w * (c_hi - c_lo)
    return total


def floor_pmf(p: torch.Tensor, bits: int) -> torch.Tensor:
    """Mix with uniform so every symbol keeps >= 1/2**16 probability."""
    alphabet = 1 << bits
    eps = 1.0 / PROB_TOTAL
    return (1.0 - alphabet * eps) * p + eps


def rate_bits(
    model: ProbModel,
    u: torch.Tensor,
    z: torch.Tensor,
    bits: int,
    M: int,
    breakdown: list | None = None,
) -> torch.Tensor:
    """Per-image coded length estimate in bits, differentiable through u.

    u: (B, C, h, w) dequantized grid values (straight-through in training);
    z: matching int64 symbols.  Sums -log2 p_floor over all coded positions
    plus b bits per element of the last pyramid level.  When a list is passed
    as `breakdown`, it collects (scale, group, bits_float) per coding step.
    """
    B, C, h, w = u.shape
    levels_u = build_pyramid(u, M)
    levels_z = build_pyramid(z, M)
    hM, wM = levels_u[M].shape[-2:]
    total = u.new_full((B,), float(bits * C * hM * wM))
    q = None
    for i in range(M, 0, -1):
        hc, wc = levels_u[i - 1].shape[-2:]
        z_hat = _upsample_to(levels_u[i], hc, wc)
        avail = torch.from_numpy(anchor_mask(hc, wc)).to(u.dtype).to(u.device)
        avail = avail.expand(B, 1, hc, wc).clone()
        if q is None:
            q = u.new_zeros(B, model.cfg.context_channels, hc, wc)
        else:
            q = _upsample_to(q, hc, wc)
        for j, gmask_np in enumerate(group_masks(hc, wc)):
            params, q = model(z_hat, avail, q)
            gmask = torch.from_numpy(gmask_np).to(u.device)
            if gmask_np.any():
                p = mixture_bin_prob(params, levels_u[i - 1], levels_z[i - 1], bits)
                nbits = -torch.log2(floor_pmf(p, bits))
                step = (nbits * gmask).sum(dim=(1, 2, 3))
                total = total + step
                if breakdown is not None:
                    breakdown.append((i, j, float(step.sum().detach())))
            elif breakdown is not None:
                breakdown.append((i, j, 0.0))
            z_hat = torch.where(gmask, levels_u[i - 1], z_hat)
            avail = torch.where(gmask, torch.ones_like(avail), avail)
    return total


def rate_loss(z, model: ProbModel, bits: int, M: int) -> torch.Tensor:
    """Total bits for a symbol tensor (no latent gradient path); z may be a
    numpy (h, w, C) array or a (B, C, h, w) long tensor."""
    if isinstance(z, np.ndarray):
        zt = torch.from_numpy(np.ascontiguousarray(z.transpose(2, 0, 1))).long().unsqueeze(0)
    else:
        zt = z
    u = zt.to(torch.get_default_dtype()) / ((1 << bits) - 1)
    return rate_bits(model, u, zt, bits, M).sum()
