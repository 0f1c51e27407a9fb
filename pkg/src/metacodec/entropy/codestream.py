"""Multi-scale drivers: turn a symbol tensor into range-coder payload bytes
and back, mirroring probmodel.rate_bits step for step.

Coding order: last pyramid level first (uniform CDFs), then scales M..1, the
three phase groups in order, raster order within a group, channels innermost.
The decoder regenerates every CDF by replaying the same causal context, so
any model/weight divergence shows up as a checksum failure, not garbage.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch

from .. import probmodel as pm
from .coder import RangeDecoder, RangeEncoder, pmf_to_cdf, uniform_cdf


class DecodeError(ValueError):
    pass


def symbol_checksum(z: np.ndarray) -> int:
    return zlib.crc32(np.ascontiguousarray(z, dtype=np.uint8).tobytes()) & 0xFFFFFFFF


def _norm(z_np: np.ndarray, bits: int) -> torch.Tensor:
    """(h, w, C) ints -> (1, C, h, w) float grid values."""
    t = torch.from_numpy(np.ascontiguousarray(z_np.transpose(2, 0, 1), dtype=np.float32))
    return (t / ((1 << bits) - 1)).unsqueeze(0).to(torch.get_default_dtype())


def _group_cdfs(params: pm.MixtureParams, rows, cols, bits: int) -> np.ndarray:
    logits, means, log_scales = params.at_positions(rows, cols)
    pmf = pm.mixture_pmf_rows(logits, means, log_scales, bits)
    return pmf_to_cdf(pmf)


def encode_tensor(model: pm.ProbModel, z: np.ndarray, bits: int, M: int) -> bytes:
    """z: (h, w, C) integers in [0, 2**bits - 1]; returns payload bytes."""
    if z.ndim != 3:
        raise ValueError("symbol tensor must be (h, w, C)")
    alphabet = 1 << bits
    if z.min() < 0 or z.max() >= alphabet:
        raise ValueError(f"symbol outside [0, {alphabet - 1}]")
    z = np.ascontiguousarray(z, dtype=np.int64)
    enc = RangeEncoder()
    with torch.no_grad():
        levels = pm.build_pyramid(z, M)
        flat_last = levels[M].reshape(-1)
        enc.encode(flat_last, uniform_cdf(bits, flat_last.shape[0]))
        q = None
        for i in range(M, 0, -1):
            cur, up = levels[i - 1], levels[i]
            hc, wc = cur.shape[0], cur.shape[1]
            z_hat = pm._upsample_to(_norm(up, bits), hc, wc)
            avail = torch.from_numpy(pm.anchor_mask(hc, wc)).to(z_hat.dtype)[None, None]
            avail = avail.clone()
            q = (
                z_hat.new_zeros(1, model.cfg.context_channels, hc, wc)
                if q is None
                else pm._upsample_to(q, hc, wc)
            )
            cur_t = _norm(cur, bits)
            for gmask in pm.group_masks(hc, wc):
                params, q = model(z_hat, avail, q)
                if gmask.any():
                    rows, cols = np.nonzero(gmask)
                    cdfs = _group_cdfs(params, rows, cols, bits)
                    enc.encode(cur[rows, cols, :].reshape(-1), cdfs)
                gm = torch.from_numpy(gmask)
                z_hat = torch.where(gm, cur_t, z_hat)
                avail = torch.where(gm, torch.ones_like(avail), avail)
    return enc.finish()


def decode_tensor(
    model: pm.ProbModel, payload: bytes, shape, bits: int, M: int, checksum: int | None = None
) -> np.ndarray:
    """Inverse of encode_tensor given identical model weights and config."""
    h, w, c = shape
    alphabet = 1 << bits
    dims = pm.pyramid_dims(h, w, M)
    levels = [np.zeros((dh, dw, c), dtype=np.int64) for dh, dw in dims]
    dec = RangeDecoder(payload)
    with torch.no_grad():
        hM, wM = dims[M]
        flat = dec.decode(uniform_cdf(bits, hM * wM * c))
        levels[M] = flat.reshape(hM, wM, c)
        q = None
        for i in range(M, 0, -1):
            cur, up = levels[i - 1], levels[i]
            hc, wc = dims[i - 1]
            cur[0::2, 0::2, :] = up[: (hc + 1) // 2, : (wc + 1) // 2, :]
            z_hat = pm._upsample_to(_norm(up, bits), hc, wc)
            avail = torch.from_numpy(pm.anchor_mask(hc, wc)).to(z_hat.dtype)[None, None]
            avail = avail.clone()
            q = (
                z_hat.new_zeros(1, model.cfg.context_channels, hc, wc)
                if q is None
                else pm._upsample_to(q, hc, wc)
            )
            for gmask in pm.group_masks(hc, wc):
                params, q = model(z_hat, avail, q)
                if gmask.any():
                    rows, cols = np.nonzero(gmask)
                    cdfs = _group_cdfs(params, rows, cols, bits)
                    syms = dec.decode(cdfs)
                    if syms.min() < 0 or syms.max() >= alphabet:
                        raise DecodeError("decoded symbol outside alphabet")
                    cur[rows, cols, :] = syms.reshape(-1, c)
                gm = torch.from_numpy(gmask)
                z_hat = torch.where(gm, _norm(cur, bits), z_hat)
                avail = torch.where(gm, torch.ones_like(avail), avail)
    z0 = levels[0]
    if checksum is not None and symbol_checksum(z0) != checksum:
        raise DecodeError("symbol checksum mismatch (model/payload divergence)")
    return z0
