"""Rate-controlled compression pipeline: codec/bits selection, latent
overfitting with rate- or distortion-weighted objectives, per-tile decoder
bias signaling, container assembly, metrics, and the codec bank on disk.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, replace

import numpy as np
import torch

from . import probmodel as pm
from .checkpoint import load_checkpoint
from .codec import Codec, crop_image, pad_image, quantize_pair
from .entropy import (
    Bitstream,
    ContainerError,
    decode_tensor,
    encode_tensor,
    header_size,
    parse_container,
    serialize_container,
    symbol_checksum,
)
from .metrics import ms_ssim_luma, psnr, to_image, to_tensor
from .training import (
    RESERVED_DEFAULT_INDEX,
    BiasCodebook,
    LossWeights,
    _loss_from_latent,
    distortion_loss,
    inner_adapt,
)


@dataclass
class RateTarget:
    target_bpp: float
    margin: float = 0.15

    def __post_init__(self):
        if self.target_bpp <= 0:
            raise ValueError("target_bpp must be positive")
        if not 0.0 < self.margin < 1.0:
            raise ValueError("margin must be in (0, 1)")

    @property
    def upper(self) -> float:
        return self.target_bpp * (1.0 + self.margin)

    @property
    def lower(self) -> float:
        return self.target_bpp * (1.0 - self.margin)


# the eight target rates the shipped variants are aimed at
DEFAULT_TARGETS = (2.0, 1.5, 1.0, 0.75, 0.5, 0.25, 0.12, 0.06)


@dataclass
class MetricsRecord:
    image_id: str
    bpp: float
    ms_ssim_y: float
    psnr: float
    bits_total: int
    bits_payload: int
    bits_overhead: int

    FIELDS = ("image_id", "bpp", "ms_ssim_y", "psnr", "bits_total", "bits_payload", "bits_overhead")


class CodecBank:
    """Ordered set of trained codecs (highest to lowest nominal bpp)."""

    def __init__(self, entries, tile_size: int = 64):
        # entries: list of dicts {id, codec, trained_bpp, metadata}
        self.entries = sorted(entries, key=lambda e: -e["trained_bpp"])
        self.tile_size = tile_size

    @classmethod
    def load(cls, models_dir) -> "CodecBank":
        manifest_path = os.path.join(models_dir, "bank.json")
        with open(manifest_path) as f:
            manifest = json.load(f)
        entries = []
        for item in manifest["codecs"]:
            codec, meta = load_checkpoint(os.path.join(models_dir, item["file"]))
            entries.append(
                {"id": item["id"], "codec": codec, "trained_bpp": item["trained_bpp"], "metadata": meta}
            )
        return cls(entries, tile_size=manifest.get("tile_size", 64))

    def by_id(self, codec_id: int):
        for e in self.entries:
            if e["id"] == codec_id:
                return e
        raise KeyError(f"codec id {codec_id} not in bank")

    def nearest(self, target_bpp: float) -> int:
        """Position in self.entries whose trained bpp is closest to the target."""
        diffs = [abs(e["trained_bpp"] - target_bpp) for e in self.entries]
        return int(np.argmin(diffs))


def tile_grid(pad_h: int, pad_w: int, tile: int):
    """Non-overlapping tile rectangles (row0, row1, col0, col1) in raster order."""
    rects = []
    for r0 in range(0, pad_h, tile):
        for c0 in range(0, pad_w, tile):
            rects.append((r0, min(r0 + tile, pad_h), c0, min(c0 + tile, pad_w)))
    return rects


def _tile_losses(codec: Codec, x_pad, u, rects, vec, w: LossWeights) -> np.ndarray:
    """Per-tile distortion under one bias vector (None = defaults), batching
    same-shaped tiles through the decoder."""
    s = codec.cfg.downsample_s
    losses = np.empty(len(rects))
    groups = {}
    for t, (r0, r1, c0, c1) in enumerate(rects):
        groups.setdefault((r1 - r0, c1 - c0), []).append(t)
    for (th, tw), idxs in sorted(groups.items()):
        lat = torch.cat(
            [
                u[..., rects[t][0] // s : rects[t][1] // s, rects[t][2] // s : rects[t][3] // s]
                for t in idxs
            ]
        )
        xh = codec.decode_image(lat, biases=vec)
        for row, t in enumerate(idxs):
            r0, r1, c0, c1 = rects[t]
            ref = x_pad[..., r0:r1, c0:c1]
            losses[t] = float(distortion_loss(ref, xh[row : row + 1], w))
    return losses


def select_tile_indices(
    codec: Codec, x_pad, u, rects, codebook: BiasCodebook | None, w: LossWeights
) -> np.ndarray:
    """argmin bias index per tile; ties toward 255 then lower index."""
    indices = np.full(len(rects), RESERVED_DEFAULT_INDEX, dtype=np.uint8)
    if codebook is None or len(codebook) == 0 or not rects:
        return indices
    with torch.no_grad():
        default = _tile_losses(codec, x_pad, u, rects, None, w)
        all_losses = np.stack(
            [_tile_losses(codec, x_pad, u, rects, vec, w) for vec in codebook.centroids]
        )
    best = all_losses.argmin(axis=0)
    best_loss = all_losses[best, np.arange(len(rects))]
    improved = best_loss < default
    indices[improved] = best[improved].astype(np.uint8)
    return indices


def tiled_decode(codec: Codec, u, rects, indices, codebook: BiasCodebook | None):
    """Reconstruct the padded image tile by tile with the signaled biases.

    Tiles sharing a bias index are batched; iteration order is a fixed
    function of (rects, indices) so encoder-side previews and the decoder
    produce identical pixels."""
    s = codec.cfg.downsample_s
    if not rects:
        return codec.decode_image(u)
    h = max(r1 for _, r1, _, _ in rects)
    w_ = max(c1 for *_, c1 in rects)
    out = u.new_zeros(1, 3, h, w_)
    by_key = {}
    for t, (r0, r1, c0, c1) in enumerate(rects):
        by_key.setdefault((int(indices[t]), r1 - r0, c1 - c0), []).append(t)
    for (idx, th, tw), idxs in sorted(by_key.items()):
        vec = None
        if idx != RESERVED_DEFAULT_INDEX:
            if codebook is None:
                raise ContainerError("bitstream signals bias clusters but no codebook given")
            if idx >= len(codebook):
                raise ContainerError(f"bias index {idx} outside codebook of {len(codebook)}")
            vec = codebook.centroids[idx]
        lat = torch.cat(
            [
                u[..., rects[t][0] // s : rects[t][1] // s, rects[t][2] // s : rects[t][3] // s]
                for t in idxs
            ]
        )
        xh = codec.decode_image(lat, biases=vec)
        for row, t in enumerate(idxs):
            r0, r1, c0, c1 = rects[t]
            out[..., r0:r1, c0:c1] = xh[row : row + 1]
    return out


def _container_overhead_bits(n_tiles: int) -> int:
    return 8 * (header_size() + n_tiles)


def _encode_current(codec: Codec, y_tilde, bits: int):
    u, z = quantize_pair(y_tilde.detach(), bits)
    z_np = z.squeeze(0).permute(1, 2, 0).numpy()
    payload = encode_tensor(codec.probmodel, z_np, bits, codec.pcfg.num_scales_M)
    return u, z_np, payload


def _rate_estimate_bits(codec: Codec, y_tilde, bits: int) -> float:
    with torch.no_grad():
        u, z = quantize_pair(y_tilde, bits)
        return float(pm.rate_bits(codec.probmodel, u, z, bits, codec.pcfg.num_scales_M).sum())


@dataclass
class CompressResult:
    data: bytes
    bpp: float
    codec_id: int
    bits_b: int
    best_effort: bool
    trials: int
    bpp_pre_overfit: float
    info: dict


def _book_for(codebook, codec_id: int) -> BiasCodebook | None:
    """Codebooks are decoder-specific; accept either one book or a per-codec dict."""
    if isinstance(codebook, dict):
        return codebook.get(codec_id)
    return codebook


def compress(
    img: np.ndarray,
    target: RateTarget,
    bank: CodecBank,
    codebook=None,
    overfit_budget: int = 10,
    overfit_lr: float = 0.1,
    weights: LossWeights | None = None,
) -> CompressResult:
    """Rate-controlled encode of an (H, W, 3) float image in [0, 1].

    Search order: nearest-rate codec at its trained bit depth, then fewer
    quantization bits, then the next lower-rate codec.  Afterwards latent
    overfitting nudges the rate toward the target band (rate weight x4 when
    above, distortion weights x4 when below) and per-tile decoder biases are
    selected from the codebook.
    """
    w_base = weights or LossWeights()
    x = to_tensor(img)
    orig_h, orig_w = x.shape[-2:]
    num_px = orig_h * orig_w
    start = bank.nearest(target.target_bpp)
    chosen = None
    trials = 0
    best_overshoot = None
    for pos in range(start, len(bank.entries)):
        entry = bank.entries[pos]
        codec: Codec = entry["codec"]
        book = _book_for(codebook, entry["id"])
        x_pad, crop = pad_image(x, codec.cfg.downsample_s)
        n_tiles = len(tile_grid(x_pad.shape[-2], x_pad.shape[-1], bank.tile_size)) if book else 0
        overhead = _container_overhead_bits(n_tiles)
        with torch.no_grad():
            y_tilde, tau, tau_q, m = codec.masked_latent(x_pad)
        for bits in range(codec.cfg.bits_b, 0, -1):
            est_bpp = (_rate_estimate_bits(codec, y_tilde, bits) + overhead) / num_px
            if est_bpp > target.upper and bits > 1 and not (
                pos == len(bank.entries) - 1 and bits == 1
            ):
                # hopeless by estimate; the estimate tracks the payload within
                # ~1%, so skip the encode unless this is the last resort
                trials += 1
                continue
            u, z_np, payload = _encode_current(codec, y_tilde, bits)
            trials += 1
            bpp = (8 * len(payload) + overhead) / num_px
            if bpp <= target.upper:
                chosen = (pos, bits, y_tilde, tau, m, payload, z_np, bpp)
                break
            if best_overshoot is None or bpp < best_overshoot[7]:
                best_overshoot = (pos, bits, y_tilde, tau, m, payload, z_np, bpp)
        if chosen:
            break
    best_effort = chosen is None
    if chosen is None:
        chosen = best_overshoot
    pos, bits, y_tilde, tau, m, payload, z_np, bpp = chosen
    entry = bank.entries[pos]
    codec = entry["codec"]
    book = _book_for(codebook, entry["id"])
    x_pad, crop = pad_image(x, codec.cfg.downsample_s)
    n_tiles = len(tile_grid(x_pad.shape[-2], x_pad.shape[-1], bank.tile_size)) if book else 0
    bpp_pre = bpp

    # overfitting-based rate adjustment + quality optimization
    if overfit_budget > 0:
        latent = y_tilde.detach().clone().requires_grad_(True)
        tau_c = tau.detach()
        mask = m.detach()
        cur = latent
        for _ in range(overfit_budget):
            est_bpp = (
                _rate_estimate_bits(codec, cur.detach(), bits) + _container_overhead_bits(n_tiles)
            ) / num_px
            w_round = w_base
            if est_bpp > target.upper:
                w_round = replace(w_base, lambda_r=4 * w_base.lambda_r)
            elif est_bpp < target.lower:
                w_round = replace(
                    w_base, lambda_d1=4 * w_base.lambda_d1, lambda_d2=4 * w_base.lambda_d2
                )

            def loss_fn(lat, w_round=w_round):
                return _loss_from_latent(codec, x_pad, lat, tau_c, w_round, bits)[0]

            cur, _ = inner_adapt(cur, loss_fn, 1, overfit_lr, second_order=False, mask=mask)
        y_tilde = cur.detach()
        u, z_np, payload = _encode_current(codec, y_tilde, bits)
        trials += 1

    u, _ = quantize_pair(y_tilde.detach(), bits)
    rects = tile_grid(x_pad.shape[-2], x_pad.shape[-1], bank.tile_size) if book else []
    indices = select_tile_indices(codec, x_pad, u, rects, book, w_base)
    n_tiles = len(rects)
    bits_total = 8 * len(payload) + _container_overhead_bits(n_tiles)
    bpp = bits_total / num_px
    if not (target.lower <= bpp <= target.upper):
        best_effort = True
    bs = Bitstream(
        codec_id=entry["id"],
        bits_b=bits,
        channels_c=codec.cfg.channels_c,
        num_scales_M=codec.pcfg.num_scales_M,
        downsample_s=codec.cfg.downsample_s,
        orig_h=orig_h,
        orig_w=orig_w,
        pad_h=x_pad.shape[-2],
        pad_w=x_pad.shape[-1],
        checksum=symbol_checksum(z_np),
        payload=payload,
        tile_size=bank.tile_size if book else 0,
        n_centroids=len(book) if book else 0,
        bias_indices=indices.tobytes() if book else b"",
        best_effort=best_effort,
    )
    data = serialize_container(bs)
    return CompressResult(
        data=data,
        bpp=8 * len(data) / num_px,
        codec_id=entry["id"],
        bits_b=bits,
        best_effort=best_effort,
        trials=trials,
        bpp_pre_overfit=bpp_pre,
        info={"n_tiles": n_tiles, "payload_bits": 8 * len(payload)},
    )


def decompress(data: bytes, bank: CodecBank, codebook: BiasCodebook | None = None) -> np.ndarray:
    """Container bytes -> (H, W, 3) float image."""
    bs = parse_container(data)
    entry = bank.by_id(bs.codec_id)
    codec: Codec = entry["codec"]
    if codec.cfg.channels_c != bs.channels_c or codec.cfg.downsample_s != bs.downsample_s:
        raise ContainerError("bitstream codec config does not match the bank checkpoint")
    s = bs.downsample_s
    lat_shape = (bs.pad_h // s, bs.pad_w // s, bs.channels_c)
    z = decode_tensor(
        codec.probmodel, bs.payload, lat_shape, bs.bits_b, bs.num_scales_M, checksum=bs.checksum
    )
    u = (
        torch.from_numpy(np.ascontiguousarray(z.transpose(2, 0, 1), dtype=np.float32))
        .unsqueeze(0)
        .to(torch.get_default_dtype())
        / ((1 << bs.bits_b) - 1)
    )
    codebook = _book_for(codebook, bs.codec_id)
    with torch.no_grad():
        if bs.bias_indices:
            indices = np.frombuffer(bs.bias_indices, dtype=np.uint8)
            needs_book = (indices != RESERVED_DEFAULT_INDEX).any()
            if needs_book:
                if codebook is None:
                    raise ContainerError("bitstream signals bias clusters but no codebook given")
                if len(codebook) != bs.n_centroids:
                    raise ContainerError(
                        f"codebook centroid count {len(codebook)} != signaled {bs.n_centroids}"
                    )
            rects = tile_grid(bs.pad_h, bs.pad_w, bs.tile_size)
            if len(rects) != len(indices):
                raise ContainerError("bias index segment length does not match tile grid")
            xh = tiled_decode(codec, u, rects, indices, codebook)
        else:
            xh = codec.decode_image(u)
        xh = crop_image(xh, (bs.orig_h, bs.orig_w))
    return to_image(xh)


def evaluate(img: np.ndarray, recon: np.ndarray, bits_total: int, bits_payload: int = 0,
             image_id: str = "") -> MetricsRecord:
    """BPP against the original pixel count, MS-SSIM on BT.601 luma, RGB PSNR."""
    if img.shape != recon.shape:
        raise ValueError(f"shape mismatch {img.shape} vs {recon.shape}")
    x = to_tensor(img)
    xh = to_tensor(recon)
    num_px = img.shape[0] * img.shape[1]
    return MetricsRecord(
        image_id=image_id,
        bpp=bits_total / num_px,
        ms_ssim_y=ms_ssim_luma(x, xh),
        psnr=psnr(x, xh),
        bits_total=bits_total,
        bits_payload=bits_payload,
        bits_overhead=bits_total - bits_payload,
    )


def atomic_write(path, data: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_codebooks(path, books: dict) -> None:
    """One npz holding a BiasCodebook per codec id (bias vectors are decoder-specific)."""
    arrays = {}
    for cid, book in books.items():
        arrays[f"centroids_{cid}"] = book.centroids
        arrays[f"meta_{cid}"] = np.array([book.seed, book.n_iter], dtype=np.int64)
    np.savez_compressed(path, **arrays)


def load_codebooks(path) -> dict:
    books = {}
    with np.load(path, allow_pickle=False) as data:
        for key in data.files:
            if key.startswith("centroids_"):
                cid = int(key.split("_", 1)[1])
                meta = data[f"meta_{cid}"]
                books[cid] = BiasCodebook(
                    centroids=data[key], seed=int(meta[0]), n_iter=int(meta[1])
                )
    return books
