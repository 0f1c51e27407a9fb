"""Bitstream container: fixed little-endian header + bias-index segment +
arithmetic-coded payload.  Field-by-field layout documented in
docs/bitstream.md; parse(serialize(x)) is byte-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

MAGIC = b"MCBS"
VERSION = 1

# magic, version, codec_id, bits_b, channels_c, num_scales_M, downsample_s,
# flags, orig_h, orig_w, pad_h, pad_w, tile_size, n_centroids,
# bias_seg_len, payload_len, checksum
_HEADER = struct.Struct("<4sBBBBBBBIIIIHBIII")

FLAG_BEST_EFFORT = 1 << 0
FLAG_BIAS_INDICES = 1 << 1


class ContainerError(ValueError):
    pass


@dataclass
class Bitstream:
    codec_id: int
    bits_b: int
    channels_c: int
    num_scales_M: int
    downsample_s: int
    orig_h: int
    orig_w: int
    pad_h: int
    pad_w: int
    checksum: int
    payload: bytes
    tile_size: int = 0
    n_centroids: int = 0
    bias_indices: bytes = b""
    best_effort: bool = False

    @property
    def flags(self) -> int:
        f = 0
        if self.best_effort:
            f |= FLAG_BEST_EFFORT
        if self.bias_indices:
            f |= FLAG_BIAS_INDICES
        return f


def serialize_container(bs: Bitstream) -> bytes:
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        bs.codec_id,
        bs.bits_b,
        bs.channels_c,
        bs.num_scales_M,
        bs.downsample_s,
        bs.flags,
        bs.orig_h,
        bs.orig_w,
        bs.pad_h,
        bs.pad_w,
        bs.tile_size,
        bs.n_centroids,
        len(bs.bias_indices),
        len(bs.payload),
        bs.checksum,
    )
    return header + bs.bias_indices + bs.payload


def parse_container(data: bytes) -> Bitstream:
    if len(data) < _HEADER.size:
        raise ContainerError(f"container truncated: {len(data)} < header size {_HEADER.size}")
    (
        magic,
        version,
        codec_id,
        bits_b,
        channels_c,
        num_scales_m,
        downsample_s,
        flags,
        orig_h,
        orig_w,
        pad_h,
        pad_w,
        tile_size,
        n_centroids,
        bias_len,
        payload_len,
        checksum,
    ) = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    expected = _HEADER.size + bias_len + payload_len
    if len(data) != expected:
        raise ContainerError(f"length mismatch: declared {expected}, actual {len(data)}")
    if not 1 <= bits_b <= 8:
        raise ContainerError(f"bits_b {bits_b} outside [1, 8]")
    off = _HEADER.size
    bias_indices = data[off : off + bias_len]
    payload = data[off + bias_len :]
    return Bitstream(
        codec_id=codec_id,
        bits_b=bits_b,
        channels_c=channels_c,
        num_scales_M=num_scales_m,
        downsample_s=downsample_s,
        orig_h=orig_h,
        orig_w=orig_w,
        pad_h=pad_h,
        pad_w=pad_w,
        checksum=checksum,
        payload=payload,
        tile_size=tile_size,
        n_centroids=n_centroids,
        bias_indices=bias_indices,
        best_effort=bool(flags & FLAG_BEST_EFFORT),
    )


def header_size() -> int:
    return _HEADER.size
