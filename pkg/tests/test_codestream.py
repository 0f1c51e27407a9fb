"""Multi-scale encode/decode drivers and the bitstream container."""

import numpy as np
import pytest
import torch

from metacodec import probmodel as pm
from metacodec.entropy import (
    Bitstream,
    ContainerError,
    DecodeError,
    decode_tensor,
    encode_tensor,
    header_size,
    parse_container,
    serialize_container,
    symbol_checksum,
)

from test_probmodel import small_model


def test_round_trip_randomized(rng):
    for trial in range(80):
        torch.manual_seed(trial)
        C = int(rng.integers(1, 4))
        bits = int(rng.choice([1, 2, 4, 8]))
        M = int(rng.integers(1, 4))
        h, w = int(rng.integers(1, 13)), int(rng.integers(1, 13))
        model = small_model(C=C, K=2, ctx=8, layers=2, M=M, seed=trial, scale=0.3)
        z = rng.integers(0, 1 << bits, size=(h, w, C))
        payload = encode_tensor(model, z, bits, M)
        out = decode_tensor(model, payload, (h, w, C), bits, M)
        assert np.array_equal(out, z), f"trial {trial} shape {(h, w, C, bits, M)}"


def test_rate_agreement(rng):
    for trial in range(25):
        torch.manual_seed(100 + trial)
        C = int(rng.integers(1, 3))
        bits = int(rng.choice([2, 4, 8]))
        M = int(rng.integers(1, 3))
        h, w = int(rng.integers(2, 14)), int(rng.integers(2, 14))
        model = small_model(C=C, K=3, ctx=8, layers=2, M=M, seed=trial, scale=0.4)
        z = rng.integers(0, 1 << bits, size=(h, w, C))
        payload = encode_tensor(model, z, bits, M)
        est = float(pm.rate_loss(z, model, bits, M).detach())
        assert 8 * len(payload) <= est * 1.01 + 64


def test_deterministic_payload(rng):
    model = small_model(C=2, K=2, M=2, seed=5)
    z = rng.integers(0, 16, size=(9, 9, 2))
    a = encode_tensor(model, z, 4, 2)
    b = encode_tensor(model, z, 4, 2)
    assert a == b


def test_whole_tensor_as_last_scale_costs_b_bits_per_element(rng):
    # M large enough that the pyramid bottoms out at 1x1: nearly everything
    # is still coded, but a 1x1 input is pure uniform coding
    model = small_model(C=1, K=2, M=1)
    z = rng.integers(0, 256, size=(1, 1, 1))
    payload = encode_tensor(model, z, 8, 1)
    assert 8 * len(payload) <= 8 + 24  # one 8-bit element + coder slack


def test_decode_with_diverged_model_raises_checksum(rng):
    model = small_model(C=1, K=2, M=2, seed=0)
    z = rng.integers(0, 16, size=(8, 8, 1))
    payload = encode_tensor(model, z, 4, 2)
    other = small_model(C=1, K=2, M=2, seed=999, scale=0.8)
    with pytest.raises(DecodeError):
        decode_tensor(other, payload, (8, 8, 1), 4, 2, checksum=symbol_checksum(z))


def test_truncated_payload_clean_error(rng):
    model = small_model(C=1, K=2, M=1, seed=1)
    z = rng.integers(0, 16, size=(10, 10, 1))
    payload = encode_tensor(model, z, 4, 1)
    with pytest.raises(DecodeError):
        decode_tensor(model, payload[: len(payload) // 2], (10, 10, 1), 4, 1,
                      checksum=symbol_checksum(z))


def test_symbol_out_of_range_rejected(rng):
    model = small_model()
    z = np.full((4, 4, 1), 16, dtype=np.int64)
    with pytest.raises(ValueError, match="symbol"):
        encode_tensor(model, z, 4, 1)


# -- container -----------------------------------------------------------------


def _sample_bitstream(rng):
    return Bitstream(
        codec_id=1,
        bits_b=8,
        channels_c=6,
        num_scales_M=3,
        downsample_s=4,
        orig_h=257,
        orig_w=129,
        pad_h=260,
        pad_w=132,
        checksum=0xDEADBEEF,
        payload=bytes(rng.integers(0, 256, size=101, dtype=np.uint8)),
        tile_size=64,
        n_centroids=40,
        bias_indices=bytes(rng.integers(0, 256, size=15, dtype=np.uint8)),
        best_effort=True,
    )


def test_container_round_trip(rng):
    bs = _sample_bitstream(rng)
    data = serialize_container(bs)
    out = parse_container(data)
    assert serialize_container(out) == data
    for field in ("codec_id", "bits_b", "channels_c", "num_scales_M", "downsample_s",
                  "orig_h", "orig_w", "pad_h", "pad_w", "checksum", "payload",
                  "tile_size", "n_centroids", "bias_indices", "best_effort"):
        assert getattr(out, field) == getattr(bs, field), field


def test_container_bad_magic(rng):
    data = bytearray(serialize_container(_sample_bitstream(rng)))
    data[0] ^= 0xFF
    with pytest.raises(ContainerError, match="magic"):
        parse_container(bytes(data))


def test_container_bad_version(rng):
    data = bytearray(serialize_container(_sample_bitstream(rng)))
    data[4] = 99
    with pytest.raises(ContainerError, match="version"):
        parse_container(bytes(data))


def test_container_length_mismatch(rng):
    data = serialize_container(_sample_bitstream(rng))
    with pytest.raises(ContainerError, match="length"):
        parse_container(data[:-1])
    with pytest.raises(ContainerError, match="length"):
        parse_container(data + b"x")
    with pytest.raises(ContainerError, match="truncated"):
        parse_container(data[: header_size() - 2])
