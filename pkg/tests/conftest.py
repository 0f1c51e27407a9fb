import numpy as np
import pytest
import torch

from metacodec.checkpoint import new_codec
from metacodec.codec import CodecConfig
from metacodec.probmodel import ProbModelConfig

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


def make_tiny_codec(
    seed=0, channels=2, bits=4, stride=8, hidden=8, zeta=0.8, M=2, K=2, ctx=8, layers=2
):
    cfg = CodecConfig(
        channels_c=channels, bits_b=bits, downsample_s=stride, hidden_channels=hidden, zeta=zeta
    )
    pcfg = ProbModelConfig(num_scales_M=M, mixtures_K=K, context_channels=ctx, hidden_layers=layers)
    return new_codec(cfg, pcfg, seed=seed)


@pytest.fixture
def tiny_codec():
    return make_tiny_codec()


def rand_image(rng, h=64, w=64):
    return rng.random((h, w, 3), dtype=np.float32)
