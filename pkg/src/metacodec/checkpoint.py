"""Versioned checkpoint container: one .npz per codec holding every network's
parameter arrays plus the codec/probmodel configs and free-form metadata.
No pickled objects, so checkpoints stay portable and diffable."""

from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np
import torch

from .codec import Codec, CodecConfig
from .probmodel import ProbModel, ProbModelConfig

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def new_codec(cfg: CodecConfig, pcfg: ProbModelConfig, seed: int | None = None) -> Codec:
    if seed is not None:
        torch.manual_seed(seed)
    return Codec(cfg, ProbModel(cfg.channels_c, pcfg))


def save_checkpoint(path, codec: Codec, metadata: dict | None = None) -> None:
    header = {
        "version": CHECKPOINT_VERSION,
        "codec_config": asdict(codec.cfg),
        "probmodel_config": asdict(codec.pcfg),
        "metadata": metadata or {},
    }
    arrays = {
        f"state/{key}": value.detach().cpu().numpy()
        for key, value in codec.state_dict().items()
    }
    np.savez_compressed(path, header=json.dumps(header), **arrays)


def load_checkpoint(path) -> tuple[Codec, dict]:
    with np.load(path, allow_pickle=False) as data:
        try:
            header = json.loads(str(data["header"]))
        except KeyError:
            raise CheckpointError(f"{path}: missing checkpoint header")
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
        cfg = CodecConfig(**header["codec_config"])
        pcfg = ProbModelConfig(**header["probmodel_config"])
        codec = new_codec(cfg, pcfg)
        state = {
            key[len("state/"):]: torch.from_numpy(data[key])
            for key in data.files
            if key.startswith("state/")
        }
    codec.load_state_dict(state)
    codec.eval()
    return codec, header.get("metadata", {})
