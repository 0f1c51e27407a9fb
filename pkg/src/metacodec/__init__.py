"""Meta-learned image compression: masked auto-encoder codec, multi-scale
progressive entropy model with arithmetic coding, latent-overfitting
meta-training, and content-adaptive decoder biases."""

__version__ = "0.1.0"

from .codec import Codec, CodecConfig
from .probmodel import ProbModel, ProbModelConfig
from .training import BiasCodebook, LossWeights, MetaConfig
from .pipeline import CodecBank, MetricsRecord, RateTarget, compress, decompress, evaluate

__all__ = [
    "Codec",
    "CodecConfig",
    "ProbModel",
    "ProbModelConfig",
    "BiasCodebook",
    "LossWeights",
    "MetaConfig",
    "CodecBank",
    "MetricsRecord",
    "RateTarget",
    "compress",
    "decompress",
    "evaluate",
    "__version__",
]
