"""neighborlab: multilabel image annotation with metadata neighborhoods.

Builds exact Jaccard nearest-neighbor structures over sparse image metadata,
trains a neighbor-pooling two-layer network on precomputed feature vectors,
and ships the baselines, ranking metrics, synthetic benchmark generator, and
seeded experiment harness needed to evaluate it end to end.
"""

__version__ = "0.1.0"

from .corpus import Corpus, ImageRecord, MetadataKind, SplitSpec
from .model import ModelConfig, ModelParams
from .neighbors import MetadataIndex, NeighborList, NeighborhoodSpec
from .metrics import EvalReport, ScoreMatrix
from .optim import TrainConfig
from .synthgen import SynthConfig

__all__ = [
    "Corpus",
    "ImageRecord",
    "MetadataKind",
    "SplitSpec",
    "ModelConfig",
    "ModelParams",
    "MetadataIndex",
    "NeighborList",
    "NeighborhoodSpec",
    "EvalReport",
    "ScoreMatrix",
    "TrainConfig",
    "SynthConfig",
    "__version__",
]
