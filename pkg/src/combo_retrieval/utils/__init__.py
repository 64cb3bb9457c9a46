"""Utility modules."""

from .config import (
    CorpusConfig,
    LossConfig,
    ModelConfig,
    NegativeSamplingConfig,
    RunConfig,
    TrainConfig,
)
from .logger import set_verbosity, setup_logger

__all__ = [
    "CorpusConfig",
    "LossConfig",
    "ModelConfig",
    "NegativeSamplingConfig",
    "RunConfig",
    "TrainConfig",
    "set_verbosity",
    "setup_logger",
]
