"""Pytest configuration and fixtures."""

from collections.abc import Callable

import numpy as np
import pytest

from combo_retrieval.core.corpus import Corpus, generate_synthetic_corpus
from combo_retrieval.core.model import ModelParams, QueryFeatures, VideoFeatures
from combo_retrieval.utils.config import CorpusConfig, ModelConfig


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator."""
    return np.random.default_rng(0)


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    """Small teacher (8 wide) with a narrower student."""
    return ModelConfig(
        input_dim=8,
        d_model=8,
        n_heads=2,
        n_layers=2,
        student_d_model=4,
        student_heads=2,
        student_layers=2,
    )


@pytest.fixture
def tiny_params(tiny_model_config: ModelConfig) -> ModelParams:
    """Freshly initialised parameters."""
    return ModelParams.initialize(tiny_model_config)


@pytest.fixture
def query_factory(rng: np.random.Generator) -> Callable[..., QueryFeatures]:
    """Build random queries."""

    def make(dim: int = 8, length: int = 2, query_id: int = 0) -> QueryFeatures:
        return QueryFeatures(rng.normal(size=(dim, length)), query_id)

    return make


@pytest.fixture
def video_factory(rng: np.random.Generator) -> Callable[..., VideoFeatures]:
    """Build random videos."""

    def make(
        dim: int = 8, boxes: int = 3, title: int = 2, video_id: int = 0
    ) -> VideoFeatures:
        return VideoFeatures(
            video_id, rng.normal(size=(dim, boxes)), rng.normal(size=(dim, title))
        )

    return make


@pytest.fixture
def small_corpus_config() -> CorpusConfig:
    """16 videos in 4 clusters, 8-dimensional tokens."""
    return CorpusConfig(
        clusters=4,
        videos_per_cluster=4,
        dim=8,
        noise=0.1,
        query_words=2,
        title_words=2,
        n_centroids=3,
    )


@pytest.fixture
def small_corpus(small_corpus_config: CorpusConfig) -> Corpus:
    """Synthetic corpus matching ``tiny_model_config``."""
    return generate_synthetic_corpus(small_corpus_config)
