"""Cross-matching and embedding similarities."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np

from ..utils.errors import DimensionError, InputError, NumericDomainError
from . import autodiff as ad
from .autodiff import Tensor

SimilarityMode = Literal["cosine", "inner_product"]


@dataclass
class ScoreMatrix:
    """Pairwise scores over a minibatch.

    ``values[i, j]`` is the similarity of video ``i`` and sentence ``j``; the
    diagonal holds the ground-truth pairs.
    """

    values: Tensor

    def __post_init__(self) -> None:
        """Validate shape and finiteness."""
        shape = self.values.shape
        if len(shape) != 2 or shape[0] != shape[1]:
            raise DimensionError("ScoreMatrix", shape)
        if not np.all(np.isfinite(self.values.data)):
            raise NumericDomainError("ScoreMatrix: non-finite entries")

    @classmethod
    def from_scores(cls, rows: Sequence[Sequence[Tensor]]) -> ScoreMatrix:
        """Stack scalar score tensors laid out as ``rows[video][sentence]``."""
        size = len(rows)
        flat = [score for row in rows for score in row]
        if any(len(row) != size for row in rows):
            raise DimensionError("ScoreMatrix", (size, len(flat)))
        return cls(ad.stack(flat, (size, size)))

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def transposed(self) -> ScoreMatrix:
        return ScoreMatrix(ad.transpose(self.values))

    def diagonal(self) -> list[float]:
        return [float(v) for v in np.diag(self.values.data)]


def _check_tokens(name: str, tokens: Tensor) -> None:
    if tokens.ndim != 2 or tokens.shape[1] < 1:
        raise InputError(f"{name} needs at least one token, got shape {tokens.shape}")


def soft_attention_pool(centroids: Tensor, words: Tensor) -> tuple[Tensor, Tensor]:
    """Attend words over centroids and score the result by inner products.

    ``S = C^T W``; every column of ``S`` is softmax-normalised into ``S~``;
    ``W~ = C S~``; the score is ``sum_i <w~_i, w_i>``.

    Args:
        centroids: ``d x K`` attended centroid features.
        words: ``d x M`` attended word features.

    Returns:
        ``(W~, score)``.
    """
    _check_tokens("centroids", centroids)
    _check_tokens("words", words)
    if centroids.shape[0] != words.shape[0]:
        raise DimensionError("soft_attention_pool", centroids.shape, words.shape)
    weights = ad.softmax(ad.matmul(ad.transpose(centroids), words), axis=0)
    pooled = ad.matmul(centroids, weights)
    return pooled, ad.sum_all(ad.mul(pooled, words))


def cross_similarity(
    query: Tensor, video: Tensor, mode: SimilarityMode = "cosine"
) -> Tensor:
    """Cross-matching score between query tokens and video tokens.

    For each query token ``q_j``: ``a_j = softmax(V^T q_j)``, ``q^_j = V a_j``;
    the score is ``sum_j cos(q_j, q^_j)``, so it lies in ``[-L, L]``. A pooled
    vector with zero norm contributes 0.

    Args:
        query: ``d x L`` query token features.
        video: ``d x (M + N_t)`` video token features.
        mode: ``"cosine"`` (default) or the un-normalised ``"inner_product"``
            variant computed by :func:`soft_attention_pool`.

    Raises:
        InputError: Empty sides or a zero-norm query token.
        DimensionError: Feature widths differ.
    """
    _check_tokens("query", query)
    _check_tokens("video", video)
    if query.shape[0] != video.shape[0]:
        raise DimensionError("cross_similarity", query.shape, video.shape)
    if np.any(np.linalg.norm(query.data, axis=0) == 0):
        raise InputError("cross_similarity: query contains a zero-norm token")

    if mode == "inner_product":
        return soft_attention_pool(video, query)[1]
    weights = ad.softmax(ad.matmul(ad.transpose(video), query), axis=0)
    pooled = ad.matmul(video, weights)
    return ad.sum_all(ad.cosine(query, pooled))


def embed_similarity(query: Tensor, video: Tensor) -> Tensor:
    """Cosine between a query embedding and a video embedding.

    Raises:
        InputError: Either embedding has zero norm.
    """
    if query.shape != video.shape or query.ndim != 1:
        raise DimensionError("embed_similarity", query.shape, video.shape)
    if np.linalg.norm(query.data) == 0 or np.linalg.norm(video.data) == 0:
        raise InputError("embed_similarity: zero-norm embedding")
    return ad.cosine(query, video)


def embedding_score_matrix(
    video_embeddings: Sequence[Tensor], query_embeddings: Sequence[Tensor]
) -> ScoreMatrix:
    """ScoreMatrix of embedding cosines, rows = videos, columns = queries."""
    return ScoreMatrix.from_scores(
        [[embed_similarity(q, v) for q in query_embeddings] for v in video_embeddings]
    )
