"""Alternating training: model updates on a fixed tree, then tree rebuilds."""

from __future__ import annotations

import json
import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, TextIO

import numpy as np

from ..utils.config import RunConfig
from ..utils.errors import InputError, NumericDomainError, TrainingDivergedError
from ..utils.logger import setup_logger
from . import autodiff as ad
from .autodiff import Tape, Tensor
from .corpus import Corpus, QueryRecord
from .losses import distill_loss, dual_loss, node_triplet_loss, total_loss, triplet_loss
from .model import (
    ModelParams,
    QueryFeatures,
    VideoFeatures,
    forward_cross_path,
    forward_embed_path,
    forward_student,
    video_embeddings,
)
from .optimizer import build_optimizer, clip_grad_norm
from .scoring import ScoreMatrix, embedding_score_matrix
from .tree_index import TreeIndex, build_tree, sample_negatives

logger = setup_logger(__name__)

LOSS_KEYS = ("l_cross", "l_embed", "l_distill", "total")


class TrainingLog:
    """Per-step loss records, optionally mirrored to a JSON-lines file."""

    def __init__(self, path: Path | None = None) -> None:
        """Initialize log.

        Args:
            path: JSON-lines destination; truncated on open. None keeps records
                in memory only.
        """
        self.records: list[dict[str, Any]] = []
        self.path = Path(path) if path else None
        self._stream: TextIO | None = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._stream = self.path.open("w", encoding="utf-8")

    def write(self, record: dict[str, Any]) -> None:
        self.records.append(record)
        if self._stream is not None:
            self._stream.write(json.dumps(record, sort_keys=True) + "\n")
            self._stream.flush()

    def log_step(self, step: int, round_index: int, losses: Mapping[str, float]) -> None:
        self.write({"step": step, "round": round_index, **losses})

    def log_event(self, event: str, **details: Any) -> None:
        self.write({"event": event, **details})

    def steps(self) -> list[dict[str, Any]]:
        return [r for r in self.records if "step" in r]

    def series(self, key: str) -> list[float]:
        """One loss component over all logged steps."""
        return [float(r[key]) for r in self.steps()]

    def close(self) -> None:
        if self._stream is not None:
            self._stream.close()
            self._stream = None

    def __enter__(self) -> TrainingLog:
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()


@dataclass
class TrainingResult:
    """Outcome of :func:`alternating_train`."""

    params: ModelParams
    tree: TreeIndex
    log: TrainingLog
    rebuilds: int = 0
    final_losses: dict[str, float] = field(default_factory=dict)


@dataclass
class _Pair:
    query: QueryFeatures
    video_id: int
    relevant: frozenset[int]


def _training_pairs(corpus: Corpus) -> dict[int, list[_Pair]]:
    """Ground-truth pairs grouped by the relevance set they belong to."""
    groups: dict[frozenset[int], list[_Pair]] = {}
    for record in corpus.queries:
        groups.setdefault(record.relevant, []).append(_to_pair(record))
    ordered = sorted(groups.values(), key=lambda pairs: sorted(pairs[0].relevant))
    return dict(enumerate(ordered))


def _to_pair(record: QueryRecord) -> _Pair:
    return _Pair(record.features(), record.source_video, record.relevant)


def _sample_batch(
    groups: dict[int, list[_Pair]], batch_size: int, rng: np.random.Generator
) -> list[_Pair]:
    chosen = rng.choice(len(groups), size=batch_size, replace=False)
    return [groups[int(g)][int(rng.integers(len(groups[int(g)])))] for g in chosen]


def rebuild_tree(
    videos: Mapping[int, VideoFeatures],
    params: ModelParams,
    categories: Mapping[int, int] | None,
    seed: int,
    medoid_iterations: int,
) -> TreeIndex:
    """Build a tree from the current video embeddings."""
    return build_tree(
        video_embeddings(list(videos.values()), params),
        init_labels=categories,
        seed=seed,
        medoid_iterations=medoid_iterations,
        model_checksum=params.checksum(),
    )


def _tree_negatives(
    pair: _Pair,
    tree: TreeIndex,
    config: RunConfig,
    rng: np.random.Generator,
) -> list[int]:
    """Medoid video ids of sampled negative nodes, irrelevant ones only."""
    draws = sample_negatives(tree, tree.leaf_of(pair.video_id), config.negatives, rng)
    medoids: list[int] = []
    for level in sorted(draws):
        for node_id in draws[level]:
            medoid = tree.nodes[node_id].medoid
            if medoid not in pair.relevant and medoid not in medoids:
                medoids.append(medoid)
    return medoids[: config.train.tree_negative_cap]


def _step_loss(
    batch: list[_Pair],
    videos: Mapping[int, VideoFeatures],
    params: ModelParams,
    tree: TreeIndex,
    config: RunConfig,
    rng: np.random.Generator,
) -> tuple[Tensor, dict[str, float]]:
    """Joint objective of one minibatch; must run under an active tape."""
    loss_cfg = config.loss
    batch_videos = [videos[pair.video_id] for pair in batch]
    zero = Tensor(0.0)

    cross_rows = [
        [forward_cross_path(pair.query, video, params) for pair in batch]
        for video in batch_videos
    ]
    cross = ScoreMatrix.from_scores(cross_rows)
    l_cross = triplet_loss(cross, loss_cfg.margin)
    if config.train.tree_negative_cap > 0:
        for k, pair in enumerate(batch):
            negatives = [
                forward_cross_path(pair.query, videos[medoid], params)
                for medoid in _tree_negatives(pair, tree, config, rng)
            ]
            l_cross = ad.add(
                l_cross, node_triplet_loss(cross_rows[k][k], negatives, loss_cfg.margin)
            )

    l_embed = zero
    if loss_cfg.dual_weight > 0:
        query_embeddings = [forward_embed_path(pair.query, params) for pair in batch]
        video_embs = [forward_embed_path(video, params) for video in batch_videos]
        l_embed = triplet_loss(
            embedding_score_matrix(video_embs, query_embeddings), loss_cfg.margin
        )

    l_distill = zero
    if loss_cfg.distill_weight > 0:
        student = ScoreMatrix.from_scores(
            [[forward_student(pair.query, video, params) for pair in batch] for video in batch_videos]
        )
        flat = (len(batch) * len(batch),)
        l_distill = distill_loss(
            triplet_loss(student, loss_cfg.margin),
            ad.reshape(cross.values, flat),
            ad.reshape(student.values, flat),
            loss_cfg.distill_mse_weight,
        )

    total = total_loss(
        dual_loss(l_cross, l_embed, loss_cfg.dual_weight),
        l_distill,
        loss_cfg.distill_weight,
    )
    values = dict(
        zip(LOSS_KEYS, (t.item() for t in (l_cross, l_embed, l_distill, total)), strict=True)
    )
    return total, values


def alternating_train(
    corpus: Corpus,
    config: RunConfig,
    params: ModelParams | None = None,
    log: TrainingLog | None = None,
) -> TrainingResult:
    """Train the dual-path model and its student while periodically rebuilding the tree.

    The initial tree comes from untrained embeddings. Every
    ``epochs_per_rebuild`` epochs (at most ``rebuild_count`` times) the tree
    is rebuilt from fresh embeddings; the returned tree always reflects the
    returned parameters.

    Args:
        corpus: Training split; every query must name its source video.
        config: Resolved run configuration.
        params: Starting parameters; freshly initialised from ``config.model``
            when omitted.
        log: Destination for per-step records.

    Raises:
        InputError: Fewer than two relevance groups.
        TrainingDivergedError: A loss became NaN or infinite.
    """
    train_cfg = config.train
    params = params if params is not None else ModelParams.initialize(config.model)
    log = log if log is not None else TrainingLog()
    videos = corpus.video_features()
    categories = corpus.categories() or None
    groups = _training_pairs(corpus)
    batch_size = min(train_cfg.batch_size, len(groups))
    if batch_size < 2:
        raise InputError(
            f"training needs queries from at least 2 relevance groups, got {len(groups)}"
        )

    def build(round_index: int) -> TreeIndex:
        tree = rebuild_tree(
            videos, params, categories, train_cfg.seed, train_cfg.medoid_iterations
        )
        log.log_event("tree_rebuilt", round=round_index, depth=tree.depth)
        logger.info(f"Round {round_index}: tree rebuilt, depth {tree.depth}")
        return tree

    tree = build(0)
    if train_cfg.steps == 0:
        return TrainingResult(params, tree, log)

    rng = np.random.default_rng(train_cfg.seed)
    optimizer = build_optimizer(
        train_cfg.optimizer,
        params.parameters(),
        train_cfg.learning_rate,
        train_cfg.momentum,
    )
    pair_count = sum(len(pairs) for pairs in groups.values())
    rebuild_every = train_cfg.epochs_per_rebuild * math.ceil(pair_count / batch_size)
    rebuilds = 0
    values: dict[str, float] = {}
    tape = Tape()
    logger.info(
        f"Training {train_cfg.steps} steps, batch {batch_size}, "
        f"tree rebuild every {rebuild_every} steps"
    )

    for step in range(1, train_cfg.steps + 1):
        batch = _sample_batch(groups, batch_size, rng)
        tape.reset()
        try:
            with tape:
                loss, values = _step_loss(batch, videos, params, tree, config, rng)
        except NumericDomainError as exc:
            raise TrainingDivergedError(
                f"non-finite activations at step {step}, round {rebuilds}: {exc}"
            ) from exc
        if not all(math.isfinite(v) for v in values.values()):
            raise TrainingDivergedError(
                f"loss diverged at step {step}, round {rebuilds}: {values}"
            )
        grads = ad.backward(tape, loss, params.parameters())
        clip_grad_norm(grads, train_cfg.grad_clip)
        optimizer.step(grads)
        log.log_step(step, rebuilds, values)
        logger.debug(f"step {step}: {values}")

        if step % rebuild_every == 0 and step < train_cfg.steps and rebuilds < train_cfg.rebuild_count:
            rebuilds += 1
            tree = build(rebuilds)

    tree = build(rebuilds + 1)
    logger.info(f"Training finished: total loss {values['total']:.4f}")
    return TrainingResult(params, tree, log, rebuilds, values)
