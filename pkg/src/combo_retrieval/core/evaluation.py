"""Ranking metrics, the evaluation report and baseline ranking pipelines."""

from __future__ import annotations

import json
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import numpy.typing as npt
from scipy.stats import spearmanr
from sklearn.metrics import auc, precision_recall_curve

from ..utils.config import RunConfig
from ..utils.errors import InputError
from ..utils.logger import setup_logger
from .corpus import Corpus, QueryRecord
from .model import ModelParams, QueryFeatures, VideoFeatures, forward_cross_path
from .tree_index import (
    RetrievalResult,
    TreeIndex,
    beam_retrieve,
    make_cross_scorer,
    make_embed_scorer,
)

logger = setup_logger(__name__)

MAP_CUTOFFS = (1, 3, 5)
DEFAULT_POOL_SIZES = (32, 64, 128, 256, 512)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def average_precision_at_k(
    ranking: Sequence[int], relevant: Iterable[int], k: int
) -> float:
    """AP@K: summed precision at each hit, divided by ``min(K, #relevant)``.

    Raises:
        InputError: No relevant items or ``k < 1``.
    """
    relevant_set = set(relevant)
    if not relevant_set:
        raise InputError("average precision needs at least one relevant item")
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    hits = 0
    total = 0.0
    for rank, item in enumerate(ranking[:k], start=1):
        if item in relevant_set:
            hits += 1
            total += hits / rank
    return total / min(k, len(relevant_set))


def evaluable_queries(relevance: Mapping[int, Iterable[int]]) -> list[int]:
    """Query ids that have at least one relevant item, ascending."""
    return sorted(q for q, items in relevance.items() if set(items))


def evaluate_map(
    rankings: Mapping[int, Sequence[int]],
    relevance: Mapping[int, Iterable[int]],
    k: int,
) -> float:
    """Mean AP@K over queries with at least one relevant item.

    Queries absent from ``rankings`` count as empty rankings.

    Raises:
        InputError: No query has a relevant item.
    """
    queries = evaluable_queries(relevance)
    if not queries:
        raise InputError("no query has a relevant item")
    return float(
        np.mean(
            [average_precision_at_k(rankings.get(q, []), relevance[q], k) for q in queries]
        )
    )


def evaluate_pr_auc(scores: npt.ArrayLike, labels: npt.ArrayLike) -> float:
    """Area under the precision-recall curve (descending-score sweep, trapezoids).

    Tied scores form a single operating point.

    Raises:
        InputError: Lengths differ or labels are all one class.
    """
    score_array = np.asarray(scores, dtype=np.float64).reshape(-1)
    label_array = np.asarray(labels).astype(bool).reshape(-1)
    if score_array.shape != label_array.shape:
        raise InputError(
            f"scores ({score_array.size}) and labels ({label_array.size}) differ in length"
        )
    if label_array.all() or not label_array.any():
        raise InputError("PR-AUC needs at least one positive and one negative")
    precision, recall, _ = precision_recall_curve(label_array, score_array)
    return float(auc(recall, precision))


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    """Retrieval quality over one query set."""

    map_at_1: float
    map_at_3: float
    map_at_5: float
    pr_auc: float | None
    mean_visited: float
    query_count: int
    excluded: int
    fingerprint: str = ""
    scorer: str = "cross"
    beam: int = 0

    def to_dict(self) -> dict[str, object]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n", encoding="utf-8")


def build_report(
    rankings: Mapping[int, Sequence[int]],
    relevance: Mapping[int, Iterable[int]],
    visited: Mapping[int, int] | None = None,
    scored: Mapping[int, Mapping[int, float]] | None = None,
    fingerprint: str = "",
    scorer: str = "cross",
    beam: int = 0,
) -> EvalReport:
    """Assemble an :class:`EvalReport` from rankings and optional traversal data.

    Args:
        rankings: Query id to ranked video ids.
        relevance: Query id to relevant video ids.
        visited: Query id to scorer calls.
        scored: Query id to every leaf scored during retrieval; the PR-AUC
            positives are the relevant leaves among them.
        fingerprint: Configuration fingerprint.
        scorer: Scorer name recorded in the report.
        beam: Beam width recorded in the report.
    """
    queries = evaluable_queries(relevance)
    excluded = len(relevance) - len(queries)
    if excluded:
        logger.warning(f"{excluded} queries without relevant items excluded")

    pr_auc = None
    if scored:
        scores, labels = [], []
        for q in queries:
            relevant = set(relevance[q])
            for video_id, score in scored.get(q, {}).items():
                scores.append(score)
                labels.append(video_id in relevant)
        try:
            pr_auc = evaluate_pr_auc(scores, labels)
        except InputError as exc:
            logger.warning(f"PR-AUC skipped: {exc}")

    visits = [visited[q] for q in queries if visited and q in visited]
    return EvalReport(
        map_at_1=evaluate_map(rankings, relevance, 1),
        map_at_3=evaluate_map(rankings, relevance, 3),
        map_at_5=evaluate_map(rankings, relevance, 5),
        pr_auc=pr_auc,
        mean_visited=float(np.mean(visits)) if visits else 0.0,
        query_count=len(queries),
        excluded=excluded,
        fingerprint=fingerprint,
        scorer=scorer,
        beam=beam,
    )


def retrieve_query(
    query: QueryFeatures,
    tree: TreeIndex,
    videos: Mapping[int, VideoFeatures],
    params: ModelParams,
    config: RunConfig,
) -> RetrievalResult:
    """Beam retrieval for one query with the configured scorer."""
    if config.scorer == "embed":
        scorer = make_embed_scorer(query, tree, params)
    else:
        scorer = make_cross_scorer(
            query, tree, videos, params, use_student=config.scorer == "student"
        )
    top_k = max(config.top_k, max(MAP_CUTOFFS))
    result = beam_retrieve(tree, config.beam, scorer, top_k=top_k)
    if result.truncated:
        logger.debug(f"query {query.query_id}: only {tree.video_count} videos indexed")
    return result


def evaluate_retrieval(
    corpus: Corpus, params: ModelParams, tree: TreeIndex, config: RunConfig
) -> tuple[EvalReport, dict[int, RetrievalResult]]:
    """Retrieve every query of ``corpus`` through the tree and score the rankings.

    Queries are spread over ``config.workers`` threads sharing a read-only
    parameter snapshot.
    """
    snapshot = params.snapshot()
    videos = corpus.video_features()
    queries: list[QueryRecord] = corpus.queries

    def run(record: QueryRecord) -> RetrievalResult:
        return retrieve_query(record.features(), tree, videos, snapshot, config)

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        results = dict(
            zip((q.query_id for q in queries), pool.map(run, queries), strict=True)
        )
    report = build_report(
        rankings={q: r.video_ids for q, r in results.items()},
        relevance=corpus.relevance(),
        visited={q: r.visited for q, r in results.items()},
        scored={q: r.leaf_scores for q, r in results.items()},
        fingerprint=config.fingerprint(),
        scorer=config.scorer,
        beam=config.beam,
    )
    logger.info(
        f"Evaluated {report.query_count} queries: mAP@3 {report.map_at_3:.4f}, "
        f"mean visited {report.mean_visited:.1f}"
    )
    return report, results


# ---------------------------------------------------------------------------
# Baseline pipelines and diagnostics
# ---------------------------------------------------------------------------


def _mean_direction(tokens: npt.NDArray[np.float64]) -> npt.NDArray[np.float64] | None:
    if tokens.shape[1] == 0:
        return None
    mean = tokens.mean(axis=1)
    norm = np.linalg.norm(mean)
    return mean / norm if norm > 0 else None


def one_stage_rank(
    query: QueryFeatures, videos: Mapping[int, VideoFeatures], params: ModelParams
) -> list[int]:
    """Every video ranked by teacher cross similarity."""
    scores = {
        video_id: forward_cross_path(query, video, params).item()
        for video_id, video in videos.items()
    }
    return sorted(scores, key=lambda v: (-scores[v], v))


def two_stage_rank(
    query: QueryFeatures,
    videos: Mapping[int, VideoFeatures],
    params: ModelParams,
    prefilter: int = 20,
) -> list[int]:
    """Title search followed by cross-similarity rerank of the survivors.

    Stage one ranks videos by the cosine between mean query and mean title
    vectors (videos without titles rank last); only the top ``prefilter`` are
    reranked, the rest keep their title order behind them.
    """
    if prefilter < 1:
        raise InputError(f"prefilter must be >= 1, got {prefilter}")
    query_direction = _mean_direction(query.words)

    def title_score(video: VideoFeatures) -> float:
        title_direction = _mean_direction(video.title)
        if query_direction is None or title_direction is None:
            return -np.inf
        return float(query_direction @ title_direction)

    title_scores = {video_id: title_score(video) for video_id, video in videos.items()}
    by_title = sorted(title_scores, key=lambda v: (-title_scores[v], v))
    head, tail = by_title[:prefilter], by_title[prefilter:]
    reranked = one_stage_rank(query, {v: videos[v] for v in head}, params)
    return reranked + tail


def candidate_pool_map(
    corpus: Corpus,
    params: ModelParams,
    pool_sizes: Sequence[int] = DEFAULT_POOL_SIZES,
    prefilter: int = 20,
    k: int = 3,
    seed: int = 0,
) -> dict[int, dict[str, float]]:
    """mAP@K of one-stage and two-stage ranking over random candidate pools.

    Each query's pool holds its source video plus randomly drawn others; pool
    sizes above the corpus size are clipped.

    Returns:
        Pool size to ``{"one_stage": ..., "two_stage": ...}``.
    """
    rng = np.random.default_rng(seed)
    videos = corpus.video_features()
    ids = np.array(sorted(videos))
    queries = corpus.queries
    report: dict[int, dict[str, float]] = {}
    for size in sorted({min(s, len(ids)) for s in pool_sizes}):
        one_stage: dict[int, list[int]] = {}
        two_stage: dict[int, list[int]] = {}
        relevance: dict[int, frozenset[int]] = {}
        for record in queries:
            others = ids[ids != record.source_video]
            drawn = rng.choice(others, size=size - 1, replace=False)
            pool_ids = sorted({record.source_video, *(int(v) for v in drawn)})
            pool = {v: videos[v] for v in pool_ids}
            features = record.features()
            one_stage[record.query_id] = one_stage_rank(features, pool, params)
            two_stage[record.query_id] = two_stage_rank(features, pool, params, prefilter)
            relevance[record.query_id] = record.relevant & frozenset(pool_ids)
        report[size] = {
            "one_stage": evaluate_map(one_stage, relevance, k),
            "two_stage": evaluate_map(two_stage, relevance, k),
        }
        logger.info(f"pool {size}: {report[size]}")
    return report


def rank_agreement(teacher: npt.ArrayLike, student: npt.ArrayLike) -> float:
    """Spearman rank correlation between teacher and student scores.

    Raises:
        InputError: Fewer than two scores or mismatched lengths.
    """
    left = np.asarray(teacher, dtype=np.float64).reshape(-1)
    right = np.asarray(student, dtype=np.float64).reshape(-1)
    if left.shape != right.shape or left.size < 2:
        raise InputError("rank agreement needs two equal-length vectors of size >= 2")
    correlation = spearmanr(left, right).statistic
    return float(correlation)
