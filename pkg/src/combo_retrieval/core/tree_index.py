"""Hierarchical 2-medoid tree over video embeddings and beam retrieval on it."""

from __future__ import annotations

import math
import struct
import warnings
from collections import Counter, deque
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import numpy.typing as npt
from scipy.linalg import svd
from scipy.spatial.distance import cdist

from ..utils import binary_io
from ..utils.config import NegativeSamplingConfig
from ..utils.errors import (
    DimensionError,
    FormatError,
    InputError,
    StaleIndexError,
    StaleIndexWarning,
)
from ..utils.logger import setup_logger
from .autodiff import Tensor
from .model import (
    ModelParams,
    QueryFeatures,
    VideoFeatures,
    forward_cross_path,
    forward_embed_path,
    forward_student,
)
from .scoring import embed_similarity

logger = setup_logger(__name__)

INDEX_MAGIC = b"TIDX"
INDEX_VERSION = 1
NO_CHILD = 0xFFFFFFFF
IMBALANCE_CAP = 0.9

_HEADER = struct.Struct("<5IQ32s32s")
_NODE = struct.Struct("<5I")

Scorer = Callable[[int], float]


@dataclass(frozen=True, eq=False)
class TreeNode:
    """One node; leaves hold exactly one video."""

    node_id: int
    depth: int
    children: tuple[int, ...]
    medoid: int
    embedding: npt.NDArray[np.float32]
    members: frozenset[int]

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass(eq=False)
class TreeIndex:
    """Immutable binary tree; node ids are assigned breadth-first from the root (0).

    Attributes:
        nodes: Node table indexed by node id.
        seed: Seed used for medoid seeding.
        medoid_iterations: Iteration cap of each 2-medoid split.
        embedding_checksum: SHA-256 of the embeddings the tree was built from.
        model_checksum: SHA-256 of the parameters that produced those embeddings.
    """

    nodes: list[TreeNode]
    seed: int = 0
    medoid_iterations: int = 20
    embedding_checksum: bytes = bytes(32)
    model_checksum: bytes = bytes(32)
    _parents: dict[int, int] = field(init=False, repr=False)
    _leaves: dict[int, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        """Index parents and leaves."""
        if not self.nodes:
            raise InputError("tree needs at least one node")
        self._parents = {}
        self._leaves = {}
        for node in self.nodes:
            for child in node.children:
                self._parents[child] = node.node_id
            if node.is_leaf:
                self._leaves[node.medoid] = node.node_id

    @property
    def root_id(self) -> int:
        return 0

    @property
    def root(self) -> TreeNode:
        return self.nodes[0]

    @property
    def depth(self) -> int:
        return max(node.depth for node in self.nodes)

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    @property
    def video_count(self) -> int:
        return len(self._leaves)

    @property
    def dim(self) -> int:
        return int(self.nodes[0].embedding.shape[0])

    def children(self, node_id: int) -> tuple[int, ...]:
        return self.nodes[node_id].children

    def leaf_video(self, node_id: int) -> int | None:
        node = self.nodes[node_id]
        return node.medoid if node.is_leaf else None

    def leaf_of(self, video_id: int) -> int:
        """Leaf node id holding ``video_id``."""
        try:
            return self._leaves[video_id]
        except KeyError as exc:
            raise InputError(f"video {video_id} is not indexed") from exc

    def path_to(self, node_id: int) -> list[int]:
        """Node ids from the root down to ``node_id``."""
        if not 0 <= node_id < len(self.nodes):
            raise InputError(f"unknown node {node_id}")
        path = [node_id]
        while path[-1] in self._parents:
            path.append(self._parents[path[-1]])
        return path[::-1]

    def levels(self) -> list[list[int]]:
        """Node ids grouped by depth, ascending within each level."""
        grouped: list[list[int]] = [[] for _ in range(self.depth + 1)]
        for node in self.nodes:
            grouped[node.depth].append(node.node_id)
        return grouped

    def structure(self) -> list[tuple[object, ...]]:
        """Comparable description of every node, embeddings included."""
        return [
            (
                n.node_id,
                n.depth,
                n.children,
                n.medoid,
                n.members,
                n.embedding.tobytes(),
            )
            for n in self.nodes
        ]


class TraversableTree(Protocol):
    """What :func:`beam_retrieve` needs from a tree."""

    @property
    def root_id(self) -> int: ...

    @property
    def video_count(self) -> int: ...

    def children(self, node_id: int) -> tuple[int, ...]: ...

    def leaf_video(self, node_id: int) -> int | None: ...


# ---------------------------------------------------------------------------
# Building
# ---------------------------------------------------------------------------


def _cosine_distances(points: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    # Zero vectors have no direction; treat them as orthogonal to everything.
    with np.errstate(invalid="ignore", divide="ignore"):
        distances = cdist(points, points, metric="cosine")
    distances = np.nan_to_num(distances, nan=1.0)
    np.fill_diagonal(distances, 0.0)
    return distances


def _medoid(distances: npt.NDArray[np.float64]) -> int:
    """Local index minimising total distance; ties go to the smaller index."""
    return int(np.argmin(distances.sum(axis=1)))


def _principal_split(points: npt.NDArray[np.float64]) -> npt.NDArray[np.bool_]:
    """Balanced split at the median of the top principal direction."""
    centered = points - points.mean(axis=0, keepdims=True)
    if np.allclose(centered, 0.0):
        projection = np.zeros(len(points))
    else:
        _, _, vt = svd(centered, full_matrices=False)
        projection = centered @ vt[0]
    order = np.argsort(projection, kind="stable")
    left = np.zeros(len(points), dtype=bool)
    left[order[: len(points) // 2]] = True
    return left


def _seed_medoids(
    distances: npt.NDArray[np.float64],
    labels: list[object] | None,
    rng: np.random.Generator,
) -> tuple[int, int] | None:
    count = len(distances)
    if labels is not None:
        sizes: dict[object, int] = {}
        for label in labels:
            sizes[label] = sizes.get(label, 0) + 1
        if len(sizes) >= 2:
            largest = sorted(sizes, key=lambda lab: (-sizes[lab], str(lab)))[:2]
            seeds = []
            for label in largest:
                group = np.array([i for i in range(count) if labels[i] == label])
                seeds.append(int(group[_medoid(distances[np.ix_(group, group)])]))
            return seeds[0], seeds[1]

    first = int(rng.integers(count))
    weights = distances[first] ** 2
    total = weights.sum()
    if total <= 0:
        return None
    second = int(rng.choice(count, p=weights / total))
    return first, second


def _two_medoid_split(
    distances: npt.NDArray[np.float64],
    labels: list[object] | None,
    rng: np.random.Generator,
    iterations: int,
) -> npt.NDArray[np.bool_] | None:
    """Boolean mask of the first side, or None when the split degenerates."""
    seeds = _seed_medoids(distances, labels, rng)
    if seeds is None:
        return None
    first, second = seeds
    side = distances[:, first] <= distances[:, second]
    for _ in range(max(iterations, 1)):
        if side.all() or not side.any():
            return None
        left, right = np.flatnonzero(side), np.flatnonzero(~side)
        first = int(left[_medoid(distances[np.ix_(left, left)])])
        second = int(right[_medoid(distances[np.ix_(right, right)])])
        updated = distances[:, first] <= distances[:, second]
        if np.array_equal(updated, side):
            break
        side = updated
    return side


def build_tree(
    embeddings: Mapping[int, npt.ArrayLike] | Iterable[tuple[int, npt.ArrayLike]],
    init_labels: Mapping[int, object] | None = None,
    seed: int = 0,
    medoid_iterations: int = 20,
    model_checksum: bytes = bytes(32),
) -> TreeIndex:
    """Top-down hierarchical 2-medoid clustering under cosine distance.

    Each node's members are split in two until singletons remain. Seeds come
    from the two largest ``init_labels`` categories in the node when given,
    otherwise from k-means++ style sampling. A split leaving more than 90% of
    the members on one side falls back to a balanced median split along the
    top principal direction.

    Args:
        embeddings: Video id to embedding vector.
        init_labels: Optional video id to category.
        seed: Seed for medoid seeding.
        medoid_iterations: Iteration cap per split.
        model_checksum: Checksum of the parameters that produced the embeddings.

    Raises:
        InputError: No videos, or duplicate ids.
        DimensionError: Embeddings differ in dimension.
    """
    pairs = list(embeddings.items() if isinstance(embeddings, Mapping) else embeddings)
    if not pairs:
        raise InputError("cannot build a tree over zero videos")
    ids = [int(video_id) for video_id, _ in pairs]
    if len(set(ids)) != len(ids):
        raise InputError("duplicate video ids in tree input")
    vectors = [np.asarray(vector, dtype=np.float64).reshape(-1) for _, vector in pairs]
    dim = vectors[0].shape[0]
    for vector in vectors:
        if vector.shape[0] != dim:
            raise DimensionError("build_tree", (dim,), vector.shape)

    order = np.argsort(ids, kind="stable")
    video_ids = np.array(ids)[order]
    points = np.stack([vectors[i] for i in order])
    rng = np.random.default_rng(seed)

    nodes: dict[int, TreeNode] = {}
    queue: deque[tuple[int, int, npt.NDArray[np.int64]]] = deque([(0, 0, np.arange(len(ids)))])
    next_id = 1
    while queue:
        node_id, depth, members = queue.popleft()
        distances = _cosine_distances(points[members])
        medoid = int(members[_medoid(distances)])
        children: tuple[int, ...] = ()
        if len(members) > 1:
            labels = (
                [init_labels.get(int(video_ids[m])) for m in members]
                if init_labels is not None
                else None
            )
            side = _two_medoid_split(distances, labels, rng, medoid_iterations)
            if side is None or max(side.sum(), (~side).sum()) > IMBALANCE_CAP * len(members):
                side = _principal_split(points[members])
            halves = sorted([members[side], members[~side]], key=lambda h: int(h.min()))
            children = (next_id, next_id + 1)
            for child_id, half in zip(children, halves, strict=True):
                queue.append((child_id, depth + 1, half))
            next_id += 2
        nodes[node_id] = TreeNode(
            node_id=node_id,
            depth=depth,
            children=children,
            medoid=int(video_ids[medoid]),
            embedding=points[medoid].astype(np.float32),
            members=frozenset(int(video_ids[m]) for m in members),
        )

    tree = TreeIndex(
        nodes=[nodes[i] for i in range(len(nodes))],
        seed=seed,
        medoid_iterations=medoid_iterations,
        embedding_checksum=binary_io.checksum(points),
        model_checksum=model_checksum,
    )
    logger.debug(f"Built tree: {tree.video_count} leaves, depth {tree.depth}")
    return tree


# ---------------------------------------------------------------------------
# Retrieval
# ---------------------------------------------------------------------------


@dataclass
class RetrievalResult:
    """Ranked videos from one retrieval."""

    video_ids: list[int]
    scores: list[float]
    visited: int
    truncated: bool = False
    leaf_scores: dict[int, float] = field(default_factory=dict)

    def ranking(self) -> list[tuple[int, float]]:
        return list(zip(self.video_ids, self.scores, strict=True))


def beam_retrieve(
    tree: TraversableTree, beam: int, scorer: Scorer, top_k: int | None = None
) -> RetrievalResult:
    """Level-by-level beam descent from the root.

    Every candidate at a level is scored once; the ``beam`` best (ties by
    ascending node id) are kept. Kept leaves join the result pool, kept
    internal nodes contribute their children as the next level's candidates.

    Args:
        tree: Tree to search.
        beam: Nodes kept per level.
        scorer: Node id to score, bound to one query.
        top_k: Results returned; defaults to ``beam``.

    Returns:
        Top leaves by descending score (ties by ascending video id); ``visited``
        is the number of scorer calls and never exceeds ``1 + 2 * beam * depth``.
    """
    if beam < 1:
        raise InputError(f"beam must be >= 1, got {beam}")
    wanted = beam if top_k is None else top_k
    if wanted < 1:
        raise InputError(f"top_k must be >= 1, got {wanted}")

    visited = 0
    pool: dict[int, float] = {}
    candidates = [tree.root_id]
    while candidates:
        scored = []
        for node_id in candidates:
            scored.append((-float(scorer(node_id)), node_id))
            visited += 1
        scored.sort()
        candidates = []
        for negative_score, node_id in scored[:beam]:
            video_id = tree.leaf_video(node_id)
            if video_id is None:
                candidates.extend(tree.children(node_id))
            else:
                pool[video_id] = -negative_score

    ranked = sorted(pool.items(), key=lambda item: (-item[1], item[0]))[:wanted]
    return RetrievalResult(
        video_ids=[video_id for video_id, _ in ranked],
        scores=[score for _, score in ranked],
        visited=visited,
        truncated=wanted > tree.video_count,
        leaf_scores=pool,
    )


def count_visited(result: RetrievalResult) -> int:
    """Scorer calls made by the retrieval, root included."""
    return result.visited


def make_cross_scorer(
    query: QueryFeatures,
    tree: TreeIndex,
    videos: Mapping[int, VideoFeatures],
    params: ModelParams,
    use_student: bool = False,
) -> Scorer:
    """Score a node by the cross similarity of the query and its medoid video."""
    forward = forward_student if use_student else forward_cross_path
    cache: dict[int, float] = {}

    def score(node_id: int) -> float:
        medoid = tree.nodes[node_id].medoid
        if medoid not in cache:
            cache[medoid] = forward(query, videos[medoid], params).item()
        return cache[medoid]

    return score


def make_embed_scorer(
    query: QueryFeatures, tree: TreeIndex, params: ModelParams
) -> Scorer:
    """Score a node by the cosine of the query embedding and the node embedding."""
    query_embedding = forward_embed_path(query, params).detach()

    def score(node_id: int) -> float:
        node = Tensor(tree.nodes[node_id].embedding)
        return embed_similarity(query_embedding, node).item()

    return score


def exhaustive_retrieve(
    query: QueryFeatures,
    videos: Mapping[int, VideoFeatures],
    params: ModelParams,
    top_k: int,
    use_student: bool = False,
) -> RetrievalResult:
    """Score every video and rank by descending score, ties by ascending id."""
    forward = forward_student if use_student else forward_cross_path
    scores = {
        video_id: forward(query, video, params).item()
        for video_id, video in sorted(videos.items())
    }
    ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))[:top_k]
    return RetrievalResult(
        video_ids=[video_id for video_id, _ in ranked],
        scores=[score for _, score in ranked],
        visited=len(scores),
        truncated=top_k > len(scores),
        leaf_scores=scores,
    )


def recall_at_k(result: RetrievalResult, reference: RetrievalResult, k: int) -> float:
    """Share of the reference top-``k`` that the result's top-``k`` recovers."""
    expected = set(reference.video_ids[:k])
    if not expected:
        raise InputError("reference ranking is empty")
    return len(expected & set(result.video_ids[:k])) / len(expected)


# ---------------------------------------------------------------------------
# Negative sampling
# ---------------------------------------------------------------------------


def negative_count(level: int, config: NegativeSamplingConfig) -> int:
    """Requested negatives at ``level`` before the population cap."""
    if level <= 0:
        return 0
    if config.strategy == "uniform":
        return config.base_count
    if config.strategy == "arithmetic":
        return level
    value = float(level) ** config.alpha
    nearest = round(value)
    if abs(value - nearest) <= 1e-12 * max(1.0, value):
        return int(nearest)
    return math.ceil(value)


def sample_negatives(
    tree: TreeIndex,
    positive_leaf: int,
    config: NegativeSamplingConfig,
    seed: int | np.random.Generator = 0,
) -> dict[int, list[int]]:
    """Per-level negative nodes along the root-to-positive path.

    At each level the strategy's count is drawn uniformly without replacement
    from that level's nodes, excluding the path node and capped at the level
    population minus one. The root level is always empty.

    Returns:
        Level to ascending node ids.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    levels = tree.levels()
    draws: dict[int, list[int]] = {}
    for level, path_node in enumerate(tree.path_to(positive_leaf)):
        others = [n for n in levels[level] if n != path_node]
        count = min(negative_count(level, config), len(others))
        if count <= 0:
            draws[level] = []
            continue
        picked = rng.choice(len(others), size=count, replace=False)
        draws[level] = sorted(others[i] for i in picked)
    return draws


# ---------------------------------------------------------------------------
# Index files
# ---------------------------------------------------------------------------


def save_index(tree: TreeIndex, path: Path) -> None:
    """Write the node table with its build metadata.

    Args:
        tree: Tree to write.
        path: Destination file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        binary_io.write_preamble(f, INDEX_MAGIC, INDEX_VERSION)
        f.write(
            _HEADER.pack(
                tree.video_count,
                tree.depth,
                tree.node_count,
                tree.dim,
                tree.medoid_iterations,
                tree.seed,
                tree.embedding_checksum,
                tree.model_checksum,
            )
        )
        for node in tree.nodes:
            left, right = node.children if node.children else (NO_CHILD, NO_CHILD)
            f.write(_NODE.pack(node.node_id, node.depth, left, right, node.medoid))
            binary_io.write_floats(f, node.embedding)
    logger.info(f"Saved index with {tree.node_count} nodes to {path}")


def load_index(path: Path) -> TreeIndex:
    """Read an index written by :func:`save_index`.

    Member sets are rebuilt from the leaves.

    Raises:
        FormatError: Bad magic/version or an inconsistent node table.
        TruncatedFileError: File ends early.
    """
    path = Path(path)
    what = f"index {path.name}"
    with path.open("rb") as f:
        binary_io.read_preamble(f, INDEX_MAGIC, INDEX_VERSION, what)
        (
            video_count,
            depth,
            node_count,
            dim,
            iterations,
            seed,
            embedding_checksum,
            model_checksum,
        ) = binary_io.read_struct(f, _HEADER, what)
        if node_count < 1 or dim < 1:
            raise FormatError(f"{what}: empty node table")
        records = []
        for expected_id in range(node_count):
            node_id, node_depth, left, right, medoid = binary_io.read_struct(f, _NODE, what)
            if node_id != expected_id:
                raise FormatError(f"{what}: node {expected_id} stored as {node_id}")
            if (left == NO_CHILD) != (right == NO_CHILD):
                raise FormatError(f"{what}: node {node_id} has exactly one child")
            children = () if left == NO_CHILD else (left, right)
            if any(not node_id < c < node_count for c in children):
                raise FormatError(f"{what}: node {node_id} has invalid children")
            embedding = binary_io.read_floats(f, dim, what)
            records.append((node_depth, children, medoid, embedding))
        binary_io.expect_eof(f, what)

    if records[0][0] != 0:
        raise FormatError(f"{what}: root stored at depth {records[0][0]}")
    parents = Counter(c for _, children, _, _ in records for c in children)
    if any(parents[node_id] != 1 for node_id in range(1, node_count)):
        raise FormatError(f"{what}: every non-root node needs exactly one parent")
    for node_id, (node_depth, children, _, _) in enumerate(records):
        for child in children:
            if records[child][0] != node_depth + 1:
                raise FormatError(
                    f"{what}: child {child} at depth {records[child][0]} "
                    f"under node {node_id} at depth {node_depth}"
                )
    leaf_medoids = [medoid for _, children, medoid, _ in records if not children]
    if len(set(leaf_medoids)) != len(leaf_medoids):
        raise FormatError(f"{what}: a video appears in more than one leaf")

    members: list[frozenset[int]] = [frozenset()] * node_count
    for node_id in reversed(range(node_count)):
        _, children, medoid, _ = records[node_id]
        members[node_id] = (
            frozenset({medoid}) if not children else members[children[0]] | members[children[1]]
        )
        if medoid not in members[node_id]:
            raise FormatError(f"{what}: medoid {medoid} of node {node_id} is not a member")
    nodes = [
        TreeNode(node_id, node_depth, children, medoid, embedding, members[node_id])
        for node_id, (node_depth, children, medoid, embedding) in enumerate(records)
    ]
    tree = TreeIndex(
        nodes=nodes,
        seed=seed,
        medoid_iterations=iterations,
        embedding_checksum=embedding_checksum,
        model_checksum=model_checksum,
    )
    if tree.video_count != video_count or tree.depth != depth:
        raise FormatError(
            f"{what}: header declares {video_count} videos at depth {depth}, "
            f"table holds {tree.video_count} at depth {tree.depth}"
        )
    logger.info(f"Loaded index with {node_count} nodes from {path}")
    return tree


def check_index_freshness(tree: TreeIndex, params: ModelParams, strict: bool = False) -> bool:
    """Compare the index's model checksum with the given parameters.

    Returns:
        True when the index was built from these parameters.

    Raises:
        StaleIndexError: Mismatch and ``strict``; otherwise a
            :class:`StaleIndexWarning` is emitted.
    """
    if tree.model_checksum == params.checksum():
        return True
    message = "index was built from different model weights; rebuild it"
    if strict:
        raise StaleIndexError(message)
    warnings.warn(message, StaleIndexWarning, stacklevel=2)
    logger.warning(message)
    return False
