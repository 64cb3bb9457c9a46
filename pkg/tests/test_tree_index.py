"""Tests for the tree_index module."""

import itertools
import math
import struct
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from combo_retrieval.core.corpus import Corpus, generate_synthetic_corpus
from combo_retrieval.core.model import ModelParams, video_embeddings
from combo_retrieval.core.tree_index import (
    RetrievalResult,
    TreeIndex,
    beam_retrieve,
    build_tree,
    check_index_freshness,
    count_visited,
    exhaustive_retrieve,
    load_index,
    make_cross_scorer,
    make_embed_scorer,
    negative_count,
    recall_at_k,
    sample_negatives,
    save_index,
)
from combo_retrieval.utils.config import CorpusConfig, ModelConfig, NegativeSamplingConfig
from combo_retrieval.utils.errors import (
    DimensionError,
    FormatError,
    InputError,
    StaleIndexError,
    StaleIndexWarning,
    TruncatedFileError,
)


class HeapTree:
    """Implicit complete binary tree: children of ``i`` are ``2i+1`` and ``2i+2``."""

    def __init__(self, depth: int) -> None:
        self.depth = depth
        self.first_leaf = 2**depth - 1

    @property
    def root_id(self) -> int:
        return 0

    @property
    def video_count(self) -> int:
        return 2**self.depth

    def children(self, node_id: int) -> tuple[int, ...]:
        if node_id >= self.first_leaf:
            return ()
        return (2 * node_id + 1, 2 * node_id + 2)

    def leaf_video(self, node_id: int) -> int | None:
        return node_id - self.first_leaf if node_id >= self.first_leaf else None


def random_embeddings(count: int, dim: int = 6, seed: int = 0) -> dict[int, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {i: rng.normal(size=dim) for i in range(count)}


def corpus_tree(corpus: Corpus, params: ModelParams) -> TreeIndex:
    videos = list(corpus.video_features().values())
    return build_tree(
        video_embeddings(videos, params),
        init_labels=corpus.categories(),
        model_checksum=params.checksum(),
    )


def saved_with_node_field(
    tree: TreeIndex, tmp_path: Path, node_id: int, field: int, value: int
) -> Path:
    """Save ``tree`` then overwrite one ``<5I`` field (id, depth, left, right, medoid) of a node."""
    path = tmp_path / "index.tidx"
    save_index(tree, path)
    data = bytearray(path.read_bytes())
    header = 6 + struct.calcsize("<5IQ32s32s")
    record = struct.calcsize("<5I") + 4 * tree.dim
    offset = header + node_id * record + 4 * field
    data[offset : offset + 4] = struct.pack("<I", value)
    path.write_bytes(bytes(data))
    return path


class TestBuildTree:
    """Test build_tree."""

    def test_every_video_in_exactly_one_leaf(self) -> None:
        """Test leaves partition the input."""
        tree = build_tree(random_embeddings(13))
        leaves = [n for n in tree.nodes if n.is_leaf]
        assert sorted(n.medoid for n in leaves) == list(range(13))
        assert tree.video_count == 13
        assert tree.node_count == 2 * 13 - 1
        assert tree.root.members == frozenset(range(13))

    def test_node_invariants(self) -> None:
        """Binary splits, breadth-first ids, medoids drawn from members."""
        tree = build_tree(random_embeddings(20))
        for node in tree.nodes:
            assert node.medoid in node.members
            if node.is_leaf:
                assert node.members == frozenset({node.medoid})
                continue
            left, right = (tree.nodes[c] for c in node.children)
            assert len(node.children) == 2
            assert all(c > node.node_id for c in node.children)
            assert left.members | right.members == node.members
            assert not left.members & right.members
            assert min(left.members) < min(right.members)
            assert left.depth == right.depth == node.depth + 1
        depths = [n.depth for n in tree.nodes]
        assert depths == sorted(depths)

    def test_deterministic(self) -> None:
        """Same input and seed give identical trees."""
        embeddings = random_embeddings(17)
        assert build_tree(embeddings, seed=4).structure() == build_tree(embeddings, seed=4).structure()

    def test_input_order_irrelevant(self) -> None:
        """Mapping order does not matter."""
        embeddings = random_embeddings(9)
        shuffled = dict(reversed(list(embeddings.items())))
        assert build_tree(embeddings).structure() == build_tree(shuffled).structure()

    def test_single_video(self) -> None:
        """A single video is a one-node tree."""
        tree = build_tree({7: np.ones(3)})
        assert tree.node_count == 1
        assert tree.depth == 0
        assert tree.leaf_video(0) == 7

    def test_four_corners_match_best_split(self) -> None:
        """The root split is the cheapest of all 2-medoid partitions."""
        points = np.array(
            [[1.0, 0.0, 0.1], [1.0, 0.0, -0.1], [0.0, 1.0, 0.1], [0.0, 1.0, -0.1]]
        )
        distances = cdist(points, points, metric="cosine")

        def cost(group: frozenset[int]) -> float:
            return min(distances[m, sorted(group)].sum() for m in group)

        everyone = frozenset(range(4))
        splits = [
            frozenset(group)
            for size in (1, 2, 3)
            for group in itertools.combinations(range(4), size)
            if 0 in group
        ]
        best = min(splits, key=lambda group: cost(group) + cost(everyone - group))

        tree = build_tree(dict(enumerate(points)))
        left, right = (tree.nodes[c].members for c in tree.root.children)
        assert best == frozenset({0, 1})
        assert left == best
        assert right == frozenset({2, 3})
        assert tree.depth == 2

    def test_identical_embeddings_stay_balanced(self) -> None:
        """Degenerate input falls back to balanced median splits."""
        tree = build_tree({i: np.ones(4) for i in range(10)})
        assert tree.video_count == 10
        assert tree.depth == math.ceil(math.log2(10))

    def test_category_seeding_separates_groups(self) -> None:
        """Two well separated labelled groups split at the root."""
        rng = np.random.default_rng(2)
        embeddings = {}
        labels = {}
        for i in range(12):
            base = np.array([1.0, 0.0, 0.0]) if i % 2 else np.array([0.0, 1.0, 0.0])
            embeddings[i] = base + 0.01 * rng.normal(size=3)
            labels[i] = i % 2
        tree = build_tree(embeddings, init_labels=labels)
        left, right = (tree.nodes[c].members for c in tree.root.children)
        assert left == frozenset(range(0, 12, 2))
        assert right == frozenset(range(1, 12, 2))

    def test_imbalanced_split_falls_back(self) -> None:
        """An outlier split (19 vs 1) is replaced by a balanced one."""
        rng = np.random.default_rng(5)
        embeddings = {i: np.array([1.0, 0.0]) + 0.01 * rng.normal(size=2) for i in range(19)}
        embeddings[19] = np.array([0.0, 1.0])
        labels = {i: "bulk" for i in range(19)} | {19: "outlier"}
        tree = build_tree(embeddings, init_labels=labels)
        sizes = sorted(len(tree.nodes[c].members) for c in tree.root.children)
        assert sizes == [10, 10]

    def test_validation(self) -> None:
        """Test empty, duplicate and ragged input."""
        with pytest.raises(InputError):
            build_tree({})
        with pytest.raises(InputError):
            build_tree([(1, np.ones(2)), (1, np.zeros(2))])
        with pytest.raises(DimensionError):
            build_tree({0: np.ones(2), 1: np.ones(3)})


class TestTreeIndex:
    """Test TreeIndex navigation."""

    def test_leaf_of_and_path(self) -> None:
        """Test the root-to-leaf path."""
        tree = build_tree(random_embeddings(8))
        leaf = tree.leaf_of(5)
        path = tree.path_to(leaf)
        assert path[0] == 0
        assert path[-1] == leaf
        assert [tree.nodes[n].depth for n in path] == list(range(len(path)))
        assert all(5 in tree.nodes[n].members for n in path)

    def test_unknown_video(self) -> None:
        """Test lookups of ids that are not indexed."""
        tree = build_tree(random_embeddings(4))
        with pytest.raises(InputError):
            tree.leaf_of(99)
        with pytest.raises(InputError):
            tree.path_to(99)

    def test_levels(self) -> None:
        """Test grouping by depth."""
        tree = build_tree(random_embeddings(6))
        levels = tree.levels()
        assert levels[0] == [0]
        assert sum(len(level) for level in levels) == tree.node_count
        for level in levels:
            assert level == sorted(level)


class TestBeamRetrieve:
    """Test beam_retrieve on simulated and real trees."""

    @pytest.mark.parametrize(("depth", "expected"), [(10, 21), (22, 45)])
    def test_visited_with_unit_beam(self, depth: int, expected: int) -> None:
        """A single path costs one root call plus two children per level."""
        result = beam_retrieve(HeapTree(depth), 1, lambda node_id: float(node_id % 7))
        assert count_visited(result) == expected
        assert len(result.video_ids) == 1

    @pytest.mark.parametrize("beam", [1, 2, 3, 8, 32])
    def test_visited_bound(self, beam: int) -> None:
        """Test the 1 + 2 * beam * depth bound."""
        rng = np.random.default_rng(beam)
        scores = rng.normal(size=2**13)
        result = beam_retrieve(HeapTree(12), beam, lambda node_id: float(scores[node_id]))
        assert result.visited <= 1 + 2 * beam * 12

    @pytest.mark.slow
    def test_recall_grows_with_beam(self) -> None:
        """Recall@10 against exhaustive scoring never drops as the beam widens."""
        corpus = generate_synthetic_corpus(CorpusConfig())
        assert len(corpus.records) == 512
        params = ModelParams.initialize(ModelConfig())
        videos = corpus.video_features()
        tree = corpus_tree(corpus, params)
        query = corpus.queries[0].features()
        reference = exhaustive_retrieve(query, videos, params, top_k=10)
        scorer = make_cross_scorer(query, tree, videos, params)

        recalls = [
            recall_at_k(beam_retrieve(tree, beam, scorer, top_k=10), reference, 10)
            for beam in (1, 2, 4, 8, 16, 512)
        ]
        assert recalls == sorted(recalls)
        assert recalls[-1] == 1.0

    def test_ties_break_by_node_id(self) -> None:
        """Constant scores descend along the leftmost path."""
        result = beam_retrieve(HeapTree(4), 1, lambda _: 0.0)
        assert result.video_ids == [0]

    def test_results_sorted(self) -> None:
        """Scores descend, ties by ascending video id."""
        tree = HeapTree(3)
        result = beam_retrieve(tree, 8, lambda node_id: float(node_id % 3), top_k=8)
        pairs = result.ranking()
        assert pairs == sorted(pairs, key=lambda p: (-p[1], p[0]))
        assert len(pairs) == 8

    def test_truncated_flag(self) -> None:
        """Asking for more videos than indexed."""
        result = beam_retrieve(HeapTree(2), 4, lambda node_id: float(node_id), top_k=10)
        assert result.truncated is True
        assert len(result.video_ids) == 4

    def test_invalid_beam(self) -> None:
        """Test beam and top_k validation."""
        with pytest.raises(InputError):
            beam_retrieve(HeapTree(2), 0, lambda _: 0.0)
        with pytest.raises(InputError):
            beam_retrieve(HeapTree(2), 1, lambda _: 0.0, top_k=0)

    def test_full_beam_equals_exhaustive(self) -> None:
        """A beam as wide as the corpus reproduces the exhaustive ranking."""
        corpus = generate_synthetic_corpus(CorpusConfig(clusters=8, videos_per_cluster=16))
        params = ModelParams.initialize(ModelConfig())
        videos = corpus.video_features()
        assert len(videos) == 128
        tree = corpus_tree(corpus, params)
        for record in corpus.queries[:3]:
            query = record.features()
            scorer = make_cross_scorer(query, tree, videos, params)
            tree_result = beam_retrieve(tree, 128, scorer, top_k=128)
            oracle = exhaustive_retrieve(query, videos, params, top_k=128)
            assert tree_result.video_ids == oracle.video_ids
            assert tree_result.scores == oracle.scores
            assert tree_result.visited == tree.node_count

    def test_student_scorer_matches_student_oracle(
        self, small_corpus: Corpus, tiny_params: ModelParams
    ) -> None:
        """Test the student variant of the cross scorer."""
        videos = small_corpus.video_features()
        tree = corpus_tree(small_corpus, tiny_params)
        query = small_corpus.queries[0].features()
        scorer = make_cross_scorer(query, tree, videos, tiny_params, use_student=True)
        result = beam_retrieve(tree, len(videos), scorer, top_k=5)
        oracle = exhaustive_retrieve(query, videos, tiny_params, top_k=5, use_student=True)
        assert result.video_ids == oracle.video_ids

    def test_embed_scorer(self, small_corpus: Corpus, tiny_params: ModelParams) -> None:
        """Test node scoring by embedding cosine."""
        tree = corpus_tree(small_corpus, tiny_params)
        scorer = make_embed_scorer(small_corpus.queries[0].features(), tree, tiny_params)
        result = beam_retrieve(tree, 2, scorer, top_k=3)
        assert 1 <= len(result.video_ids) <= 3
        assert all(-1.0 <= s <= 1.0 for s in result.scores)

    def test_recall_needs_reference(self) -> None:
        """Test an empty reference ranking."""
        empty = RetrievalResult([], [], 0)
        with pytest.raises(InputError):
            recall_at_k(empty, empty, 3)


class TestNegativeSampling:
    """Test negative_count and sample_negatives."""

    def test_counts_per_strategy(self) -> None:
        """Test uniform, arithmetic and geometric schedules."""
        uniform = NegativeSamplingConfig(strategy="uniform", base_count=3)
        arithmetic = NegativeSamplingConfig(strategy="arithmetic")
        geometric = NegativeSamplingConfig(strategy="geometric", alpha=1.4)
        assert [negative_count(level, uniform) for level in range(4)] == [0, 3, 3, 3]
        assert [negative_count(level, arithmetic) for level in range(4)] == [0, 1, 2, 3]
        assert [negative_count(level, geometric) for level in range(5)] == [0, 1, 3, 5, 7]

    def test_geometric_exact_powers(self) -> None:
        """Integral powers are not rounded up."""
        config = NegativeSamplingConfig(strategy="geometric", alpha=2.0)
        assert [negative_count(level, config) for level in range(1, 5)] == [1, 4, 9, 16]

    def test_sample_negatives(self) -> None:
        """Draws exclude the positive path and respect each level's population."""
        tree = build_tree(random_embeddings(32))
        leaf = tree.leaf_of(3)
        path = tree.path_to(leaf)
        config = NegativeSamplingConfig(strategy="arithmetic")
        draws = sample_negatives(tree, leaf, config, seed=1)
        levels = tree.levels()
        assert draws[0] == []
        for level, node_ids in draws.items():
            population = len(levels[level]) - 1
            assert len(node_ids) == min(level, population)
            assert path[level] not in node_ids
            assert node_ids == sorted(node_ids)
            assert all(tree.nodes[n].depth == level for n in node_ids)
        assert sample_negatives(tree, leaf, config, seed=1) == draws

    def test_population_cap(self) -> None:
        """Large requests are capped at the level population minus one."""
        tree = build_tree({i: np.ones(3) for i in range(4)})
        config = NegativeSamplingConfig(strategy="uniform", base_count=50)
        draws = sample_negatives(tree, tree.leaf_of(0), config, seed=0)
        assert [len(draws[level]) for level in sorted(draws)] == [0, 1, 3]


class TestIndexFiles:
    """Test save_index, load_index and freshness checks."""

    def test_round_trip(self, tmp_path: Path) -> None:
        """A loaded index reproduces the saved tree."""
        tree = build_tree(random_embeddings(11), seed=3, medoid_iterations=7)
        path = tmp_path / "index.tidx"
        save_index(tree, path)
        loaded = load_index(path)
        assert loaded.structure() == tree.structure()
        assert loaded.seed == 3
        assert loaded.medoid_iterations == 7
        assert loaded.embedding_checksum == tree.embedding_checksum

    def test_bad_magic(self, tmp_path: Path) -> None:
        """Test a foreign file."""
        path = tmp_path / "index.tidx"
        save_index(build_tree(random_embeddings(3)), path)
        path.write_bytes(b"NOPE" + path.read_bytes()[4:])
        with pytest.raises(FormatError):
            load_index(path)

    def test_bad_version(self, tmp_path: Path) -> None:
        """Right magic, unknown format version."""
        path = tmp_path / "index.tidx"
        save_index(build_tree(random_embeddings(3)), path)
        data = bytearray(path.read_bytes())
        data[4:6] = (99).to_bytes(2, "little")
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="version"):
            load_index(path)

    def test_duplicate_leaf_medoid(self, tmp_path: Path) -> None:
        """Two leaves holding the same video are rejected."""
        tree = build_tree(random_embeddings(4))
        first, second = [n for n in tree.nodes if n.is_leaf][:2]
        path = saved_with_node_field(tree, tmp_path, second.node_id, 4, first.medoid)
        with pytest.raises(FormatError, match="more than one leaf"):
            load_index(path)

    def test_internal_medoid_outside_members(self, tmp_path: Path) -> None:
        """An internal node must pick its medoid among its own videos."""
        tree = build_tree(random_embeddings(4))
        path = saved_with_node_field(tree, tmp_path, tree.root_id, 4, 99)
        with pytest.raises(FormatError, match="not a member"):
            load_index(path)

    def test_child_depth_must_follow_parent(self, tmp_path: Path) -> None:
        """A child stored two levels below its parent is rejected."""
        tree = build_tree(random_embeddings(4))
        child = tree.root.children[0]
        path = saved_with_node_field(tree, tmp_path, child, 1, 2)
        with pytest.raises(FormatError, match="depth"):
            load_index(path)

    def test_truncated(self, tmp_path: Path) -> None:
        """Test a node table cut short."""
        path = tmp_path / "index.tidx"
        save_index(build_tree(random_embeddings(5)), path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(TruncatedFileError):
            load_index(path)

    def test_freshness(self, small_corpus: Corpus, tiny_params: ModelParams) -> None:
        """Indexes built from other weights are stale."""
        tree = corpus_tree(small_corpus, tiny_params)
        assert check_index_freshness(tree, tiny_params) is True
        tiny_params.class_token.data += 0.5
        with pytest.warns(StaleIndexWarning):
            assert check_index_freshness(tree, tiny_params) is False
        with pytest.raises(StaleIndexError):
            check_index_freshness(tree, tiny_params, strict=True)
