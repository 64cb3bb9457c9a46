"""Tests for the evaluation module."""

import json
from pathlib import Path

import numpy as np
import pytest

from combo_retrieval.core.corpus import Corpus
from combo_retrieval.core.evaluation import (
    EvalReport,
    average_precision_at_k,
    build_report,
    candidate_pool_map,
    evaluable_queries,
    evaluate_map,
    evaluate_pr_auc,
    evaluate_retrieval,
    one_stage_rank,
    rank_agreement,
    two_stage_rank,
)
from combo_retrieval.core.model import ModelParams, video_embeddings
from combo_retrieval.core.tree_index import build_tree
from combo_retrieval.utils.config import CorpusConfig, ModelConfig, RunConfig
from combo_retrieval.utils.errors import InputError


class TestAveragePrecision:
    """Test average_precision_at_k and evaluate_map."""

    def test_perfect_ranking(self) -> None:
        """All relevant items first."""
        assert average_precision_at_k([1, 2, 3, 4], {1, 2}, 3) == pytest.approx(1.0)

    def test_worked_example(self) -> None:
        """Hits at ranks 1 and 3 of 3 with two relevant items."""
        assert average_precision_at_k([5, 9, 7], {5, 7}, 3) == pytest.approx((1 + 2 / 3) / 2)

    def test_normaliser_uses_cutoff(self) -> None:
        """More relevant items than K divide by K."""
        assert average_precision_at_k([1, 9], {1, 2, 3, 4}, 2) == pytest.approx(0.5)

    def test_short_ranking(self) -> None:
        """Rankings shorter than K only count what exists."""
        assert average_precision_at_k([3], {3, 4}, 5) == pytest.approx(0.5)

    def test_no_hits(self) -> None:
        """Test zero precision."""
        assert average_precision_at_k([8, 9], {1}, 2) == 0.0

    def test_validation(self) -> None:
        """Test empty relevance and bad cutoff."""
        with pytest.raises(InputError):
            average_precision_at_k([1], set(), 1)
        with pytest.raises(InputError):
            average_precision_at_k([1], {1}, 0)

    def test_map_excludes_queries_without_relevance(self) -> None:
        """Queries with no relevant items are skipped."""
        relevance = {0: {1}, 1: set(), 2: {4}}
        rankings = {0: [1, 2], 1: [3], 2: [5, 4]}
        assert evaluable_queries(relevance) == [0, 2]
        assert evaluate_map(rankings, relevance, 1) == pytest.approx(0.5)
        assert evaluate_map(rankings, relevance, 2) == pytest.approx(0.75)

    def test_map_missing_ranking_counts_as_empty(self) -> None:
        """Test an absent query."""
        assert evaluate_map({}, {0: {1}}, 3) == 0.0

    def test_map_needs_evaluable_query(self) -> None:
        """Test no query has a relevant item."""
        with pytest.raises(InputError):
            evaluate_map({0: [1]}, {0: set()}, 1)


class TestPrAuc:
    """Test evaluate_pr_auc."""

    def test_perfect_separation(self) -> None:
        """Positives above negatives."""
        assert evaluate_pr_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == pytest.approx(1.0)

    def test_worse_ordering_scores_lower(self) -> None:
        """Test a misranked positive."""
        good = evaluate_pr_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        bad = evaluate_pr_auc([0.9, 0.8, 0.2, 0.1], [0, 1, 0, 1])
        assert bad < good

    def test_random_scores_match_prevalence(self) -> None:
        """Uninformative scores land near the positive rate, inverted ones below it."""
        rng = np.random.default_rng(0)
        labels = (rng.random(10_000) < 0.3).astype(int)
        prevalence = labels.mean()
        random_auc = evaluate_pr_auc(rng.random(labels.size).tolist(), labels.tolist())
        assert random_auc == pytest.approx(prevalence, abs=0.05)
        inverted = -(labels + 0.5 * rng.random(labels.size))
        assert evaluate_pr_auc(inverted.tolist(), labels.tolist()) < prevalence

    def test_degenerate_labels(self) -> None:
        """Test one-class labels and length mismatch."""
        with pytest.raises(InputError):
            evaluate_pr_auc([0.1, 0.2], [1, 1])
        with pytest.raises(InputError):
            evaluate_pr_auc([0.1, 0.2], [0, 0])
        with pytest.raises(InputError):
            evaluate_pr_auc([0.1, 0.2, 0.3], [0, 1])


class TestReport:
    """Test build_report and EvalReport."""

    def test_build_report(self) -> None:
        """Test metrics, visited mean and PR-AUC."""
        report = build_report(
            rankings={0: [1, 2], 1: [4, 3]},
            relevance={0: {1}, 1: {3}, 2: set()},
            visited={0: 5, 1: 7},
            scored={0: {1: 0.9, 2: 0.1}, 1: {4: 0.8, 3: 0.7}},
            fingerprint="abc",
            scorer="student",
            beam=2,
        )
        assert report.map_at_1 == pytest.approx(0.5)
        assert report.map_at_3 == pytest.approx(0.75)
        assert report.mean_visited == pytest.approx(6.0)
        assert report.query_count == 2
        assert report.excluded == 1
        assert report.pr_auc is not None
        assert report.scorer == "student"
        assert report.beam == 2

    def test_pr_auc_skipped_without_negatives(self) -> None:
        """PR-AUC is None when every scored leaf is relevant."""
        report = build_report({0: [1]}, {0: {1}}, {0: 1}, {0: {1: 0.5}})
        assert report.pr_auc is None
        assert report.map_at_1 == 1.0

    def test_save(self, tmp_path: Path) -> None:
        """Test the JSON report."""
        report = EvalReport(1.0, 0.9, 0.8, None, 12.5, 10, 0, "f", "cross", 4)
        path = tmp_path / "out" / "eval_report.json"
        report.save(path)
        data = json.loads(path.read_text(encoding="utf-8"))
        assert data["map_at_1"] == 1.0
        assert data["pr_auc"] is None
        assert data["beam"] == 4


class TestRetrievalEvaluation:
    """Test evaluate_retrieval over a real tree."""

    @pytest.fixture
    def config(self, tiny_model_config: ModelConfig, small_corpus_config: CorpusConfig) -> RunConfig:
        return RunConfig(model=tiny_model_config, corpus=small_corpus_config, beam=16)

    def test_full_beam_report(
        self, small_corpus: Corpus, tiny_params: ModelParams, config: RunConfig
    ) -> None:
        """Every query is retrieved and counted."""
        videos = list(small_corpus.video_features().values())
        tree = build_tree(video_embeddings(videos, tiny_params), small_corpus.categories())
        report, results = evaluate_retrieval(small_corpus, tiny_params, tree, config)
        assert report.query_count == 32
        assert set(results) == {q.query_id for q in small_corpus.queries}
        assert report.mean_visited == pytest.approx(tree.node_count)
        assert all(len(r.video_ids) == 5 for r in results.values())
        assert all(len(r.leaf_scores) == 16 for r in results.values())
        assert 0.0 <= report.map_at_5 <= 1.0
        assert report.fingerprint == config.fingerprint()

    def test_workers_do_not_change_results(
        self, small_corpus: Corpus, tiny_params: ModelParams, config: RunConfig
    ) -> None:
        """Parallel evaluation matches serial evaluation."""
        videos = list(small_corpus.video_features().values())
        tree = build_tree(video_embeddings(videos, tiny_params))
        narrow = RunConfig(
            model=config.model, corpus=config.corpus, beam=2, scorer="student"
        )
        parallel = RunConfig(
            model=config.model, corpus=config.corpus, beam=2, scorer="student", workers=4
        )
        serial_report, serial = evaluate_retrieval(small_corpus, tiny_params, tree, narrow)
        parallel_report, threaded = evaluate_retrieval(small_corpus, tiny_params, tree, parallel)
        assert {q: r.video_ids for q, r in serial.items()} == {
            q: r.video_ids for q, r in threaded.items()
        }
        assert serial_report.map_at_3 == parallel_report.map_at_3


class TestBaselines:
    """Test one-stage and two-stage ranking."""

    def test_one_stage_ranks_everything(
        self, small_corpus: Corpus, tiny_params: ModelParams
    ) -> None:
        """Test the exhaustive baseline."""
        videos = small_corpus.video_features()
        ranking = one_stage_rank(small_corpus.queries[0].features(), videos, tiny_params)
        assert sorted(ranking) == sorted(videos)

    def test_two_stage_prefilters_by_title(
        self, small_corpus: Corpus, tiny_params: ModelParams
    ) -> None:
        """The head is the reranked title shortlist, the tail keeps title order."""
        videos = small_corpus.video_features()
        query = small_corpus.queries[0].features()
        ranking = two_stage_rank(query, videos, tiny_params, prefilter=4)
        assert sorted(ranking) == sorted(videos)
        head = set(ranking[:4])
        reranked = one_stage_rank(query, {v: videos[v] for v in head}, tiny_params)
        assert ranking[:4] == reranked

    def test_two_stage_title_search_finds_cluster(
        self, small_corpus: Corpus, tiny_params: ModelParams
    ) -> None:
        """With low noise the title shortlist is the query's own cluster."""
        videos = small_corpus.video_features()
        record = small_corpus.queries[0]
        ranking = two_stage_rank(record.features(), videos, tiny_params, prefilter=4)
        assert set(ranking[:4]) == set(record.relevant)

    def test_invalid_prefilter(self, small_corpus: Corpus, tiny_params: ModelParams) -> None:
        """Test prefilter validation."""
        with pytest.raises(InputError):
            two_stage_rank(
                small_corpus.queries[0].features(),
                small_corpus.video_features(),
                tiny_params,
                prefilter=0,
            )

    def test_candidate_pool_map(self, small_corpus: Corpus, tiny_params: ModelParams) -> None:
        """Pool sizes above the corpus are clipped."""
        train, _ = small_corpus.split()
        report = candidate_pool_map(train, tiny_params, pool_sizes=(8, 64), prefilter=4)
        assert sorted(report) == [8, 16]
        for values in report.values():
            assert 0.0 <= values["one_stage"] <= 1.0
            assert 0.0 <= values["two_stage"] <= 1.0


class TestRankAgreement:
    """Test rank_agreement."""

    def test_monotone(self) -> None:
        """Test identical and reversed orders."""
        scores = np.array([0.1, 0.5, 0.3, 0.9])
        assert rank_agreement(scores, 2 * scores + 1) == pytest.approx(1.0)
        assert rank_agreement(scores, -scores) == pytest.approx(-1.0)

    def test_validation(self) -> None:
        """Test too few or mismatched scores."""
        with pytest.raises(InputError):
            rank_agreement([1.0], [1.0])
        with pytest.raises(InputError):
            rank_agreement([1.0, 2.0], [1.0, 2.0, 3.0])
