"""Command-line interface: gen, train, index, retrieve and eval."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any, TextIO

from .core.corpus import Corpus, generate_synthetic_corpus, load_corpus, save_corpus
from .core.evaluation import build_report, evaluate_retrieval, retrieve_query
from .core.model import ModelParams, load_params, save_params
from .core.training import TrainingLog, alternating_train, rebuild_tree
from .core.tree_index import (
    RetrievalResult,
    TreeIndex,
    check_index_freshness,
    load_index,
    save_index,
)
from .utils.config import RunConfig
from .utils.errors import (
    FormatError,
    RetrievalError,
    StaleIndexError,
    TrainingDivergedError,
    TruncatedFileError,
)
from .utils.logger import set_verbosity, setup_logger

logger = setup_logger("combo_retrieval")

RUN_CONFIG_NAME = "run_config.json"
TSV_HEADER = ("query_id", "rank", "video_id", "score", "visited")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MISSING_FILE = 3
EXIT_FORMAT = 4
EXIT_STALE_INDEX = 5
EXIT_DIVERGED = 6

_EXIT_CODES: tuple[tuple[type[BaseException], int], ...] = (
    (StaleIndexError, EXIT_STALE_INDEX),
    (TrainingDivergedError, EXIT_DIVERGED),
    (FormatError, EXIT_FORMAT),
    (TruncatedFileError, EXIT_FORMAT),
    (FileNotFoundError, EXIT_MISSING_FILE),
)


def exit_code_for(error: BaseException) -> int:
    """Exit code of the CLI error contract."""
    for kind, code in _EXIT_CODES:
        if isinstance(error, kind):
            return code
    return EXIT_ERROR


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def resolve_config(args: argparse.Namespace, overrides: dict[str, Any]) -> RunConfig:
    """Defaults, then ``--config``, then flags."""
    base = RunConfig.load(args.config) if args.config else RunConfig()
    return base.with_overrides(overrides)


def _adopt_dim(config: RunConfig, dim: int) -> RunConfig:
    return config.with_overrides({"model.input_dim": dim, "corpus.dim": dim})


def _adopt_model(config: RunConfig, params: ModelParams) -> RunConfig:
    model = dataclasses.replace(params.config, seed=config.model.seed)
    corpus = dataclasses.replace(config.corpus, dim=model.input_dim)
    return dataclasses.replace(config, model=model, corpus=corpus)


def _persist(config: RunConfig, out_dir: Path) -> None:
    config.save(out_dir / RUN_CONFIG_NAME)


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return path


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args: argparse.Namespace) -> int:
    """Generate a synthetic corpus and write its train/test splits."""
    config = resolve_config(
        args,
        {
            "corpus.clusters": args.clusters,
            "corpus.videos_per_cluster": args.videos_per_cluster,
            "corpus.dim": args.dim,
            "model.input_dim": args.dim,
            "corpus.noise": args.noise,
            "corpus.seed": args.seed,
            "corpus.drop_title": args.drop_title or None,
            "corpus.drop_visual": args.drop_visual or None,
        },
    )
    out_dir = Path(args.out)
    train, test = generate_synthetic_corpus(config.corpus).split()
    save_corpus(train, out_dir / "train.crp")
    save_corpus(test, out_dir / "test.crp")
    _persist(config, out_dir)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    """Train from scratch and write weights plus the training log."""
    corpus = load_corpus(_require(Path(args.corpus)))
    config = _adopt_dim(
        resolve_config(
            args,
            {
                "train.steps": args.steps,
                "train.batch_size": args.batch_size,
                "train.learning_rate": args.learning_rate,
                "train.optimizer": args.optimizer,
                "train.seed": args.seed,
                "model.seed": args.seed,
            },
        ),
        corpus.dim,
    )
    out_dir = Path(args.out)
    with TrainingLog(out_dir / "train_log.jsonl") as log:
        result = alternating_train(corpus, config, log=log)
    save_params(result.params, out_dir / "weights.tcan")
    _persist(config, out_dir)
    return EXIT_OK


def _load_model(
    args: argparse.Namespace, overrides: dict[str, Any]
) -> tuple[RunConfig, ModelParams, Corpus]:
    corpus = load_corpus(_require(Path(args.corpus)))
    params = load_params(_require(Path(args.weights)))
    config = _adopt_model(resolve_config(args, overrides), params)
    if corpus.dim != params.config.input_dim:
        raise FormatError(
            f"corpus dim {corpus.dim} != weights input_dim {params.config.input_dim}"
        )
    return config, params, corpus


def cmd_index(args: argparse.Namespace) -> int:
    """Build the retrieval tree from the trained video embeddings."""
    config, params, corpus = _load_model(args, {"train.seed": args.seed})
    tree = rebuild_tree(
        corpus.video_features(),
        params,
        corpus.categories() or None,
        config.train.seed,
        config.train.medoid_iterations,
    )
    out_dir = Path(args.out)
    save_index(tree, out_dir / "index.tidx")
    _persist(config, out_dir)
    return EXIT_OK


def _load_index(args: argparse.Namespace, params: ModelParams) -> TreeIndex:
    tree = load_index(_require(Path(args.index)))
    check_index_freshness(tree, params, strict=not args.allow_stale)
    return tree


def _retrieval_overrides(args: argparse.Namespace) -> dict[str, Any]:
    return {
        "beam": args.beam,
        "top_k": args.top_k,
        "scorer": args.scorer,
        "workers": args.workers,
    }


def write_rankings(results: dict[int, RetrievalResult], stream: TextIO, top_k: int) -> None:
    """Tab-separated rows: query id, rank, video id, score, visited nodes."""
    writer = csv.writer(stream, delimiter="\t", lineterminator="\n")
    writer.writerow(TSV_HEADER)
    for query_id in sorted(results):
        result = results[query_id]
        for rank, (video_id, score) in enumerate(result.ranking()[:top_k], start=1):
            writer.writerow([query_id, rank, video_id, repr(score), result.visited])


def read_rankings(
    path: Path,
) -> tuple[dict[int, list[int]], dict[int, int], dict[int, dict[int, float]]]:
    """Parse a file written by :func:`write_rankings`.

    Raises:
        FormatError: Missing header or malformed row.
    """
    rankings: dict[int, list[tuple[int, int]]] = {}
    visited: dict[int, int] = {}
    scored: dict[int, dict[int, float]] = {}
    with path.open(encoding="utf-8", newline="") as f:
        rows = csv.reader(f, delimiter="\t")
        if tuple(next(rows, ())) != TSV_HEADER:
            raise FormatError(f"rankings {path.name}: missing header {TSV_HEADER}")
        for line, row in enumerate(rows, start=2):
            try:
                query_id, rank, video_id, visits = (int(row[i]) for i in (0, 1, 2, 4))
                score = float(row[3])
            except (IndexError, ValueError) as exc:
                raise FormatError(f"rankings {path.name}: bad row at line {line}") from exc
            rankings.setdefault(query_id, []).append((rank, video_id))
            visited[query_id] = visits
            scored.setdefault(query_id, {})[video_id] = score
    ordered = {q: [v for _, v in sorted(entries)] for q, entries in rankings.items()}
    return ordered, visited, scored


def cmd_retrieve(args: argparse.Namespace) -> int:
    """Beam-retrieve every query of the corpus and emit ranked rows."""
    config, params, corpus = _load_model(args, _retrieval_overrides(args))
    tree = _load_index(args, params)
    videos = corpus.video_features()
    snapshot = params.snapshot()
    results = {
        record.query_id: retrieve_query(record.features(), tree, videos, snapshot, config)
        for record in corpus.queries
    }
    if args.out:
        out_path = Path(args.out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with out_path.open("w", encoding="utf-8") as f:
            write_rankings(results, f, config.top_k)
        _persist(config, out_path.parent)
    else:
        write_rankings(results, sys.stdout, config.top_k)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    """Write an EvalReport for tree retrieval or for an existing rankings file."""
    if args.rankings:
        corpus = load_corpus(_require(Path(args.corpus)))
        config = _adopt_dim(resolve_config(args, _retrieval_overrides(args)), corpus.dim)
        rankings, visited, scored = read_rankings(_require(Path(args.rankings)))
        report = build_report(
            rankings,
            corpus.relevance(),
            visited,
            scored,
            fingerprint=config.fingerprint(),
            scorer=config.scorer,
            beam=config.beam,
        )
    else:
        config, params, corpus = _load_model(args, _retrieval_overrides(args))
        tree = _load_index(args, params)
        report, _ = evaluate_retrieval(corpus, params, tree, config)
    out_dir = Path(args.out)
    report.save(out_dir / "eval_report.json")
    _persist(config, out_dir)
    print(report.to_json())
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _model_inputs(parser: argparse.ArgumentParser, index: bool = True) -> None:
    parser.add_argument("--corpus", required=True, help="corpus split file (.crp)")
    parser.add_argument("--weights", help="weight file (.tcan)")
    if index:
        parser.add_argument("--index", help="index file (.tidx)")
        parser.add_argument(
            "--allow-stale",
            action="store_true",
            help="warn instead of failing when the index predates the weights",
        )


def _retrieval_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--beam", type=int, help="nodes kept per tree level")
    parser.add_argument("--top-k", type=int, help="results per query")
    parser.add_argument("--scorer", choices=("cross", "student", "embed"))
    parser.add_argument("--workers", type=int, help="evaluation threads")


def build_parser() -> argparse.ArgumentParser:
    """Argument parser for every subcommand."""
    parser = argparse.ArgumentParser(
        prog="combo-retrieval",
        description="Tree-based combo-attention retrieval: train, index, retrieve, evaluate.",
    )
    parser.add_argument("--config", type=Path, help="JSON run configuration")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic corpus")
    gen.add_argument("--out", required=True)
    gen.add_argument("--clusters", type=int)
    gen.add_argument("--videos-per-cluster", type=int)
    gen.add_argument("--dim", type=int)
    gen.add_argument("--noise", type=float)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--drop-title", action="store_true", help="visual-only videos")
    gen.add_argument("--drop-visual", action="store_true", help="title-only videos")
    gen.set_defaults(handler=cmd_gen)

    train = sub.add_parser("train", help="train the scorer and its student")
    train.add_argument("--corpus", required=True)
    train.add_argument("--out", required=True)
    train.add_argument("--steps", type=int)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--learning-rate", type=float)
    train.add_argument("--optimizer", choices=("sgd", "adam"))
    train.add_argument("--seed", type=int)
    train.set_defaults(handler=cmd_train)

    index = sub.add_parser("index", help="build the retrieval tree")
    _model_inputs(index, index=False)
    index.add_argument("--out", required=True)
    index.add_argument("--seed", type=int)
    index.set_defaults(handler=cmd_index)

    retrieve = sub.add_parser("retrieve", help="rank videos for every corpus query")
    _model_inputs(retrieve)
    _retrieval_flags(retrieve)
    retrieve.add_argument("--out", help="TSV destination (stdout when omitted)")
    retrieve.set_defaults(handler=cmd_retrieve)

    evaluate = sub.add_parser("eval", help="score retrieval quality")
    _model_inputs(evaluate)
    _retrieval_flags(evaluate)
    evaluate.add_argument("--rankings", help="score an existing TSV instead of retrieving")
    evaluate.add_argument("--out", required=True)
    evaluate.set_defaults(handler=cmd_eval)
    return parser


def _check_model_args(args: argparse.Namespace) -> None:
    needs_weights = args.command in ("index", "retrieve") or (
        args.command == "eval" and not args.rankings
    )
    if needs_weights and not args.weights:
        raise RetrievalError(f"{args.command} needs --weights")
    if args.command in ("retrieve", "eval") and needs_weights and not args.index:
        raise RetrievalError(f"{args.command} needs --index")


def _report_error(error: BaseException) -> int:
    code = exit_code_for(error)
    logger.debug("command failed", exc_info=error)
    print(
        json.dumps({"error": type(error).__name__, "message": str(error)}),
        file=sys.stderr,
    )
    return code


def main(argv: Sequence[str] | None = None) -> int:
    """Command-line entry point.

    Args:
        argv: Arguments without the program name; ``sys.argv[1:]`` when None.

    Returns:
        Exit code.
    """
    args = build_parser().parse_args(argv)
    if args.verbose:
        set_verbosity(logging.DEBUG)
    elif args.quiet:
        set_verbosity(logging.WARNING)
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        _check_model_args(args)
        return handler(args)
    except (RetrievalError, OSError) as error:
        return _report_error(error)
    except Exception as error:  # noqa: BLE001
        logger.error(f"Unexpected error: {error}")
        return _report_error(error)


if __name__ == "__main__":
    sys.exit(main())
