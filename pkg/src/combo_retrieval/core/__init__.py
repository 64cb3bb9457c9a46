"""Core retrieval engine modules."""

from .autodiff import Tape, Tensor, backward
from .corpus import Corpus, CorpusRecord, QueryRecord, generate_synthetic_corpus
from .evaluation import EvalReport, evaluate_map, evaluate_pr_auc, evaluate_retrieval
from .model import (
    ModelParams,
    QueryFeatures,
    VideoFeatures,
    forward_cross_path,
    forward_embed_path,
    forward_student,
)
from .training import TrainingLog, alternating_train
from .tree_index import RetrievalResult, TreeIndex, beam_retrieve, build_tree

__all__ = [
    "Corpus",
    "CorpusRecord",
    "EvalReport",
    "ModelParams",
    "QueryFeatures",
    "QueryRecord",
    "RetrievalResult",
    "Tape",
    "Tensor",
    "TrainingLog",
    "TreeIndex",
    "VideoFeatures",
    "alternating_train",
    "backward",
    "beam_retrieve",
    "build_tree",
    "evaluate_map",
    "evaluate_pr_auc",
    "evaluate_retrieval",
    "forward_cross_path",
    "forward_embed_path",
    "forward_student",
    "generate_synthetic_corpus",
]
