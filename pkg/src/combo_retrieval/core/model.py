"""Dual-path combo-attention scorer, its distilled student, and weight files.

The teacher network has a shared attention trunk feeding two heads:

* the cross path scores a concatenated ``[query words | box centroids | title
  words]`` sequence with :func:`~.scoring.cross_similarity`;
* the embedding paths (one layer stack per modality) turn a single modality,
  prefixed by a learned class token, into a global vector.

The student is an independent, narrower cross path used to score tree nodes
cheaply.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import numpy.typing as npt

from ..utils import binary_io
from ..utils.config import ModelConfig
from ..utils.errors import ConfigurationError, DimensionError, FormatError, InputError
from ..utils.logger import setup_logger
from . import autodiff as ad
from .attention import (
    AttentionLayerParams,
    HiddenSequence,
    TokenRole,
    run_layers,
    sinusoidal_positions,
    uniform_weight,
)
from .autodiff import Tensor
from .scoring import cross_similarity, embed_similarity

logger = setup_logger(__name__)

WEIGHTS_MAGIC = b"TCAN"
WEIGHTS_VERSION = 1
_GEOMETRY = struct.Struct("<7IId")
_COUNT = struct.Struct("<Q")

_FLAG_SCALED_LOGITS = 1
_FLAG_INNER_PRODUCT = 2
_FLAG_POSITIONAL_WORDS = 4


@dataclass
class QueryFeatures:
    """Word vectors of one query, ``d x L``."""

    words: npt.NDArray[np.float64]
    query_id: int = -1
    text: str = ""

    def __post_init__(self) -> None:
        """Validate shape."""
        self.words = np.asarray(self.words, dtype=np.float64)
        if self.words.ndim != 2 or self.words.shape[1] < 1:
            raise InputError(f"query needs at least one word, got shape {self.words.shape}")

    @property
    def dim(self) -> int:
        return int(self.words.shape[0])

    @property
    def length(self) -> int:
        return int(self.words.shape[1])


@dataclass
class VideoFeatures:
    """Box-centroid vectors (``d x M_box``) and title word vectors (``d x N_title``)."""

    video_id: int
    boxes: npt.NDArray[np.float64]
    title: npt.NDArray[np.float64] = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self) -> None:
        """Validate shapes; titles may be empty, boxes may be empty only with a title."""
        self.boxes = np.asarray(self.boxes, dtype=np.float64)
        self.title = np.asarray(self.title, dtype=np.float64)
        if self.title.size == 0:
            self.title = np.zeros((self.boxes.shape[0], 0))
        if self.boxes.size == 0 and self.title.ndim == 2:
            self.boxes = np.zeros((self.title.shape[0], 0))
        if self.boxes.ndim != 2 or self.title.ndim != 2:
            raise InputError(f"video {self.video_id}: features must be d x n matrices")
        if self.boxes.shape[0] != self.title.shape[0]:
            raise DimensionError("VideoFeatures", self.boxes.shape, self.title.shape)
        if self.token_count < 1:
            raise InputError(f"video {self.video_id} has no tokens")

    @property
    def dim(self) -> int:
        return int(self.boxes.shape[0])

    @property
    def token_count(self) -> int:
        return int(self.boxes.shape[1] + self.title.shape[1])


@dataclass
class DualOutputs:
    """Every score the dual-path network and its student produce for one pair."""

    sim_cross: Tensor
    sim_embed: Tensor
    query_embedding: Tensor
    video_embedding: Tensor
    sim_cross_student: Tensor


@dataclass
class ModelParams:
    """All learnable weights of the teacher and the student."""

    config: ModelConfig
    input_adapter: Tensor | None
    trunk: list[AttentionLayerParams]
    cross_path: list[AttentionLayerParams]
    query_path: list[AttentionLayerParams]
    video_path: list[AttentionLayerParams]
    class_token: Tensor
    student_adapter: Tensor | None
    student: list[AttentionLayerParams]

    @classmethod
    def initialize(cls, config: ModelConfig) -> ModelParams:
        """Draw fresh weights from ``config.seed``.

        Adapters exist only when a network width differs from ``input_dim``.
        """
        rng = np.random.default_rng(config.seed)

        def stack(count: int, width: int, heads: int) -> list[AttentionLayerParams]:
            return [AttentionLayerParams.initialize(width, heads, rng) for _ in range(count)]

        input_adapter = (
            uniform_weight((config.d_model, config.input_dim), rng)
            if config.d_model != config.input_dim
            else None
        )
        trunk = stack(config.trunk_layers, config.d_model, config.n_heads)
        cross_path = stack(config.path_layers, config.d_model, config.n_heads)
        query_path = stack(config.path_layers, config.d_model, config.n_heads)
        video_path = stack(config.path_layers, config.d_model, config.n_heads)
        bound = 1.0 / np.sqrt(config.d_model)
        class_token = Tensor(
            rng.uniform(-bound, bound, size=config.d_model), requires_grad=True
        )
        student_adapter = (
            uniform_weight((config.student_d_model, config.input_dim), rng)
            if config.student_d_model != config.input_dim
            else None
        )
        student = stack(
            config.student_layers, config.student_d_model, config.student_heads
        )
        params = cls(
            config,
            input_adapter,
            trunk,
            cross_path,
            query_path,
            video_path,
            class_token,
            student_adapter,
            student,
        )
        for name, tensor in params.named_tensors():
            tensor.name = name
        return params

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        """Every parameter in the canonical (weight-file) order."""
        named: list[tuple[str, Tensor]] = []
        if self.input_adapter is not None:
            named.append(("input_adapter", self.input_adapter))
        for group, layers in (
            ("trunk", self.trunk),
            ("cross", self.cross_path),
            ("query", self.query_path),
            ("video", self.video_path),
        ):
            for i, layer in enumerate(layers):
                named.extend(layer.named_tensors(f"{group}.{i}"))
        named.append(("class_token", self.class_token))
        if self.student_adapter is not None:
            named.append(("student_adapter", self.student_adapter))
        for i, layer in enumerate(self.student):
            named.extend(layer.named_tensors(f"student.{i}"))
        return named

    def parameters(self) -> list[Tensor]:
        return [tensor for _, tensor in self.named_tensors()]

    def student_parameters(self) -> list[Tensor]:
        return [t for name, t in self.named_tensors() if name.startswith("student")]

    def teacher_parameters(self) -> list[Tensor]:
        return [t for name, t in self.named_tensors() if not name.startswith("student")]

    @property
    def float_count(self) -> int:
        return sum(tensor.size for tensor in self.parameters())

    def snapshot(self) -> ModelParams:
        """Independent copy for read-only inference while training continues."""
        frozen = copy.deepcopy(self)
        for tensor in frozen.parameters():
            tensor.requires_grad = False
            tensor.grad = None
        return frozen

    def checksum(self) -> bytes:
        """SHA-256 of the float32 image of every parameter."""
        return binary_io.checksum(*(t.data for t in self.parameters()))


# ---------------------------------------------------------------------------
# Input sequences
# ---------------------------------------------------------------------------


def _positioned(words: npt.NDArray[np.float64], positional: bool) -> npt.NDArray[np.float64]:
    if not positional or words.shape[1] == 0:
        return words
    return words + sinusoidal_positions(words.shape[1], words.shape[0])


def build_input_sequence(
    query: QueryFeatures, video: VideoFeatures, positional: bool = True
) -> HiddenSequence:
    """``[query words | box centroids | title words]`` with role tags.

    Sinusoidal positions are added to word tokens only; box centroids are an
    unordered set and stay untouched.

    Raises:
        DimensionError: Query and video widths differ.
    """
    if query.dim != video.dim:
        raise DimensionError("build_input_sequence", query.words.shape, video.boxes.shape)
    tokens = np.concatenate(
        [
            _positioned(query.words, positional),
            video.boxes,
            _positioned(video.title, positional),
        ],
        axis=1,
    )
    roles = (
        (TokenRole.QUERY_WORD,) * query.length
        + (TokenRole.BOX_CENTROID,) * video.boxes.shape[1]
        + (TokenRole.TITLE_WORD,) * video.title.shape[1]
    )
    return HiddenSequence(Tensor(tokens), roles)


def build_modality_sequence(
    features: QueryFeatures | VideoFeatures, positional: bool = True
) -> HiddenSequence:
    """Single-modality sequence consumed by an embedding path."""
    if isinstance(features, QueryFeatures):
        return HiddenSequence(
            Tensor(_positioned(features.words, positional)),
            (TokenRole.QUERY_WORD,) * features.length,
        )
    tokens = np.concatenate(
        [features.boxes, _positioned(features.title, positional)], axis=1
    )
    roles = (TokenRole.BOX_CENTROID,) * features.boxes.shape[1] + (
        TokenRole.TITLE_WORD,
    ) * features.title.shape[1]
    return HiddenSequence(Tensor(tokens), roles)


def _adapt(sequence: HiddenSequence, adapter: Tensor | None) -> HiddenSequence:
    if adapter is None:
        return sequence
    return HiddenSequence(ad.linear_nobias(sequence.tokens, adapter), sequence.roles)


def _check_width(features: QueryFeatures | VideoFeatures, config: ModelConfig) -> None:
    if features.dim != config.input_dim:
        raise ConfigurationError(
            f"feature width {features.dim} != model input_dim {config.input_dim}"
        )


def _split_and_score(
    hidden: HiddenSequence, query_length: int, config: ModelConfig
) -> Tensor:
    local_query = ad.slice_columns(hidden.tokens, 0, query_length)
    local_video = ad.slice_columns(hidden.tokens, query_length, hidden.length)
    return cross_similarity(local_query, local_video, config.similarity_mode)  # type: ignore[arg-type]


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def forward_cross_path(
    query: QueryFeatures, video: VideoFeatures, params: ModelParams
) -> Tensor:
    """Teacher cross similarity of one (query, video) pair."""
    config = params.config
    _check_width(query, config)
    sequence = _adapt(
        build_input_sequence(query, video, config.positional_words), params.input_adapter
    )
    hidden = run_layers(
        sequence,
        [*params.trunk, *params.cross_path],
        config.scaled_logits,
        config.layer_norm_eps,
    )
    return _split_and_score(hidden, query.length, config)


def forward_embed_path(
    features: QueryFeatures | VideoFeatures, params: ModelParams
) -> Tensor:
    """Global embedding: the class token's output after the modality's own layers."""
    config = params.config
    _check_width(features, config)
    sequence = _adapt(
        build_modality_sequence(features, config.positional_words), params.input_adapter
    )
    head = ad.reshape(params.class_token, (config.d_model, 1))
    sequence = HiddenSequence(
        ad.concat([head, sequence.tokens], axis=1),
        (TokenRole.CLASS_TOKEN, *sequence.roles),
    )
    path = params.query_path if isinstance(features, QueryFeatures) else params.video_path
    hidden = run_layers(
        sequence, [*params.trunk, *path], config.scaled_logits, config.layer_norm_eps
    )
    return ad.select_column(hidden.tokens, 0)


def forward_student(
    query: QueryFeatures, video: VideoFeatures, params: ModelParams
) -> Tensor:
    """Student cross similarity: same pipeline, narrower and shallower stack."""
    config = params.config
    _check_width(query, config)
    sequence = _adapt(
        build_input_sequence(query, video, config.positional_words),
        params.student_adapter,
    )
    hidden = run_layers(
        sequence, params.student, config.scaled_logits, config.layer_norm_eps
    )
    return _split_and_score(hidden, query.length, config)


def forward_dual(
    query: QueryFeatures, video: VideoFeatures, params: ModelParams
) -> DualOutputs:
    """All scores for one pair in a single call."""
    query_embedding = forward_embed_path(query, params)
    video_embedding = forward_embed_path(video, params)
    return DualOutputs(
        sim_cross=forward_cross_path(query, video, params),
        sim_embed=embed_similarity(query_embedding, video_embedding),
        query_embedding=query_embedding,
        video_embedding=video_embedding,
        sim_cross_student=forward_student(query, video, params),
    )


def video_embeddings(
    videos: list[VideoFeatures], params: ModelParams
) -> dict[int, npt.NDArray[np.float64]]:
    """Embedding-path vectors for a set of videos, keyed by video id."""
    return {v.video_id: forward_embed_path(v, params).data.copy() for v in videos}


# ---------------------------------------------------------------------------
# Cost model
# ---------------------------------------------------------------------------


def _layer_flops(width: int, tokens: int) -> int:
    projections = 4 * 2 * width * width * tokens  # Q, K, V and W_o
    attention = 2 * 2 * width * tokens * tokens  # logits and pooling
    norm = 5 * width * tokens
    return projections + attention + norm


def estimate_flops(
    config: ModelConfig, query_length: int, video_length: int, student: bool = False
) -> int:
    """Floating-point operations of one cross-path forward pass.

    Args:
        config: Model geometry.
        query_length: Query tokens ``L``.
        video_length: Video tokens ``M + N_t``.
        student: Count the student network instead of the teacher.
    """
    width = config.student_d_model if student else config.d_model
    layers = config.student_layers if student else config.n_layers
    tokens = query_length + video_length
    adapter = 2 * width * config.input_dim * tokens if width != config.input_dim else 0
    head = 2 * 2 * width * video_length * query_length + 6 * width * query_length
    return adapter + layers * _layer_flops(width, tokens) + head


# ---------------------------------------------------------------------------
# Weight files
# ---------------------------------------------------------------------------


def _flags(config: ModelConfig) -> int:
    flags = 0
    if config.scaled_logits:
        flags |= _FLAG_SCALED_LOGITS
    if config.similarity_mode == "inner_product":
        flags |= _FLAG_INNER_PRODUCT
    if config.positional_words:
        flags |= _FLAG_POSITIONAL_WORDS
    return flags


def save_params(params: ModelParams, path: Path) -> None:
    """Write a weight file: magic, version, geometry header, float32 payload.

    Args:
        params: Parameters to write.
        path: Destination file.
    """
    config = params.config
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        binary_io.write_preamble(f, WEIGHTS_MAGIC, WEIGHTS_VERSION)
        f.write(
            _GEOMETRY.pack(
                config.input_dim,
                config.d_model,
                config.n_heads,
                config.n_layers,
                config.student_d_model,
                config.student_heads,
                config.student_layers,
                _flags(config),
                config.layer_norm_eps,
            )
        )
        f.write(_COUNT.pack(params.float_count))
        for tensor in params.parameters():
            binary_io.write_floats(f, tensor.data.reshape(-1))
    logger.info(f"Saved {params.float_count} weights to {path}")


def load_params(path: Path) -> ModelParams:
    """Read a weight file written by :func:`save_params`.

    Raises:
        FormatError: Bad magic/version, or header geometry that disagrees with
            the declared payload length.
        TruncatedFileError: File shorter than the declared payload.
    """
    path = Path(path)
    what = f"weights {path.name}"
    with path.open("rb") as f:
        binary_io.read_preamble(f, WEIGHTS_MAGIC, WEIGHTS_VERSION, what)
        (
            input_dim,
            d_model,
            n_heads,
            n_layers,
            student_d_model,
            student_heads,
            student_layers,
            flags,
            eps,
        ) = binary_io.read_struct(f, _GEOMETRY, what)
        try:
            config = ModelConfig(
                input_dim=input_dim,
                d_model=d_model,
                n_heads=n_heads,
                n_layers=n_layers,
                student_d_model=student_d_model,
                student_heads=student_heads,
                student_layers=student_layers,
                scaled_logits=bool(flags & _FLAG_SCALED_LOGITS),
                similarity_mode=(
                    "inner_product" if flags & _FLAG_INNER_PRODUCT else "cosine"
                ),
                layer_norm_eps=eps,
                positional_words=bool(flags & _FLAG_POSITIONAL_WORDS),
            )
        except ConfigurationError as exc:
            raise FormatError(f"{what}: invalid geometry header: {exc}") from exc
        params = ModelParams.initialize(config)
        (declared,) = binary_io.read_struct(f, _COUNT, what)
        if declared != params.float_count:
            raise FormatError(
                f"{what}: header geometry implies {params.float_count} weights, "
                f"payload declares {declared}"
            )
        for tensor in params.parameters():
            values = binary_io.read_floats(f, tensor.size, what)
            tensor.data = values.astype(np.float64).reshape(tensor.shape)
        binary_io.expect_eof(f, what)
    logger.info(f"Loaded {declared} weights from {path}")
    return params
