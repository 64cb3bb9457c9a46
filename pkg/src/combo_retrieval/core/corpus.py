"""Corpus records, box clustering, synthetic corpora and corpus files."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import BinaryIO

import numpy as np
import numpy.typing as npt
from sklearn.cluster import KMeans

from ..utils import binary_io
from ..utils.config import CorpusConfig
from ..utils.errors import FormatError, InputError
from ..utils.logger import setup_logger
from .model import QueryFeatures, VideoFeatures

logger = setup_logger(__name__)

CORPUS_MAGIC = b"TCRP"
CORPUS_VERSION = 1
KMEANS_MAX_ITER = 50
KMEANS_TOL = 1e-4

_HEADER = struct.Struct("<II")
_VIDEO = struct.Struct("<IiIIII")
_QUERY = struct.Struct("<IIII")

Matrix = npt.NDArray[np.float64]


def _empty(dim: int) -> Matrix:
    return np.zeros((dim, 0))


@dataclass
class QueryRecord:
    """A query with its ground-truth relevant videos."""

    query_id: int
    words: Matrix
    relevant: frozenset[int]
    source_video: int
    text: str = ""

    def features(self) -> QueryFeatures:
        return QueryFeatures(self.words, self.query_id, self.text)


@dataclass
class CorpusRecord:
    """One video: clustered box centroids, title words, optional raw boxes."""

    video_id: int
    centroids: Matrix
    title: Matrix
    raw_boxes: Matrix | None = None
    category: int | None = None
    queries: list[QueryRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        """Validate token widths."""
        dim = self.centroids.shape[0]
        if self.title.shape[0] != dim:
            raise InputError(f"video {self.video_id}: title width != centroid width")
        if self.raw_boxes is not None and self.raw_boxes.shape[0] != dim:
            raise InputError(f"video {self.video_id}: raw box width != centroid width")

    def features(self) -> VideoFeatures:
        return VideoFeatures(self.video_id, self.centroids, self.title)


@dataclass
class Corpus:
    """Videos and the queries attached to them."""

    dim: int
    records: list[CorpusRecord]

    @property
    def queries(self) -> list[QueryRecord]:
        return [q for record in self.records for q in record.queries]

    def video_features(self) -> dict[int, VideoFeatures]:
        return {record.video_id: record.features() for record in self.records}

    def relevance(self) -> dict[int, frozenset[int]]:
        return {q.query_id: q.relevant for q in self.queries}

    def categories(self) -> dict[int, int]:
        return {
            record.video_id: record.category
            for record in self.records
            if record.category is not None
        }

    def split(self) -> tuple[Corpus, Corpus]:
        """Train keeps each video's first query, test keeps the rest.

        Both halves carry every video.
        """
        train = [replace(r, queries=r.queries[:1]) for r in self.records]
        test = [replace(r, queries=r.queries[1:]) for r in self.records]
        return Corpus(self.dim, train), Corpus(self.dim, test)


def cluster_boxes(boxes: npt.ArrayLike, k: int = 32, seed: int = 0) -> Matrix:
    """Euclidean k-means over box features.

    Args:
        boxes: ``d x B`` box features.
        k: Number of centroids.
        seed: k-means++ seed.

    Returns:
        ``d x k`` cluster means.

    Raises:
        InputError: Fewer boxes than centroids.
    """
    points = np.asarray(boxes, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] < k or k < 1:
        raise InputError(f"need at least {k} boxes, got shape {points.shape}")
    kmeans = KMeans(
        n_clusters=k,
        init="k-means++",
        n_init=1,
        max_iter=KMEANS_MAX_ITER,
        tol=KMEANS_TOL,
        random_state=seed,
    )
    kmeans.fit(points.T)
    return np.asarray(kmeans.cluster_centers_, dtype=np.float64).T


def generate_synthetic_corpus(config: CorpusConfig) -> Corpus:
    """Clustered corpus where every token is a noisy copy of its cluster latent.

    Queries are relevant to every video of their cluster; the cluster id is
    stored as the video's category.

    Raises:
        InputError: Negative noise.
    """
    if config.noise < 0:
        raise InputError(f"noise must be >= 0, got {config.noise}")
    rng = np.random.default_rng(config.seed)
    dim = config.dim
    latents = rng.normal(0.0, config.latent_scale, size=(config.clusters, dim))

    def tokens(latent: npt.NDArray[np.float64], count: int) -> Matrix:
        noise = rng.standard_normal((dim, count))
        return latent[:, None] + config.noise * noise

    records: list[CorpusRecord] = []
    query_id = 0
    for cluster, latent in enumerate(latents):
        members = frozenset(
            range(cluster * config.videos_per_cluster, (cluster + 1) * config.videos_per_cluster)
        )
        for video_id in sorted(members):
            raw_boxes = None
            if config.raw_boxes_per_video:
                raw_boxes = tokens(latent, config.raw_boxes_per_video)
                centroids = cluster_boxes(raw_boxes, config.n_centroids, config.seed + video_id)
            else:
                centroids = tokens(latent, config.n_centroids)
            title = tokens(latent, config.title_words)
            if config.drop_title:
                title = _empty(dim)
            if config.drop_visual:
                centroids, raw_boxes = _empty(dim), None
            queries = []
            for _ in range(config.queries_per_video):
                queries.append(
                    QueryRecord(
                        query_id=query_id,
                        words=tokens(latent, config.query_words),
                        relevant=members,
                        source_video=video_id,
                    )
                )
                query_id += 1
            records.append(
                CorpusRecord(video_id, centroids, title, raw_boxes, cluster, queries)
            )
    logger.info(
        f"Generated {len(records)} videos and {query_id} queries "
        f"in {config.clusters} clusters"
    )
    return Corpus(dim, records)


# ---------------------------------------------------------------------------
# Corpus files
# ---------------------------------------------------------------------------


def _write_matrix(f: BinaryIO, matrix: Matrix) -> None:
    binary_io.write_floats(f, matrix.reshape(-1))


def save_corpus(corpus: Corpus, path: Path) -> None:
    """Write one corpus split.

    Args:
        corpus: Corpus to write.
        path: Destination file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        binary_io.write_preamble(f, CORPUS_MAGIC, CORPUS_VERSION)
        f.write(_HEADER.pack(corpus.dim, len(corpus.records)))
        for record in corpus.records:
            raw = record.raw_boxes if record.raw_boxes is not None else _empty(corpus.dim)
            f.write(
                _VIDEO.pack(
                    record.video_id,
                    -1 if record.category is None else record.category,
                    record.centroids.shape[1],
                    record.title.shape[1],
                    raw.shape[1],
                    len(record.queries),
                )
            )
            for matrix in (record.centroids, record.title, raw):
                _write_matrix(f, matrix)
            for query in record.queries:
                text = query.text.encode("utf-8")
                relevant = sorted(query.relevant)
                f.write(
                    _QUERY.pack(query.query_id, query.words.shape[1], len(relevant), len(text))
                )
                f.write(struct.pack(f"<{len(relevant)}I", *relevant))
                f.write(text)
                _write_matrix(f, query.words)
    logger.info(f"Saved {len(corpus.records)} videos to {path}")


def load_corpus(path: Path) -> Corpus:
    """Read a corpus file written by :func:`save_corpus`.

    Raises:
        FormatError: Bad magic/version, trailing bytes, or an invalid record.
        TruncatedFileError: File ends early.
    """
    path = Path(path)
    what = f"corpus {path.name}"
    with path.open("rb") as f:
        binary_io.read_preamble(f, CORPUS_MAGIC, CORPUS_VERSION, what)
        dim, count = binary_io.read_struct(f, _HEADER, what)
        if dim < 1:
            raise FormatError(f"{what}: dimension must be >= 1")

        def matrix(columns: int) -> Matrix:
            values = binary_io.read_floats(f, dim * columns, what)
            return values.astype(np.float64).reshape(dim, columns)

        records = []
        for _ in range(count):
            video_id, category, n_centroids, n_title, n_raw, n_queries = (
                binary_io.read_struct(f, _VIDEO, what)
            )
            centroids, title, raw = matrix(n_centroids), matrix(n_title), matrix(n_raw)
            queries = []
            for _ in range(n_queries):
                query_id, n_words, n_relevant, n_text = binary_io.read_struct(f, _QUERY, what)
                relevant = struct.unpack(
                    f"<{n_relevant}I", binary_io.read_exact(f, 4 * n_relevant, what)
                )
                try:
                    text = binary_io.read_exact(f, n_text, what).decode("utf-8")
                except UnicodeDecodeError as exc:
                    raise FormatError(f"{what}: query {query_id} text is not UTF-8") from exc
                queries.append(
                    QueryRecord(query_id, matrix(n_words), frozenset(relevant), video_id, text)
                )
            records.append(
                CorpusRecord(
                    video_id,
                    centroids,
                    title,
                    raw if n_raw else None,
                    None if category < 0 else category,
                    queries,
                )
            )
        binary_io.expect_eof(f, what)
    logger.info(f"Loaded {len(records)} videos from {path}")
    return Corpus(dim, records)
