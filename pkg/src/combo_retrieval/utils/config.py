"""Configuration management."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, ClassVar, Self

from .errors import ConfigurationError


class _JsonSection:
    """JSON round-trip shared by every config dataclass."""

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary.

        Returns:
            Dictionary representation.
        """
        return dataclasses.asdict(self)  # type: ignore[call-overload]

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Self:
        """Create from dictionary; absent keys keep their defaults.

        Args:
            data: Dictionary data.

        Returns:
            Config instance.

        Raises:
            ConfigurationError: Unknown keys or invalid values.
        """
        known = {f.name for f in dataclasses.fields(cls)}  # type: ignore[arg-type]
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"{cls.__name__}: unknown keys {unknown}")
        try:
            return cls(**dict(data))
        except TypeError as exc:
            raise ConfigurationError(f"{cls.__name__}: {exc}") from exc

    def save(self, path: Path) -> None:
        """Save configuration to JSON file.

        Args:
            path: Path to save configuration.
        """
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, ensure_ascii=False)

    @classmethod
    def load(cls, path: Path) -> Self:
        """Load configuration from JSON file.

        Args:
            path: Path to load configuration from.

        Returns:
            Config instance.

        Raises:
            ConfigurationError: File missing, not JSON, or invalid.
        """
        try:
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"config {path} must hold a JSON object")
        return cls.from_dict(data)


@dataclass
class ModelConfig(_JsonSection):
    """Geometry of the dual-path scorer and its student."""

    input_dim: int = 16
    d_model: int = 16
    n_heads: int = 2
    n_layers: int = 2
    student_d_model: int = 8
    student_heads: int = 2
    student_layers: int = 2
    scaled_logits: bool = False
    similarity_mode: str = "cosine"
    layer_norm_eps: float = 1e-5
    positional_words: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        """Validate geometry."""
        for name in ("input_dim", "d_model", "n_heads", "n_layers"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.student_layers < 1 or self.student_heads < 1:
            raise ConfigurationError("student needs at least one layer and head")
        if self.d_model % self.n_heads:
            raise ConfigurationError("n_heads must divide d_model")
        if self.student_d_model % self.student_heads:
            raise ConfigurationError("student_heads must divide student_d_model")
        if min(self.d_model, self.student_d_model, self.input_dim) < 2:
            raise ConfigurationError("widths must be >= 2 for layer normalisation")
        if self.similarity_mode not in ("cosine", "inner_product"):
            raise ConfigurationError(
                f"similarity_mode must be 'cosine' or 'inner_product', "
                f"got {self.similarity_mode!r}"
            )

    @property
    def trunk_layers(self) -> int:
        """Leading layers shared by the cross path and the embedding paths."""
        return self.n_layers // 2

    @property
    def path_layers(self) -> int:
        return self.n_layers - self.trunk_layers

    @classmethod
    def production_scale(cls) -> ModelConfig:
        """Production geometry: 2048-d region features, 4 x 768 teacher, 2 x 256 student."""
        return cls(
            input_dim=2048,
            d_model=768,
            n_heads=8,
            n_layers=4,
            student_d_model=256,
            student_heads=8,
            student_layers=2,
        )


@dataclass
class LossConfig(_JsonSection):
    """Margins and weights of the joint objective."""

    margin: float = 0.2
    dual_weight: float = 0.5
    distill_mse_weight: float = 0.3
    distill_weight: float = 0.5

    def __post_init__(self) -> None:
        """Validate ranges."""
        if self.margin <= 0:
            raise ConfigurationError(f"margin must be > 0, got {self.margin}")
        for name in ("dual_weight", "distill_mse_weight", "distill_weight"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")


@dataclass
class NegativeSamplingConfig(_JsonSection):
    """Per-level negative node counts used during training."""

    strategy: str = "geometric"
    alpha: float = 1.4
    base_count: int = 2

    def __post_init__(self) -> None:
        """Validate strategy parameters."""
        if self.strategy not in ("uniform", "arithmetic", "geometric"):
            raise ConfigurationError(f"unknown sampling strategy {self.strategy!r}")
        if self.strategy == "geometric" and self.alpha <= 1:
            raise ConfigurationError(f"geometric sampling needs alpha > 1, got {self.alpha}")
        if self.base_count < 0:
            raise ConfigurationError("base_count must be >= 0")


@dataclass
class CorpusConfig(_JsonSection):
    """Synthetic corpus generation settings."""

    clusters: int = 16
    videos_per_cluster: int = 32
    dim: int = 16
    noise: float = 0.1
    seed: int = 0
    query_words: int = 4
    title_words: int = 4
    n_centroids: int = 8
    raw_boxes_per_video: int = 0
    queries_per_video: int = 2
    latent_scale: float = 3.0
    drop_title: bool = False
    drop_visual: bool = False

    def __post_init__(self) -> None:
        """Validate counts."""
        for name in ("clusters", "videos_per_cluster", "dim", "query_words"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.queries_per_video < 1 or self.n_centroids < 1:
            raise ConfigurationError("queries_per_video and n_centroids must be >= 1")
        if self.title_words < 0 or self.raw_boxes_per_video < 0:
            raise ConfigurationError("token counts must be >= 0")
        if self.raw_boxes_per_video and self.raw_boxes_per_video < self.n_centroids:
            raise ConfigurationError("raw_boxes_per_video must be >= n_centroids")
        if self.drop_title and self.drop_visual:
            raise ConfigurationError("cannot drop both titles and visual tokens")
        if self.drop_visual and self.title_words < 1:
            raise ConfigurationError("title-only corpora need title_words >= 1")

    @property
    def video_count(self) -> int:
        return self.clusters * self.videos_per_cluster


@dataclass
class TrainConfig(_JsonSection):
    """Alternating training schedule and optimizer settings."""

    steps: int = 200
    batch_size: int = 4
    learning_rate: float = 0.05
    momentum: float = 0.9
    optimizer: str = "sgd"
    grad_clip: float = 5.0
    epochs_per_rebuild: int = 1
    rebuild_count: int = 3
    tree_negative_cap: int = 4
    medoid_iterations: int = 20
    seed: int = 0
    log_path: str = ""

    def __post_init__(self) -> None:
        """Validate schedule."""
        if self.steps < 0:
            raise ConfigurationError("steps must be >= 0")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 (the triplet loss needs negatives)")
        if self.epochs_per_rebuild < 1 or self.rebuild_count < 0:
            raise ConfigurationError("epochs_per_rebuild >= 1 and rebuild_count >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class RunConfig(_JsonSection):
    """Everything one command-line run depends on."""

    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    negatives: NegativeSamplingConfig = field(default_factory=NegativeSamplingConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    beam: int = 4
    top_k: int = 5
    scorer: str = "cross"
    workers: int = 1

    SECTIONS: ClassVar[dict[str, type[_JsonSection]]] = {
        "model": ModelConfig,
        "loss": LossConfig,
        "negatives": NegativeSamplingConfig,
        "corpus": CorpusConfig,
        "train": TrainConfig,
    }

    def __post_init__(self) -> None:
        """Validate retrieval settings."""
        if self.beam < 1 or self.top_k < 1 or self.workers < 1:
            raise ConfigurationError("beam, top_k and workers must be >= 1")
        if self.scorer not in ("cross", "student", "embed"):
            raise ConfigurationError(f"unknown scorer {self.scorer!r}")
        if self.corpus.dim != self.model.input_dim:
            raise ConfigurationError(
                f"corpus dim {self.corpus.dim} != model input_dim {self.model.input_dim}"
            )

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RunConfig:
        """Create from a nested dictionary.

        Args:
            data: Dictionary data.

        Returns:
            RunConfig instance.
        """
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"RunConfig: unknown keys {unknown}")
        values = dict(data)
        for name, section in cls.SECTIONS.items():
            raw = values.get(name, {})
            if not isinstance(raw, Mapping):
                raise ConfigurationError(f"section {name!r} must be an object")
            values[name] = section.from_dict(raw)
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigurationError(f"RunConfig: {exc}") from exc

    def with_overrides(self, overrides: Mapping[str, Any]) -> RunConfig:
        """Return a copy with dotted-key overrides applied (``"train.steps"``).

        ``None`` values are ignored, so unset command-line flags never win.
        """
        data = self.to_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            target = data
            *parents, leaf = key.split(".")
            for part in parents:
                if part not in target or not isinstance(target[part], dict):
                    raise ConfigurationError(f"unknown config section in {key!r}")
                target = target[part]
            if leaf not in target:
                raise ConfigurationError(f"unknown config key {key!r}")
            target[leaf] = value
        return RunConfig.from_dict(data)

    def fingerprint(self) -> str:
        """Short stable hash of the resolved configuration."""
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]
