"""Multi-head self-attention layers over ``d_model x T`` token sequences."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum

import numpy as np

from ..utils.errors import ConfigurationError, DimensionError
from . import autodiff as ad
from .autodiff import LAYER_NORM_EPS, Array, Tensor


class TokenRole(Enum):
    """Origin of a token inside a combined sequence."""

    QUERY_WORD = "q"
    BOX_CENTROID = "b"
    TITLE_WORD = "t"
    CLASS_TOKEN = "c"


@dataclass
class AttentionLayerParams:
    """Learnable weights of one self-attention layer.

    Per head: ``value_proj`` (W_f), ``key_proj`` (W_g) and ``query_proj`` (W_h),
    each ``d_head x d_model``. ``output_proj`` maps the concatenated heads back
    to ``d_model``; ``ln_gain``/``ln_shift`` parameterise the add-and-norm.
    """

    value_proj: list[Tensor]
    key_proj: list[Tensor]
    query_proj: list[Tensor]
    output_proj: Tensor
    ln_gain: Tensor
    ln_shift: Tensor

    def __post_init__(self) -> None:
        """Validate geometry."""
        heads = len(self.query_proj)
        if heads == 0 or len(self.key_proj) != heads or len(self.value_proj) != heads:
            raise ConfigurationError("every projection needs one matrix per head")
        d_head, d_model = self.query_proj[0].shape
        for weight in (*self.value_proj, *self.key_proj, *self.query_proj):
            if weight.shape != (d_head, d_model):
                raise ConfigurationError(
                    f"projection shape {weight.shape} != {(d_head, d_model)}"
                )
        if heads * d_head != d_model:
            raise ConfigurationError(
                f"heads ({heads}) x d_head ({d_head}) must equal d_model ({d_model})"
            )
        if self.output_proj.shape != (d_model, heads * d_head):
            raise ConfigurationError(
                f"output projection shape {self.output_proj.shape} "
                f"!= {(d_model, heads * d_head)}"
            )
        if self.ln_gain.shape != (d_model,) or self.ln_shift.shape != (d_model,):
            raise ConfigurationError("layer-norm gain/shift must have size d_model")

    @property
    def n_heads(self) -> int:
        return len(self.query_proj)

    @property
    def d_model(self) -> int:
        return self.query_proj[0].shape[1]

    @property
    def d_head(self) -> int:
        return self.query_proj[0].shape[0]

    @classmethod
    def initialize(
        cls, d_model: int, n_heads: int, rng: np.random.Generator
    ) -> AttentionLayerParams:
        """Uniform ``[-1/sqrt(d_in), 1/sqrt(d_in)]`` weights, unit gain, zero shift.

        Args:
            d_model: Model width.
            n_heads: Number of heads; must divide ``d_model``.
            rng: Seeded generator.
        """
        if n_heads < 1 or d_model % n_heads:
            raise ConfigurationError(
                f"n_heads ({n_heads}) must divide d_model ({d_model})"
            )
        d_head = d_model // n_heads

        def heads() -> list[Tensor]:
            return [
                uniform_weight((d_head, d_model), rng) for _ in range(n_heads)
            ]

        return cls(
            value_proj=heads(),
            key_proj=heads(),
            query_proj=heads(),
            output_proj=uniform_weight((d_model, d_model), rng),
            ln_gain=Tensor(np.ones(d_model), requires_grad=True),
            ln_shift=Tensor(np.zeros(d_model), requires_grad=True),
        )

    def named_tensors(self, prefix: str) -> list[tuple[str, Tensor]]:
        """Parameters in canonical order, named ``{prefix}.{kind}.{head}``."""
        named: list[tuple[str, Tensor]] = []
        for kind, weights in (
            ("w_f", self.value_proj),
            ("w_g", self.key_proj),
            ("w_h", self.query_proj),
        ):
            named.extend((f"{prefix}.{kind}.{h}", w) for h, w in enumerate(weights))
        named.append((f"{prefix}.w_o", self.output_proj))
        named.append((f"{prefix}.ln_gain", self.ln_gain))
        named.append((f"{prefix}.ln_shift", self.ln_shift))
        return named


@dataclass
class HiddenSequence:
    """Token matrix (``d_model x T``) with one role tag per column."""

    tokens: Tensor
    roles: tuple[TokenRole, ...]

    def __post_init__(self) -> None:
        """Validate the tag count."""
        if self.tokens.ndim != 2:
            raise DimensionError("HiddenSequence", self.tokens.shape)
        if self.tokens.shape[1] < 1:
            raise DimensionError("HiddenSequence", self.tokens.shape)
        if len(self.roles) != self.tokens.shape[1]:
            raise DimensionError(
                "HiddenSequence", self.tokens.shape, (len(self.roles),)
            )

    @property
    def length(self) -> int:
        return self.tokens.shape[1]

    @property
    def d_model(self) -> int:
        return self.tokens.shape[0]

    def count(self, role: TokenRole) -> int:
        return sum(1 for r in self.roles if r is role)


def uniform_weight(shape: tuple[int, int], rng: np.random.Generator) -> Tensor:
    """Trainable matrix drawn from ``U[-1/sqrt(d_in), 1/sqrt(d_in)]``."""
    bound = 1.0 / math.sqrt(shape[1])
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def sinusoidal_positions(count: int, dim: int) -> Array:
    """``dim x count`` sinusoidal position codes (sin on even rows, cos on odd)."""
    positions = np.arange(count, dtype=np.float64)[None, :]
    rows = np.arange(dim)[:, None]
    rates = 1.0 / np.power(10000.0, (2 * (rows // 2)) / dim)
    angles = positions * rates
    return np.where(rows % 2 == 0, np.sin(angles), np.cos(angles))


def project_qkv(
    x: HiddenSequence, params: AttentionLayerParams
) -> list[tuple[Tensor, Tensor, Tensor]]:
    """Per-head query, key and value projections.

    Returns:
        One ``(Q, K, V)`` triple per head, each ``d_head x T`` with columns in
        token order.

    Raises:
        ConfigurationError: Sequence width differs from the layer width.
    """
    if x.d_model != params.d_model:
        raise ConfigurationError(
            f"sequence width {x.d_model} != layer width {params.d_model}"
        )
    return [
        (
            ad.linear_nobias(x.tokens, w_h),
            ad.linear_nobias(x.tokens, w_g),
            ad.linear_nobias(x.tokens, w_f),
        )
        for w_h, w_g, w_f in zip(
            params.query_proj, params.key_proj, params.value_proj, strict=True
        )
    ]


def attention_weights(
    queries: Tensor, keys: Tensor, scaled_logits: bool = False
) -> Tensor:
    """``T x T`` matrix whose column ``j`` is ``softmax(K^T q_j)``."""
    logits = ad.matmul(ad.transpose(keys), queries)
    if scaled_logits:
        logits = ad.scale(logits, 1.0 / math.sqrt(keys.shape[0]))
    return ad.softmax(logits, axis=0)


def attention_layer(
    x: HiddenSequence,
    params: AttentionLayerParams,
    scaled_logits: bool = False,
    eps: float = LAYER_NORM_EPS,
) -> HiddenSequence:
    """One self-attention layer with residual add-and-norm.

    For each token ``j`` and head: ``a_j = softmax(K^T q_j)``, ``f_j = V a_j``;
    heads are concatenated, projected by ``W_o``, added to ``x_j`` and layer
    normalised. Role tags pass through unchanged.
    """
    pooled = [
        ad.matmul(values, attention_weights(queries, keys, scaled_logits))
        for queries, keys, values in project_qkv(x, params)
    ]
    merged = pooled[0] if len(pooled) == 1 else ad.concat(pooled, axis=0)
    mixed = ad.linear_nobias(merged, params.output_proj)
    out = ad.layer_norm(ad.add(x.tokens, mixed), params.ln_gain, params.ln_shift, eps)
    return HiddenSequence(out, x.roles)


def run_layers(
    x: HiddenSequence,
    layers: Sequence[AttentionLayerParams],
    scaled_logits: bool = False,
    eps: float = LAYER_NORM_EPS,
) -> HiddenSequence:
    """Apply a stack of attention layers in order."""
    for layer in layers:
        x = attention_layer(x, layer, scaled_logits, eps)
    return x
