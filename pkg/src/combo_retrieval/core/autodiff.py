"""Dense tensors with define-by-run reverse-mode differentiation.

Every operation computes its forward value eagerly with numpy. When a
:class:`Tape` is active (``with Tape() as tape:``) and at least one input
requires a gradient, the operation also records a node holding the closure
that maps the output gradient to input gradients. :func:`backward` replays
the tape in reverse.

Token sequences use the ``d x T`` layout (one token per column), so
:func:`softmax` and :func:`layer_norm` act along axis 0.
"""

from __future__ import annotations

import contextvars
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass
from types import TracebackType
from typing import Any

import numpy as np
import numpy.typing as npt

from ..utils.errors import ContractError, DimensionError, NumericDomainError

Array = npt.NDArray[np.float64]
BackwardFn = Callable[[Array], tuple[Array | None, ...]]

LAYER_NORM_EPS = 1e-5


class Tensor:
    """A dense block of reals with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(
        self,
        data: npt.ArrayLike,
        requires_grad: bool = False,
        name: str = "",
        dtype: npt.DTypeLike = np.float64,
    ) -> None:
        """Initialize tensor.

        Args:
            data: Values; copied.
            requires_grad: Whether backward should produce a gradient for it.
            name: Optional label used in diagnostics and weight files.
            dtype: Storage type. 64-bit for training, 32-bit allowed at inference.
        """
        self.data: Array = np.array(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: Array, requires_grad: bool) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out.name = ""
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def T(self) -> Tensor:  # noqa: N802
        return transpose(self)

    def item(self) -> float:
        """Return the single value of a one-element tensor."""
        if self.data.size != 1:
            raise ContractError(f"item() needs one element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> Array:
        return self.data

    def detach(self) -> Tensor:
        """Copy without gradient tracking."""
        return Tensor._wrap(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: Tensor | float) -> Tensor:
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    def __radd__(self, other: float) -> Tensor:
        return add_scalar(self, float(other))

    def __sub__(self, other: Tensor | float) -> Tensor:
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other: float) -> Tensor:
        return add_scalar(scale(self, -1.0), float(other))

    def __mul__(self, other: Tensor | float) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other: float) -> Tensor:
        return scale(self, float(other))

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


@dataclass
class TapeNode:
    """One recorded operation."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: BackwardFn


class Tape:
    """Ordered record of operations for one forward pass.

    A tape belongs to the worker that created it; it is never shared.
    """

    def __init__(self) -> None:
        """Initialize an empty tape."""
        self.nodes: list[TapeNode] = []
        self._consumed = False
        self._token: contextvars.Token[Tape | None] | None = None

    def __enter__(self) -> Tape:
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc: BaseException | None,
        tb: TracebackType | None,
    ) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def record(self, node: TapeNode) -> None:
        if self._consumed:
            raise ContractError("cannot record onto a tape after backward; reset it")
        self.nodes.append(node)

    def reset(self) -> None:
        """Forget every node so the tape can be reused."""
        self.nodes.clear()
        self._consumed = False


_ACTIVE_TAPE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar(
    "combo_retrieval_active_tape", default=None
)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def as_tensor(value: Tensor | npt.ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _emit(
    op: str, inputs: tuple[Tensor, ...], data: Array, backward_fn: BackwardFn
) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=track)
    if track:
        assert tape is not None
        tape.record(TapeNode(op, inputs, out, backward_fn))
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(op, a.shape, b.shape)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a 2-D tensor with a 2-D or 1-D tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)
    left, right = a.data, b.data

    def backward(g: Array) -> tuple[Array, Array]:
        if right.ndim == 1:
            return np.outer(g, right), left.T @ g
        return g @ right.T, left.T @ g

    return _emit("matmul", (a, b), left @ right, backward)


def linear_nobias(x: Tensor, weight: Tensor) -> Tensor:
    """Apply ``weight`` to every column of ``x``: ``W · x`` with no bias term.

    Args:
        x: Input of shape ``d_in x n`` (or a single ``d_in`` vector).
        weight: Matrix of shape ``d_out x d_in``.

    Returns:
        Tensor of shape ``d_out x n``.

    Raises:
        DimensionError: Inner dimensions disagree.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.ndim not in (1, 2) or weight.shape[1] != x.shape[0]:
        raise DimensionError("linear_nobias", weight.shape, x.shape)
    return matmul(weight, x)


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError("transpose", a.shape)
    return _emit("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    left, right = a.data, b.data
    return _emit("mul", (a, b), left * right, lambda g: (g * right, g * left))


def scale(a: Tensor, factor: float) -> Tensor:
    return _emit("scale", (a,), a.data * factor, lambda g: (g * factor,))


def add_scalar(a: Tensor, value: float) -> Tensor:
    return _emit("add_scalar", (a,), a.data + value, lambda g: (g,))


def square(a: Tensor) -> Tensor:
    values = a.data
    return _emit("square", (a,), values * values, lambda g: (2.0 * values * g,))


def relu(a: Tensor) -> Tensor:
    """``max(a, 0)``; the subgradient at 0 is 0."""
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Reductions and normalisations
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    return _emit(
        "sum",
        (a,),
        np.asarray(a.data.sum(), dtype=a.data.dtype),
        lambda g: (np.full(shape, float(g), dtype=np.float64),),
    )


def mean_all(a: Tensor) -> Tensor:
    if a.size == 0:
        raise DimensionError("mean", a.shape)
    return scale(sum_all(a), 1.0 / a.size)


def softmax(x: Tensor, axis: int = 0) -> Tensor:
    """Numerically stable softmax along ``axis`` (columns by default).

    Raises:
        NumericDomainError: Input contains NaN or Inf.
        DimensionError: Empty reduction axis.
    """
    x = as_tensor(x)
    values = x.data
    if values.ndim == 0 or values.shape[axis] == 0:
        raise DimensionError("softmax", x.shape)
    if not np.all(np.isfinite(values)):
        raise NumericDomainError("softmax: input contains NaN or Inf")
    shifted = values - values.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / exps.sum(axis=axis, keepdims=True)

    def backward(g: Array) -> tuple[Array]:
        return (probs * (g - (g * probs).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (x,), probs, backward)


def layer_norm(
    x: Tensor, gain: Tensor, shift: Tensor, eps: float = LAYER_NORM_EPS
) -> Tensor:
    """Normalise every column of ``x`` to zero mean and unit variance, then
    apply ``gain`` and ``shift``.

    Args:
        x: Vector of size ``d`` or matrix ``d x T``.
        gain: Per-feature gain, size ``d``.
        shift: Per-feature shift, size ``d``.
        eps: Variance floor.

    Raises:
        DimensionError: ``d < 2`` or gain/shift sizes differ from ``d``.
    """
    x = as_tensor(x)
    if x.ndim not in (1, 2) or x.shape[0] < 2:
        raise DimensionError("layer_norm", x.shape)
    d = x.shape[0]
    if gain.shape != (d,) or shift.shape != (d,):
        raise DimensionError("layer_norm", x.shape, gain.shape, shift.shape)

    cols = x.data.reshape(d, -1)
    centered = cols - cols.mean(axis=0, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=0, keepdims=True) + eps)
    normed = centered * inv_std
    g_col = gain.data[:, None]
    out = (g_col * normed + shift.data[:, None]).reshape(x.data.shape)

    def backward(g: Array) -> tuple[Array, Array, Array]:
        g2 = g.reshape(d, -1)
        d_normed = g2 * g_col
        dx = inv_std * (
            d_normed
            - d_normed.mean(axis=0, keepdims=True)
            - normed * (d_normed * normed).mean(axis=0, keepdims=True)
        )
        return (
            dx.reshape(x.data.shape),
            (g2 * normed).sum(axis=1),
            g2.sum(axis=1),
        )

    return _emit("layer_norm", (x, gain, shift), out, backward)


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of vectors, or of matching columns of two matrices.

    A pair where either side has zero norm yields 0 with zero gradient.

    Returns:
        Scalar for vector inputs, a length-``n`` vector for ``d x n`` inputs.
    """
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("cosine", a, b)
    if a.ndim not in (1, 2):
        raise DimensionError("cosine", a.shape)
    d = a.shape[0]
    left = a.data.reshape(d, -1)
    right = b.data.reshape(d, -1)
    norm_l = np.linalg.norm(left, axis=0)
    norm_r = np.linalg.norm(right, axis=0)
    valid = (norm_l > 0) & (norm_r > 0)
    denom = np.where(valid, norm_l * norm_r, 1.0)
    safe_l = np.where(valid, norm_l, 1.0)
    safe_r = np.where(valid, norm_r, 1.0)
    cos = np.where(valid, (left * right).sum(axis=0) / denom, 0.0)
    out = cos if a.ndim == 2 else np.asarray(cos[0])

    def backward(g: Array) -> tuple[Array, Array]:
        g_row = np.reshape(g, (-1,)) * valid
        grad_l = g_row * (right / denom - cos * left / safe_l**2)
        grad_r = g_row * (left / denom - cos * right / safe_r**2)
        return grad_l.reshape(a.data.shape), grad_r.reshape(b.data.shape)

    return _emit("cosine", (a, b), out, backward)


# ---------------------------------------------------------------------------
# Structural
# ---------------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis``; zero-width parts are allowed."""
    if not tensors:
        raise DimensionError("concat")
    parts = tuple(as_tensor(t) for t in tensors)
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError("concat", *(p.shape for p in parts)) from exc
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g: Array) -> tuple[Array, ...]:
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", parts, data, backward)


def slice_columns(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of a ``d x T`` matrix."""
    if x.ndim != 2 or not 0 <= start <= stop <= x.shape[1]:
        raise DimensionError("slice_columns", x.shape, (start, stop))
    shape = x.data.shape

    def backward(g: Array) -> tuple[Array]:
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _emit("slice_columns", (x,), x.data[:, start:stop].copy(), backward)


def select_column(x: Tensor, index: int) -> Tensor:
    """Column ``index`` of a ``d x T`` matrix as a vector."""
    if x.ndim != 2 or not 0 <= index < x.shape[1]:
        raise DimensionError("select_column", x.shape, (index,))
    shape = x.data.shape

    def backward(g: Array) -> tuple[Array]:
        full = np.zeros(shape)
        full[:, index] = g
        return (full,)

    return _emit("select_column", (x,), x.data[:, index].copy(), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    original = x.data.shape
    try:
        data = x.data.reshape(shape).copy()
    except ValueError as exc:
        raise DimensionError("reshape", x.shape, shape) from exc
    return _emit("reshape", (x,), data, lambda g: (g.reshape(original),))


def stack(scalars: Sequence[Tensor], shape: tuple[int, ...] | None = None) -> Tensor:
    """Assemble one-element tensors into a block of the given shape."""
    parts = tuple(as_tensor(s) for s in scalars)
    for part in parts:
        if part.size != 1:
            raise DimensionError("stack", part.shape)
    target = shape if shape is not None else (len(parts),)
    if int(np.prod(target)) != len(parts):
        raise DimensionError("stack", (len(parts),), target)
    data = np.array([p.data.reshape(-1)[0] for p in parts], dtype=np.float64)
    shapes = [p.data.shape for p in parts]

    def backward(g: Array) -> tuple[Array, ...]:
        flat = g.reshape(-1)
        return tuple(np.full(s, flat[i]) for i, s in enumerate(shapes))

    return _emit("stack", parts, data.reshape(target), backward)


def pick(x: Tensor, index: tuple[int, ...]) -> Tensor:
    """A single entry of ``x`` as a scalar tensor."""
    shape = x.data.shape
    try:
        value = x.data[index]
    except IndexError as exc:
        raise DimensionError("pick", x.shape, index) from exc

    def backward(g: Array) -> tuple[Array]:
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _emit("pick", (x,), np.asarray(value, dtype=np.float64), backward)


def detach(x: Tensor) -> Tensor:
    """Cut the graph: the result carries the values but no gradient path."""
    return x.detach()


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------


def backward(
    tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None
) -> dict[Tensor, Array]:
    """Propagate ``d loss / d ·`` through the tape.

    Args:
        tape: Tape recorded while computing ``loss``.
        loss: One-element tensor to differentiate.
        params: Tensors that must receive a gradient even when disconnected
            from ``loss`` (they get zeros).

    Returns:
        Mapping from every requires-grad leaf tensor to its gradient. The same
        arrays are stored on ``tensor.grad``.

    Raises:
        ContractError: Non-scalar loss, loss not produced on this tape, or the
            tape was already consumed.
    """
    if tape.consumed:
        raise ContractError("backward already ran on this tape; call reset() first")
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    produced = {id(node.output) for node in tape.nodes}
    if id(loss) not in produced and not loss.requires_grad:
        raise ContractError("loss was not produced on this tape")

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data, dtype=np.float64)}
    leaves: dict[int, Tensor] = {}
    if id(loss) not in produced:
        leaves[id(loss)] = loss

    for node in reversed(tape.nodes):
        for tensor in node.inputs:
            if tensor.requires_grad and id(tensor) not in produced:
                leaves.setdefault(id(tensor), tensor)
        upstream = grads.pop(id(node.output), None)
        if upstream is None:
            continue
        for tensor, contribution in zip(
            node.inputs, node.backward_fn(upstream), strict=True
        ):
            if contribution is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            previous = grads.get(key)
            grads[key] = contribution if previous is None else previous + contribution

    result: dict[Tensor, Array] = {}
    for key, tensor in leaves.items():
        grad = grads.get(key)
        tensor.grad = np.zeros_like(tensor.data) if grad is None else grad
        result[tensor] = tensor.grad
    for tensor in params or ():
        if tensor not in result:
            tensor.grad = np.zeros_like(tensor.data)
            result[tensor] = tensor.grad

    tape._consumed = True
    return result


def numeric_gradient(
    fn: Callable[[], Any], tensor: Tensor, index: tuple[int, ...], h: float = 1e-5
) -> float:
    """Central finite difference of ``fn()`` with respect to one entry."""
    original = float(tensor.data[index])
    tensor.data[index] = original + h
    upper = float(np.asarray(_value_of(fn())))
    tensor.data[index] = original - h
    lower = float(np.asarray(_value_of(fn())))
    tensor.data[index] = original
    return (upper - lower) / (2.0 * h)


def _value_of(result: Any) -> Any:
    return result.data if isinstance(result, Tensor) else result
