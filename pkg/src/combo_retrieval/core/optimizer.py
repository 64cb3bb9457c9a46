"""Gradient-descent optimizers over :class:`~.autodiff.Tensor` parameters."""

from __future__ import annotations

from abc import ABC, abstractmethod
from collections.abc import Mapping, Sequence

import numpy as np

from ..utils.errors import ConfigurationError
from .autodiff import Array, Tensor


class Optimizer(ABC):
    """Updates parameter tensors in place. Single writer only."""

    def __init__(self, params: Sequence[Tensor], learning_rate: float) -> None:
        """Initialize optimizer.

        Args:
            params: Tensors to update.
            learning_rate: Step size.
        """
        if learning_rate <= 0:
            raise ConfigurationError(f"learning rate must be > 0, got {learning_rate}")
        self.params = list(params)
        self.learning_rate = learning_rate
        self.steps = 0

    def step(self, grads: Mapping[Tensor, Array]) -> None:
        """Apply one update from a gradient map; missing entries count as zero."""
        self.steps += 1
        for param in self.params:
            grad = grads.get(param)
            if grad is None:
                continue
            self._update(param, grad)

    @abstractmethod
    def _update(self, param: Tensor, grad: Array) -> None: ...


class SGD(Optimizer):
    """Stochastic gradient descent with heavy-ball momentum."""

    def __init__(
        self, params: Sequence[Tensor], learning_rate: float, momentum: float = 0.9
    ) -> None:
        super().__init__(params, learning_rate)
        if not 0.0 <= momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {momentum}")
        self.momentum = momentum
        self._velocity: dict[int, Array] = {}

    def _update(self, param: Tensor, grad: Array) -> None:
        velocity = self._velocity.get(id(param))
        velocity = grad.copy() if velocity is None else self.momentum * velocity + grad
        self._velocity[id(param)] = velocity
        param.data -= self.learning_rate * velocity


class Adam(Optimizer):
    """Adaptive-moment optimizer."""

    def __init__(
        self,
        params: Sequence[Tensor],
        learning_rate: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        super().__init__(params, learning_rate)
        self.betas = betas
        self.eps = eps
        self._first: dict[int, Array] = {}
        self._second: dict[int, Array] = {}

    def _update(self, param: Tensor, grad: Array) -> None:
        beta1, beta2 = self.betas
        key = id(param)
        first = beta1 * self._first.get(key, np.zeros_like(grad)) + (1 - beta1) * grad
        second = beta2 * self._second.get(key, np.zeros_like(grad)) + (
            1 - beta2
        ) * (grad * grad)
        self._first[key] = first
        self._second[key] = second
        first_hat = first / (1 - beta1**self.steps)
        second_hat = second / (1 - beta2**self.steps)
        param.data -= self.learning_rate * first_hat / (np.sqrt(second_hat) + self.eps)


def clip_grad_norm(grads: dict[Tensor, Array], max_norm: float) -> float:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``.

    Args:
        grads: Gradient map, modified in place.
        max_norm: Norm ceiling; ``<= 0`` disables clipping.

    Returns:
        The norm before clipping.
    """
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for tensor, grad in grads.items():
            grads[tensor] = grad * factor
    return total


def build_optimizer(
    name: str, params: Sequence[Tensor], learning_rate: float, momentum: float
) -> Optimizer:
    """Create the optimizer named in the training config."""
    if name == "sgd":
        return SGD(params, learning_rate, momentum)
    if name == "adam":
        return Adam(params, learning_rate)
    raise ConfigurationError(f"unknown optimizer {name!r}; expected 'sgd' or 'adam'")
