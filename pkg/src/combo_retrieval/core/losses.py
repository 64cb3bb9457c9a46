"""Triplet, dual-path, distillation and total objectives."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from ..utils.errors import InputError
from . import autodiff as ad
from .autodiff import Tensor
from .scoring import ScoreMatrix


def _broadcast_rows(values: Tensor, size: int) -> Tensor:
    """``size x size`` matrix whose row ``k`` is filled with ``values[k]``."""
    column = ad.reshape(values, (size, 1))
    return ad.matmul(column, Tensor(np.ones((1, size))))


def triplet_loss(scores: ScoreMatrix, margin: float) -> Tensor:
    """Bidirectional hinge triplet loss over a minibatch score matrix.

    ``sum_k sum_{j!=k} [m - s(k,k) + s(k,j)]_+ + [m - s(k,k) + s(j,k)]_+``

    Args:
        scores: ``K x K`` scores with ground-truth pairs on the diagonal.
        margin: Hinge margin ``m``.

    Raises:
        InputError: Fewer than two pairs, so no negatives exist.
    """
    size = scores.size
    if size < 2:
        raise InputError(f"triplet loss needs at least 2 pairs, got {size}")
    values = scores.values
    eye = np.eye(size)
    diagonal = ad.matmul(ad.mul(values, Tensor(eye)), Tensor(np.ones(size)))
    positives = _broadcast_rows(diagonal, size)
    off_diagonal = Tensor(1.0 - eye)

    def block(candidates: Tensor) -> Tensor:
        hinge = ad.relu(ad.add_scalar(ad.sub(candidates, positives), margin))
        return ad.sum_all(ad.mul(hinge, off_diagonal))

    return ad.add(block(values), block(ad.transpose(values)))


def node_triplet_loss(
    positive: Tensor, negatives: Sequence[Tensor], margin: float
) -> Tensor:
    """Hinge terms ``[m - s_pos + s_neg]_+`` for tree-sampled negative nodes."""
    if not negatives:
        return Tensor(0.0)
    ones = Tensor(np.ones((len(negatives), 1)))
    repeated = ad.matmul(ones, ad.reshape(positive, (1,)))
    shifted = ad.sub(ad.stack(list(negatives)), repeated)
    return ad.sum_all(ad.relu(ad.add_scalar(shifted, margin)))


def dual_loss(cross: Tensor, embed: Tensor, dual_weight: float) -> Tensor:
    """``L_cross + lambda * L_embed``."""
    return ad.add(ad.as_tensor(cross), ad.scale(ad.as_tensor(embed), dual_weight))


def distill_loss(
    student_triplet: Tensor,
    teacher_scores: Tensor,
    student_scores: Tensor,
    mse_weight: float,
) -> Tensor:
    """``L_cross_std + gamma * mean((teacher - student)^2)``.

    Teacher scores are detached: no gradient reaches the teacher through this
    term.

    Raises:
        InputError: Score vectors are empty or differ in length.
    """
    teacher = ad.detach(ad.as_tensor(teacher_scores))
    student = ad.as_tensor(student_scores)
    if teacher.size == 0 or teacher.shape != student.shape:
        raise InputError(
            f"distillation needs matching non-empty score vectors, "
            f"got {teacher.shape} and {student.shape}"
        )
    mse = ad.mean_all(ad.square(ad.sub(teacher, student)))
    return ad.add(ad.as_tensor(student_triplet), ad.scale(mse, mse_weight))


def total_loss(dual: Tensor, distill: Tensor, distill_weight: float) -> Tensor:
    """``L_dual + beta * L_distill``."""
    return ad.add(ad.as_tensor(dual), ad.scale(ad.as_tensor(distill), distill_weight))
