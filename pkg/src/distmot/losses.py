"""Distillation losses and the alpha-blended composite objective.

Both losses are fused ops: forward and backward are written against closed
forms instead of being composed from primitives, which keeps the graphs for
wide embeddings shallow.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, _add_grad, _from_op

LOSS_KINDS = ("cosine", "mse")


def validate_loss_kind(kind: str) -> str:
    if kind not in LOSS_KINDS:
        raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {kind!r}")
    return kind


def cosine_embedding_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean over the batch of 1 - cos(a_i, b_i) for rows of two (batch, d) matrices.

    Ranges over [0, 2]: 0 for parallel rows, 1 for orthogonal, 2 for opposite.
    A zero row has no direction, so it is a domain error rather than a NaN.
    """
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"cosine_embedding_loss expects rank-2 inputs, got {a.shape} and {b.shape}"
        )
    if a.data.shape != b.data.shape:
        raise ShapeError(f"operand shapes {a.data.shape} and {b.data.shape} differ")
    batch = a.data.shape[0]
    na = np.linalg.norm(a.data, axis=1)
    nb = np.linalg.norm(b.data, axis=1)
    for row in range(batch):
        if na[row] == 0.0:
            raise ValueError(f"cosine_embedding_loss: left row {row} is the zero vector")
        if nb[row] == 0.0:
            raise ValueError(f"cosine_embedding_loss: right row {row} is the zero vector")
    dots = (a.data * b.data).sum(axis=1)
    cos = dots / (na * nb)
    loss = (1.0 - cos).mean()

    def backward(g):
        # d cos / d a = b / (|a||b|) - cos * a / |a|^2, and the loss negates
        # and averages over the batch.
        scale = -float(g) / batch
        if a.requires_grad:
            da = b.data / (na * nb)[:, None] - cos[:, None] * a.data / (na ** 2)[:, None]
            _add_grad(a, scale * da)
        if b.requires_grad:
            db = a.data / (na * nb)[:, None] - cos[:, None] * b.data / (nb ** 2)[:, None]
            _add_grad(b, scale * db)

    return _from_op(np.asarray(loss), (a, b), backward)


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"operand shapes {a.data.shape} and {b.data.shape} differ")
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        coeff = 2.0 * float(g) / n
        if a.requires_grad:
            _add_grad(a, coeff * diff)
        if b.requires_grad:
            _add_grad(b, -coeff * diff)

    return _from_op(np.asarray((diff * diff).mean()), (a, b), backward)


def combined_loss(task_loss: Tensor, distill_loss: Tensor, alpha: float) -> Tensor:
    """(1 - alpha) * task + alpha * distill, built from tensor ops so the
    gradient splits linearly between the two branches."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if task_loss.data.size != 1 or distill_loss.data.size != 1:
        raise ShapeError("combined_loss expects scalar inputs")
    return task_loss * (1.0 - alpha) + distill_loss * alpha
