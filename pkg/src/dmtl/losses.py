"""Segmentation, classification and combined multi-task losses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ops
from .autodiff.tensor import ShapeError, Tensor, make_output

DICE_EPS = 1e-5


@dataclass(frozen=True)
class LossWeights:
    lambda_class: float = 0.3
    epsilon_dice: float = DICE_EPS
    class_weights: tuple[float, ...] = field(default=(1.0, 1.0, 1.0))

    def __post_init__(self) -> None:
        if self.lambda_class < 0:
            raise ValueError(f"lambda_class must be >= 0, got {self.lambda_class}")
        if self.epsilon_dice <= 0:
            raise ValueError("epsilon_dice must be positive")
        if any(w <= 0 for w in self.class_weights):
            raise ValueError(f"class weights must be positive, got {self.class_weights}")


def soft_dice_loss(p_pred: Tensor, p_gt: Tensor, eps: float = DICE_EPS, guard_empty: bool = True) -> Tensor:
    """1 - 2*sum(p*g) / (sum(p^2) + sum(g^2) + eps), summed over the whole batch.

    With ``guard_empty`` the loss is 0 (and has zero gradient) when
    sum(p^2) + sum(g^2) < eps, i.e. both prediction and mask are empty.
    """
    if p_pred.shape != p_gt.shape:
        raise ShapeError(f"soft_dice_loss: prediction {p_pred.shape} vs ground truth {p_gt.shape}")
    p = p_pred.data
    g = p_gt.data.astype(p.dtype, copy=False)
    inter = (p * g).sum()
    sq = (p * p).sum() + (g * g).sum()
    if guard_empty and sq < eps:
        return make_output("soft_dice_loss", np.zeros((), dtype=p.dtype), (p_pred,),
                           lambda gout: (np.zeros_like(p),))
    den = sq + p.dtype.type(eps)
    loss = np.asarray(1 - 2 * inter / den, dtype=p.dtype)

    def backward(gout):
        return (gout * (-2.0) * (g * den - 2.0 * inter * p) / (den * den),)

    return make_output("soft_dice_loss", loss, (p_pred,), backward)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def weighted_cross_entropy(logits: Tensor, labels, class_weights) -> Tensor:
    """Batch mean of w[y] * -log softmax(logits)[y]."""
    z = logits.data
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    w = np.asarray(class_weights, dtype=z.dtype)
    if z.ndim != 2 or z.shape[0] != y.size:
        raise ShapeError(f"weighted_cross_entropy: logits {z.shape} vs {y.size} labels")
    if w.shape != (z.shape[1],):
        raise ShapeError(f"weighted_cross_entropy: {w.size} weights for {z.shape[1]} classes")
    if y.size and (y.min() < 0 or y.max() >= z.shape[1]):
        raise ValueError(f"labels must lie in [0, {z.shape[1] - 1}], got {y.tolist()}")
    n = y.size
    rows = np.arange(n)
    logp = _log_softmax(z)
    wy = w[y]
    loss = np.asarray(-(wy * logp[rows, y]).sum() / n, dtype=z.dtype)

    def backward(gout):
        grad = np.exp(logp)
        grad[rows, y] -= 1
        return (gout * grad * (wy / n)[:, None],)

    return make_output("weighted_cross_entropy", loss, (logits,), backward)


def dmtl_loss(l_seg: Tensor, l_class: Tensor | None, weights: LossWeights) -> Tensor:
    """l_seg + lambda_class * l_class; ``l_class`` may be None for single-task training."""
    if l_class is None:
        return l_seg
    return ops.add(l_seg, ops.scale(l_class, weights.lambda_class))


def inverse_frequency_weights(labels, num_classes: int = 3) -> tuple[float, ...]:
    """Inverse class frequency normalised to mean 1; unseen classes count as one sample."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes).astype(np.float64)
    inv = 1.0 / np.maximum(counts, 1.0)
    inv *= num_classes / inv.sum()
    return tuple(float(v) for v in inv)
