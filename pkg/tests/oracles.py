"""Independent reference implementations used as test oracles."""

from __future__ import annotations

import math

import numpy as np


def dice_loss_reference(p, g, eps: float) -> float:
    """Direct scalar summation of 1 - 2*sum(p*g) / (sum(p^2) + sum(g^2) + eps)."""
    pv = [float(v) for v in np.asarray(p).ravel()]
    gv = [float(v) for v in np.asarray(g).ravel()]
    inter = math.fsum(a * b for a, b in zip(pv, gv))
    sq = math.fsum(a * a for a in pv) + math.fsum(b * b for b in gv)
    return 1.0 - 2.0 * inter / (sq + eps)


def wce_reference(logits, labels, weights) -> float:
    """Per-row log-sum-exp, weighted negative log-likelihood, batch mean."""
    total = []
    for row, y in zip(np.asarray(logits, dtype=float), labels):
        m = max(row)
        lse = m + math.log(math.fsum(math.exp(v - m) for v in row))
        total.append(weights[int(y)] * (lse - row[int(y)]))
    return math.fsum(total) / len(total)


def adam_reference(theta: float, grads, lr=1e-4, b1=0.9, b2=0.999, eps=1e-8) -> float:
    """Textbook scalar Adam over a fixed gradient sequence."""
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return theta
