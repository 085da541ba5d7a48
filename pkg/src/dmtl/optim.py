"""Adam and the task-weight grid search."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .autodiff.tensor import Parameter, ShapeError


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, applied in place to ``params``."""
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} vs parameter {theta.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        dt = theta.dtype.type
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * (g * g)
        mhat = m / dt(bc1)
        vhat = v / dt(bc2)
        theta -= dt(state.lr) * mhat / (np.sqrt(vhat) + dt(state.eps))


def step_parameters(params: Mapping[str, Parameter], state: AdamState) -> None:
    adam_step({n: p.data for n, p in params.items()},
              {n: p.grad for n, p in params.items()}, state)


def grid_search_lambda(
    candidates: Sequence[float],
    trainer: Callable[[float], float],
) -> tuple[float, dict[float, float]]:
    """Return the candidate with the highest validation dice (ties go to the smaller λ).

    ``trainer(lam)`` runs a short seeded training and returns validation dice;
    it must reseed itself identically for every call.
    """
    if not candidates:
        raise ValueError("grid_search_lambda needs at least one candidate")
    scores = {float(lam): float(trainer(float(lam))) for lam in candidates}
    best = min(scores, key=lambda lam: (-scores[lam], lam))
    return best, scores


DEFAULT_LAMBDA_GRID: tuple[float, ...] = (0.1, 0.2, 0.3, 0.5, 1.0)
