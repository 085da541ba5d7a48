"""Central finite-difference gradient checker."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tape, Tensor, backward

SUBSAMPLE_THRESHOLD = 10_000
SUBSAMPLE_SIZE = 200


@dataclass
class GradcheckReport:
    max_rel_err: float
    passed: bool
    per_input: list[float] = field(default_factory=list)
    checked: int = 0
    kinks: int = 0

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.kinks} kink crossings skipped)" if self.kinks else ""
        return f"{status} max_rel_err={self.max_rel_err:.3e} over {self.checked} elements{extra}"


def rel_err(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def _scalarize(out: Tensor, proj: np.ndarray | None) -> Tensor:
    if out.ndim == 0:
        return out
    return ops.sum(ops.mul(out, Tensor(proj)))


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
    max_elements: int | None = None,
    skip: Callable[[int, np.ndarray], np.ndarray] | None = None,
    evaluator: Callable[[int], Callable[[], Tensor]] | None = None,
) -> GradcheckReport:
    """Compare tape gradients of ``f`` with central differences.

    Non-scalar outputs are reduced with a fixed random projection so every
    output element contributes. Inputs larger than ``SUBSAMPLE_THRESHOLD``
    elements are checked on a seeded random subset of ``SUBSAMPLE_SIZE``
    (or ``max_elements``) positions. ``skip(i, values)`` may return a boolean
    mask of elements of input ``i`` to leave out, e.g. near a kink.
    Independently, an element is skipped (and counted in ``kinks``) when the
    step +-h flips the sign of any relu input, since the function is then not
    differentiable on the differencing interval.
    ``evaluator(i)`` may supply a cheaper zero-argument function equal to
    ``f(*inputs)`` while only input ``i`` varies (cached prefixes); it is
    checked bitwise against ``f`` before use.
    Failures are reported, never raised.
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradcheck requires float64 inputs")

    probe = f(*inputs)
    proj = None
    if probe.ndim:
        # magnitudes in [0.5, 1.5]: a tiny weight would magnify output round-off
        # in the difference quotient of the elements it multiplies
        proj = rng.uniform(0.5, 1.5, probe.shape) * rng.choice((-1.0, 1.0), probe.shape)

    def evaluate(fn=None) -> tuple[np.ndarray, bytes]:
        with ops.KinkMonitor() as mon:
            out = (fn() if fn is not None else f(*inputs)).data
        return np.array(out, dtype=np.float64), mon.signature()

    def projected_difference(plus: np.ndarray, minus: np.ndarray) -> float:
        # outputs are differenced before projecting (exact for nearby values)
        # and summed exactly, so only the function's own round-off remains
        diff = plus - minus
        return float(diff) if proj is None else math.fsum((diff * proj).ravel())

    saved = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = _scalarize(f(*inputs), proj)
    backward(tape, loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    for t, r in zip(inputs, saved):
        t.requires_grad = r
        t.grad = None

    worst, per_input, checked, kinks = 0.0, [], 0, 0
    for i, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        candidates = np.arange(flat.size)
        if skip is not None:
            candidates = candidates[~skip(i, t.data).reshape(-1)]
        limit = max_elements or (SUBSAMPLE_SIZE if flat.size > SUBSAMPLE_THRESHOLD else None)
        if limit is not None and candidates.size > limit:
            candidates = np.sort(rng.choice(candidates, size=limit, replace=False))
        ga = analytic[i].reshape(-1)
        fn = None
        if evaluator is not None:
            fn = evaluator(i)
            if not np.array_equal(fn().data, f(*inputs).data):
                raise ValueError(f"evaluator for input {i} disagrees with f")
        _, base_sig = evaluate(fn)
        err_i = 0.0
        for j in candidates:
            orig = flat[j]
            flat[j] = orig + h
            step = flat[j] - orig
            fp, sig_p = evaluate(fn)
            flat[j] = orig - h
            step += orig - flat[j]  # the representable step, not 2h
            fm, sig_m = evaluate(fn)
            flat[j] = orig
            if sig_p != base_sig or sig_m != base_sig:
                kinks += 1
                continue
            num = projected_difference(fp, fm) / step
            err_i = max(err_i, float(rel_err(np.float64(ga[j]), np.float64(num))))
        per_input.append(err_i)
        worst = max(worst, err_i)
        checked += int(candidates.size)
    checked -= kinks
    return GradcheckReport(worst, worst < tol, per_input, checked, kinks)
