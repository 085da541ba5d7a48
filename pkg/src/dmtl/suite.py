"""Float64 gradient-check suite over every differentiable op, block and the full model."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import blocks
from .autodiff import conv as _conv
from .autodiff import ops
from .autodiff.checker import GradcheckReport, gradcheck
from .autodiff.tensor import Tensor
from .losses import LossWeights, dmtl_loss, soft_dice_loss, weighted_cross_entropy
from .model import ModelConfig, build_model, forward_stages, output_of, run_stages

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    report: GradcheckReport
    seconds: float


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale)


def randomized_model(config: ModelConfig, seed: int = 0, scale: float = 0.05):
    """Float64 model whose every parameter (zero-initialised ones included) is random.

    The added noise is kept small so the sigmoid output stays out of saturation,
    where gradients shrink below finite-difference resolution.
    """
    model = build_model(config, seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for p in model.params.values():
        p.data[...] = p.data + scale * rng.standard_normal(p.shape)
    return model


def model_loss_fn(model, x: np.ndarray, mask: np.ndarray, labels, weights: LossWeights):
    """dMTL loss as a function of every parameter tensor, plus a cached evaluator.

    The evaluator for a parameter recomputes only the graph nodes downstream of
    the node owning it, reusing the unperturbed activations elsewhere.
    """
    names = list(model.params)
    stages = forward_stages(model.config)
    xt, mt = Tensor(x), Tensor(mask)

    def loss_of(values):
        out = output_of(values)
        l_seg = soft_dice_loss(out.seg_prob, mt, weights.epsilon_dice)
        l_cls = None
        if out.class_logits is not None:
            l_cls = weighted_cross_entropy(out.class_logits, labels, weights.class_weights)
        return dmtl_loss(l_seg, l_cls, weights)

    def f(*tensors):
        return loss_of(run_stages(stages, dict(zip(names, tensors)), {"x": xt}))

    inputs = [model.params[n].tensor for n in names]

    def evaluator(i):
        params = dict(zip(names, inputs))
        base = run_stages(stages, params, {"x": xt})
        owner = next(k for k, st in enumerate(stages) if names[i].startswith(st.prefixes))
        dirty = {stages[owner].output}
        todo = [stages[owner]]
        for st in stages[owner + 1:]:
            if dirty.intersection(st.inputs):
                dirty.add(st.output)
                todo.append(st)
        return lambda: loss_of(run_stages(todo, params, dict(base)))

    return f, inputs, evaluator


def _relu_skip(i, values):
    return np.abs(values) < 1e-3


def op_checks(seed: int = 0):
    """(name, f, inputs, skip) tuples for every primitive op and block."""
    rng = np.random.default_rng(seed)
    checks = []
    for backend in _conv.BACKENDS:
        for stride in (1, 2):
            def f(x, w, b, stride=stride, backend=backend):
                prev = _conv.get_backend()
                _conv.set_backend(backend)
                try:
                    return ops.conv3d(x, w, b, stride, 1)
                finally:
                    _conv.set_backend(prev)
            checks.append((f"conv3d[{backend},stride={stride}]", f,
                           [_t(rng, 2, 3, 6, 6, 4), _t(rng, 4, 3, 3, 3, 3), _t(rng, 4)], None))
    checks.append(("conv3d[1x1x1]", lambda x, w, b: ops.conv3d(x, w, b, 1, 0),
                   [_t(rng, 2, 4, 4, 4, 4), _t(rng, 3, 4, 1, 1, 1), _t(rng, 3)], None))
    checks.append(("relu", ops.relu, [_t(rng, 3, 5, 4)], _relu_skip))
    checks.append(("sigmoid", ops.sigmoid, [_t(rng, 3, 5, 4, scale=3.0)], None))
    checks.append(("group_norm", lambda x, g, b: ops.group_norm(x, g, b, 2),
                   [_t(rng, 2, 4, 3, 3, 2), _t(rng, 4), _t(rng, 4)], None))
    checks.append(("nearest_upsample3d", ops.nearest_upsample3d, [_t(rng, 2, 2, 2, 3, 2)], None))
    checks.append(("fully_connected", ops.fully_connected, [_t(rng, 3, 5), _t(rng, 5, 4), _t(rng, 4)], None))
    checks.append(("global_avg_pool3d", ops.global_avg_pool3d, [_t(rng, 2, 3, 3, 2, 4)], None))
    checks.append(("add", ops.add, [_t(rng, 3, 4), _t(rng, 3, 4)], None))
    mask = (rng.random((2, 1, 3, 3, 3)) < 0.4).astype(np.float64)
    checks.append(("soft_dice_loss", lambda p: soft_dice_loss(p, Tensor(mask)),
                   [Tensor(rng.uniform(0.05, 0.95, (2, 1, 3, 3, 3)))], None))
    labels = rng.integers(0, 3, size=5)
    checks.append(("weighted_cross_entropy",
                   lambda z: weighted_cross_entropy(z, labels, (0.5, 1.0, 2.0)), [_t(rng, 5, 3)], None))

    cfg = blocks.ResNetBlockConfig(4, 2)
    rb = {k: Tensor(v + 0.3 * rng.standard_normal(v.shape))
          for k, v in blocks.init_resnet_block(blocks.Initializer(seed, np.float64), "b", cfg).items()}
    rb_names = list(rb)
    checks.append(("resnet_block",
                   lambda x, *ps: blocks.resnet_block(x, blocks.scope(dict(zip(rb_names, ps)), "b"), cfg),
                   [_t(rng, 2, 4, 4, 4, 4)] + [rb[n] for n in rb_names], None))
    checks.append(("downsample_step",
                   lambda x, w, b: blocks.downsample_step(x, {"conv.weight": w, "conv.bias": b}),
                   [_t(rng, 2, 2, 4, 4, 4), _t(rng, 4, 2, 3, 3, 3, scale=0.5), _t(rng, 4)], None))
    up = {k: Tensor(v + 0.3 * rng.standard_normal(v.shape))
          for k, v in blocks.init_upsample(blocks.Initializer(seed, np.float64), "u", 4).items()}
    up_names = list(up)
    checks.append(("upsample_step",
                   lambda x, s, *ps: blocks.upsample_step(x, s, blocks.scope(dict(zip(up_names, ps)), "u")),
                   [_t(rng, 1, 4, 2, 2, 2), _t(rng, 1, 2, 4, 4, 4)] + [up[n] for n in up_names], None))
    ch = {k: Tensor(v + 0.3 * rng.standard_normal(v.shape))
          for k, v in blocks.init_class_head(blocks.Initializer(seed, np.float64), "c",
                                             blocks.ClassHeadConfig(4, 6)).items()}
    ch_names = list(ch)
    checks.append(("class_head",
                   lambda x, *ps: blocks.class_head(x, blocks.scope(dict(zip(ch_names, ps)), "c")),
                   [_t(rng, 2, 4, 2, 2, 2)] + [ch[n] for n in ch_names], None))
    return checks


def end_to_end_check(max_elements: int | None = None, seed: int = 0) -> GradcheckReport:
    """Every parameter of a tiny float64 model (stages=2, 4 filters, 8^3 input)."""
    cfg = ModelConfig(init_filters=4, stages=2)
    model = randomized_model(cfg, seed)
    rng = np.random.default_rng(seed + 2)
    # batch of one keeps the ~57k finite-difference evaluations inside the time budget
    x = rng.standard_normal((1, 1, 8, 8, 8))
    mask = (rng.random((1, 1, 8, 8, 8)) < 0.3).astype(np.float64)
    f, inputs, evaluator = model_loss_fn(model, x, mask, np.array([2]), LossWeights(0.3, 1e-5, (1.0, 1.5, 0.5)))
    return gradcheck(f, inputs, tol=TOLERANCE, seed=seed, max_elements=max_elements, evaluator=evaluator)


def run_suite(scale: str = "tiny", tol: float = TOLERANCE, e2e_max_elements: int | None = None,
              seed: int = 0) -> list[CheckResult]:
    if scale != "tiny":
        raise ValueError(f"only the 'tiny' scale is defined, got {scale!r}")
    results = []
    for name, f, inputs, skip in op_checks(seed):
        t0 = time.perf_counter()
        rep = gradcheck(f, inputs, tol=tol, seed=seed, skip=skip)
        results.append(CheckResult(name, rep, time.perf_counter() - t0))
    t0 = time.perf_counter()
    rep = end_to_end_check(e2e_max_elements, seed)
    rep.passed = rep.max_rel_err < tol
    results.append(CheckResult("dmtl_model[end-to-end]", rep, time.perf_counter() - t0))
    return results
