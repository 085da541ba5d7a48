"""Differentiable tensor operations.

Every function takes and returns :class:`Tensor` and, when a tape is
active and an input requires a gradient, records a closure that maps the
output gradient to one gradient per input.
"""

from __future__ import annotations

import threading

import numpy as np

from . import conv as _conv
from .tensor import ShapeError, Tensor, make_output


class ConfigError(ValueError):
    """Raised for invalid static configuration (groups, kernel size, stride)."""


def _same_shape(op: str, x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"{op}: shapes {x.shape} and {y.shape} differ")


def add(x: Tensor, y: Tensor) -> Tensor:
    _same_shape("add", x, y)
    return make_output("add", x.data + y.data, (x, y), lambda g: (g, g))


def sub(x: Tensor, y: Tensor) -> Tensor:
    _same_shape("sub", x, y)
    return make_output("sub", x.data - y.data, (x, y), lambda g: (g, -g))


def mul(x: Tensor, y: Tensor) -> Tensor:
    _same_shape("mul", x, y)
    xd, yd = x.data, y.data
    return make_output("mul", xd * yd, (x, y), lambda g: (g * yd, g * xd))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return make_output("scale", x.data * c, (x,), lambda g: (g * c,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return make_output("square", xd * xd, (x,), lambda g: (2 * g * xd,))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the numpy name
    shape, dtype = x.shape, x.dtype
    return make_output(
        "sum", np.asarray(x.data.sum(), dtype=dtype), (x,),
        lambda g: (np.broadcast_to(g, shape).astype(dtype),),
    )


def mean(x: Tensor) -> Tensor:
    shape, dtype, n = x.shape, x.dtype, x.size
    return make_output(
        "mean", np.asarray(x.data.mean(), dtype=dtype), (x,),
        lambda g: (np.full(shape, g / n, dtype=dtype),),
    )


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}")
    out = x.data.reshape(shape)
    return make_output("reshape", out, (x,), lambda g: (g.reshape(old),))


_kink_local = threading.local()


class KinkMonitor:
    """Context manager collecting the sign pattern of every relu input evaluated inside it.

    Finite-difference checkers use it to spot steps that cross a kink, where
    the one-sided derivatives differ and a central difference is meaningless.
    """

    def __init__(self) -> None:
        self.patterns: list[bytes] = []

    def __enter__(self) -> "KinkMonitor":
        _kink_local.monitor = self
        return self

    def __exit__(self, *exc) -> None:
        _kink_local.monitor = None

    def signature(self) -> bytes:
        return b"".join(self.patterns)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    monitor = getattr(_kink_local, "monitor", None)
    if monitor is not None:
        monitor.patterns.append(np.packbits(mask).tobytes())
    return make_output("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,),
                       lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ex = np.exp(v[~pos])
    out[~pos] = ex / (1.0 + ex)
    # keep outputs strictly inside (0, 1) even where the dtype rounds to 0 or 1
    info = np.finfo(v.dtype)
    np.clip(out, info.tiny, 1.0 - info.epsneg, out=out)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_output("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """3-D convolution (cross-correlation) with zero padding.

    ``x`` is [N, Cin, D, H, W], ``w`` is [Cout, Cin, k, k, k], ``b`` is [Cout].
    """
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv3d: expected 5-d x and w, got {x.shape} and {w.shape}")
    N, Ci, *spatial = x.shape
    Co, wci, k, k2, k3 = w.shape
    if wci != Ci:
        raise ShapeError(f"conv3d: input has {Ci} channels but weight expects {wci} (w shape {w.shape})")
    if not (k == k2 == k3) or k % 2 == 0:
        raise ConfigError(f"conv3d: kernel must be cubic with odd size, got {w.shape[2:]}")
    if stride not in (1, 2):
        raise ConfigError(f"conv3d: stride must be 1 or 2, got {stride}")
    if not 0 <= pad <= k - 1:
        raise ConfigError(f"conv3d: pad must lie in [0, {k - 1}], got {pad}")
    if b is not None and b.shape != (Co,):
        raise ShapeError(f"conv3d: bias shape {b.shape} does not match {Co} output channels")
    if any(s + 2 * pad < k for s in spatial):
        raise ShapeError(f"conv3d: padded input {spatial} smaller than kernel {k}")
    out_dims = tuple((s + 2 * pad - k) // stride + 1 for s in spatial)
    xp = _conv.pad_spatial(x.data, [(pad, pad)] * 3) if pad else x.data
    wd = w.data
    out = _conv.correlate(xp, wd, stride, out_dims)
    if b is not None:
        out += b.data.reshape(1, Co, 1, 1, 1)

    def backward(g):
        gx = _conv.input_grad(g, wd, stride, pad, tuple(spatial)) if x.requires_grad else None
        gw = _conv.weight_grad(xp, g, stride, k) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return make_output("conv3d", out, inputs, backward)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-group standardisation followed by a per-channel affine map."""
    if x.ndim != 5:
        raise ShapeError(f"group_norm: expected [N,C,D,H,W], got {x.shape}")
    N, C = x.shape[:2]
    if groups <= 0 or C % groups:
        raise ConfigError(f"group_norm: {C} channels not divisible into {groups} groups")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"group_norm: gamma/beta must have shape ({C},)")
    dt = x.dtype
    xg = x.data.reshape(N, groups, -1)
    m = xg.shape[2]
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = (1.0 / np.sqrt(var + dt.type(eps))).astype(dt)
    xhat = (xc * inv).reshape(x.shape)
    gshape = (1, C, 1, 1, 1)
    out = xhat * gamma.data.reshape(gshape) + beta.data.reshape(gshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3, 4))
        gbeta = g.sum(axis=(0, 2, 3, 4))
        dxhat = (g * gamma.data.reshape(gshape)).reshape(N, groups, m)
        xh = xhat.reshape(N, groups, m)
        s1 = dxhat.sum(axis=2, keepdims=True)
        s2 = (dxhat * xh).sum(axis=2, keepdims=True)
        gx = (inv / m) * (m * dxhat - s1 - xh * s2)
        return gx.reshape(x.shape), ggamma, gbeta

    return make_output("group_norm", out, (x, gamma, beta), backward)


def nearest_upsample3d(x: Tensor) -> Tensor:
    """Replicate every voxel into a 2x2x2 block."""
    if x.ndim != 5:
        raise ShapeError(f"nearest_upsample3d: expected [N,C,D,H,W], got {x.shape}")
    N, C, D, H, W = x.shape
    out = np.broadcast_to(
        x.data[:, :, :, None, :, None, :, None], (N, C, D, 2, H, 2, W, 2)
    ).reshape(N, C, 2 * D, 2 * H, 2 * W)

    def backward(g):
        return (g.reshape(N, C, D, 2, H, 2, W, 2).sum(axis=(3, 5, 7)),)

    return make_output("nearest_upsample3d", out, (x,), backward)


def fully_connected(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"fully_connected: cannot multiply {x.shape} by {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"fully_connected: bias shape {b.shape} != ({w.shape[1]},)")
    xd, wd = x.data, w.data
    out = xd @ wd + b.data

    def backward(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return make_output("fully_connected", out, (x, w, b), backward)


def global_avg_pool3d(x: Tensor) -> Tensor:
    if x.ndim != 5:
        raise ShapeError(f"global_avg_pool3d: expected [N,C,D,H,W], got {x.shape}")
    shape = x.shape
    nvox = shape[2] * shape[3] * shape[4]

    def backward(g):
        return (np.broadcast_to((g / nvox)[:, :, None, None, None], shape).astype(g.dtype),)

    return make_output("global_avg_pool3d", x.data.mean(axis=(2, 3, 4)), (x,), backward)
