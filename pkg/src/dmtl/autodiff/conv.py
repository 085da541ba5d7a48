"""3-D cross-correlation kernels.

Every backend computes the same primitives:

* ``correlate``      out[n,o] = sum_c,a w[o,c,a] * xp[n,c, s*p + a]
* ``weight_grad``    gw[o,c,a] = sum_n,p g[n,o,p] * xp[n,c, s*p + a]

where ``xp`` is the already zero-padded input. For stride 1 the input
gradient is a ``correlate`` of the re-padded output gradient with the
flipped, channel-transposed kernel. For stride 2 it is a col2im scatter,
or (``loop`` backend) the same correlation on a zero-dilated gradient.

Backends (all pass the same gradient checks):

``loop``    explicit numba loop nest (stride 1); best when Cin*Cout is tiny,
            e.g. the single-channel stem.
``im2col``  copies every receptive field into a column matrix and calls one
            GEMM; used for stride 2.
``gemm``    "implicit im2col": the output is computed on the padded grid,
            flattened, so each kernel tap is one GEMM against a shifted view
            of the input and no column buffer is materialised. Rows that land
            in the padding are discarded afterwards. Default for stride 1.
"""

from __future__ import annotations

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Crossover measured on a single core: below this Cin*Cout the loop nest
# beats per-tap GEMMs, whose outer products are too thin for BLAS.
LOOP_MAX_CHANNEL_PRODUCT = 32
LOOP_MIN_WIDTH = 16
SMALL_WIDTH = 12

BACKENDS = ("loop", "im2col", "gemm")
_backend_override: str | None = None


def set_backend(name: str | None) -> None:
    """Force one backend for every stride-1 call, or ``None`` for automatic choice."""
    global _backend_override
    if name is not None and name not in BACKENDS:
        raise ValueError(f"unknown conv backend {name!r}")
    _backend_override = name


def get_backend() -> str | None:
    return _backend_override


def pad_spatial(a: np.ndarray, widths) -> np.ndarray:
    """Zero-pad the last three axes by ``(lo, hi)`` pairs (cheaper than np.pad)."""
    (a0, a1), (b0, b1), (c0, c1) = widths
    D, H, W = a.shape[-3:]
    out = np.zeros(a.shape[:-3] + (D + a0 + a1, H + b0 + b1, W + c0 + c1), dtype=a.dtype)
    out[..., a0:a0 + D, b0:b0 + H, c0:c0 + W] = a
    return out


def _choose(cin: int, cout: int, stride: int, width: int, grad: bool = False) -> str:
    if stride != 1:
        return "im2col"
    if _backend_override is not None:
        return _backend_override
    if width < SMALL_WIDTH:
        # tiny grids: one GEMM over a small column buffer beats per-tap calls
        return "im2col"
    # thin outer products (few output channels per input) favour the loop nest
    if not grad and width >= LOOP_MIN_WIDTH and (cin * cout < 16 or (cout < cin and cin * cout <= LOOP_MAX_CHANNEL_PRODUCT)):
        return "loop"
    return "gemm"


@numba.njit(cache=True)
def _correlate_loop(xp, w, out):
    # stride 1 only: unit-stride inner loop so LLVM can vectorise it
    N, Ci = xp.shape[0], xp.shape[1]
    Co, K = w.shape[0], w.shape[2]
    D, H, W = out.shape[2], out.shape[3], out.shape[4]
    for n in range(N):
        for o in range(Co):
            acc = out[n, o]
            for c in range(Ci):
                xc = xp[n, c]
                for a in range(K):
                    for b in range(K):
                        for e in range(K):
                            wv = w[o, c, a, b, e]
                            for d in range(D):
                                for h in range(H):
                                    row = xc[d + a, h + b, e:e + W]
                                    arow = acc[d, h]
                                    for x in range(W):
                                        arow[x] += wv * row[x]


@numba.njit(cache=True)
def _weight_grad_loop(xp, g, K, gw):
    N, Ci = xp.shape[0], xp.shape[1]
    Co = g.shape[1]
    D, H, W = g.shape[2], g.shape[3], g.shape[4]
    lanes = np.zeros(W, dtype=gw.dtype)
    for o in range(Co):
        for c in range(Ci):
            for a in range(K):
                for b in range(K):
                    for e in range(K):
                        # per-lane partial sums keep the inner loop vectorisable
                        lanes[:] = 0
                        for n in range(N):
                            gn = g[n, o]
                            xc = xp[n, c]
                            for d in range(D):
                                for h in range(H):
                                    grow = gn[d, h]
                                    row = xc[d + a, h + b, e:e + W]
                                    for x in range(W):
                                        lanes[x] += grow[x] * row[x]
                        gw[o, c, a, b, e] = lanes.sum()


def _im2col(xp: np.ndarray, k: int, stride: int, out_dims: tuple[int, int, int]) -> np.ndarray:
    N, C = xp.shape[:2]
    D, H, W = out_dims
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    win = win[:, :, :stride * (D - 1) + 1:stride, :stride * (H - 1) + 1:stride, :stride * (W - 1) + 1:stride]
    # one contiguous copy: [N, C, a, b, e, D, H, W]
    return np.ascontiguousarray(win.transpose(0, 1, 5, 6, 7, 2, 3, 4)).reshape(N, C * k**3, D * H * W)


def _flat_geometry(xp: np.ndarray, k: int):
    Dp, Hp, Wp = xp.shape[2:]
    D, H, W = Dp - k + 1, Hp - k + 1, Wp - k + 1
    span = (D - 1) * Hp * Wp + (H - 1) * Wp + W
    offsets = [(a, b, e, a * Hp * Wp + b * Wp + e) for a in range(k) for b in range(k) for e in range(k)]
    return (D, H, W), span, offsets


def _correlate_gemm(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    N, Ci = xp.shape[:2]
    Co, k = w.shape[0], w.shape[2]
    (D, H, W), span, offsets = _flat_geometry(xp, k)
    Hp, Wp = xp.shape[3], xp.shape[4]
    xf = xp.reshape(N, Ci, -1)
    wt = np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1))
    out = np.zeros((N, Co, D * Hp * Wp), dtype=xp.dtype)
    tmp = np.empty((Co, span), dtype=xp.dtype)
    for n in range(N):
        acc = out[n, :, :span]
        for a, b, e, off in offsets:
            np.matmul(wt[a, b, e], xf[n, :, off:off + span], out=tmp)
            acc += tmp
    return out.reshape(N, Co, D, Hp, Wp)[:, :, :, :H, :W]


def _weight_grad_gemm(xp: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    N, Ci = xp.shape[:2]
    Co = g.shape[1]
    (D, H, W), span, offsets = _flat_geometry(xp, k)
    Hp, Wp = xp.shape[3], xp.shape[4]
    gp = np.zeros((N, Co, D, Hp, Wp), dtype=g.dtype)
    gp[:, :, :, :H, :W] = g
    gf = gp.reshape(N, Co, -1)[:, :, :span]
    xf = xp.reshape(N, Ci, -1)
    gw = np.empty((Co, Ci, k, k, k), dtype=xp.dtype)
    for a, b, e, off in offsets:
        acc = gf[0] @ xf[0, :, off:off + span].T
        for n in range(1, N):
            acc += gf[n] @ xf[n, :, off:off + span].T
        gw[:, :, a, b, e] = acc
    return gw


def correlate(xp: np.ndarray, w: np.ndarray, stride: int, out_dims: tuple[int, int, int],
              backend: str | None = None) -> np.ndarray:
    N = xp.shape[0]
    Co, Ci, k = w.shape[0], w.shape[1], w.shape[2]
    backend = backend or _choose(Ci, Co, stride, out_dims[2])
    if stride == 1 and backend == "loop":
        out = np.zeros((N, Co) + tuple(out_dims), dtype=xp.dtype)
        _correlate_loop(np.ascontiguousarray(xp), np.ascontiguousarray(w), out)
        return out
    if stride == 1 and backend == "gemm":
        return _correlate_gemm(np.ascontiguousarray(xp), w)
    cols = _im2col(xp, k, stride, out_dims)
    out = np.matmul(w.reshape(Co, -1), cols)
    return out.reshape((N, Co) + tuple(out_dims))


def weight_grad(xp: np.ndarray, g: np.ndarray, stride: int, k: int,
                backend: str | None = None) -> np.ndarray:
    N, Ci = xp.shape[:2]
    Co = g.shape[1]
    backend = backend or _choose(Ci, Co, stride, g.shape[4], grad=True)
    if stride == 1 and backend == "loop":
        gw = np.empty((Co, Ci, k, k, k), dtype=xp.dtype)
        _weight_grad_loop(np.ascontiguousarray(xp), np.ascontiguousarray(g), k, gw)
        return gw
    if stride == 1 and backend == "gemm":
        return _weight_grad_gemm(np.ascontiguousarray(xp), g, k)
    cols = _im2col(xp, k, stride, g.shape[2:])
    gm = g.reshape(N, Co, -1)
    gw = gm[0] @ cols[0].T
    for n in range(1, N):
        gw += gm[n] @ cols[n].T
    return gw.reshape(Co, Ci, k, k, k)


def _input_grad_col2im(g: np.ndarray, w: np.ndarray, stride: int, pad: int,
                       in_dims: tuple[int, int, int]) -> np.ndarray:
    N, Co = g.shape[:2]
    Ci, k = w.shape[1], w.shape[2]
    D, H, W = g.shape[2:]
    cols = np.matmul(w.reshape(Co, -1).T, g.reshape(N, Co, -1)).reshape(N, Ci, k, k, k, D, H, W)
    padded = tuple(s + 2 * pad for s in in_dims)
    gxp = np.zeros((N, Ci) + padded, dtype=g.dtype)
    for a in range(k):
        for b in range(k):
            for e in range(k):
                gxp[:, :,
                    a:a + stride * (D - 1) + 1:stride,
                    b:b + stride * (H - 1) + 1:stride,
                    e:e + stride * (W - 1) + 1:stride] += cols[:, :, a, b, e]
    return gxp[(slice(None), slice(None)) + tuple(slice(pad, pad + s) for s in in_dims)]


def input_grad(g: np.ndarray, w: np.ndarray, stride: int, pad: int,
               in_dims: tuple[int, int, int], backend: str | None = None) -> np.ndarray:
    """Gradient w.r.t. the unpadded input of a padded, strided correlation.

    Strided convolutions scatter column gradients back (col2im); stride 1
    reuses ``correlate`` on the re-padded gradient with the flipped kernel.
    """
    N, Co = g.shape[:2]
    k = w.shape[2]
    if stride > 1 and (backend or _backend_override) != "loop":
        return np.ascontiguousarray(_input_grad_col2im(g, w, stride, pad, in_dims))
    if stride > 1:
        dil = tuple((s - 1) * stride + 1 for s in g.shape[2:])
        gd = np.zeros((N, Co) + dil, dtype=g.dtype)
        gd[:, :, ::stride, ::stride, ::stride] = g
    else:
        gd = g
    lo = k - 1 - pad
    widths = [(lo, size_in + k - 1 - size_d - lo) for size_in, size_d in zip(in_dims, gd.shape[2:])]
    gp = pad_spatial(gd, widths)
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    return correlate(gp, wt, 1, tuple(in_dims), backend=backend)
