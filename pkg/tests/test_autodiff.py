from __future__ import annotations

import numpy as np
import pytest

from dmtl.autodiff import conv as _conv
from dmtl.autodiff import ops
from dmtl.autodiff.checker import gradcheck, rel_err
from dmtl.autodiff.ops import ConfigError
from dmtl.autodiff.tensor import Parameter, ShapeError, Tape, Tensor, backward
from dmtl.suite import op_checks


def grads_of(f, *inputs):
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = f(*inputs)
    backward(tape, loss)
    return [t.grad for t in inputs]


# --- conv3d ---------------------------------------------------------------

@pytest.mark.parametrize("backend", _conv.BACKENDS)
def test_conv_ones_counts_footprint(backend):
    _conv.set_backend(backend)
    try:
        y = ops.conv3d(Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.ones((1, 1, 3, 3, 3))),
                       Tensor(np.zeros(1)), 1, 1).data
    finally:
        _conv.set_backend(None)
    assert y[0, 0, 1, 1, 1] == 27
    assert y[0, 0, 0, 0, 0] == 8
    assert y[0, 0, 0, 1, 1] == 18


def test_conv_stride2_shape():
    y = ops.conv3d(Tensor(np.ones((1, 1, 4, 4, 4))), Tensor(np.ones((5, 1, 3, 3, 3))), None, 2, 1)
    assert y.shape == (1, 5, 2, 2, 2)


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv_same_padding_preserves_shape(k, rng):
    x = Tensor(rng.standard_normal((2, 2, 6, 5, 7)))
    w = Tensor(rng.standard_normal((3, 2, k, k, k)))
    assert ops.conv3d(x, w, None, 1, (k - 1) // 2).shape == (2, 3, 6, 5, 7)


def test_conv_channel_mismatch_rejected(rng):
    with pytest.raises(ShapeError, match="channel"):
        ops.conv3d(Tensor(rng.standard_normal((1, 2, 4, 4, 4))), Tensor(rng.standard_normal((3, 4, 3, 3, 3))))


def direct_conv(x, w, b, stride, pad):
    """Loop-free reference: explicit sum over kernel offsets."""
    xp = np.pad(x, [(0, 0), (0, 0)] + [(pad, pad)] * 3)
    n, _, d, h, wd = xp.shape
    k = w.shape[2]
    od, oh, ow = [(s - k) // stride + 1 for s in (d, h, wd)]
    out = np.zeros((n, w.shape[0], od, oh, ow))
    for a in range(k):
        for c in range(k):
            for e in range(k):
                sl = xp[:, :, a:a + stride * od:stride, c:c + stride * oh:stride, e:e + stride * ow:stride]
                out += np.einsum("nidhw,oi->nodhw", sl, w[:, :, a, c, e])
    return out + b[None, :, None, None, None]


@pytest.mark.parametrize("backend", _conv.BACKENDS)
@pytest.mark.parametrize("stride", [1, 2])
def test_conv_backends_match_reference(backend, stride, rng):
    x = rng.standard_normal((2, 3, 6, 8, 4))
    w = rng.standard_normal((4, 3, 3, 3, 3))
    b = rng.standard_normal(4)
    _conv.set_backend(backend)
    try:
        y = ops.conv3d(Tensor(x), Tensor(w), Tensor(b), stride, 1).data
    finally:
        _conv.set_backend(None)
    np.testing.assert_allclose(y, direct_conv(x, w, b, stride, 1), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("backend", _conv.BACKENDS)
@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradcheck_well_conditioned(backend, stride, rng):
    # positive inputs and weights keep every gradient element O(1), so the
    # finite-difference round-off sits far below the 1e-6 bound
    x = Tensor(rng.uniform(0.5, 1.5, (2, 3, 6, 6, 4)))
    w = Tensor(rng.uniform(0.5, 1.5, (4, 3, 3, 3, 3)))
    b = Tensor(rng.uniform(0.5, 1.5, 4))

    def f(x, w, b):
        _conv.set_backend(backend)
        try:
            return ops.conv3d(x, w, b, stride, 1)
        finally:
            _conv.set_backend(None)
    rep = gradcheck(f, [x, w, b], tol=1e-6)
    assert rep.passed, rep


@pytest.mark.parametrize("backend", _conv.BACKENDS)
def test_conv_gradcheck_random_sign(backend, rng):
    x = Tensor(rng.standard_normal((2, 3, 6, 6, 4)))
    w = Tensor(rng.standard_normal((4, 3, 3, 3, 3)))
    b = Tensor(rng.standard_normal(4))

    def f(x, w, b):
        _conv.set_backend(backend)
        try:
            return ops.conv3d(x, w, b, 2, 1)
        finally:
            _conv.set_backend(None)
    rep = gradcheck(f, [x, w, b], tol=1e-4)
    assert rep.passed, rep


def test_conv_backend_dispatch_is_deterministic(rng):
    x = Tensor(rng.standard_normal((1, 4, 16, 16, 16)).astype(np.float32))
    w = Tensor(rng.standard_normal((4, 4, 3, 3, 3)).astype(np.float32))
    a = ops.conv3d(x, w, None, 1, 1).data
    b = ops.conv3d(x, w, None, 1, 1).data
    assert np.array_equal(a, b)


def test_set_backend_rejects_unknown():
    with pytest.raises(ValueError):
        _conv.set_backend("fft")


# --- elementwise ops --------------------------------------------------------

def test_relu_values_and_zero_subgradient():
    x = Tensor(np.array([-1.0, 0.0, 2.0]))
    assert ops.relu(x).data.tolist() == [0, 0, 2]
    (g,) = grads_of(lambda t: ops.sum(ops.relu(t)), x)
    assert g.tolist() == [0, 0, 1]


def test_relu_all_negative(rng):
    x = Tensor(-rng.uniform(0.1, 2, (4, 5)))
    assert not ops.relu(x).data.any()
    (g,) = grads_of(lambda t: ops.sum(ops.relu(t)), x)
    assert not g.any()


def test_relu_gradcheck(rng):
    x = rng.standard_normal((4, 6, 5))
    x[np.abs(x) < 1e-3] = 0.5
    rep = gradcheck(ops.relu, [Tensor(x)], tol=1e-6)
    assert rep.passed and rep.kinks == 0, rep


def test_sigmoid_values_symmetry_and_range(rng):
    assert ops.sigmoid(Tensor(np.zeros(1))).data[0] == 0.5
    x = rng.standard_normal(1000) * 10
    s = ops.sigmoid(Tensor(x)).data
    s_neg = ops.sigmoid(Tensor(-x)).data
    assert np.abs(s_neg - (1 - s)).max() < 1e-12
    big = ops.sigmoid(Tensor(np.array([-800.0, 800.0]))).data
    assert np.isfinite(big).all()
    s32 = ops.sigmoid(Tensor(rng.standard_normal(1000).astype(np.float32) * 5)).data
    assert ((s32 > 0) & (s32 < 1)).all()


def test_sigmoid_gradcheck(rng):
    rep = gradcheck(ops.sigmoid, [Tensor(rng.standard_normal((3, 5, 4)) * 3)], tol=1e-6)
    assert rep.passed, rep


def test_group_norm_examples(rng):
    x = Tensor(np.full((2, 4, 3, 3, 3), 7.0))
    y = ops.group_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), 2).data
    assert np.abs(y).max() == 0
    x = Tensor(rng.standard_normal((2, 4, 3, 3, 3)))
    y = ops.group_norm(x, Tensor(np.zeros(4)), Tensor(np.full(4, 2.5)), 2).data
    assert np.all(y == 2.5)


def test_group_norm_normalises(rng):
    x = Tensor(rng.standard_normal((3, 8, 4, 4, 4)) * 5 + 3)
    y = ops.group_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)), 4).data
    g = y.reshape(3, 4, -1)
    assert np.abs(g.mean(axis=2)).max() < 1e-6
    assert np.abs(g.var(axis=2) - 1).max() < 1e-3


def test_group_norm_bad_groups(rng):
    with pytest.raises(ConfigError):
        ops.group_norm(Tensor(rng.standard_normal((1, 6, 2, 2, 2))), Tensor(np.ones(6)), Tensor(np.zeros(6)), 4)


def test_group_norm_gradcheck(rng):
    ins = [Tensor(rng.standard_normal((2, 4, 3, 3, 2))), Tensor(rng.standard_normal(4)), Tensor(rng.standard_normal(4))]
    rep = gradcheck(lambda x, g, b: ops.group_norm(x, g, b, 2), ins, tol=1e-5)
    assert rep.passed, rep


def test_upsample_examples(rng):
    y = ops.nearest_upsample3d(Tensor(np.full((1, 1, 1, 1, 1), 3.0))).data
    assert y.shape == (1, 1, 2, 2, 2) and np.all(y == 3.0)
    x = rng.standard_normal((2, 3, 2, 3, 4))
    y = ops.nearest_upsample3d(Tensor(x)).data
    assert y.shape == (2, 3, 4, 6, 8)
    assert abs(y.sum() - 8 * x.sum()) < 1e-10


def test_upsample_gradcheck(rng):
    rep = gradcheck(ops.nearest_upsample3d, [Tensor(rng.standard_normal((2, 2, 2, 3, 2)))], tol=1e-8)
    assert rep.passed, rep


def test_fully_connected_examples(rng):
    x = rng.standard_normal((4, 3))
    assert np.array_equal(ops.fully_connected(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)
    y = ops.fully_connected(Tensor([[1.0, 2.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([3.0, 3.0])).data
    assert y.tolist() == [[4, 5]]
    with pytest.raises(ShapeError):
        ops.fully_connected(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.zeros(2)))


def test_fully_connected_gradcheck(rng):
    ins = [Tensor(rng.standard_normal((3, 5))), Tensor(rng.standard_normal((5, 4))), Tensor(rng.standard_normal(4))]
    rep = gradcheck(ops.fully_connected, ins, tol=1e-7)
    assert rep.passed, rep


def test_global_avg_pool_examples():
    x = Tensor(np.full((2, 3, 2, 3, 4), 1.75))
    assert np.all(ops.global_avg_pool3d(x).data == 1.75)
    (g,) = grads_of(lambda t: ops.sum(ops.global_avg_pool3d(t)), x)
    assert np.allclose(g, 1 / 24)


def test_global_avg_pool_gradcheck(rng):
    rep = gradcheck(ops.global_avg_pool3d, [Tensor(rng.standard_normal((2, 3, 3, 2, 4)))], tol=1e-8)
    assert rep.passed, rep


def test_add_examples(rng):
    x = Tensor(rng.standard_normal((3, 4)))
    assert np.array_equal(ops.add(x, Tensor(np.zeros((3, 4)))).data, x.data)
    assert not ops.add(x, Tensor(-x.data)).data.any()
    with pytest.raises(ShapeError):
        ops.add(x, Tensor(np.zeros((4, 3))))


def test_add_gradcheck(rng):
    rep = gradcheck(ops.add, [Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((3, 4)))], tol=1e-10)
    assert rep.passed, rep


@pytest.mark.parametrize("check", op_checks(), ids=lambda c: c[0])
def test_suite_op_checks_pass(check):
    name, f, inputs, skip = check
    rep = gradcheck(f, inputs, tol=1e-4, skip=skip)
    assert rep.passed, f"{name}: {rep}"


# --- tape and backward ------------------------------------------------------

def test_backward_sum_and_half_square(rng):
    p = Tensor(rng.standard_normal((3, 2)))
    (g,) = grads_of(ops.sum, p)
    assert np.all(g == 1)
    (g,) = grads_of(lambda t: ops.scale(ops.sum(ops.square(t)), 0.5), p)
    np.testing.assert_allclose(g, p.data, rtol=0, atol=1e-15)


def test_gradient_accumulates_over_consumers(rng):
    x = Tensor(rng.standard_normal((4, 3)))
    w1, b1 = Tensor(rng.standard_normal((3, 2))), Tensor(rng.standard_normal(2))
    w2, b2 = Tensor(rng.standard_normal((3, 2))), Tensor(rng.standard_normal(2))
    f1 = lambda t: ops.sum(ops.sigmoid(ops.fully_connected(t, w1, b1)))  # noqa: E731
    f2 = lambda t: ops.sum(ops.relu(ops.fully_connected(t, w2, b2)))  # noqa: E731
    (g1,) = grads_of(f1, x)
    (g2,) = grads_of(f2, x)
    (g,) = grads_of(lambda t: ops.add(f1(t), f2(t)), x)
    np.testing.assert_allclose(g, g1 + g2, rtol=1e-14, atol=1e-15)


def test_unreachable_parameter_gets_zero():
    a = Parameter("a", Tensor(np.ones(3)))
    b = Parameter("b", Tensor(np.ones(3)))
    with Tape() as tape:
        loss = ops.sum(a.tensor)
    backward(tape, loss)
    assert np.all(a.grad == 1)
    assert b.grad.shape == (3,) and not b.grad.any()


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ops.relu(x)
    with pytest.raises(ShapeError):
        backward(tape, y)


def test_tape_reverse_order_and_no_recording_outside():
    x = Tensor(np.ones(2), requires_grad=True)
    ops.relu(x)
    with Tape() as tape:
        y = ops.sigmoid(ops.relu(x))
        loss = ops.sum(y)
    assert [n.op for n in tape.nodes] == ["relu", "sigmoid", "sum"]
    nodes_before = len(tape)
    ops.relu(x)
    assert len(tape) == nodes_before
    backward(tape, loss)


def test_check_finite_mode():
    x = Tensor(np.array([1.0, np.inf]), requires_grad=True)
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
        with Tape(check_finite=True):
            ops.scale(x, 0.0)


def test_tensor_reshape_keeps_count(rng):
    x = Tensor(rng.standard_normal((2, 6)))
    y = ops.reshape(x, (3, 4))
    assert y.shape == (3, 4) and y.size == x.size
    with pytest.raises(ShapeError):
        ops.reshape(x, (5, 3))


def test_ops_are_precision_generic(rng):
    x32 = Tensor(rng.standard_normal((1, 2, 4, 4, 4)).astype(np.float32))
    w32 = Tensor(rng.standard_normal((2, 2, 3, 3, 3)).astype(np.float32))
    assert ops.conv3d(x32, w32, None, 1, 1).dtype == np.float32
    assert ops.sigmoid(x32).dtype == np.float32
    assert ops.group_norm(x32, Tensor(np.ones(2, np.float32)), Tensor(np.zeros(2, np.float32)), 2).dtype == np.float32


# --- the checker itself -----------------------------------------------------

def test_rel_err_denominator_floor():
    assert rel_err(np.array([0.0]), np.array([1e-9]))[0] == pytest.approx(0.1)
    assert rel_err(np.array([2.0]), np.array([1.0]))[0] == 0.5


def test_gradcheck_rejects_float32():
    with pytest.raises(TypeError):
        gradcheck(ops.relu, [Tensor(np.ones(3, dtype=np.float32))])


def test_gradcheck_subsamples_large_inputs(rng):
    rep = gradcheck(ops.sigmoid, [Tensor(rng.standard_normal(20_000))])
    assert rep.passed and rep.checked == 200


def test_gradcheck_reports_broken_gradient(rng):
    def bad_relu(x):
        from dmtl.autodiff.tensor import make_output
        return make_output("bad", np.maximum(x.data, 0), (x,), lambda g: (g * 0.9 * (x.data > 0),))
    rep = gradcheck(bad_relu, [Tensor(rng.uniform(0.1, 1, 10))])
    assert not rep.passed and rep.max_rel_err > 0.05


def test_gradcheck_detects_injected_conv_fault(monkeypatch, rng):
    original = _conv.input_grad

    def faulty(*args, **kwargs):
        g = original(*args, **kwargs)
        g.reshape(-1)[0] += 1.0
        return g
    monkeypatch.setattr(_conv, "input_grad", faulty)
    ins = [Tensor(rng.standard_normal((1, 2, 4, 4, 4))), Tensor(rng.standard_normal((2, 2, 3, 3, 3)))]
    rep = gradcheck(lambda x, w: ops.conv3d(x, w, None, 1, 1), ins)
    assert not rep.passed


def test_gradcheck_counts_kink_crossings():
    x = Tensor(np.array([1e-7, 0.5, -0.5]))
    rep = gradcheck(ops.relu, [x])
    assert rep.passed and rep.kinks == 1 and rep.checked == 2
