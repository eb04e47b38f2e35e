import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bnrobust import functional as F
from bnrobust.tensor import (
    NonFiniteError,
    ShapeError,
    TapeConsumedError,
    Tensor,
    debug_mode,
    default_dtype,
    elementwise,
    exp,
    log,
    matmul,
    no_grad,
    relu,
    sqrt,
    tensor_mean,
    tensor_sum,
)
from oracles import central_difference, grad_rel_error


def test_add_elementwise():
    out = elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_mul_by_zero_gives_zero_grad():
    x = Tensor([1.5, -2.0, 3.0], requires_grad=True)
    y = x * 0
    np.testing.assert_array_equal(y.data, 0.0)
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, 0.0)


def test_relu_value_and_subgradient_at_zero():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    y = relu(x)
    np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_sum_gives_all_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_quadratic_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_broadcast_along_leading_ones():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.arange(3.0).reshape(1, 3), requires_grad=True)
    (a * b).sum().backward()
    np.testing.assert_allclose(b.grad, [[2.0, 2.0, 2.0]])
    np.testing.assert_allclose(a.grad, np.tile([0.0, 1.0, 2.0], (2, 1)))


def test_broadcast_error_is_shape_error():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_unknown_elementwise_kind():
    with pytest.raises(ValueError):
        elementwise("pow", Tensor([1.0]), Tensor([2.0]))


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2).backward()


def test_tape_consumed_on_second_backward():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(TapeConsumedError):
        loss.backward()


def test_grads_accumulate_until_cleared():
    x = Tensor([1.0, -1.0], requires_grad=True)
    (x * 3).sum().backward()
    (x * 3).sum().backward()
    np.testing.assert_allclose(x.grad, [6.0, 6.0])
    x.zero_grad()
    (x * 3).sum().backward()
    np.testing.assert_allclose(x.grad, [3.0, 3.0])


def test_two_consumers_sum_contributions():
    # y = x*x + exp(x) -> dy/dx = 2x + exp(x)
    xv = np.array([0.3, -0.7, 1.1])
    x = Tensor(xv, requires_grad=True, dtype=np.float64)
    (x * x + exp(x)).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * xv + np.exp(xv), rtol=1e-12)


def test_zero_grad_then_backward_is_idempotent():
    rng = np.random.default_rng(3)
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    x = Tensor(rng.normal(size=(4, 3)))
    results = []
    for _ in range(2):
        w.zero_grad()
        relu(matmul(x, w)).sum().backward()
        results.append(w.grad.copy())
    np.testing.assert_array_equal(results[0], results[1])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2
    assert not y.requires_grad and y.is_leaf


def test_debug_mode_raises_on_nonfinite():
    x = Tensor([0.0, 1.0])
    with np.errstate(divide="ignore"):
        with debug_mode():
            with pytest.raises(NonFiniteError):
                log(x)
        assert np.isneginf(log(x).data[0])  # silent outside debug mode


def test_default_dtype_switch():
    with default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_matmul_shape_check():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# -- finite-difference checks of every differentiable op (float64) ------------------


def _check_op(build, shapes, positive=False, seed=0, tol=1e-3):
    rng = np.random.default_rng(seed)
    arrays = []
    for s in shapes:
        a = rng.normal(size=s)
        if positive:
            a = np.abs(a) + 0.5
        arrays.append(a)
    probe = rng.normal(size=build(*[Tensor(a, dtype=np.float64) for a in arrays]).shape)

    def f():
        with no_grad():
            out = build(*[Tensor(a, dtype=np.float64) for a in arrays])
        return float((out.data * probe).sum())

    with default_dtype(np.float64):
        ts = [Tensor(a, requires_grad=True) for a in arrays]
        (build(*ts) * Tensor(probe)).sum().backward()
    numeric = central_difference(f, arrays)
    for t, g in zip(ts, numeric):
        assert grad_rel_error(t.grad, g) < tol


OPS = {
    "add": (lambda a, b: a + b, [(3, 4), (1, 4)], False),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 1)], False),
    "mul": (lambda a, b: a * b, [(2, 3), (2, 3)], False),
    "div": (lambda a, b: a / b, [(2, 3), (2, 3)], True),
    "maximum": (lambda a, b: elementwise("maximum", a, b), [(4, 5), (4, 5)], False),
    "relu": (lambda a: relu(a), [(5, 6)], False),
    "exp": (lambda a: exp(a), [(3, 3)], False),
    "log": (lambda a: log(a), [(3, 3)], True),
    "sqrt": (lambda a: sqrt(a), [(3, 3)], True),
    "sum_axis": (lambda a: tensor_sum(a, axis=1), [(3, 4, 2)], False),
    "mean_axes": (lambda a: tensor_mean(a, axis=(0, 2), keepdims=True), [(3, 4, 2)], False),
    "reshape": (lambda a: a.reshape(6, 2), [(3, 4)], False),
    "matmul": (lambda a, b: matmul(a, b), [(3, 4), (4, 2)], False),
    "linear": (lambda x, w, b: F.linear(x, w, b), [(3, 4), (5, 4), (5,)], False),
    "conv2d_s1p1": (lambda x, w: F.conv2d(x, w, 1, 1), [(2, 2, 5, 5), (3, 2, 3, 3)], False),
    "conv2d_s2p1": (lambda x, w: F.conv2d(x, w, 2, 1), [(2, 2, 6, 6), (3, 2, 3, 3)], False),
    "conv2d_s1p0": (lambda x, w: F.conv2d(x, w, 1, 0), [(1, 2, 5, 4), (2, 2, 2, 3)], False),
    "avg_pool2d": (lambda x: F.avg_pool2d(x, 2), [(2, 3, 4, 4)], False),
    "subsample_ceil": (lambda x: F.subsample_ceil(x), [(2, 2, 5, 5)], False),
    "pad_channels": (lambda x: F.pad_channels(x, 5), [(2, 3, 2, 2)], False),
    "global_avg_pool": (lambda x: F.global_avg_pool(x), [(2, 3, 3, 3)], False),
    "batch_norm_train": (
        lambda x, g, b: F.batch_norm(x, g, b, np.zeros(3), np.ones(3), training=True, update_stats=False),
        [(4, 3, 2, 2), (3,), (3,)],
        False,
    ),
    "batch_norm_eval": (
        lambda x, g, b: F.batch_norm(x, g, b, np.full(3, 0.2), np.full(3, 1.7), training=False),
        [(4, 3, 2, 2), (3,), (3,)],
        False,
    ),
    "cross_entropy": (lambda z: F.cross_entropy(z, np.array([0, 2, 1, 2])), [(4, 3)], False),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_finite_difference(name):
    build, shapes, positive = OPS[name]
    _check_op(build, shapes, positive)


@settings(max_examples=25, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=st.floats(-3, 3)),
    st.sampled_from(["add", "sub", "mul", "maximum"]),
)
def test_elementwise_matches_numpy_and_grad_shapes(a, kind):
    b = np.flip(a).copy()
    x, y = Tensor(a, requires_grad=True, dtype=np.float64), Tensor(b, requires_grad=True, dtype=np.float64)
    out = elementwise(kind, x, y)
    ref = {"add": a + b, "sub": a - b, "mul": a * b, "maximum": np.maximum(a, b)}[kind]
    np.testing.assert_allclose(out.data, ref)
    out.sum().backward()
    assert x.grad.shape == a.shape and y.grad.shape == b.shape
