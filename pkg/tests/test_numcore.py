"""Tape, primitive ops, and gradient checks for the autodiff core."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcan import numcore as nc
from dcan.errors import NumericError, ShapeError

RNG = np.random.default_rng(0)


def rand(*shape):
    return np.random.default_rng(hash(shape) % 2**32).standard_normal(shape)


# ---------------------------------------------------------------------------
# Forward values


def test_matmul_forward_matches_numpy():
    a, b = rand(3, 4), rand(4, 5)
    tape = nc.Tape()
    out = nc.matmul(tape.leaf(a), tape.leaf(b))
    np.testing.assert_allclose(out.value, a @ b)


def test_matmul_shape_mismatch_raises():
    tape = nc.Tape()
    with pytest.raises(ShapeError):
        nc.matmul(tape.leaf(rand(3, 4)), tape.leaf(rand(5, 2)))


def test_matmul_rejects_3d():
    tape = nc.Tape()
    with pytest.raises(ShapeError):
        nc.matmul(tape.leaf(np.zeros((2, 3, 4))), tape.leaf(np.zeros((4, 2))))


def test_softmax_rows_sum_to_one_and_shift_invariant():
    x = rand(6, 5) * 10
    tape = nc.Tape()
    y = nc.softmax(tape.leaf(x)).value
    np.testing.assert_allclose(y.sum(axis=-1), np.ones(6), atol=1e-12)
    y_shift = nc.softmax(nc.Tape().leaf(x + 123.0)).value
    np.testing.assert_allclose(y, y_shift, atol=1e-12)


def test_softmax_handles_large_logits():
    tape = nc.Tape()
    y = nc.softmax(tape.leaf(np.array([[1000.0, 0.0, -1000.0]]))).value
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y[0, 0], 1.0, atol=1e-12)


def test_softmax_empty_raises():
    with pytest.raises(ShapeError):
        nc.softmax(nc.Tape().leaf(np.zeros((0, 3))))


def test_sigmoid_bounds_and_symmetry():
    x = rand(4, 4) * 5
    y = nc.sigmoid(nc.Tape().leaf(x)).value
    assert np.all((y > 0) & (y < 1))
    y_neg = nc.sigmoid(nc.Tape().leaf(-x)).value
    np.testing.assert_allclose(y + y_neg, np.ones_like(y), atol=1e-12)


def test_relu_forward():
    x = np.array([-2.0, 0.0, 3.0])
    np.testing.assert_array_equal(nc.relu(nc.Tape().leaf(x)).value, [0.0, 0.0, 3.0])


def test_cosine_rows_known_values():
    a = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 0.0]])
    b = np.array([[0.0, 1.0], [1.0, 1.0], [1.0, 2.0]])
    tape = nc.Tape()
    c = nc.cosine_rows(tape.leaf(a), tape.leaf(b)).value
    np.testing.assert_allclose(c, [0.0, 1.0, 0.0], atol=1e-12)


def test_cosine_rows_zero_norm_has_zero_grad():
    tape = nc.Tape()
    a = tape.leaf(np.zeros((1, 3)))
    b = tape.leaf(np.array([[1.0, 2.0, 3.0]]))
    out = nc.sum_all(nc.cosine_rows(a, b))
    tape.backward(out)
    np.testing.assert_array_equal(a.grad, np.zeros((1, 3)))
    np.testing.assert_array_equal(b.grad, np.zeros((1, 3)))


def test_concat_and_reshape_round_trip():
    a, b = rand(2, 3), rand(2, 5)
    tape = nc.Tape()
    out = nc.concat([tape.leaf(a), tape.leaf(b)], axis=1)
    assert out.value.shape == (2, 8)
    np.testing.assert_array_equal(nc.reshape(out, (16,)).value, np.concatenate([a, b], axis=1).ravel())


def test_mixed_tape_operands_raise():
    t1, t2 = nc.Tape(), nc.Tape()
    with pytest.raises(ShapeError):
        t1.leaf(np.ones(3)) + t2.leaf(np.ones(3))


def test_backward_requires_scalar():
    tape = nc.Tape()
    x = tape.leaf(rand(2, 2))
    with pytest.raises(ShapeError):
        tape.backward(x)


def test_assert_finite():
    tape = nc.Tape()
    nc.assert_finite(tape.leaf(np.ones(3)))
    with pytest.raises(NumericError):
        nc.assert_finite(tape.leaf(np.array([1.0, np.inf])))


# ---------------------------------------------------------------------------
# Gradient checks (central finite differences, rel err < 1e-6 per primitive)

TOL = 1e-6


def test_grad_matmul():
    b = rand(4, 3)
    err = nc.fd_check(lambda x: nc.sum_all(nc.sigmoid(nc.matmul(x, x.tape.constant(b)))), rand(2, 4))
    assert err < TOL


def test_grad_matmul_vector_cases():
    m = rand(3, 4)
    err = nc.fd_check(lambda x: nc.sum_all(nc.matmul(x, x.tape.constant(m))), rand(3))
    assert err < TOL
    err = nc.fd_check(lambda x: nc.matmul(x, x.tape.constant(rand(3))), rand(3))
    assert err < TOL


def test_grad_softmax():
    err = nc.fd_check(lambda x: nc.sum_all(nc.mul(nc.softmax(x), x.tape.constant(rand(3, 5)))), rand(3, 5))
    assert err < TOL


def test_grad_sigmoid_relu_chain():
    err = nc.fd_check(lambda x: nc.sum_all(nc.relu(nc.sigmoid(x) - 0.5)), rand(4, 3) + 0.3)
    assert err < TOL


def test_grad_broadcast_add_mul():
    w = rand(1, 5)
    err = nc.fd_check(lambda x: nc.sum_all(nc.mul(nc.add(x, x.tape.constant(w)), x)), rand(4, 5))
    assert err < TOL


def test_grad_scalar_broadcast():
    ctx = rand(4, 3)
    err = nc.fd_check(
        lambda g: nc.sum_all(nc.sigmoid(g.tape.constant(ctx) + g * g.tape.constant(ctx))),
        np.asarray(-1.0),
    )
    assert err < TOL


def test_grad_rows_dot_cosine():
    b = rand(4, 6)
    err = nc.fd_check(lambda x: nc.sum_all(nc.rows_dot(x, x.tape.constant(b))), rand(4, 6))
    assert err < TOL
    err = nc.fd_check(lambda x: nc.sum_all(nc.cosine_rows(x, x.tape.constant(b))), rand(4, 6))
    assert err < TOL


def test_grad_concat_transpose_reshape():
    def f(x):
        top = nc.transpose(x)
        cat = nc.concat([top, top], axis=1)
        return nc.sumsq(nc.reshape(cat, (-1,)))

    err = nc.fd_check(f, rand(3, 2))
    assert err < TOL


def test_grad_sum_mean_sumsq():
    for red in (nc.sum_all, nc.mean_all, nc.sumsq):
        err = nc.fd_check(lambda x, red=red: red(nc.sigmoid(x)), rand(3, 3))
        assert err < TOL


def test_grad_reused_node_accumulates():
    # y = sum(x*x + x) exercises gradient accumulation through a shared node
    err = nc.fd_check(lambda x: nc.sum_all(nc.mul(x, x) + x), rand(5))
    assert err < TOL


@settings(max_examples=30, deadline=None)
@given(
    rows=st.integers(1, 4),
    cols=st.integers(1, 4),
    seed=st.integers(0, 2**31 - 1),
)
def test_grad_random_expression(rows, cols, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((rows, cols))
    w = rng.standard_normal((cols, cols))

    def f(x):
        h = nc.sigmoid(nc.matmul(x, x.tape.constant(w)))
        return nc.mean_all(nc.mul(h, h) + h)

    assert nc.fd_check(f, x0) < 1e-5


def test_gradients_returns_leaf_map():
    tape = nc.Tape()
    x = tape.leaf(rand(3))
    grads = tape.gradients(nc.sumsq(x))
    np.testing.assert_allclose(grads[x], 2 * x.value, atol=1e-12)
