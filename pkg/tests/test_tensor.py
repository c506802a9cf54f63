"""Tape engine: forward values, gradient accumulation, error paths."""
import numpy as np
import pytest

from strlab import tensor as T
from strlab.errors import DetachedGraph, NonFiniteValue, NotScalar, ShapeMismatch
from strlab.tensor import Tensor, reset_tape


@pytest.fixture(autouse=True)
def _fresh_tape():
    reset_tape()
    yield
    reset_tape()


def leaf(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


# -- matmul -----------------------------------------------------------------


def test_matmul_identity():
    a = leaf([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(leaf(np.eye(2)), a)
    np.testing.assert_array_equal(out.data, a.data)


def test_matmul_hand():
    out = T.matmul(leaf([[1.0, 2.0]]), leaf([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[11.0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    want = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                want[i, j] += a[i, k] * b[k, j]
    got = T.matmul(leaf(a), leaf(b)).data
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_matmul_inner_dim_mismatch():
    with pytest.raises(ShapeMismatch):
        T.matmul(leaf(np.ones((2, 3))), leaf(np.ones((2, 3))))


def test_matmul_gradients():
    rng = np.random.default_rng(5)
    a = leaf(rng.standard_normal((3, 4)))
    b = leaf(rng.standard_normal((4, 2)))
    loss = T.sum_all(T.matmul(a, b))
    T.backward(loss)
    g = np.ones((3, 2))
    np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-12)
    np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-12)


# -- backward ---------------------------------------------------------------


def test_backward_sum_ones():
    x = leaf([1.0, 2.0, 3.0])
    T.backward(T.sum_all(x))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_square():
    x = leaf([2.0, -1.0])
    T.backward(T.sum_all(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [4.0, -2.0])


def test_backward_composite_matches_finite_differences():
    rng = np.random.default_rng(11)
    x0 = rng.standard_normal(6)

    def loss_value(arr):
        reset_tape()
        x = leaf(arr)
        y = T.tanh(T.mul(x, x))
        z = T.add(T.sigmoid(y), T.relu(x))
        out = T.sum_all(T.mul(z, z))
        return x, out

    x, out = loss_value(x0)
    T.backward(out)
    grad = x.grad.copy()
    h = 1e-5
    for i in range(x0.size):
        up = x0.copy()
        up[i] += h
        down = x0.copy()
        down[i] -= h
        fd = (float(loss_value(up)[1].data) - float(loss_value(down)[1].data)) / (2 * h)
        assert abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-6) < 1e-4


def test_backward_twice_doubles_grads():
    x = leaf([1.0, -2.0, 0.5])
    loss = T.sum_all(T.mul(x, x))
    T.backward(loss)
    once = x.grad.copy()
    T.backward(loss)
    np.testing.assert_array_equal(x.grad, 2.0 * once)


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(NotScalar):
        T.backward(T.mul(x, x))


def test_backward_rejects_detached_loss():
    x = leaf([1.0, 2.0])
    loss = T.sum_all(x)
    reset_tape()
    with pytest.raises(DetachedGraph):
        T.backward(loss)


def test_zero_grad_resets():
    x = leaf([3.0])
    T.backward(T.sum_all(x))
    x.zero_grad()
    assert x.grad is None


# -- elementwise ------------------------------------------------------------


def test_tanh_zero():
    assert float(T.tanh(leaf([0.0])).data[0]) == 0.0


def test_log_softmax_symmetry():
    out = T.log_softmax(leaf([0.0, 0.0]))
    np.testing.assert_allclose(out.data, [-np.log(2.0)] * 2, atol=1e-12)


def test_log_softmax_rows_normalize():
    rng = np.random.default_rng(7)
    out = T.log_softmax(leaf(rng.standard_normal((4, 9))))
    np.testing.assert_allclose(np.exp(out.data).sum(axis=-1), np.ones(4), atol=1e-6)


def test_log_softmax_extreme_inputs_stay_finite():
    out = T.log_softmax(leaf([1000.0, -1000.0]))
    assert np.isfinite(out.data).all()


def test_sigmoid_grad_at_zero():
    x = leaf([0.0])
    T.backward(T.sum_all(T.sigmoid(x)))
    np.testing.assert_allclose(x.grad, [0.25], atol=1e-12)


def test_add_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        T.add(leaf([1.0, 2.0]), leaf([1.0, 2.0, 3.0]))


def test_scalar_broadcast_allowed():
    x = leaf([1.0, 2.0])
    out = T.mul(x, 3.0)
    np.testing.assert_array_equal(out.data, [3.0, 6.0])
    T.backward(T.sum_all(out))
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_nonfinite_output_is_an_error():
    with pytest.raises(NonFiniteValue):
        T.relu(Tensor(np.array([np.inf]), requires_grad=True))


def test_ops_deterministic():
    rng = np.random.default_rng(13)
    a = rng.standard_normal((5, 5))
    one = T.matmul(leaf(a), leaf(a)).data
    reset_tape()
    two = T.matmul(leaf(a), leaf(a)).data
    assert np.array_equal(one, two)


# -- structural ops ----------------------------------------------------------


def test_reshape_transpose_concat_roundtrip_grads():
    rng = np.random.default_rng(17)
    x = leaf(rng.standard_normal((2, 3)))
    y = T.transpose(T.reshape(x, (3, 2)), (1, 0))
    z = T.concat([y, y], axis=1)
    T.backward(T.sum_all(z))
    np.testing.assert_array_equal(x.grad, np.full((2, 3), 2.0))


def test_flip0_reverses_leading_axis():
    x = leaf(np.arange(6.0).reshape(3, 2))
    np.testing.assert_array_equal(T.flip0(x).data, x.data[::-1])


def test_mean_all():
    x = leaf([1.0, 2.0, 3.0, 4.0])
    out = T.mean_all(x)
    assert float(out.data) == 2.5
    T.backward(out)
    np.testing.assert_array_equal(x.grad, np.full(4, 0.25))
