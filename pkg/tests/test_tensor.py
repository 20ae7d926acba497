import numpy as np
import pytest

from dedetr import tensor as T
from dedetr.errors import AxisError, ContractError, NumericError, ShapeError
from dedetr.tensor import Tensor


def test_create_inits():
    assert np.all(T.zeros((2, 3)).data == 0.0)
    assert np.all(T.constant((4,), 2.5).data == 2.5)
    u = T.uniform((100,), -0.5, 0.5, seed=3)
    assert u.dims == (100,)
    assert np.all((u.data >= -0.5) & (u.data < 0.5))
    assert np.array_equal(u.data, T.uniform((100,), -0.5, 0.5, seed=3).data)


def test_create_rejects_bad_dims():
    with pytest.raises(ShapeError):
        T.zeros((2, 0))
    with pytest.raises(ShapeError):
        T.create((), "zeros")
    with pytest.raises(ContractError):
        T.create((2,), "uniform", lo=1.0, hi=1.0)


def test_tensor_rejects_non_finite():
    with pytest.raises(NumericError):
        Tensor([1.0, np.nan])


def test_matmul_and_linear():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[1.0], [1.0]])
    assert np.allclose(T.matmul(a, b).data, [[3.0], [7.0]])
    out = T.linear(a, b, Tensor([0.5]))
    assert np.allclose(out.data, [[3.5], [7.5]])
    with pytest.raises(ShapeError):
        T.matmul(a, Tensor([[1.0, 2.0, 3.0]]))


def test_batched_matmul_shares_2d_weight():
    x = Tensor(np.ones((3, 2, 4)))
    w = Tensor(np.ones((4, 5)))
    assert T.matmul(x, w).dims == (3, 2, 5)


def test_softmax_rows_sum_to_one():
    x = Tensor([[1000.0, 1000.0], [0.0, -5.0]])
    y = T.softmax(x, axis=-1)
    assert np.allclose(y.data.sum(axis=1), 1.0)
    assert np.allclose(y.data[0], [0.5, 0.5])


def test_layer_norm_zero_mean_unit_variance():
    x = Tensor(np.arange(12.0).reshape(3, 4))
    y = T.layer_norm(x)
    assert np.allclose(y.data.mean(axis=-1), 0.0)
    assert np.allclose(y.data.var(axis=-1), 1.0, atol=1e-4)


def test_inverse_sigmoid_clamps():
    y = T.inverse_sigmoid(Tensor([0.0, 0.5, 1.0]))
    assert np.isfinite(y.data).all()
    assert y.data[1] == pytest.approx(0.0)
    assert y.data[0] == pytest.approx(np.log(1e-6 / (1 - 1e-6)))


def test_axis_out_of_range():
    with pytest.raises(AxisError):
        T.softmax(Tensor([[1.0, 2.0]]), axis=2)
    with pytest.raises(AxisError):
        T.sum(Tensor([1.0, 2.0]), axis=-3)


def test_broadcast_only_along_leading_axes():
    a = Tensor(np.ones((2, 3)))
    assert (a + Tensor(np.ones(3))).dims == (2, 3)
    with pytest.raises(ShapeError):
        a + Tensor(np.ones(2))


def test_reshape_transpose_concat():
    x = Tensor(np.arange(6.0))
    r = T.reshape(x, (2, 3))
    assert T.transpose(r).dims == (3, 2)
    assert T.concat([r, r], axis=0).dims == (4, 3)
    with pytest.raises(ShapeError):
        T.reshape(x, (4, 2))
    with pytest.raises(ShapeError):
        T.concat([r, Tensor(np.ones((2, 2)))], axis=0)


def test_backward_accumulates_into_leaves():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.backward(T.sum(x * x))
    assert np.allclose(x.grad, [2.0, 4.0, 6.0])
    T.backward(T.sum(x))
    assert np.allclose(x.grad, [3.0, 5.0, 7.0])
    x.zero_grad()
    assert x.grad is None


def test_backward_needs_scalar_and_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(x * 2.0)
    with pytest.raises(ContractError):
        T.backward(Tensor([1.0]))


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    before = len(T.current_tape())
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad
    assert len(T.current_tape()) == before


def test_index_gather_scatters_gradient():
    x = Tensor(np.arange(4.0), requires_grad=True)
    picked = T.index(x, np.array([1, 1, 3]))
    T.backward(T.sum(picked))
    assert np.allclose(x.grad, [0.0, 2.0, 0.0, 1.0])


@pytest.mark.parametrize("op", [
    lambda x: T.sum(T.sigmoid(x) * x),
    lambda x: T.sum(T.softmax(x, axis=-1) * Tensor([1.0, -2.0, 3.0])),
    lambda x: T.sum(T.log_softmax(x, axis=0)),
    lambda x: T.sum(T.layer_norm(x) * Tensor([0.3, -1.0, 2.0])),
    lambda x: T.mean(T.abs(x - Tensor([0.05, 0.05, 0.05]))),
    lambda x: T.sum(T.maximum(x, Tensor([0.0, 0.0, 0.0]))),
    lambda x: T.sum(x / (T.abs(x) + Tensor([1.0, 1.0, 1.0]))),
    lambda x: T.sum(T.matmul(x, T.transpose(x))),
    lambda x: T.sum(T.inverse_sigmoid(T.sigmoid(x) * 0.8 + Tensor([0.1, 0.1, 0.1]))),
    lambda x: T.sum(T.relu(x) * Tensor([1.0, 2.0, 3.0])),
    lambda x: T.sum(T.concat([x, T.sigmoid(x)], axis=1) * Tensor(np.arange(6.0))),
    lambda x: T.sum(T.index(x, (np.array([0, 1, 1]), np.array([2, 0, 2]))) * Tensor([1.0, 2.0, 3.0])),
    lambda x: T.sum(x[1:, ::2] * x[:1, 1:]),
    lambda x: T.sum(T.reshape(x, (3, 2)) * Tensor([1.0, -1.0]) * T.reshape(x, (3, 2))),
    lambda x: T.sum(T.scale(x, -2.5) * x),
    lambda x: T.sum(Tensor([1.0, 2.0, 3.0]) / (x * x + Tensor([1.0, 1.0, 1.0]))),
    lambda x: T.sum(T.minimum(x, Tensor([0.5, 0.0, 0.5])) - x * x),
    lambda x: T.sum(T.transpose(T.reshape(x, (1, 2, 3)), (2, 0, 1)) * Tensor([[1.0, -2.0]])),
])
def test_op_gradients_match_finite_differences(op):
    x = Tensor([[0.3, -0.7, 1.1], [0.9, 0.2, -0.4]])
    assert T.finite_diff_check(op, x) < 1e-5


def test_finite_diff_check_rejects_bad_step():
    with pytest.raises(ContractError):
        T.finite_diff_check(lambda x: T.sum(x), Tensor([1.0]), h=1e-2)


def test_finite_diff_check_detects_wrong_gradient():
    def wrong(x):
        # value of x^2 with the tape of 3x
        out = T.sum(x * 3.0)
        out.data = np.array([float((x.data ** 2).sum())])
        return out

    assert T.finite_diff_check(wrong, Tensor([2.0])) > 0.1


def test_backward_ignores_unrelated_recorded_ops():
    x = Tensor([1.0, 2.0], requires_grad=True)
    w = Tensor([3.0, 4.0], requires_grad=True)
    T.sum(w * 5.0)
    T.backward(T.sum(x * x))
    assert np.allclose(x.grad, [2.0, 4.0])
    assert w.grad is None
    assert len(T.current_tape()) == 0


def test_backward_reaches_graph_recorded_before_an_earlier_backward():
    x = Tensor([1.0, 2.0], requires_grad=True)
    z = Tensor([1.0], requires_grad=True)
    squared = x * x
    T.backward(T.sum(z * 2.0))
    T.backward(T.sum(squared))
    assert np.allclose(z.grad, [2.0])
    assert np.allclose(x.grad, [2.0, 4.0])


def test_backward_shared_node_accumulates_once_per_use():
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    T.backward(T.sum(y + y * y))
    # d/dx (x^2 + x^4) = 2x + 4x^3
    assert np.allclose(x.grad, [6.0 + 108.0])
