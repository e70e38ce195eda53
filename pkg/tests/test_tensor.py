import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pointcl import tensor as T
from pointcl.tensor import Tensor

from oracles import finite_difference_grads, max_rel_error


def test_linear_identity_weights():
    x = Tensor([[1.0, 2.0]])
    w = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([0.0, 0.0])
    assert np.allclose(T.linear_forward(x, w, b).data, [[1.0, 2.0]])


def test_linear_zero_weights_pass_bias():
    out = T.linear_forward(Tensor([[1.0, 2.0]]), Tensor(np.zeros((2, 2))),
                           Tensor([3.0, 4.0]))
    assert np.allclose(out.data, [[3.0, 4.0]])


def test_linear_hand_product():
    out = T.linear_forward(Tensor([[1.0, 2.0]]), Tensor([[1.0, 1.0], [1.0, 1.0]]),
                           Tensor([1.0, 0.0]))
    assert np.allclose(out.data, [[4.0, 3.0]])


def test_linear_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_relu_values():
    assert np.allclose(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    x = np.array([0.5, 1.0, 7.0])
    assert np.allclose(T.relu(Tensor(x)).data, x)


def test_relu_gradient():
    x = Tensor([-1.0, 2.0], requires_grad=True)
    T.backward(T.tsum(T.relu(x)))
    assert np.allclose(x.grad, [0.0, 1.0])


def test_relu_tie_gradient_zero():
    x = Tensor([0.0], requires_grad=True)
    T.backward(T.tsum(T.relu(x)))
    assert x.grad[0] == 0.0


def test_max_pool_values():
    x = Tensor([[[1.0, 5.0], [3.0, 2.0]]])
    assert np.allclose(T.max_pool_points(x).data, [[3.0, 5.0]])


def test_max_pool_single_point():
    x = Tensor(np.arange(4, dtype=np.float32).reshape(1, 1, 4))
    assert np.allclose(T.max_pool_points(x).data, [[0, 1, 2, 3]])


def test_max_pool_permutation_invariant(rng):
    x = rng.normal(size=(2, 9, 5)).astype(np.float32)
    perm = rng.permutation(9)
    a = T.max_pool_points(Tensor(x)).data
    b = T.max_pool_points(Tensor(x[:, perm])).data
    assert (a == b).all()


def test_max_pool_empty_cloud():
    with pytest.raises(T.ShapeError):
        T.max_pool_points(Tensor(np.zeros((1, 0, 3))))


def test_max_pool_tie_routes_first():
    x = Tensor(np.array([[[2.0], [2.0]]]), requires_grad=True)
    T.backward(T.tsum(T.max_pool_points(x)))
    assert np.allclose(x.grad[0, :, 0], [1.0, 0.0])


def test_batch_norm_zero_variance_column():
    state = T.BNState(2)
    x = Tensor(np.array([[3.0, 1.0], [3.0, 2.0]]))
    out = T.batch_norm_forward(x, state, 0.9, training=True)
    assert np.allclose(out.data[:, 0], 0.0, atol=1e-3)


def test_batch_norm_standardized_input_unchanged():
    state = T.BNState(1)
    x = np.array([[1.0], [-1.0]])  # mean 0, var 1
    out = T.batch_norm_forward(Tensor(x), state, 0.9, training=True)
    assert np.allclose(out.data, x, atol=1e-4)


def test_batch_norm_running_update():
    state = T.BNState(1)
    state.running_mean[:] = 0.0
    x = Tensor(np.array([[1.0], [3.0]]))  # batch mean 2
    T.batch_norm_forward(x, state, 0.5, training=True)
    assert np.allclose(state.running_mean, [1.0])


def test_batch_norm_small_batch_error():
    with pytest.raises(T.ShapeError):
        T.batch_norm_forward(Tensor(np.ones((1, 2))), T.BNState(2), 0.9, True)


def test_batch_norm_eval_uses_running_stats():
    state = T.BNState(1)
    state.running_mean[:] = 5.0
    state.running_var[:] = 4.0
    out = T.batch_norm_forward(Tensor(np.array([[7.0]])), state, 0.9, False)
    assert np.allclose(out.data, [[1.0]], atol=1e-3)


def test_softmax_ce_uniform():
    logits = Tensor(np.zeros((3, 16)))
    loss = T.softmax_cross_entropy(logits, [0, 5, 15])
    assert abs(loss.item() - np.log(16)) < 1e-6


def test_softmax_ce_saturated():
    logits = np.zeros((1, 4))
    logits[0, 2] = 1000.0
    assert T.softmax_cross_entropy(Tensor(logits), [2]).item() < 1e-6


def test_softmax_ce_hand_value():
    loss = T.softmax_cross_entropy(Tensor([[1.0, 0.0]]), [0])
    assert abs(loss.item() - np.log(1 + np.exp(-1))) < 1e-6


def test_softmax_ce_label_out_of_range():
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(Tensor(np.zeros((1, 3))), [3])


def test_softmax_ce_nonnegative(rng):
    for _ in range(20):
        logits = Tensor(rng.normal(size=(4, 6)))
        labels = rng.integers(0, 6, size=4)
        assert T.softmax_cross_entropy(logits, labels).item() >= 0.0


def test_backward_sum_all_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    T.backward(T.tsum(x))
    assert (x.grad == 1.0).all()


def test_backward_square():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.tsum(T.mul(x, x)))
    assert np.allclose(x.grad, [2.0, 4.0])


def test_backward_nonscalar_rejected():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        T.backward(T.relu(x))


def test_composed_net_matches_finite_differences(rng):
    """A small MLP with batch norm, relu, pooling and cross-entropy."""
    w1 = Tensor(rng.normal(size=(3, 5)), dtype=np.float64, requires_grad=True)
    b1 = Tensor(np.zeros(5), dtype=np.float64, requires_grad=True)
    w2 = Tensor(rng.normal(size=(5, 4)), dtype=np.float64, requires_grad=True)
    b2 = Tensor(np.zeros(4), dtype=np.float64, requires_grad=True)
    state = T.BNState(5, dtype=np.float64)
    x = rng.normal(size=(2, 6, 3))
    labels = [1, 3]
    params = [w1, b1, state.gamma, state.beta, w2, b2]

    def forward():
        h = T.linear_forward(Tensor(x.reshape(12, 3), dtype=np.float64), w1, b1)
        h = T.batch_norm_forward(h, state, 0.9, training=True)
        h = T.relu(h)
        pooled = T.max_pool_points(T.reshape(h, (2, 6, 5)))
        logits = T.linear_forward(pooled, w2, b2)
        return T.softmax_cross_entropy(logits, labels)

    loss = forward()
    T.backward(loss)
    grads = [p.grad.copy() for p in params]
    for p in params:
        p.grad = None
    fd = finite_difference_grads(lambda: forward().item(), params, h=1e-4)
    assert max_rel_error(grads, fd) < 1e-4


def test_dropout_rate_zero_is_identity(rng):
    x = Tensor(rng.normal(size=(4, 4)))
    assert (T.dropout(x, 0.0, True, rng).data == x.data).all()


def test_dropout_eval_is_identity(rng):
    x = Tensor(rng.normal(size=(4, 4)))
    assert (T.dropout(x, 0.9, False, rng).data == x.data).all()


def test_dropout_rate_one_rejected(rng):
    with pytest.raises(ValueError):
        T.dropout(Tensor(np.ones(3)), 1.0, True, rng)


def test_dropout_empirical_zero_fraction():
    rng = np.random.default_rng(99)
    x = Tensor(np.ones(100_000))
    out = T.dropout(x, 0.5, True, rng)
    frac = (out.data == 0).mean()
    assert abs(frac - 0.5) < 0.01
    survivors = out.data[out.data != 0]
    assert np.allclose(survivors, 2.0)


def test_forward_backward_deterministic(rng):
    x = rng.normal(size=(3, 4)).astype(np.float32)

    def run():
        t = Tensor(x.copy(), requires_grad=True)
        d = T.dropout(T.relu(t), 0.3, True, np.random.default_rng(5))
        T.backward(T.tsum(d))
        return t.grad.copy()

    assert (run() == run()).all()


@settings(deadline=None, max_examples=25)
@given(st.integers(min_value=0, max_value=10_000))
def test_matmul_grad_property(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(2, 3)), dtype=np.float64, requires_grad=True)
    b = Tensor(rng.normal(size=(3, 2)), dtype=np.float64, requires_grad=True)

    def forward():
        return T.tsum(T.relu(T.matmul(a, b))).item()

    loss = T.tsum(T.relu(T.matmul(a, b)))
    T.backward(loss)
    grads = [a.grad.copy(), b.grad.copy()]
    a.grad = b.grad = None
    fd = finite_difference_grads(forward, [a, b])
    assert max_rel_error(grads, fd) < 1e-4
