"""Autograd core: forward fixtures with hand-computed values, gradient
checks against central finite differences, broadcast and tape contracts.
"""

import numpy as np
import pytest

import orsnn.tensor as tz
from orsnn.errors import GraphError, NumericError, ShapeError
from orsnn.tensor import Tensor, backward, clear_tape, no_grad

from conftest import distinct_random, gradcheck, margin_random


def t(data, requires_grad=False, dtype=np.float64):
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def test_add_mul_sub_values():
    a = t([[1.0, 2.0], [3.0, 4.0]])
    b = t([[10.0, 20.0], [30.0, 40.0]])
    assert np.array_equal(tz.add(a, b).data, [[11, 22], [33, 44]])
    assert np.array_equal(tz.sub(b, a).data, [[9, 18], [27, 36]])
    assert np.array_equal(tz.mul(a, b).data, [[10, 40], [90, 160]])
    assert np.array_equal(tz.neg(a).data, [[-1, -2], [-3, -4]])


def test_operator_overloads_and_scalars():
    a = t([1.0, 2.0], requires_grad=True)
    out = (a + 1.0) * 3.0 - 2.0
    assert np.array_equal(out.data, [4.0, 7.0])
    backward(out, seed=np.ones(2))
    assert np.array_equal(a.grad, [3.0, 3.0])


@pytest.mark.parametrize("seed", range(3))
def test_arithmetic_gradients(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    gradcheck(lambda x, y: tz.reduce_mean(tz.mul(tz.add(x, y), tz.sub(x, y)), (0, 1)), a, b)


@pytest.mark.parametrize("seed", range(3))
def test_relu_gradient(seed):
    rng = np.random.default_rng(seed)
    a = margin_random(rng, (4, 5))
    gradcheck(lambda x: tz.reduce_mean(tz.relu(x), (0, 1)), a)


def test_broadcast_then_reduce_identity():
    # grad through a broadcast equals the sum of grads over broadcast positions
    a = t([1.0, 2.0, 3.0], requires_grad=True)
    b = t(np.ones((4, 3)), requires_grad=True)
    out = tz.mul(a, b)
    backward(out, seed=np.full((4, 3), 2.0))
    assert np.array_equal(a.grad, np.full(3, 8.0))
    assert np.allclose(b.grad, np.broadcast_to([2.0, 4.0, 6.0], (4, 3)))


def test_incompatible_broadcast_reports_both_shapes():
    a = t(np.ones((2, 3)))
    b = t(np.ones((4, 3)))
    with pytest.raises(ShapeError) as err:
        tz.add(a, b)
    assert "(2, 3)" in str(err.value) and "(4, 3)" in str(err.value)


def test_gradient_accumulates_across_uses():
    a = t([2.0], requires_grad=True)
    out = tz.add(tz.mul(a, a), a)
    backward(out, seed=np.ones(1))
    assert np.array_equal(a.grad, [5.0])


# ---------------------------------------------------------------------------
# Matmul and dense


@pytest.mark.parametrize("seed", range(3))
def test_matmul_gradient(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    gradcheck(lambda x, y: tz.reduce_mean(tz.matmul(x, y), (0, 1)), a, b)


def test_dense_identity_and_sum_fixture():
    x = t([[1.0, 2.0, 3.0]])
    w_id = t(np.eye(3))
    b0 = t(np.zeros(3))
    assert np.array_equal(tz.dense(x, w_id, b0).data, [[1, 2, 3]])
    w_ones = t(np.ones((1, 3)))
    assert np.array_equal(tz.dense(x, w_ones, t(np.zeros(1))).data, [[6.0]])


@pytest.mark.parametrize("seed", range(3))
def test_dense_gradient(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 5))
    w = rng.standard_normal((3, 5))
    b = rng.standard_normal(3)
    gradcheck(lambda a, c, d: tz.reduce_mean(tz.dense(a, c, d), (0, 1)), x, w, b)


def test_dense_shape_errors():
    with pytest.raises(ShapeError):
        tz.dense(t(np.ones((2, 3))), t(np.ones((4, 5))))
    with pytest.raises(ShapeError):
        tz.dense(t(np.ones((2, 3))), t(np.ones((4, 3))), t(np.ones(5)))


# ---------------------------------------------------------------------------
# Convolution


def test_conv_identity_kernel():
    x = t(np.arange(16.0).reshape(1, 1, 4, 4))
    w = t(np.ones((1, 1, 1, 1)))
    out = tz.conv2d(x, w, stride=1, padding=0)
    assert np.array_equal(out.data, x.data)


def test_conv_all_ones_sums_to_nine():
    x = t(np.ones((1, 1, 3, 3)))
    w = t(np.ones((1, 1, 3, 3)))
    out = tz.conv2d(x, w)
    assert out.shape == (1, 1, 1, 1)
    assert out.data.reshape(()) == 9.0


def test_conv_floor_output_extent_and_error():
    x = t(np.ones((1, 1, 28, 28)))
    w = t(np.ones((4, 1, 3, 3)))
    assert tz.conv2d(x, w, stride=2, padding=1).shape == (1, 4, 14, 14)
    small = t(np.ones((1, 1, 2, 2)))
    with pytest.raises(ShapeError):
        tz.conv2d(small, t(np.ones((1, 1, 5, 5))))


@pytest.mark.parametrize("seed", range(3))
def test_conv_kernel_gradient_vs_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 1, 5, 5))
    w = rng.standard_normal((2, 1, 3, 3))
    gradcheck(lambda a, k: tz.reduce_mean(tz.conv2d(a, k), (0, 1, 2, 3)), x, w)


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (2, 0)])
def test_conv_strided_padded_gradient(stride, padding):
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    gradcheck(lambda a, k: tz.reduce_mean(tz.conv2d(a, k, stride, padding),
                                          (0, 1, 2, 3)), x, w)


# ---------------------------------------------------------------------------
# Pooling


def test_max_pool_routes_gradient_to_first_argmax():
    x = t([[[[1.0, 1.0], [1.0, 1.0]]]], requires_grad=True)
    out = tz.max_pool2d(x, 2)
    backward(out, seed=np.ones((1, 1, 1, 1)))
    assert np.array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])


def test_avg_pool_distributes_uniformly():
    x = t(np.ones((1, 1, 4, 4)), requires_grad=True)
    out = tz.avg_pool2d(x, 2)
    backward(out, seed=np.ones((1, 1, 2, 2)))
    assert np.allclose(x.grad, 0.25)


def test_avg_pool_padding_counts_in_divisor():
    x = t(np.ones((1, 1, 2, 2)))
    out = tz.avg_pool2d(x, 2, stride=2, padding=1)
    # each window sees a single 1 among 4 slots
    assert np.allclose(out.data, 0.25)


@pytest.mark.parametrize("seed", range(3))
def test_pool_gradients(seed):
    rng = np.random.default_rng(seed)
    x = distinct_random(rng, (2, 2, 4, 4))
    gradcheck(lambda a: tz.reduce_mean(tz.max_pool2d(a, 2), (0, 1, 2, 3)), x)
    gradcheck(lambda a: tz.reduce_mean(tz.avg_pool2d(a, 2), (0, 1, 2, 3)), x)
    gradcheck(lambda a: tz.reduce_mean(tz.global_avg_pool(a), (0, 1)), x)
    gradcheck(lambda a: tz.reduce_mean(tz.adaptive_avg_pool2d(a, 3), (0, 1, 2, 3)), x)


def test_adaptive_pool_identity_and_window_match():
    x = np.random.default_rng(0).standard_normal((1, 2, 6, 6))
    same = tz.adaptive_avg_pool2d(t(x), 6)
    assert np.allclose(same.data, x)
    halved = tz.adaptive_avg_pool2d(t(x), 3)
    assert np.allclose(halved.data, tz.avg_pool2d(t(x), 2).data)


# ---------------------------------------------------------------------------
# Batchnorm


def test_batchnorm_fixed_point():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((8, 3, 4, 4))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    gamma = t(np.ones(3))
    beta = t(np.zeros(3))
    rm, rv = np.zeros(3), np.ones(3)
    out = tz.batchnorm2d(t(x), gamma, beta, rm, rv, training=True)
    assert np.allclose(out.data, x, atol=1e-4)


def test_batchnorm_constant_channel_gives_beta():
    x = t(np.full((4, 2, 3, 3), 7.0))
    beta = t(np.array([1.5, -2.0]))
    out = tz.batchnorm2d(x, t(np.ones(2)), beta, np.zeros(2), np.ones(2),
                         training=True)
    assert np.allclose(out.data[:, 0], 1.5, atol=1e-6)
    assert np.allclose(out.data[:, 1], -2.0, atol=1e-6)


def test_batchnorm_running_stats_update_and_infer():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((16, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    tz.batchnorm2d(t(x), t(np.ones(2)), t(np.zeros(2)), rm, rv, training=True,
                   momentum=0.1)
    n = 16 * 9
    expect_rm = 0.1 * x.mean(axis=(0, 2, 3))
    expect_rv = 0.9 + 0.1 * (x.var(axis=(0, 2, 3)) * n / (n - 1))
    assert np.allclose(rm, expect_rm)
    assert np.allclose(rv, expect_rv)
    frozen_rm, frozen_rv = rm.copy(), rv.copy()
    out = tz.batchnorm2d(t(x), t(np.ones(2)), t(np.zeros(2)), rm, rv,
                         training=False)
    assert np.array_equal(rm, frozen_rm) and np.array_equal(rv, frozen_rv)
    expect = (x - rm[None, :, None, None]) / np.sqrt(rv + 1e-5)[None, :, None, None]
    assert np.allclose(out.data, expect)


@pytest.mark.parametrize("seed", range(3))
def test_batchnorm_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 2, 3, 3))
    gamma = rng.standard_normal(2) + 2.0
    beta = rng.standard_normal(2)

    def fn(a, g, b):
        return tz.reduce_mean(
            tz.batchnorm2d(a, g, b, np.zeros(2), np.ones(2), training=True),
            (0, 1, 2, 3))

    gradcheck(fn, x, gamma, beta)


# ---------------------------------------------------------------------------
# Shape plumbing


@pytest.mark.parametrize("seed", range(2))
def test_shape_op_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4))
    gradcheck(lambda a: tz.reduce_mean(tz.reshape(a, (6, 4)), (0, 1)), x)
    gradcheck(lambda a: tz.reduce_mean(tz.permute(a, (2, 0, 1)), (0, 1, 2)), x)
    gradcheck(lambda a: tz.reduce_mean(tz.index_first(a, 1), (0, 1)), x)
    y = rng.standard_normal((2, 3, 4))
    gradcheck(lambda a, b: tz.reduce_mean(tz.concat([a, b], 1), (0, 1, 2)), x, y)


def test_stack_first_roundtrip_and_gradient():
    rng = np.random.default_rng(3)
    parts = [rng.standard_normal((2, 3)) for _ in range(4)]

    def fn(*ts):
        return tz.reduce_mean(tz.mul(tz.stack_first(list(ts)),
                                     tz.stack_first(list(ts))), (0, 1, 2))

    gradcheck(fn, *parts)
    stacked = tz.stack_first([t(p) for p in parts])
    assert stacked.shape == (4, 2, 3)
    assert np.array_equal(stacked.data[2], parts[2])


@pytest.mark.parametrize("seed", range(3))
def test_reduce_gradients(seed):
    rng = np.random.default_rng(seed)
    x = distinct_random(rng, (3, 4, 5))
    gradcheck(lambda a: tz.reduce_mean(a, (0, 1, 2)), x)
    gradcheck(lambda a: tz.reduce_mean(tz.reduce_max(a, (1,)), (0, 1)), x)
    gradcheck(lambda a: tz.reduce_mean(tz.reduce_max(a, (0, 2), keepdims=True),
                                       (0, 1, 2)), x)


def test_reduce_max_tie_takes_first_index():
    x = t([[3.0, 3.0, 1.0]], requires_grad=True)
    out = tz.reduce_max(x, (1,))
    backward(out, seed=np.ones(1))
    assert np.array_equal(x.grad, [[1.0, 0.0, 0.0]])


# ---------------------------------------------------------------------------
# Loss


def test_softmax_cross_entropy_uniform():
    logits = t(np.zeros((2, 4)), requires_grad=True)
    loss = tz.softmax_cross_entropy(logits, np.array([0, 3]))
    assert np.allclose(float(loss.data), np.log(4.0))
    backward(loss)
    probs = np.full((2, 4), 0.25)
    onehot = np.zeros((2, 4))
    onehot[0, 0] = onehot[1, 3] = 1.0
    assert np.allclose(logits.grad, (probs - onehot) / 2.0)


@pytest.mark.parametrize("seed", range(3))
def test_softmax_cross_entropy_gradient(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((5, 3))
    labels = rng.integers(0, 3, size=5)
    gradcheck(lambda a: tz.softmax_cross_entropy(a, labels), logits)


def test_softmax_cross_entropy_rejects_nonfinite():
    bad = t([[np.nan, 0.0]])
    with pytest.raises(NumericError):
        tz.softmax_cross_entropy(bad, np.array([0]))


# ---------------------------------------------------------------------------
# Tape mechanics


def test_backward_nonscalar_needs_seed():
    a = t([1.0, 2.0], requires_grad=True)
    out = tz.mul(a, a)
    with pytest.raises(GraphError):
        backward(out)


def test_no_grad_suppresses_graph():
    a = t([1.0], requires_grad=True)
    with no_grad():
        out = tz.mul(a, a)
    assert out.parents == ()
    assert not out.requires_grad
    backward(out, seed=np.ones(1))
    assert a.grad is None and out.grad is None


def test_tape_replay_is_bit_deterministic():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    grads = []
    for _ in range(2):
        clear_tape()
        xt = t(x, requires_grad=True)
        wt = t(w, requires_grad=True)
        out = tz.reduce_mean(tz.relu(tz.conv2d(xt, wt, 1, 1)), (0, 1, 2, 3))
        backward(out)
        grads.append((xt.grad.copy(), wt.grad.copy()))
    assert np.array_equal(grads[0][0], grads[1][0])
    assert np.array_equal(grads[0][1], grads[1][1])


def test_assert_finite_names_context():
    with pytest.raises(NumericError) as err:
        tz.assert_finite(np.array([1.0, np.inf]), "probe")
    assert "probe" in str(err.value)
