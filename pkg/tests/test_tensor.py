import numpy as np
import pytest

from mocosas import tensor as T
from mocosas.gradcheck import check_gradients, numeric_grad, relative_error
from mocosas.tensor import Tape, Tensor, backward


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def sliding_sum(x, k, pad):
    """Direct loop reference for a single-channel all-ones kernel."""
    xp = np.pad(x, pad)
    h, w = xp.shape
    out = np.zeros((h - k + 1, w - k + 1))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            out[i, j] = xp[i : i + k, j : j + k].sum()
    return out


# ---------------------------------------------------------------- conv2d


def test_conv_all_ones_center_and_corner():
    x = Tensor(np.ones((1, 1, 4, 4)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = T.conv2d(x, w, Tensor(np.zeros(1)), stride=1, padding=1).data[0, 0]
    ref = sliding_sum(np.ones((4, 4)), 3, 1)
    np.testing.assert_array_equal(out, ref)
    assert out[1, 1] == 9.0
    assert out[0, 0] == 4.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 1, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_matches_loop_reference_multichannel():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros(out.shape)
    for n in range(2):
        for o in range(4):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref[n, o, i, j] = (xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("size,k,stride,pad", [(224, 7, 2, 3), (112, 3, 1, 1), (56, 3, 2, 1), (56, 1, 2, 0), (33, 7, 2, 3)])
def test_conv_output_size_formula(size, k, stride, pad):
    out = T.conv2d(Tensor(np.zeros((1, 1, size, size))), Tensor(np.zeros((2, 1, k, k))), stride=stride, padding=pad)
    expect = (size + 2 * pad - k) // stride + 1
    assert out.shape == (1, 2, expect, expect)


def test_conv_first_layer_parameter_count():
    w = np.zeros((64, 1, 7, 7))
    b = np.zeros(64)
    assert w.size + b.size == 3200


def test_conv_shape_errors_name_dimensions():
    with pytest.raises(ValueError, match="channel"):
        T.conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


# ---------------------------------------------------------------- batchnorm


def test_batchnorm_two_values():
    x = Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1, 1))
    rm, rv = np.zeros(1), np.ones(1)
    out = T.batchnorm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, eps=1e-5, training=True)
    # var = 1, so outputs are +-1 / sqrt(1 + eps)
    np.testing.assert_allclose(out.data.ravel(), [-1 / np.sqrt(1 + 1e-5), 1 / np.sqrt(1 + 1e-5)], rtol=1e-12)
    # running stats: unbiased var 2, mean 2
    np.testing.assert_allclose(rm, [0.2])
    np.testing.assert_allclose(rv, [0.9 + 0.1 * 2.0])


def test_batchnorm_zero_gamma_gives_beta():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 2, 4, 4)))
    out = T.batchnorm2d(x, Tensor(np.zeros(2)), Tensor(np.array([0.5, -2.0])), np.zeros(2), np.ones(2))
    np.testing.assert_array_equal(out.data[:, 0], 0.5)
    np.testing.assert_array_equal(out.data[:, 1], -2.0)


def test_batchnorm_eval_identity_stats():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
    out = T.batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), training=False)
    np.testing.assert_allclose(out.data, x / np.sqrt(1 + 1e-5), rtol=1e-12)


def test_batchnorm_training_moments():
    rng = np.random.default_rng(3)
    for _ in range(10):
        x = rng.normal(2.0, 3.0, size=(4, 3, 5, 5))
        gamma = rng.uniform(0.5, 2.0, size=3) * rng.choice([-1, 1], size=3)
        beta = rng.normal(size=3)
        out = T.batchnorm2d(Tensor(x), Tensor(gamma), Tensor(beta), np.zeros(3), np.ones(3)).data
        for c in range(3):
            assert abs(out[:, c].mean() - beta[c]) < 1e-6
            assert abs(out[:, c].std() - abs(gamma[c])) / abs(gamma[c]) < 1e-3


def test_batchnorm_channel_mismatch():
    with pytest.raises(ValueError, match="channel"):
        T.batchnorm2d(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3))


# ---------------------------------------------------------------- relu / pools / linear / normalize


def test_relu_values_and_gradient():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    x = leaf([-1.0, 2.0])
    with Tape() as tape:
        y = T.tsum(T.relu(x))
    backward(y, tape)
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])
    num = numeric_grad(lambda: float(T.tsum(T.relu(Tensor(x.data))).data), x.data)
    np.testing.assert_allclose(x.grad, num, atol=1e-9)


def test_relu_nonnegative_unchanged():
    a = np.array([0.0, 1.0, 3.5])
    np.testing.assert_array_equal(T.relu(Tensor(a)).data, a)


def test_maxpool_basic_constant_and_geometry():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    assert T.maxpool2d(x, 2, 2, 0).data.item() == 4.0
    c = T.maxpool2d(Tensor(np.full((1, 2, 6, 6), 1.5)), 3, 2, 1).data
    np.testing.assert_array_equal(c, 1.5)
    assert T.maxpool2d(Tensor(np.zeros((1, 1, 112, 112))), 3, 2, 1).shape == (1, 1, 56, 56)


def test_maxpool_padding_never_wins_and_tie_break():
    x = leaf(np.full((1, 1, 2, 2), -5.0))
    with Tape() as tape:
        out = T.maxpool2d(x, 2, 2, 0)
        y = T.tsum(out)
    assert out.data.item() == -5.0
    backward(y, tape)
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])
    neg = T.maxpool2d(Tensor(np.full((1, 1, 3, 3), -7.0)), 3, 2, 1).data
    np.testing.assert_array_equal(neg, -7.0)


def test_maxpool_window_too_large():
    with pytest.raises(ValueError):
        T.maxpool2d(Tensor(np.zeros((1, 1, 2, 2))), 5, 1, 0)


def test_avgpool_mean_and_gradient():
    x = leaf(np.array([2.0, 4.0, 6.0, 8.0]).reshape(1, 1, 2, 2))
    with Tape() as tape:
        out = T.adaptive_avg_pool2d(x, 1)
        y = T.tsum(out)
    assert out.data.item() == 5.0
    backward(y, tape)
    np.testing.assert_allclose(x.grad, np.full((1, 1, 2, 2), 0.25))
    assert T.adaptive_avg_pool2d(Tensor(np.full((1, 1, 3, 3), 7.0))).data.item() == 7.0


def test_linear_examples():
    x = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(T.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    out = T.linear(Tensor([[1.0, 2.0]]), Tensor([[1.0], [1.0]]), Tensor([0.5]))
    np.testing.assert_array_equal(out.data, [[3.5]])
    with pytest.raises(ValueError):
        T.linear(Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 2))))


def test_linear_weight_gradient_finite_difference():
    rng = np.random.default_rng(2)
    x, w, b = leaf(rng.normal(size=(5, 3))), leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=4))
    r = rng.normal(size=(5, 4))
    errs = check_gradients(lambda: T.tsum(T.mul(T.linear(x, w, b), Tensor(r))), [x, w, b])
    assert max(errs.values()) < 1e-6


def test_l2_normalize_examples():
    np.testing.assert_allclose(T.l2_normalize(Tensor([[3.0, 4.0]])).data, [[0.6, 0.8]])
    u = np.array([[0.0, 1.0, 0.0]])
    np.testing.assert_array_equal(T.l2_normalize(Tensor(u)).data, u)
    z = T.l2_normalize(Tensor(np.zeros((1, 3))), eps=1e-12).data
    np.testing.assert_array_equal(z, 0.0)


# ---------------------------------------------------------------- backward semantics


def test_backward_sum_of_leaf_gives_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    with Tape() as tape:
        y = T.tsum(x)
    grads = backward(y, tape)
    np.testing.assert_array_equal(grads[x], np.ones((2, 3)))


def test_backward_constant_root_no_gradients():
    c = Tensor(np.array(3.0))
    with Tape() as tape:
        y = T.scale(c, 2.0)
    assert backward(y, tape) == {}
    assert len(tape) == 0


def test_backward_errors():
    x = leaf(np.ones(3))
    with Tape() as tape:
        y = T.scale(x, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        backward(y, tape)
    with Tape() as other:
        pass
    with Tape():
        z = T.tsum(x)
    with pytest.raises(ValueError, match="tape"):
        backward(z, other)


def test_no_recording_outside_tape():
    x = leaf(np.ones(3))
    y = T.tsum(T.mul(x, x))
    assert not y.requires_grad


def test_gradient_accumulates_across_uses():
    x = leaf([1.0, -2.0])
    with Tape() as tape:
        y = T.tsum(T.add(T.mul(x, x), x))
    backward(y, tape)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def _composite(rng):
    x = leaf(rng.normal(size=(2, 2, 8, 8)))
    w = leaf(rng.normal(size=(3, 2, 3, 3)) * 0.5)
    b = leaf(rng.normal(size=3))
    gamma = leaf(rng.uniform(0.5, 1.5, size=3))
    beta = leaf(rng.normal(size=3))
    lw = leaf(rng.normal(size=(3, 2)))
    lb = leaf(rng.normal(size=2))
    target = rng.integers(0, 2, size=2)

    def loss():
        h = T.conv2d(x, w, b, stride=1, padding=1)
        h = T.batchnorm2d(h, gamma, beta, np.zeros(3), np.ones(3), training=True)
        h = T.maxpool2d(T.relu(h), 3, 2, 1)
        h = T.flatten(T.adaptive_avg_pool2d(h))
        return T.softmax_cross_entropy(T.linear(h, lw, lb), target)

    return loss, [x, w, b, gamma, beta, lw, lb]


def test_composite_chain_matches_finite_differences():
    loss, leaves = _composite(np.random.default_rng(11))
    errs = check_gradients(loss, leaves, h=1e-5)
    assert max(errs.values()) < 1e-5, errs


def test_backward_is_deterministic():
    out = []
    for _ in range(2):
        loss, leaves = _composite(np.random.default_rng(5))
        with Tape() as tape:
            y = loss()
        backward(y, tape)
        out.append([l.grad.copy() for l in leaves])
    for a, b in zip(*out):
        assert a.tobytes() == b.tobytes()


def test_relative_error_ignores_tiny_entries():
    assert relative_error(np.array([1e-12, 1.0]), np.array([5.0, 1.0])) == 0.0
