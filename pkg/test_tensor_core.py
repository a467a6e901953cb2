"""Tests for the tensor primitives, Adam and the gradient checker."""

import numpy as np
import pytest

from errors import ConfigurationError, NumericalError
from tensor_core import (
    Adam,
    AdamState,
    ConvKernel,
    Parameter,
    adam_step,
    add,
    add_backward,
    as_tensor,
    concat_channels,
    conv2d_backward,
    conv2d_forward,
    dropout,
    dropout_backward,
    elementwise_mul,
    elementwise_mul_backward,
    grad_check,
    parameter_objective,
    projected_objective,
    relu_backward,
    relu_forward,
    scale,
    split_channels,
)


def naive_conv(x, weight, bias):
    n, h, w, c_in = x.shape
    c_out, s, _, _ = weight.shape
    pad = (s - 1) // 2
    out = np.zeros((n, h, w, c_out))
    for b in range(n):
        for i in range(h):
            for j in range(w):
                for o in range(c_out):
                    acc = bias[o]
                    for di in range(s):
                        for dj in range(s):
                            ii, jj = i + di - pad, j + dj - pad
                            if 0 <= ii < h and 0 <= jj < w:
                                acc += np.dot(weight[o, di, dj, :], x[b, ii, jj, :])
                    out[b, i, j, o] = acc
    return out


def kernel(rng, c_in, c_out, size, name="k"):
    k = ConvKernel(name, c_in, c_out, size, rng)
    k.bias.value[...] = rng.standard_normal(c_out)
    return k


class TestTensor:
    def test_as_tensor_rejects_wrong_rank(self):
        with pytest.raises(ConfigurationError):
            as_tensor(np.zeros((2, 3)))

    def test_as_tensor_rejects_empty_dims(self):
        with pytest.raises(ConfigurationError):
            as_tensor(np.zeros((0, 2, 2, 1)))

    def test_as_tensor_is_float64(self):
        assert as_tensor(np.ones((1, 2, 2, 1), dtype=np.int32)).dtype == np.float64


class TestConv:
    def test_identity_kernel(self, rng):
        k = ConvKernel("id", 1, 1, 1, rng)
        k.weight.value[...] = 1.0
        x = rng.standard_normal((2, 3, 4, 1))
        np.testing.assert_array_equal(conv2d_forward(x, k), x)

    def test_zero_kernel_gives_bias(self, rng):
        k = ConvKernel("z", 2, 3, 3, init="zero")
        k.bias.value[...] = [0.5, -1.0, 2.0]
        out = conv2d_forward(rng.standard_normal((1, 4, 4, 2)), k)
        np.testing.assert_array_equal(out, np.broadcast_to([0.5, -1.0, 2.0], out.shape))

    @pytest.mark.parametrize("size", [1, 3, 5])
    def test_matches_naive_loop(self, rng, size):
        x = rng.standard_normal((1, 5, 5, 2))
        k = kernel(rng, 2, 3, size)
        expected = naive_conv(x, k.weight.value, k.bias.value)
        assert np.max(np.abs(conv2d_forward(x, k) - expected)) < 1e-12

    def test_preserves_spatial_dims(self, rng):
        for size in (1, 3, 5, 7):
            out = conv2d_forward(rng.standard_normal((2, 3, 6, 2)), kernel(rng, 2, 4, size))
            assert out.shape == (2, 3, 6, 4)

    def test_channel_mismatch_names_both_counts(self, rng):
        k = kernel(rng, 3, 2, 3, name="stem")
        with pytest.raises(ConfigurationError, match="2 channels.*expects 3"):
            conv2d_forward(np.zeros((1, 4, 4, 2)), k)

    def test_even_kernel_rejected(self, rng):
        with pytest.raises(ConfigurationError):
            ConvKernel("even", 1, 1, 2, rng)

    def test_linear_without_bias(self, rng):
        k = ConvKernel("lin", 2, 3, 3, rng)
        a = rng.standard_normal((2, 4, 5, 2))
        b = rng.standard_normal((2, 4, 5, 2))
        lhs = conv2d_forward(0.3 * a - 1.7 * b, k)
        rhs = 0.3 * conv2d_forward(a, k) - 1.7 * conv2d_forward(b, k)
        assert np.max(np.abs(lhs - rhs)) < 1e-12

    def test_zero_cotangent(self, rng):
        k = kernel(rng, 2, 3, 3)
        x = rng.standard_normal((2, 4, 4, 2))
        grad_in = conv2d_backward(x, k, np.zeros((2, 4, 4, 3)))
        assert not grad_in.any()
        assert not k.weight.grad.any() and not k.bias.grad.any()

    def test_identity_adjoint(self, rng):
        k = ConvKernel("id", 1, 1, 1, init="zero")
        k.weight.value[...] = 1.0
        g = rng.standard_normal((2, 3, 3, 1))
        np.testing.assert_array_equal(conv2d_backward(np.zeros_like(g), k, g), g)

    def test_bias_grad_is_channel_sum(self, rng):
        k = kernel(rng, 2, 3, 3)
        g = rng.standard_normal((2, 4, 4, 3))
        conv2d_backward(rng.standard_normal((2, 4, 4, 2)), k, g)
        np.testing.assert_allclose(k.bias.grad, g.sum(axis=(0, 1, 2)), rtol=1e-12)

    def test_grad_shape_mismatch(self, rng):
        k = kernel(rng, 2, 3, 3)
        with pytest.raises(ConfigurationError):
            conv2d_backward(np.zeros((1, 4, 4, 2)), k, np.zeros((1, 4, 4, 2)))

    def test_grads_accumulate_until_reset(self, rng):
        k = kernel(rng, 2, 2, 3)
        x = rng.standard_normal((1, 3, 3, 2))
        g = rng.standard_normal((1, 3, 3, 2))
        conv2d_backward(x, k, g)
        once = k.weight.grad.copy()
        conv2d_backward(x, k, g)
        np.testing.assert_allclose(k.weight.grad, 2 * once)
        k.zero_grad()
        assert not k.weight.grad.any()

    @pytest.mark.parametrize("size", [1, 3])
    def test_input_gradient(self, rng, size):
        k = kernel(rng, 2, 3, size)
        x = rng.standard_normal((2, 4, 4, 2))
        direction = rng.standard_normal((2, 4, 4, 3))
        fn = projected_objective(lambda v: conv2d_forward(v, k), lambda g: conv2d_backward(x, k, g), direction)
        assert grad_check(fn, x) < 1e-6

    def test_weight_and_bias_gradients(self, rng):
        k = kernel(rng, 2, 3, 3)
        x = rng.standard_normal((2, 4, 4, 2))
        direction = rng.standard_normal((2, 4, 4, 3))

        def run():
            return conv2d_forward(x, k), lambda g: conv2d_backward(x, k, g)

        for p in k.parameters():
            assert grad_check(parameter_objective(p, k.parameters(), run, direction), p.value.copy()) < 1e-6


class TestRelu:
    def test_definition(self):
        x = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 3, 1)
        np.testing.assert_array_equal(relu_forward(x).ravel(), [0.0, 0.0, 2.0])

    def test_subgradient_zero_at_zero(self):
        x = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 3, 1)
        np.testing.assert_array_equal(relu_backward(x, np.ones_like(x)).ravel(), [0.0, 0.0, 1.0])

    def test_nonnegative_input_passes_through(self, rng):
        x = rng.uniform(0.0, 1.0, (2, 3, 3, 2))
        g = rng.standard_normal(x.shape)
        np.testing.assert_array_equal(relu_forward(x), x)
        np.testing.assert_array_equal(relu_backward(x, g), g)

    def test_gradient_away_from_kink(self, rng):
        x = rng.standard_normal((2, 3, 3, 2))
        x = np.where(np.abs(x) < 1e-3, 1e-2, x)
        direction = rng.standard_normal(x.shape)
        fn = projected_objective(relu_forward, lambda g: relu_backward(x, g), direction)
        assert grad_check(fn, x) < 1e-6


class TestDropout:
    def test_rate_zero_is_identity(self, rng):
        x = rng.standard_normal((2, 3, 3, 4))
        for mode in ("train", "eval"):
            out, mask = dropout(x, 0.0, mode, rng)
            np.testing.assert_array_equal(out, x)
            assert np.all(mask == 1.0)

    def test_eval_mode_is_identity(self, rng):
        x = rng.standard_normal((2, 3, 3, 4))
        out, _ = dropout(x, 0.5, "eval", None)
        np.testing.assert_array_equal(out, x)

    def test_inverted_scaling_keeps_mean(self):
        x = np.ones((10, 100, 100, 10))
        out, mask = dropout(x, 0.5, "train", np.random.default_rng(0))
        assert abs(out.mean() - 1.0) < 0.01
        assert set(np.unique(mask)) <= {0.0, 2.0}

    def test_same_seed_same_mask(self):
        x = np.ones((2, 4, 4, 3))
        _, m1 = dropout(x, 0.3, "train", np.random.default_rng(7))
        _, m2 = dropout(x, 0.3, "train", np.random.default_rng(7))
        np.testing.assert_array_equal(m1, m2)

    def test_backward_uses_mask(self, rng):
        x = np.ones((1, 3, 3, 2))
        _, mask = dropout(x, 0.5, "train", rng)
        g = rng.standard_normal(x.shape)
        np.testing.assert_array_equal(dropout_backward(g, mask), g * mask)

    @pytest.mark.parametrize("rate", [1.0, 1.5, -0.1])
    def test_invalid_rate(self, rng, rate):
        with pytest.raises(ConfigurationError):
            dropout(np.ones((1, 1, 1, 1)), rate, "train", rng)

    def test_unknown_mode(self, rng):
        with pytest.raises(ConfigurationError):
            dropout(np.ones((1, 1, 1, 1)), 0.5, "predict", rng)


class TestConcatAndElementwise:
    def test_single_part_identity(self, rng):
        x = rng.standard_normal((2, 3, 3, 2))
        assert concat_channels([x]) is x

    def test_order_and_width(self, rng):
        a = rng.standard_normal((2, 3, 3, 2))
        b = rng.standard_normal((2, 3, 3, 3))
        out = concat_channels([a, b])
        assert out.shape == (2, 3, 3, 5)
        np.testing.assert_array_equal(out[..., :2], a)
        np.testing.assert_array_equal(out[..., 2:], b)

    def test_split_recovers_parts(self, rng):
        a = rng.standard_normal((2, 3, 3, 2))
        b = rng.standard_normal((2, 3, 3, 3))
        sa, sb = split_channels(concat_channels([a, b]), [2, 3])
        np.testing.assert_array_equal(sa, a)
        np.testing.assert_array_equal(sb, b)

    def test_spatial_mismatch(self, rng):
        with pytest.raises(ConfigurationError):
            concat_channels([np.zeros((1, 3, 3, 1)), np.zeros((1, 3, 4, 1))])

    def test_add_zero_and_mul_one(self, rng):
        a = rng.standard_normal((2, 3, 3, 2))
        np.testing.assert_array_equal(add(a, np.zeros_like(a)), a)
        np.testing.assert_array_equal(elementwise_mul(a, np.ones_like(a)), a)
        np.testing.assert_array_equal(scale(a, 1.0), a)

    def test_add_broadcasts_over_samples(self, rng):
        a = rng.standard_normal((3, 2, 2, 2))
        e = rng.standard_normal((1, 2, 2, 2))
        np.testing.assert_array_equal(add(a, e), a + e)
        g = rng.standard_normal(a.shape)
        grad_a, grad_e = add_backward(g, e.shape)
        np.testing.assert_array_equal(grad_a, g)
        np.testing.assert_allclose(grad_e, g.sum(axis=0, keepdims=True))

    def test_incongruent_shapes(self):
        with pytest.raises(ConfigurationError):
            add(np.zeros((2, 2, 2, 1)), np.zeros((2, 2, 2, 2)))

    def test_mul_gradients(self, rng):
        a = rng.standard_normal((2, 3, 3, 2))
        b = rng.standard_normal((1, 3, 3, 2))
        direction = rng.standard_normal(a.shape)
        fa = projected_objective(lambda v: elementwise_mul(v, b),
                                 lambda g: elementwise_mul_backward(a, b, g)[0], direction)
        fb = projected_objective(lambda v: elementwise_mul(a, v),
                                 lambda g: elementwise_mul_backward(a, b, g)[1], direction)
        assert grad_check(fa, a) < 1e-6
        assert grad_check(fb, b) < 1e-6


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = Parameter("w", np.array([1.0, -2.0]))
        states = {"w": AdamState.like(p, lr=0.1)}
        adam_step([p], states)
        np.testing.assert_array_equal(p.value, [1.0, -2.0])
        assert states["w"].step == 1

    def test_first_step_by_hand(self):
        p = Parameter("theta", np.zeros(1))
        p.grad[...] = 1.0
        states = {"theta": AdamState.like(p, lr=0.001)}
        adam_step([p], states)
        assert abs(p.value[0] + 0.001) < 1e-10
        assert not p.grad.any()

    def test_nan_gradient_names_parameter(self):
        good = Parameter("good", np.ones(2))
        bad = Parameter("block00.merge.weight", np.ones(2))
        bad.grad[0] = np.nan
        states = {p.name: AdamState.like(p) for p in (good, bad)}
        with pytest.raises(NumericalError, match="block00.merge.weight"):
            adam_step([good, bad], states)
        np.testing.assert_array_equal(good.value, [1.0, 1.0])

    def test_quadratic_descent(self):
        p = Parameter("theta", np.ones(1))
        opt = Adam(lr=0.1)
        history = []
        for _ in range(100):
            p.grad[...] = 2.0 * p.value
            opt.step([p])
            history.append(abs(p.value[0]))
        assert history[-1] < 0.1
        assert opt.states["theta"].step == 100

    def test_deterministic(self):
        def run():
            p = Parameter("w", np.array([0.5, -0.5]))
            opt = Adam(lr=0.01)
            for g in ([1.0, 2.0], [-0.5, 0.1], [0.3, 0.3]):
                p.grad[...] = g
                opt.step([p])
            return p.value.copy()

        np.testing.assert_array_equal(run(), run())


class TestGradCheck:
    def test_linear_function_is_exact(self, rng):
        coef = rng.standard_normal((2, 3))

        def fn(x):
            return float(np.sum(coef * x)), coef.copy()

        assert grad_check(fn, rng.standard_normal((2, 3))) < 1e-9

    def test_detects_wrong_gradient(self, rng):
        def fn(x):
            return float(np.sum(x ** 2)), 3.0 * x

        assert grad_check(fn, rng.uniform(0.5, 1.0, (4,))) > 0.1

    def test_parameter_restored_after_check(self, rng):
        k = kernel(rng, 1, 1, 3)
        x = rng.standard_normal((1, 3, 3, 1))
        before = k.weight.value.copy()

        def run():
            return conv2d_forward(x, k), lambda g: conv2d_backward(x, k, g)

        grad_check(parameter_objective(k.weight, k.parameters(), run, np.ones((1, 3, 3, 1))), before.copy())
        np.testing.assert_array_equal(k.weight.value, before)
