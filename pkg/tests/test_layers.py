"""Layer forward/backward tests against nested-loop and finite-difference oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spreid.gradcheck import numerical_grad, relative_error
from spreid.layers import (
    Conv2d,
    GlobalAvgPool,
    Linear,
    MaxPool2d,
    ReLU,
    Tape,
    conv2d_backward,
    conv2d_forward,
    conv_output_size,
    global_avg_pool,
    max_pool2d_backward,
    max_pool2d_forward,
    pixel_softmax_cross_entropy,
    softmax_cross_entropy,
)
from spreid.tensor import DimensionError, DomainError


def loop_conv(x, w, b, stride, dilation, padding):
    """Six nested loops over (n, o, i, j, c, ki, kj) with explicit bounds checks."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for s in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for c in range(cin):
                        for a in range(kh):
                            for d in range(kw):
                                y = i * stride + a * dilation - padding
                                z = j * stride + d * dilation - padding
                                if 0 <= y < h and 0 <= z < wd:
                                    acc += w[o, c, a, d] * x[s, c, y, z]
                    out[s, o, i, j] = acc
    return out


def loop_maxpool(x, k, stride, padding):
    n, c, h, w = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    out = np.full((n, c, ho, wo), -np.inf)
    for s in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    for a in range(k):
                        for d in range(k):
                            y, z = i * stride + a - padding, j * stride + d - padding
                            if 0 <= y < h and 0 <= z < w:
                                out[s, ch, i, j] = max(out[s, ch, i, j], x[s, ch, y, z])
    return out


class TestConv:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(2, 1, 4, 5))
        out, _ = conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1))
        assert np.array_equal(out, x)

    def test_all_ones_counts_overlap(self):
        out, _ = conv2d_forward(np.full((1, 1, 5, 5), 2.0), np.ones((1, 1, 3, 3)), np.zeros(1), padding=1)
        assert out[0, 0, 2, 2] == 18.0 and out[0, 0, 0, 0] == 8.0 and out[0, 0, 0, 2] == 12.0

    def test_dilated_impulse(self):
        x = np.zeros((1, 1, 9, 9))
        x[0, 0, 4, 4] = 1.0
        w = np.random.default_rng(1).normal(size=(1, 1, 3, 3))
        for d in (1, 2):
            out, _ = conv2d_forward(x, w, np.zeros(1), dilation=d, padding=d)
            nz = set(zip(*np.nonzero(out[0, 0])))
            assert nz == {(4 + a * d, 4 + b * d) for a in (-1, 0, 1) for b in (-1, 0, 1)}
            assert np.allclose(out, loop_conv(x, w, np.zeros(1), 1, d, d), atol=1e-12)

    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("dilation", [1, 2, 3, 6])
    @pytest.mark.parametrize("padding", [0, 1, 2])
    def test_against_loop_oracle(self, stride, dilation, padding):
        rng = np.random.default_rng(stride * 100 + dilation * 10 + padding)
        size = dilation * 2 + 4
        x = rng.normal(size=(2, 2, size, size + 1))
        w, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        out, _ = conv2d_forward(x, w, b, stride, dilation, padding)
        assert np.max(np.abs(out - loop_conv(x, w, b, stride, dilation, padding))) <= 1e-12

    def test_dilation_equals_zero_inflated_kernel(self):
        rng = np.random.default_rng(2)
        x, w = rng.normal(size=(1, 2, 11, 11)), rng.normal(size=(2, 2, 3, 3))
        d = 3
        inflated = np.zeros((2, 2, d * 2 + 1, d * 2 + 1))
        inflated[:, :, ::d, ::d] = w
        a, _ = conv2d_forward(x, w, np.zeros(2), dilation=d, padding=d)
        b, _ = conv2d_forward(x, inflated, np.zeros(2), dilation=1, padding=d)
        assert np.allclose(a, b, atol=1e-12)

    def test_backward_zero_upstream(self):
        rng = np.random.default_rng(3)
        out, cache = conv2d_forward(rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(2, 2, 3, 3)), np.zeros(2), padding=1)
        dx, dw, db = conv2d_backward(cache, np.zeros_like(out))
        assert not dx.any() and not dw.any() and not db.any()

    def test_bias_grad_is_channel_sum(self):
        rng = np.random.default_rng(4)
        out, cache = conv2d_forward(rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), np.zeros(3))
        g = rng.normal(size=out.shape)
        assert np.allclose(conv2d_backward(cache, g)[2], g.sum(axis=(0, 2, 3)))

    def test_finite_difference(self):
        rng = np.random.default_rng(5)
        x, w, b = rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2)
        out, cache = conv2d_forward(x, w, b, padding=1)
        g = rng.normal(size=out.shape)
        dx, dw, db = conv2d_backward(cache, g)
        f = lambda: np.sum(conv2d_forward(x, w, b, padding=1)[0] * g)
        assert relative_error(dx, numerical_grad(f, x)) < 1e-6
        assert relative_error(dw, numerical_grad(f, w)) < 1e-6
        assert relative_error(db, numerical_grad(f, b)) < 1e-6

    def test_output_size_formula(self):
        assert conv_output_size(7, 3, 2, 1, 1) == 4
        assert conv_output_size(10, 3, 1, 6, 6) == 10

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))

    def test_too_small(self):
        with pytest.raises(DimensionError):
            conv2d_forward(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1))

    def test_same_padding_default(self):
        layer = Conv2d("c", 1, 1, kernel=3, dilation=6)
        assert layer.padding == 6 and layer.output_size(13, 9) == (13, 9)

    def test_layer_accumulates_grads_on_tape(self):
        rng = np.random.default_rng(6)
        layer = Conv2d("c", 2, 2, rng=rng)
        tape = Tape()
        out = layer(rng.normal(size=(1, 2, 4, 4)), tape)
        tape.backward(np.ones_like(out))
        tape.backward(np.ones_like(out))
        assert np.allclose(layer.bias.grad, 2 * 16)
        assert layer.weight.grad.shape == layer.weight.value.shape


class TestMaxPool:
    def test_two_by_two(self):
        out, _ = max_pool2d_forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2)
        assert out.item() == 4.0

    def test_constant(self):
        out, _ = max_pool2d_forward(np.full((1, 2, 6, 6), 3.0), 3, 2, 1)
        assert np.all(out == 3.0)

    @pytest.mark.parametrize("k,stride,pad", [(3, 2, 1), (2, 2, 0), (3, 1, 1), (3, 3, 0)])
    def test_against_loop_oracle(self, k, stride, pad):
        x = np.random.default_rng(k + stride + pad).normal(size=(2, 3, 7, 8))
        out, _ = max_pool2d_forward(x, k, stride, pad)
        assert np.array_equal(out, loop_maxpool(x, k, stride, pad))

    def test_ties_route_to_first_row_major(self):
        x = np.ones((1, 1, 2, 2))
        out, cache = max_pool2d_forward(x, 2, 2)
        dx = max_pool2d_backward(cache, np.ones_like(out))
        assert dx[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]

    def test_layer_shape(self):
        assert MaxPool2d("p").output_size(16, 6) == (8, 3)


class TestReLU:
    def test_negative_and_positive(self):
        layer = ReLU()
        assert not layer(-np.ones((2, 3))).any()
        x = np.arange(1.0, 5.0)
        assert np.array_equal(layer(x), x)

    def test_gradient_zero_at_kink(self):
        tape = Tape()
        ReLU()(np.array([0.0, 1.0, -1.0]), tape)
        assert tape.backward(np.ones(3)).tolist() == [0.0, 1.0, 0.0]

    def test_finite_difference_away_from_zero(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(3, 4))
        x[np.abs(x) < 0.1] += 0.3
        g = rng.normal(size=x.shape)
        tape = Tape()
        ReLU()(x, tape)
        dx = tape.backward(g)
        assert relative_error(dx, numerical_grad(lambda: np.sum(ReLU()(x) * g), x)) < 1e-6


class TestGlobalAvgPool:
    def test_constant_and_hand_value(self):
        assert np.all(global_avg_pool(np.full((1, 2, 3, 3), 1.5)) == 1.5)
        assert global_avg_pool(np.array([[[[1.0, 3.0], [5.0, 7.0]]]])).item() == 4.0

    def test_backward_spreads_evenly(self):
        tape = Tape()
        GlobalAvgPool()(np.zeros((1, 2, 2, 5)), tape)
        assert np.allclose(tape.backward(np.ones((1, 2))), 0.1)


class TestSoftmaxCrossEntropy:
    def test_uniform_is_log_k(self):
        loss, _ = softmax_cross_entropy(np.zeros((3, 4)), np.array([0, 1, 3]))
        assert loss == pytest.approx(1.386294, abs=1e-6)

    def test_saturation(self):
        z = np.zeros((1, 5))
        z[0, 2] = 50.0
        assert softmax_cross_entropy(z, np.array([2]))[0] < 1e-9

    def test_gradient_formula_and_fd(self):
        rng = np.random.default_rng(8)
        z, y = rng.normal(size=(3, 5)), np.array([0, 4, 2])
        loss, g = softmax_cross_entropy(z, y)
        p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
        assert np.allclose(g, (p - np.eye(5)[y]) / 3, atol=1e-15)
        assert relative_error(g, numerical_grad(lambda: softmax_cross_entropy(z, y)[0], z)) < 1e-6

    def test_label_out_of_range(self):
        with pytest.raises(DomainError):
            softmax_cross_entropy(np.zeros((1, 3)), np.array([3]))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.floats(-100, 100))
    def test_shift_invariant(self, seed, c):
        rng = np.random.default_rng(seed)
        z, y = rng.normal(size=(4, 6)), rng.integers(6, size=4)
        assert softmax_cross_entropy(z + c, y)[0] == pytest.approx(softmax_cross_entropy(z, y)[0], abs=1e-9)

    def test_pixel_variant_matches_flattened(self):
        rng = np.random.default_rng(9)
        z, y = rng.normal(size=(2, 4, 3, 5)), rng.integers(4, size=(2, 3, 5))
        loss, g = pixel_softmax_cross_entropy(z, y)
        flat_loss, flat_g = softmax_cross_entropy(z.transpose(0, 2, 3, 1).reshape(-1, 4), y.ravel())
        assert loss == flat_loss
        assert np.array_equal(g.transpose(0, 2, 3, 1).reshape(-1, 4), flat_g)


class TestLinear:
    def test_forward_backward(self):
        rng = np.random.default_rng(10)
        layer = Linear("fc", 4, 3, rng=rng)
        x, g = rng.normal(size=(5, 4)), rng.normal(size=(5, 3))
        tape = Tape()
        out = layer(x, tape)
        assert np.allclose(out, x @ layer.weight.value.T)
        dx = tape.backward(g)
        assert np.allclose(layer.weight.grad, g.T @ x) and np.allclose(dx, g @ layer.weight.value)

    def test_tape_reverse_order(self):
        order = []
        tape = Tape()
        for name in "abc":
            tape.record(name, lambda g, name=name: order.append(name) or g)
        tape.backward(0.0)
        assert order == ["c", "b", "a"] and tape.names() == ["a", "b", "c"]
