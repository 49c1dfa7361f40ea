"""
Tests for the ndgrad tensor engine: gradients of every op against finite differences,
convolution oracles, graph bookkeeping and the optimizer
"""

import numpy as np
import pytest

import ndgrad
from exceptions import ConfigError, GraphError, NumericalError, ShapeError
from models import NetworkParams
from ndgrad import (
    AdamState,
    Graph,
    Tensor,
    adam_step,
    add,
    backward,
    conv2d,
    dense,
    gradcheck,
    leaky_relu,
    mean,
    mse,
    no_grad,
    positive_part,
    reshape,
    scale,
    shift,
    sq_distance,
    take_channel,
    tconv2d,
    tconv_output_size,
    total,
    xavier_init,
)

TOLERANCE = 1e-4


def away_from_zero(rng, shape):
    """Values with |x| in [0.1, 1] so finite differences never cross a kink"""
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)


def leaf(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


def naive_conv2d(x, w, stride, padding):
    n, c, h, width = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (width + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, out_h, out_w))
    for b in range(n):
        for oc in range(o):
            for i in range(out_h):
                for j in range(out_w):
                    patch = xp[b, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[b, oc, i, j] = np.sum(patch * w[oc])
    return out


# ============================================================
# Elementwise and reduction ops
# ============================================================


class TestElementwiseGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_add_scale_shift(self, seed):
        rng = np.random.default_rng(seed)
        a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(3, 4)))
        target = Tensor(rng.normal(size=(3, 4)))
        offset = rng.normal(size=(3, 4))
        fn = lambda: mse(shift(scale(add(a, b), -1.7), offset), target)
        assert gradcheck(fn, [a, b]) < TOLERANCE

    @pytest.mark.parametrize("seed", range(5))
    def test_reshape_total_mean(self, seed):
        rng = np.random.default_rng(seed)
        x = leaf(rng.normal(size=(2, 6)))
        target = Tensor(rng.normal(size=(3, 4)))
        fn = lambda: add(mean(reshape(x, (3, 4))), scale(total(x), 0.3))
        assert gradcheck(fn, [x]) < TOLERANCE
        fn = lambda: mse(reshape(x, (3, 4)), target)
        assert gradcheck(fn, [x]) < TOLERANCE

    @pytest.mark.parametrize("seed", range(5))
    def test_leaky_relu_and_positive_part(self, seed):
        rng = np.random.default_rng(seed)
        x = leaf(away_from_zero(rng, (4, 5)))
        target = Tensor(rng.normal(size=(4, 5)))
        assert gradcheck(lambda: mse(leaky_relu(x, 0.1), target), [x]) < TOLERANCE
        assert gradcheck(lambda: mse(positive_part(x), target), [x]) < TOLERANCE

    @pytest.mark.parametrize("seed", range(5))
    def test_sq_distance(self, seed):
        rng = np.random.default_rng(seed)
        emb = leaf(rng.normal(size=(5, 3)))
        center = rng.normal(size=3)
        assert gradcheck(lambda: mean(sq_distance(emb, center)), [emb]) < TOLERANCE

    def test_take_channel(self, rng):
        x = leaf(rng.normal(size=(2, 3, 4, 4)))
        target = Tensor(rng.normal(size=(2, 1, 4, 4)))
        assert gradcheck(lambda: mse(take_channel(x, 1), target), [x]) < TOLERANCE
        x.zero_grad()
        backward(total(take_channel(x, 2)))
        assert np.all(x.grad[:, 2] == 1.0)
        assert np.all(x.grad[:, :2] == 0.0)

    def test_leaky_relu_forward_values(self):
        out = leaky_relu(Tensor([-2.0, 0.0, 3.0]), slope=0.1)
        np.testing.assert_allclose(out.data, [-0.2, 0.0, 3.0])

    def test_leaky_relu_rejects_invalid_slope(self):
        with pytest.raises(ConfigError):
            leaky_relu(Tensor([1.0]), slope=1.5)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
        with pytest.raises(ShapeError):
            reshape(Tensor(np.zeros(6)), (4, 2))
        with pytest.raises(ShapeError):
            sq_distance(Tensor(np.zeros((2, 3))), np.zeros(4))
        with pytest.raises(ShapeError):
            take_channel(Tensor(np.zeros((1, 2, 3, 3))), 2)
        with pytest.raises(ShapeError):
            mean(Tensor(np.zeros(0)))


# ============================================================
# Layers
# ============================================================


class TestLayerGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_dense(self, seed):
        rng = np.random.default_rng(seed)
        x = leaf(rng.normal(size=(4, 6)))
        w = leaf(rng.normal(size=(6, 3)))
        target = Tensor(rng.normal(size=(4, 3)))
        assert gradcheck(lambda: mse(dense(x, w), target), [x, w]) < TOLERANCE

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1), (2, 2)])
    def test_conv2d(self, rng, stride, padding):
        x = leaf(rng.normal(size=(2, 2, 7, 7)))
        w = leaf(rng.normal(size=(3, 2, 3, 3)))
        out_shape = conv2d(x, w, stride, padding).shape
        target = Tensor(rng.normal(size=out_shape))
        assert gradcheck(lambda: mse(conv2d(x, w, stride, padding), target), [x, w]) < TOLERANCE

    @pytest.mark.parametrize("stride,padding,output_padding", [(1, 0, 0), (1, 1, 0), (2, 0, 1), (2, 1, 1), (2, 2, 0)])
    def test_tconv2d(self, rng, stride, padding, output_padding):
        x = leaf(rng.normal(size=(2, 3, 4, 4)))
        w = leaf(rng.normal(size=(3, 2, 3, 3)))
        out_shape = tconv2d(x, w, stride, padding, output_padding).shape
        target = Tensor(rng.normal(size=out_shape))
        fn = lambda: mse(tconv2d(x, w, stride, padding, output_padding), target)
        assert gradcheck(fn, [x, w]) < TOLERANCE

    def test_fifty_random_conv_instances(self):
        """Random shapes, strides and paddings through conv -> leaky -> tconv"""
        rng = np.random.default_rng(50)
        worst = 0.0
        for _ in range(50):
            stride = int(rng.integers(1, 3))
            kernel = int(rng.integers(1, 4))
            padding = int(rng.integers(0, kernel))
            size = int(rng.integers(kernel + 1, 7))
            channels = int(rng.integers(1, 3))
            x = leaf(rng.normal(size=(2, channels, size, size)))
            w = leaf(rng.normal(size=(2, channels, kernel, kernel)))
            v = leaf(rng.normal(size=(2, 1, kernel, kernel)))
            hidden = conv2d(x, w, stride, padding).data
            if np.min(np.abs(hidden)) < 1e-3:
                continue
            out_shape = tconv2d(leaky_relu(conv2d(x, w, stride, padding)), v, stride, padding).shape
            target = Tensor(rng.normal(size=out_shape))
            fn = lambda: mse(tconv2d(leaky_relu(conv2d(x, w, stride, padding)), v, stride, padding), target)
            worst = max(worst, gradcheck(fn, [x, w, v], h=1e-6))
        assert worst < TOLERANCE

    @pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (3, 2)])
    def test_conv2d_matches_naive_loop(self, rng, stride, padding):
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), stride, padding).data
        np.testing.assert_allclose(out, naive_conv2d(x, w, stride, padding), atol=1e-12)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (2, 2)])
    def test_tconv2d_is_adjoint_of_conv2d(self, rng, stride, padding):
        x = rng.normal(size=(2, 3, 9, 9))
        w = rng.normal(size=(4, 3, 3, 3))
        y_shape = conv2d(Tensor(x), Tensor(w), stride, padding).shape
        y = rng.normal(size=y_shape)
        forward = np.sum(conv2d(Tensor(x), Tensor(w), stride, padding).data * y)
        # tconv weight is (in, out, K, K): the conv weight reinterpreted
        output_padding = (9 + 2 * padding - 3) % stride
        adjoint = np.sum(x * tconv2d(Tensor(y), Tensor(w), stride, padding, output_padding).data)
        assert forward == pytest.approx(adjoint, rel=1e-10)

    def test_tconv_output_size(self):
        assert tconv_output_size(7, 5, 2, 2, 1) == 14
        assert tconv_output_size(14, 5, 2, 2, 1) == 28
        out = tconv2d(Tensor(np.zeros((1, 2, 7, 7))), Tensor(np.zeros((2, 1, 5, 5))), 2, 2, 1)
        assert out.shape == (1, 1, 14, 14)

    def test_conv_shape_errors(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((3, 1, 3, 3))))
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))
        with pytest.raises(ShapeError):
            tconv2d(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((2, 1, 3, 3))), stride=2, output_padding=2)
        with pytest.raises(ShapeError):
            dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


# ============================================================
# Graph bookkeeping
# ============================================================


class TestGraph:
    def test_backward_twice_raises(self, rng):
        x = leaf(rng.normal(size=3))
        loss = total(scale(x, 2.0))
        backward(loss)
        with pytest.raises(GraphError):
            backward(loss)

    def test_backward_needs_scalar(self, rng):
        x = leaf(rng.normal(size=3))
        with pytest.raises(GraphError):
            backward(scale(x, 2.0))

    def test_backward_without_grad_leaf(self):
        with pytest.raises(GraphError):
            backward(total(Tensor(np.ones(3))))

    def test_gradients_accumulate_across_graphs(self, rng):
        x = leaf(rng.normal(size=4))
        backward(total(scale(x, 2.0)))
        backward(total(scale(x, 3.0)))
        np.testing.assert_allclose(x.grad, 5.0)
        x.zero_grad()
        assert np.all(x.grad == 0.0)

    def test_shared_input_gradients_sum(self, rng):
        x = leaf(rng.normal(size=4))
        backward(total(add(x, x)))
        np.testing.assert_allclose(x.grad, 2.0)

    def test_no_grad_records_nothing(self, rng):
        x = leaf(rng.normal(size=4))
        with no_grad():
            out = total(scale(x, 2.0))
        assert not out.requires_grad
        assert out._node is None
        out = total(scale(x, 2.0))
        assert out.requires_grad

    def test_graph_is_topologically_ordered(self, rng):
        x = leaf(rng.normal(size=(2, 3)))
        w = leaf(rng.normal(size=(3, 2)))
        loss = mean(leaky_relu(dense(x, w)))
        ops = [node.op for node in Graph(loss).nodes]
        assert ops == ["dense", "leaky_relu", "mean"]

    def test_debug_mode_flags_non_finite(self):
        ndgrad.set_debug(True)
        try:
            with pytest.raises(NumericalError):
                scale(Tensor([1.0, np.inf]), 2.0)
        finally:
            ndgrad.set_debug(False)
        assert np.isinf(scale(Tensor([1.0, np.inf]), 2.0).data[1])

    def test_float32_is_kept(self):
        t = Tensor(np.zeros(3, dtype=np.float32))
        assert t.data.dtype == np.float32
        assert Tensor([1, 2, 3]).data.dtype == np.float64


# ============================================================
# Initialization and optimization
# ============================================================


class TestXavierAndAdam:
    def test_xavier_bounds(self, rng):
        dense_w = xavier_init((30, 10), rng)
        assert np.max(np.abs(dense_w.data)) <= np.sqrt(6.0 / 40)
        conv_w = xavier_init((8, 2, 5, 5), rng)
        assert np.max(np.abs(conv_w.data)) <= np.sqrt(6.0 / (2 * 25 + 8 * 25))
        assert conv_w.requires_grad

    def test_xavier_rejects_vectors(self, rng):
        with pytest.raises(ShapeError):
            xavier_init((5,), rng)

    def test_adam_minimizes_quadratic(self, rng):
        w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        target = Tensor(np.full((3, 2), 0.5))
        params = NetworkParams([("w", w)])
        state = AdamState(lr=0.02)
        for _ in range(1000):
            params.zero_grad()
            backward(mse(w, target))
            adam_step(params, state)
        np.testing.assert_allclose(w.data, 0.5, atol=5e-2)
        assert state.t == 1000

    def test_adam_first_step_moves_by_lr(self):
        w = Tensor(np.array([[1.0, -1.0]]), requires_grad=True)
        params = NetworkParams([("w", w)])
        backward(total(scale(w, 3.0)))
        adam_step(params, AdamState(lr=0.01))
        np.testing.assert_allclose(w.data, [[0.99, -1.01]], atol=1e-8)

    def test_adam_requires_gradient(self):
        w = Tensor(np.ones((2, 2)), requires_grad=True)
        w.grad = None
        with pytest.raises(GraphError):
            adam_step(NetworkParams([("w", w)]), AdamState())
