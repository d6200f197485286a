import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lesionmt import layers as L
from lesionmt import tensor as T
from lesionmt.errors import InvalidShapeError, ShapeMismatchError
from lesionmt.rng import RngState


def node(g, a, var=True):
    return g.variable(np.asarray(a, dtype=float)) if var else g.constant(a)


def conv_reference(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation."""
    n, c, h, wd = x.shape
    oc, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, oc, oh, ow))
    for i in range(n):
        for o in range(oc):
            for r in range(oh):
                for s in range(ow):
                    patch = xp[i, :, r * stride : r * stride + kh, s * stride : s * stride + kw]
                    out[i, o, r, s] = (patch * w[o]).sum() + (0 if b is None else b[o])
    return out


class TestConv:
    def test_identity_kernel(self):
        x = RngState(0).normal((2, 3, 5, 5))
        g = T.Graph()
        w = np.zeros((3, 3, 1, 1))
        w[np.arange(3), np.arange(3)] = 1.0
        out = L.conv2d(g.constant(x), L.Conv2dParams(g.constant(w), g.constant(np.zeros(3)), 1, 0))
        assert np.array_equal(out.value, x)

    def test_ones_kernel_padding(self):
        g = T.Graph()
        x = g.constant(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        out = L.conv2d(x, L.Conv2dParams(g.constant(np.ones((1, 1, 3, 3))), g.constant([0.0]), 1, 1))
        assert out.value[0, 0].tolist() == [[10.0, 10.0], [10.0, 10.0]]

    @pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 2, 0), (5, 1, 2), (1, 1, 0), (3, 2, 1), (5, 3, 1)])
    def test_matches_direct_loops(self, k, stride, pad):
        r = RngState(k, stride, pad)
        x, w, b = r.normal((2, 3, 7, 6)), r.normal((4, 3, k, k)), r.normal((4,))
        g = T.Graph()
        out = L.conv2d(g.constant(x), L.Conv2dParams(g.constant(w), g.constant(b), stride, pad))
        np.testing.assert_allclose(out.value, conv_reference(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("k", [1, 3, 5, 7])
    def test_same_padding_preserves_extent(self, k):
        g = T.Graph()
        w = g.constant(np.ones((2, 1, k, k)))
        out = L.conv2d(g.constant(np.ones((1, 1, 9, 8))), L.Conv2dParams.same(w))
        assert out.shape == (1, 2, 9, 8)

    def test_weight_gradient_matches_fd(self):
        r = RngState(11)
        x, w0, b0, up = r.normal((1, 3, 8, 8)), r.normal((4, 3, 3, 3)), r.normal((4,)), r.normal((1, 4, 8, 8))
        g = T.Graph()
        w = g.variable(w0)
        out = L.conv2d(g.constant(x), L.Conv2dParams.same(w, g.variable(b0)))
        T.sum_all(T.mul(out, g.constant(up))).backward()
        num = np.zeros_like(w0)
        for idx in np.ndindex(w0.shape):
            wp, wm = w0.copy(), w0.copy()
            wp[idx] += 1e-5
            wm[idx] -= 1e-5
            num[idx] = ((conv_reference(x, wp, b0, 1, 1) - conv_reference(x, wm, b0, 1, 1)) * up).sum() / 2e-5
        assert np.abs(num - w.grad).max() / np.abs(num).max() < 1e-4

    def test_errors(self):
        g = T.Graph()
        x = g.constant(np.ones((1, 2, 4, 4)))
        with pytest.raises(ShapeMismatchError):
            L.conv2d(x, L.Conv2dParams(g.constant(np.ones((1, 3, 3, 3))), None))
        with pytest.raises(ShapeMismatchError):
            L.conv2d(x, L.Conv2dParams(g.constant(np.ones((1, 2, 5, 5))), None, 1, 0))
        with pytest.raises(InvalidShapeError):
            L.conv2d(x, L.Conv2dParams(g.constant(np.ones((1, 2, 2, 2))), None))


class TestPooling:
    def test_single_window(self):
        g = T.Graph()
        x = node(g, [[[[1, 2], [3, 4]]]])
        out = L.maxpool2d(x)
        assert out.value.tolist() == [[[[4]]]]
        T.sum_all(out).backward()
        assert x.grad[0, 0].tolist() == [[0, 0], [0, 1]]

    def test_ties_route_to_first(self):
        g = T.Graph()
        x = node(g, np.full((1, 1, 2, 2), 3.0))
        T.sum_all(L.maxpool2d(x)).backward()
        assert x.grad[0, 0].tolist() == [[1, 0], [0, 0]]

    def test_constant(self):
        g = T.Graph()
        out = L.maxpool2d(g.constant(np.full((2, 3, 6, 4), 7.0)))
        assert out.shape == (2, 3, 3, 2) and np.all(out.value == 7.0)

    def test_odd_extent(self):
        g = T.Graph()
        with pytest.raises(ShapeMismatchError):
            L.maxpool2d(g.constant(np.ones((1, 1, 3, 4))))

    @given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
    def test_upsample_then_pool_is_identity(self, c, h, w, seed):
        x = RngState(seed).normal((1, c, h, w))
        g = T.Graph()
        assert np.array_equal(L.maxpool2d(L.upsample2x_nearest(g.constant(x))).value, x)

    def test_global_avg_pool(self):
        g = T.Graph()
        assert L.global_avg_pool(g.constant(np.full((1, 2, 3, 3), 7.0))).value.tolist() == [[7.0, 7.0]]
        x = node(g, [[[[1, 2], [3, 4]]]])
        out = L.global_avg_pool(x)
        assert out.value.tolist() == [[2.5]]
        T.sum_all(T.scale(out, 8.0)).backward()
        assert np.all(x.grad == 2.0)

    def test_avg_pool(self):
        g = T.Graph()
        x = g.constant(np.arange(16.0).reshape(1, 1, 4, 4))
        assert L.avg_pool(x, 2).value[0, 0].tolist() == [[2.5, 4.5], [10.5, 12.5]]


class TestUpsampleConcat:
    def test_replication(self):
        g = T.Graph()
        x = node(g, [[[[1, 2], [3, 4]]]])
        out = L.upsample2x_nearest(x)
        assert out.value[0, 0].tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
        T.sum_all(out).backward()
        assert np.all(x.grad == 4.0)

    def test_concat(self):
        g = T.Graph()
        a, b = node(g, np.zeros((1, 2, 4, 4))), node(g, np.ones((1, 3, 4, 4)))
        out = L.concat_channels(a, b)
        assert out.shape == (1, 5, 4, 4)
        up = np.arange(80.0).reshape(1, 5, 4, 4)
        T.sum_all(T.mul(out, g.constant(up))).backward()
        assert np.array_equal(a.grad, up[:, :2]) and np.array_equal(b.grad, up[:, 2:])

    def test_concat_mismatch(self):
        g = T.Graph()
        with pytest.raises(ShapeMismatchError):
            L.concat_channels(g.constant(np.ones((1, 1, 4, 4))), g.constant(np.ones((1, 1, 4, 2))))

    def test_empty_channel_tensor_is_disallowed(self):
        g = T.Graph()
        with pytest.raises(InvalidShapeError):
            g.constant(np.ones((1, 0, 4, 4)))


class TestActivations:
    def test_relu(self):
        g = T.Graph()
        x = node(g, [-1.0, 0.0, 2.0])
        out = L.activation("relu", x)
        assert out.value.tolist() == [0, 0, 2]
        T.sum_all(out).backward()
        assert x.grad.tolist() == [0, 0, 1]

    def test_sigmoid_zero(self):
        g = T.Graph()
        assert L.activation("sigmoid", g.constant([0.0])).value.tolist() == [0.5]

    def test_sigmoid_extremes(self):
        g = T.Graph()
        xs = np.array([-1000.0, -40.0, -1.0, 0.0, 1.0, 40.0, 1000.0])
        s = L.sigmoid(g.constant(xs)).value
        assert np.all(np.isfinite(s)) and np.all(s > 0) and np.all(s < 1)
        assert np.all(np.diff(s) >= 0)

    def test_identity_and_unknown(self):
        g = T.Graph()
        x = g.constant([1.0])
        assert L.activation("identity", x) is x
        with pytest.raises(ValueError):
            L.activation("tanh", x)


class TestLosses:
    def test_bce_half(self):
        g = T.Graph()
        assert math.isclose(L.bce_loss(g.constant([0.5]), [1.0]).value[0], math.log(2), rel_tol=1e-12)

    def test_bce_pinned(self):
        g = T.Graph()
        # -(ln 0.9 + ln 0.9) / 2
        assert abs(L.bce_loss(g.constant([0.9, 0.1]), [1.0, 0.0]).value[0] - 0.105361) < 1e-6

    def test_bce_perfect_prediction(self):
        g = T.Graph()
        assert L.bce_loss(g.constant([0.0, 1.0]), [0.0, 1.0]).value[0] < 1e-6

    def test_bce_pos_weight(self):
        g = T.Graph()
        v = L.bce_loss(g.constant([0.5, 0.5]), [1.0, 0.0], pos_weight=3.0).value[0]
        assert math.isclose(v, (3 * math.log(2) + math.log(2)) / 2, rel_tol=1e-12)

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.integers(0, 2**31))
    def test_bce_non_negative(self, preds, seed):
        t = (RngState(seed).uniform(len(preds)) < 0.5).astype(float)
        g = T.Graph()
        assert L.bce_loss(g.constant(preds), t).value[0] >= 0

    def test_bce_shape_mismatch(self):
        g = T.Graph()
        with pytest.raises(ShapeMismatchError):
            L.bce_loss(g.constant([0.5, 0.5]), [1.0])

    def test_dice_perfect(self):
        g = T.Graph()
        m = (RngState(2).uniform((2, 1, 5, 5)) < 0.5).astype(float)
        assert L.soft_dice_loss(g.constant(m), m).value[0] == 0.0

    def test_dice_zero_prediction(self):
        g = T.Graph()
        v = L.soft_dice_loss(g.constant(np.zeros((1, 1, 10, 10))), np.ones((1, 1, 10, 10))).value[0]
        assert math.isclose(v, 1 - 1 / 101, rel_tol=1e-12)
        assert abs(v - 0.990099) < 1e-6

    @given(st.integers(0, 2**31))
    def test_dice_range(self, seed):
        r = RngState(seed)
        g = T.Graph()
        v = L.soft_dice_loss(g.constant(r.uniform((2, 1, 4, 4))), (r.uniform((2, 1, 4, 4)) < 0.5).astype(float)).value[0]
        assert 0 <= v < 1

    def test_dice_gradient_fd(self):
        r = RngState(8)
        p0, t = r.uniform((1, 1, 4, 4), 0.05, 0.95), (r.uniform((1, 1, 4, 4)) < 0.5).astype(float)
        g = T.Graph()
        p = g.variable(p0)
        L.soft_dice_loss(p, t).backward()

        def f(v):
            return float(L.soft_dice_loss(T.Graph().constant(v), t).value[0])

        num = np.zeros_like(p0)
        for idx in np.ndindex(p0.shape):
            a, b = p0.copy(), p0.copy()
            a[idx] += 1e-5
            b[idx] -= 1e-5
            num[idx] = (f(a) - f(b)) / 2e-5
        assert np.abs(num - p.grad).max() / np.abs(num).max() < 1e-4

    def test_linear(self):
        g = T.Graph()
        out = L.linear(g.constant([[1.0, 2.0]]), g.constant([[1.0], [1.0]]), g.constant([0.5]))
        assert out.value.tolist() == [[3.5]]
