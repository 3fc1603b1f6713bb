"""Spatial primitives against independent oracles and their spec examples."""

import numpy as np
import pytest

from pdse import functional as F
from pdse.gradcheck import finite_diff_check
from pdse.tensor import ShapeError, Tensor


def naive_conv2d(x, w, b=None, stride=1, pad=0):
    """Direct six-loop convolution used as the oracle."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo), dtype=np.float64)
    for ni in range(n):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[ni, ci, yi * stride + u, xi * stride + v] * w[oi, ci, u, v]
                    out[ni, oi, yi, xi] = acc + (b[oi] if b is not None else 0.0)
    return out


class TestConv2d:
    def test_all_ones_counts_overlapping_taps(self):
        out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1)
        assert out.data[0, 0, 1, 1] == 9.0
        assert out.data[0, 0, 0, 0] == 4.0

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 3, 5, 5)).astype(np.float32)
        w = np.zeros((3, 3, 1, 1), dtype=np.float32)
        for i in range(3):
            w[i, i, 0, 0] = 1.0
        out = F.conv2d(Tensor(x), Tensor(w))
        np.testing.assert_array_equal(out.data, x)

    def test_against_six_loop_oracle(self, rng):
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        for stride, pad in ((1, 1), (2, 1), (1, 0)):
            ours = F.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                            Tensor(b, dtype=np.float64), stride=stride, padding=pad)
            np.testing.assert_allclose(ours.data, naive_conv2d(x, w, b, stride, pad), atol=1e-6)

    def test_linearity_in_input(self, rng):
        x = rng.normal(size=(1, 2, 6, 6))
        y = rng.normal(size=(1, 2, 6, 6))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)), dtype=np.float64)
        a, b = 1.7, -0.6
        lhs = F.conv2d(Tensor(a * x + b * y, dtype=np.float64), w, padding=1).data
        rhs = a * F.conv2d(Tensor(x, dtype=np.float64), w, padding=1).data \
            + b * F.conv2d(Tensor(y, dtype=np.float64), w, padding=1).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-6)

    def test_output_size_formula_and_errors(self):
        x = Tensor(np.ones((1, 2, 9, 9)))
        w = Tensor(np.ones((1, 2, 3, 3)))
        assert F.conv2d(x, w, stride=2, padding=1).shape == (1, 1, 5, 5)
        with pytest.raises(ShapeError, match="channels"):
            F.conv2d(Tensor(np.ones((1, 3, 9, 9))), w)
        with pytest.raises(ShapeError, match="odd"):
            F.conv2d(x, Tensor(np.ones((1, 2, 2, 2))))
        with pytest.raises(ShapeError, match="non-positive"):
            F.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


class TestPooling:
    def test_global_avg_pool_is_mean(self):
        out = F.global_avg_pool(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert out.data.tolist() == [[2.5]]

    def test_max_pool_values(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        out = F.max_pool2d(x, 2)
        np.testing.assert_array_equal(out.data[0, 0], [[5, 7], [13, 15]])

    def test_max_pool_padding_never_wins(self):
        x = Tensor(-np.ones((1, 1, 2, 2)))
        out = F.max_pool2d(x, 3, stride=2, padding=1)
        assert float(out.data.max()) == -1.0

    def test_avg_pool_values(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        np.testing.assert_allclose(F.avg_pool2d(x, 2).data[0, 0], [[2.5, 4.5], [10.5, 12.5]])


class TestUpsampleConcat:
    def test_upsample_replicates(self):
        out = F.upsample_nearest2x(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]))
        expected = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
        np.testing.assert_array_equal(out.data[0, 0], expected)

    def test_concat_channels_and_backward_split(self, rng):
        a = Tensor(rng.normal(size=(1, 2, 3, 3)).astype(np.float32), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 3, 3, 3)).astype(np.float32), requires_grad=True)
        out = F.concat([a, b])
        assert out.shape == (1, 5, 3, 3)
        (out * 1.0).sum().backward()
        assert a.grad.shape == a.shape and b.grad.shape == b.shape

    def test_concat_shape_mismatch(self):
        with pytest.raises(ShapeError, match="concat"):
            F.concat([Tensor(np.ones((1, 2, 3, 3))), Tensor(np.ones((1, 2, 4, 3)))])


class TestBatchNorm:
    def test_train_mode_normalizes_batch(self, rng):
        x = rng.normal(3.0, 2.5, size=(4, 3, 5, 5))
        rm, rv = np.zeros(3), np.ones(3)
        out = F.batch_norm2d(Tensor(x, dtype=np.float64), Tensor(np.ones(3), dtype=np.float64),
                             Tensor(np.zeros(3), dtype=np.float64), rm, rv, training=True)
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.data.std(axis=(0, 2, 3)), 1.0, atol=1e-3)

    def test_running_stats_update_rule(self, rng):
        x = rng.normal(1.0, 2.0, size=(2, 2, 4, 4))
        rm, rv = np.zeros(2), np.ones(2)
        F.batch_norm2d(Tensor(x, dtype=np.float64), Tensor(np.ones(2), dtype=np.float64),
                       Tensor(np.zeros(2), dtype=np.float64), rm, rv, training=True, momentum=0.9)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-12)
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)), rtol=1e-12)

    def test_eval_mode_uses_running_stats(self, rng):
        x = rng.normal(size=(2, 2, 3, 3))
        rm = np.array([1.0, -1.0])
        rv = np.array([4.0, 0.25])
        out = F.batch_norm2d(Tensor(x, dtype=np.float64), Tensor(np.ones(2), dtype=np.float64),
                             Tensor(np.zeros(2), dtype=np.float64), rm.copy(), rv.copy(),
                             training=False, eps=0.0)
        expected = (x - rm[None, :, None, None]) / np.sqrt(rv)[None, :, None, None]
        np.testing.assert_allclose(out.data, expected, rtol=1e-12)


class TestBilinearSample:
    def test_lattice_point_returns_exact_pixel(self, rng):
        fmap = rng.normal(size=(3, 4, 5))
        out = F.bilinear_sample(Tensor(fmap, dtype=np.float64), 1.0, 1.0)
        np.testing.assert_allclose(out.data, fmap[:, 1, 1], rtol=1e-12)

    def test_center_of_2x2_is_mean(self):
        fmap = Tensor([[[1.0, 2.0], [3.0, 4.0]]])
        assert F.bilinear_sample(fmap, 0.5, 0.5).data[0] == pytest.approx(2.5)

    def test_far_outside_is_zero(self):
        fmap = Tensor([[[1.0, 2.0], [3.0, 4.0]]])
        assert F.bilinear_sample(fmap, -5.0, -5.0).data[0] == 0.0
        assert F.bilinear_sample(fmap, 10.0, 0.5).data[0] == 0.0

    def test_continuity_in_coordinates(self, rng):
        fmap = Tensor(rng.normal(size=(2, 6, 6)), dtype=np.float64)
        span = float(np.ptp(fmap.data))
        for _ in range(50):
            y = float(rng.uniform(-1, 6))
            x = float(rng.uniform(-1, 6))
            eps = float(rng.uniform(1e-4, 0.5))
            a = F.bilinear_sample(fmap, y, x).data
            b = F.bilinear_sample(fmap, y + eps, x).data
            assert np.all(np.abs(a - b) <= eps * span + 1e-12)

    def test_coordinate_gradients(self, rng):
        fmap = Tensor(rng.normal(size=(2, 5, 5)), dtype=np.float64)
        report = finite_diff_check(
            lambda t: (F.bilinear_sample(fmap, t, 2.3) * Tensor([1.0, -2.0], dtype=np.float64)).sum(),
            Tensor(np.asarray(1.4), dtype=np.float64))
        assert report.passed


class TestTakeRows:
    def test_forward_and_scatter_backward(self, rng):
        x = Tensor(rng.normal(size=(5, 3)).astype(np.float32), requires_grad=True)
        idx = np.array([0, 0, 4])
        out = F.take_rows(x, idx)
        np.testing.assert_array_equal(out.data, x.data[idx])
        out.sum().backward()
        np.testing.assert_allclose(x.grad[0], 2.0)
        np.testing.assert_allclose(x.grad[4], 1.0)
        np.testing.assert_allclose(x.grad[1:4], 0.0)
