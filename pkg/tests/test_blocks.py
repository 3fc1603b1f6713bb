"""Deformable conv, channel/spatial attention, and the composite block."""

import numpy as np
import pytest

from pdse import functional as F
from pdse.blocks import DeformableConv2d, DSEBlock, LocalAttention, SqueezeExcitation
from pdse.gradcheck import finite_diff_check
from pdse.tensor import ShapeError, Tensor


def _zero_params(module):
    for _, p in module.named_parameters():
        p.data = np.zeros_like(p.data)


class TestDeformableConv:
    def test_zero_offsets_reduce_to_conv2d(self, rng):
        # float64: this is a structural identity; float32 BLAS ordering
        # differences between the two paths sit right at the 1e-6 line.
        for _ in range(100):
            n, c, o = 1, int(rng.integers(1, 4)), int(rng.integers(1, 4))
            h = int(rng.integers(4, 9))
            stride = int(rng.integers(1, 3))
            x = Tensor(rng.normal(size=(n, c, h, h)), dtype=np.float64)
            w = Tensor(rng.normal(size=(o, c, 3, 3)), dtype=np.float64)
            ho = (h + 2 - 3) // stride + 1
            off = Tensor(np.zeros((n, 18, ho, ho)), dtype=np.float64)
            got = F.deform_conv2d(x, w, off, stride=stride, padding=1)
            want = F.conv2d(x, w, stride=stride, padding=1)
            assert np.abs(got.data - want.data).max() < 1e-6

    def test_fresh_module_matches_conv2d(self, rng):
        layer = DeformableConv2d(3, 4, rng)
        layer.to_dtype(np.float64)
        x = Tensor(rng.normal(size=(2, 3, 6, 6)), dtype=np.float64)
        got = layer(x)
        want = F.conv2d(x, layer.weight, layer.bias, stride=1, padding=1)
        assert np.abs(got.data - want.data).max() < 1e-6

    def test_constant_unit_shift_matches_shifted_conv(self, rng):
        # Offset (dy, dx) = (0, 1) everywhere samples one column to the
        # right: interior outputs equal a plain conv of the shifted ramp.
        h = 8
        ramp = np.tile(np.arange(h, dtype=np.float64), (h, 1))[None, None]
        w = Tensor(rng.normal(size=(2, 1, 3, 3)), dtype=np.float64)
        off = np.zeros((1, 18, h, h))
        off[:, 1::2] = 1.0  # dx channels
        got = F.deform_conv2d(Tensor(ramp, dtype=np.float64), w, Tensor(off, dtype=np.float64), padding=1)
        shifted = np.zeros_like(ramp)
        shifted[..., :, :-1] = ramp[..., :, 1:]
        shifted[..., :, -1] = 0.0
        want = F.conv2d(Tensor(shifted, dtype=np.float64), w, padding=1)
        np.testing.assert_allclose(got.data[..., 1:-1, 1:-1], want.data[..., 1:-1, 1:-1], atol=1e-10)

    def test_offset_gradients_pass_finite_differences(self, rng):
        x = Tensor(rng.normal(size=(1, 4, 6, 6)), dtype=np.float64)
        w = Tensor(rng.normal(size=(2, 4, 3, 3)) * 0.5, dtype=np.float64)
        off = rng.integers(-2, 2, size=(1, 18, 6, 6)) + rng.uniform(0.2, 0.8, size=(1, 18, 6, 6))
        proj = Tensor(rng.normal(size=(1, 2, 6, 6)), dtype=np.float64)
        report = finite_diff_check(
            lambda t: (F.deform_conv2d(x, w, t) * proj).sum(),
            Tensor(off, dtype=np.float64), h=1e-5, tol=1e-4)
        assert report.passed

    def test_wrong_offset_channel_count_rejected(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 5, 5)).astype(np.float32))
        w = Tensor(rng.normal(size=(2, 2, 3, 3)).astype(np.float32))
        with pytest.raises(ShapeError, match="offset"):
            F.deform_conv2d(x, w, Tensor(np.zeros((1, 12, 5, 5), dtype=np.float32)))


class TestSqueezeExcitation:
    def test_injected_unit_excitation_is_identity(self, rng):
        se = SqueezeExcitation(8, 2, rng)
        x = Tensor(rng.normal(size=(2, 8, 4, 4)).astype(np.float32))
        out = se(x, excitation=Tensor(np.ones((2, 8), dtype=np.float32)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_weights_halve_the_input(self, rng):
        se = SqueezeExcitation(8, 2, rng)
        _zero_params(se)
        x = Tensor(rng.normal(size=(1, 8, 3, 3)).astype(np.float32))
        np.testing.assert_allclose(se(x).data, 0.5 * x.data, rtol=1e-6)

    def test_squeeze_equals_per_channel_means(self, rng):
        se = SqueezeExcitation(8, 2, rng)
        x = rng.normal(size=(3, 8, 5, 7))
        got = se.squeeze(Tensor(x, dtype=np.float64)).data
        np.testing.assert_array_equal(got, x.mean(axis=(3, 2)))

    def test_excitation_strictly_inside_unit_interval(self, rng):
        se = SqueezeExcitation(8, 4, rng)
        for _, p in se.named_parameters():
            p.data = rng.normal(0, 0.5, size=p.data.shape).astype(np.float32)
        e = se.excitation(Tensor(rng.normal(size=(4, 8, 3, 3)).astype(np.float32))).data
        assert np.all(e > 0.0) and np.all(e < 1.0)

    def test_reweight_never_grows_channel_norm(self, rng):
        se = SqueezeExcitation(8, 2, rng)
        x = Tensor(rng.normal(size=(2, 8, 4, 4)).astype(np.float32))
        out = se(x).data
        norms_in = np.linalg.norm(x.data.reshape(2, 8, -1), axis=2)
        norms_out = np.linalg.norm(out.reshape(2, 8, -1), axis=2)
        assert np.all(norms_out <= norms_in + 1e-6)

    def test_channel_permutation_equivariance(self, rng):
        se = SqueezeExcitation(6, 2, rng)
        se.w2.weight.data = rng.normal(0, 0.4, size=se.w2.weight.data.shape).astype(np.float32)
        x = rng.normal(size=(2, 6, 3, 3)).astype(np.float32)
        perm = rng.permutation(6)
        out = se(Tensor(x)).data

        permuted = SqueezeExcitation(6, 2, rng)
        permuted.w1.weight.data = se.w1.weight.data[:, perm]
        permuted.w2.weight.data = se.w2.weight.data[perm, :]
        out_perm = permuted(Tensor(x[:, perm])).data
        np.testing.assert_allclose(out_perm, out[:, perm], rtol=1e-5, atol=1e-6)

    def test_ratio_must_divide_channels(self, rng):
        with pytest.raises(ShapeError, match="ratio"):
            SqueezeExcitation(10, 4, rng)


class TestLocalAttention:
    def test_fresh_gate_is_half(self, rng):
        att = LocalAttention(4, rng)
        x = Tensor(rng.normal(size=(1, 4, 5, 5)).astype(np.float32))
        np.testing.assert_allclose(att(x).data, 0.5 * x.data, rtol=1e-6)

    def test_zero_input_maps_to_zero(self, rng):
        att = LocalAttention(4, rng)
        att.conv.weight.data = rng.normal(size=att.conv.weight.data.shape).astype(np.float32)
        out = att(Tensor(np.zeros((1, 4, 3, 3), dtype=np.float32)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_gradients_pass_finite_differences(self, rng):
        att = LocalAttention(4, rng)
        att.to_dtype(np.float64)
        att.conv.weight.data = rng.normal(0, 0.4, size=att.conv.weight.data.shape)
        proj = Tensor(rng.normal(size=(1, 4, 5, 5)), dtype=np.float64)
        report = finite_diff_check(lambda t: (att(t) * proj).sum(),
                                   Tensor(rng.normal(size=(1, 4, 5, 5)), dtype=np.float64))
        assert report.passed


class TestDSEBlock:
    def test_all_weights_zero_is_exact_identity(self, rng):
        block = DSEBlock(8, rng, se_ratio=4)
        _zero_params(block)
        x = rng.normal(size=(2, 8, 6, 6)).astype(np.float32)
        out = block(Tensor(x))
        np.testing.assert_array_equal(out.data, x)

    def test_shape_preservation(self, rng):
        block = DSEBlock(64, rng, se_ratio=16)
        x = Tensor(rng.normal(size=(2, 64, 32, 32)).astype(np.float32) * 0.1)
        assert block(x).shape == (2, 64, 32, 32)

    def test_fresh_block_adds_quarter_of_bottleneck_output(self, rng):
        # Zero-init offset predictor and both gates pin the block to
        # x + 0.25 * F(x) at construction.
        block = DSEBlock(8, rng, se_ratio=4)
        block.to_dtype(np.float64)
        x = Tensor(rng.normal(size=(1, 8, 5, 5)), dtype=np.float64)
        f = block.exit(block.deform(block.entry(x).relu()))
        expected = x.data + 0.25 * f.data
        np.testing.assert_allclose(block(x).data, expected, rtol=1e-10, atol=1e-12)

    def test_channel_mismatch_rejected(self, rng):
        block = DSEBlock(8, rng, se_ratio=4)
        with pytest.raises(ShapeError, match="channels"):
            block(Tensor(np.zeros((1, 6, 4, 4), dtype=np.float32)))

    def test_full_block_gradients_every_parameter(self, rng):
        block = DSEBlock(8, rng, se_ratio=4)
        block.to_dtype(np.float64)
        # generic weights for gates; fractional-safe offsets via bias
        for name, p in block.named_parameters():
            if "offset_conv.bias" in name:
                p.data = rng.uniform(0.2, 0.8, size=p.data.shape) * np.where(rng.integers(0, 2, p.data.shape), 1, -1)
            elif "offset_conv" not in name and not p.data.any():
                p.data = rng.normal(0, 0.3, size=p.data.shape)
        x = rng.normal(size=(1, 8, 6, 6))
        proj = Tensor(rng.normal(size=(1, 8, 6, 6)), dtype=np.float64)

        report = finite_diff_check(lambda t: (block(t) * proj).sum(), Tensor(x, dtype=np.float64))
        assert report.passed, f"input gradient: {report}"

        for name, _ in block.named_parameters():
            owner = block
            *path, attr = name.split(".")
            for part in path:
                owner = owner._modules[part]
            original = owner._parameters[attr]

            def f(t, owner=owner, attr=attr, original=original):
                object.__setattr__(owner, attr, t)
                try:
                    return (block(Tensor(x, dtype=np.float64)) * proj).sum()
                finally:
                    object.__setattr__(owner, attr, original)

            report = finite_diff_check(f, Tensor(original.data.copy(), dtype=np.float64))
            assert report.passed, f"{name}: {report}"
