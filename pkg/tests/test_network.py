"""Detector assembly: stage shapes, wiring identities, determinism."""

import numpy as np
import pytest

from pdse import functional as F
from pdse.network import (LEVELS, ModelConfig, PDSENet, ResidualBackbone,
                          TopDownPyramid, flatten_outputs)
from pdse.nn import cast_input, rng_for
from pdse.tensor import ShapeError, Tensor
from pdse.validation import check_pyramid


def _rand_image(rng, n=1, size=128):
    return rng.uniform(0.1, 0.9, size=(n, 1, size, size)).astype(np.float32)


class TestBackbone:
    def test_stage_spatial_sizes(self, rng, desk_model_config):
        bb = ResidualBackbone(desk_model_config, rng_for(0, "backbone"))
        feats = bb(cast_input(_rand_image(rng, size=256)))
        assert [feats[k].shape[2] for k in ("c2", "c3", "c4", "c5")] == [64, 32, 16, 8]

    def test_input_size_must_divide_128(self, rng, desk_model_config):
        bb = ResidualBackbone(desk_model_config, rng_for(0, "backbone"))
        with pytest.raises(ShapeError, match="128"):
            bb(cast_input(rng.uniform(size=(1, 1, 96, 96)).astype(np.float32)))

    def test_eval_forward_is_deterministic(self, rng, desk_model_config):
        bb = ResidualBackbone(desk_model_config, rng_for(0, "backbone"))
        bb.eval()
        x = _rand_image(rng)
        a = bb(cast_input(x))["c5"].data
        b = bb(cast_input(x))["c5"].data
        np.testing.assert_array_equal(a, b)

    def test_residual_branch_zeroed_reduces_to_projection(self, rng, desk_model_config):
        bb = ResidualBackbone(desk_model_config, rng_for(0, "backbone"))
        bb.eval()
        block = bb.stage2[0]  # stride-2 block with a projection shortcut
        for layer in (block.conv1, block.conv2):
            layer.weight.data[...] = 0.0
        for bn in (block.bn1, block.bn2):
            bn.gamma.data[...] = 0.0
            bn.beta.data[...] = 0.0
        x = cast_input(rng.normal(size=(1, 8, 16, 16)).astype(np.float32))
        got = block(x)
        want = block.shortcut(x).relu()
        np.testing.assert_array_equal(got.data, want.data)

    def test_bottleneck_backbone_expressible(self, rng):
        cfg = ModelConfig(backbone_blocks=(3, 4, 6, 3), backbone_block="bottleneck",
                          backbone_width=8, pyramid_width=32, head_depth=1, se_ratio=8)
        bb = ResidualBackbone(cfg, rng_for(0, "backbone"))
        feats = bb(cast_input(_rand_image(rng)))
        assert feats["c5"].shape[1] == 8 * 8 * 4  # width * 2^3 * expansion


class TestPyramid:
    def test_level_sizes_for_256(self, rng, desk_model_config):
        net = PDSENet(desk_model_config, seed=0).eval()
        pyr = net.pyramid(cast_input(_rand_image(rng, size=256)))
        assert [pyr[lvl].shape[2] for lvl in LEVELS] == [32, 16, 8, 4, 2]
        check_pyramid(pyr)

    def test_zeroed_laterals_yield_zero_pyramid(self, rng, desk_model_config):
        ch = {"c3": 4, "c4": 6, "c5": 8}
        fpn = TopDownPyramid(ch, 16, rng_for(0, "fpn"))
        for _, p in fpn.named_parameters():
            p.data[...] = 0.0
        feats = {
            "c3": cast_input(rng.normal(size=(1, 4, 16, 16)).astype(np.float32)),
            "c4": cast_input(rng.normal(size=(1, 6, 8, 8)).astype(np.float32)),
            "c5": cast_input(rng.normal(size=(1, 8, 4, 4)).astype(np.float32)),
        }
        pyr = fpn(feats)
        for lvl in LEVELS:
            np.testing.assert_array_equal(pyr[lvl].data, 0.0)

    def test_topdown_merge_matches_primitive_composition(self, rng):
        ch = {"c3": 4, "c4": 6, "c5": 8}
        fpn = TopDownPyramid(ch, 16, rng_for(3, "fpn"))
        feats = {
            "c3": cast_input(rng.normal(size=(1, 4, 16, 16)).astype(np.float32)),
            "c4": cast_input(rng.normal(size=(1, 6, 8, 8)).astype(np.float32)),
            "c5": cast_input(rng.normal(size=(1, 8, 4, 4)).astype(np.float32)),
        }
        pyr = fpn(feats)
        m5 = fpn.lat5(feats["c5"])
        m4 = fpn.lat4(feats["c4"]) + F.upsample_nearest2x(m5)
        want_p4 = fpn.out4(m4)
        np.testing.assert_allclose(pyr["p4"].data, want_p4.data, rtol=1e-6)


class TestPANetWiring:
    def test_fresh_aggregation_is_identity(self, rng, desk_model_config):
        net = PDSENet(desk_model_config, seed=0).eval()
        x = cast_input(_rand_image(rng))
        feats = net.backbone(x)
        pyr = net.fpn(feats)
        after = net.pa1(pyr, feats["c2"])
        for lvl in LEVELS:
            np.testing.assert_array_equal(after[lvl].data, pyr[lvl].data)
        refreshed = net.refresh(after)
        for lvl in LEVELS:
            np.testing.assert_array_equal(refreshed[lvl].data, pyr[lvl].data)

    def test_missing_low_level_map_rejected(self, rng, desk_model_config):
        net = PDSENet(desk_model_config, seed=0)
        pyr = {lvl: cast_input(np.zeros((1, 32, 4, 4), dtype=np.float32)) for lvl in LEVELS}
        with pytest.raises(ShapeError, match="low-level"):
            net.pa1(pyr, None)

    def test_shape_audit_after_both_passes(self, rng, desk_model_config):
        net = PDSENet(desk_model_config, seed=0).eval()
        x = cast_input(_rand_image(rng, size=256))
        feats = net.backbone(x)
        pyr = net.fpn(feats)
        out = net.pa2(net.refresh(net.pa1(pyr, feats["c2"])))
        for lvl in LEVELS:
            assert out[lvl].shape == pyr[lvl].shape


class TestModelForward:
    def test_head_output_channels(self, rng, desk_model_config):
        net = PDSENet(desk_model_config, seed=0).eval()
        out = net(_rand_image(rng, size=256))
        assert out.class_logits["p3"].shape == (1, 81, 32, 32)
        assert out.box_deltas["p3"].shape == (1, 36, 32, 32)

    def test_initialization_prior(self, rng, desk_model_config):
        net = PDSENet(desk_model_config, seed=0).eval()
        cls, _ = flatten_outputs(net(_rand_image(rng)), 9, 9)
        mean_prob = float((1.0 / (1.0 + np.exp(-cls.data))).mean())
        assert abs(mean_prob - 0.01) < 0.005

    def test_toggle_isolation_at_initialization(self, rng):
        base = dict(pyramid_width=32, backbone_blocks=(1, 1, 1, 1), backbone_width=8,
                    head_depth=2, se_ratio=8, use_dse=False)
        with_pa = PDSENet(ModelConfig(use_panet=True, **base), seed=7).eval()
        without = PDSENet(ModelConfig(use_panet=False, **base), seed=7).eval()
        x = _rand_image(rng)
        a = with_pa(x)
        b = without(x)
        for lvl in LEVELS:
            np.testing.assert_array_equal(a.class_logits[lvl].data, b.class_logits[lvl].data)
            np.testing.assert_array_equal(a.box_deltas[lvl].data, b.box_deltas[lvl].data)

    def test_head_weights_shared_across_levels(self, rng, desk_model_config):
        net = PDSENet(desk_model_config, seed=0).eval()
        x = _rand_image(rng)
        before = net(x)
        net.class_head.out.bias.data[...] += 1.0
        after = net(x)
        for lvl in LEVELS:
            assert np.abs(after.class_logits[lvl].data - before.class_logits[lvl].data).max() > 0.5

    def test_construction_is_bit_deterministic(self, desk_model_config):
        a = PDSENet(desk_model_config, seed=3)
        b = PDSENet(desk_model_config, seed=3)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_every_parameter_receives_gradient(self, rng, desk_model_config):
        net = PDSENet(desk_model_config, seed=0)
        out = net(_rand_image(rng))
        cls, box = flatten_outputs(out, 9, 9)
        (cls.sigmoid().sum() + (box * box).sum()).backward()
        orphans = [n for n, p in net.named_parameters() if p.grad is None]
        assert orphans == []
        non_finite = [n for n, p in net.named_parameters() if not np.all(np.isfinite(p.grad))]
        assert non_finite == []

    def test_parameter_names_follow_convention(self, desk_model_config):
        net = PDSENet(desk_model_config, seed=0)
        names = {n for n, _ in net.named_parameters()}
        assert "dse.p3.deform.offset_conv.weight" in names
        assert "dse.p7.se.w1.weight" in names
        assert len(names) == len(list(net.named_parameters()))  # unique

    def test_num_classes_pinned_to_taxonomy(self):
        with pytest.raises(ValueError, match="num_classes"):
            ModelConfig(num_classes=5)
