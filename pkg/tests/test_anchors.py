"""Anchor grids, IoU, assignment against a direct rule oracle, box coding."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdse.anchors import (assign_targets, concat_anchors, decode_boxes,
                          encode_boxes, generate_anchors, iou, iou_matrix)
from pdse.network import ModelConfig


class TestGeneration:
    def test_per_level_counts_at_256(self, desk_model_config):
        anchors = generate_anchors(desk_model_config, 256)
        assert anchors["p3"].shape == (32 * 32 * 9, 4)
        total = sum(a.shape[0] for a in anchors.values())
        assert total == 9216 + 2304 + 576 + 144 + 36

    def test_first_anchor_geometry(self):
        cfg = ModelConfig(anchor_scales=(1.0,), anchor_ratios=(1.0,),
                          anchor_base_sizes=(32, 64, 128, 256, 512))
        first = generate_anchors(cfg, 256)["p3"][0]
        cx, cy = (first[0] + first[2]) / 2, (first[1] + first[3]) / 2
        assert (cx, cy) == (4.0, 4.0)  # stride 8, cell 0 center
        assert first[2] - first[0] == pytest.approx(32.0)
        assert first[3] - first[1] == pytest.approx(32.0)

    def test_anchors_not_clipped_to_image(self, desk_model_config):
        anchors = generate_anchors(desk_model_config, 128)
        assert anchors["p7"].min() < 0

    def test_deterministic(self, desk_model_config):
        a = concat_anchors(generate_anchors(desk_model_config, 128))
        b = concat_anchors(generate_anchors(desk_model_config, 128))
        np.testing.assert_array_equal(a, b)

    def test_empty_scales_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(anchor_scales=())


class TestIoU:
    def test_identity(self):
        assert iou([0, 0, 10, 10], [0, 0, 10, 10]) == 1.0

    def test_known_overlap(self):
        assert iou([0, 0, 10, 10], [5, 5, 15, 15]) == pytest.approx(1 / 7)

    def test_disjoint(self):
        assert iou([0, 0, 4, 4], [10, 10, 12, 12]) == 0.0

    def test_degenerate_box_is_zero(self):
        assert iou([5, 5, 5, 9], [0, 0, 10, 10]) == 0.0

    def test_matrix_matches_scalar(self, rng):
        a = np.sort(rng.uniform(0, 50, size=(12, 2, 2)), axis=2).reshape(12, 4)[:, [0, 2, 1, 3]]
        b = np.sort(rng.uniform(0, 50, size=(7, 2, 2)), axis=2).reshape(7, 4)[:, [0, 2, 1, 3]]
        m = iou_matrix(a, b)
        for i in range(12):
            for j in range(7):
                assert m[i, j] == pytest.approx(iou(a[i], b[j]), abs=1e-12)

    @given(st.lists(st.floats(0, 100), min_size=8, max_size=8))
    @settings(max_examples=60, deadline=None)
    def test_bounds_and_symmetry(self, vals):
        a = [min(vals[0], vals[1]), min(vals[2], vals[3]), max(vals[0], vals[1]), max(vals[2], vals[3])]
        b = [min(vals[4], vals[5]), min(vals[6], vals[7]), max(vals[4], vals[5]), max(vals[6], vals[7])]
        v = iou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(iou(b, a), abs=1e-12)


def oracle_assign(anchors, gt_boxes, gt_classes, pos=0.5, neg=0.4):
    """Straight-line re-implementation of the assignment rule."""
    k = anchors.shape[0]
    labels = np.zeros(k, dtype=np.int64)
    matched = np.full(k, -1, dtype=np.int64)
    if len(gt_boxes) == 0:
        return labels, matched
    for a in range(k):
        best, best_iou = -1, -1.0
        for g in range(len(gt_boxes)):
            v = iou(anchors[a], gt_boxes[g])
            if v > best_iou:
                best, best_iou = g, v
        if best_iou >= pos:
            labels[a] = gt_classes[best]
            matched[a] = best
        elif best_iou >= neg:
            labels[a] = -1
    for g in range(len(gt_boxes)):
        best, best_iou = -1, -1.0
        for a in range(k):
            v = iou(anchors[a], gt_boxes[g])
            if v > best_iou:
                best, best_iou = a, v
        labels[best] = gt_classes[g]
        matched[best] = g
    return labels, matched


class TestAssignment:
    def test_exact_match_is_positive(self):
        anchors = np.array([[10, 10, 20, 20], [40, 40, 60, 60]], dtype=np.float64)
        res = assign_targets(anchors, np.array([[10, 10, 20, 20]]), np.array([3]))
        assert res.labels[0] == 3 and res.matched_gt[0] == 0
        assert res.num_positive == 1

    def test_empty_ground_truth_all_background(self, desk_model_config):
        anchors = concat_anchors(generate_anchors(desk_model_config, 128))
        res = assign_targets(anchors, np.zeros((0, 4)), np.zeros(0, dtype=np.int64))
        assert res.num_positive == 0
        assert not (res.labels == -1).any()

    def test_forced_best_match_below_threshold(self):
        anchors = np.array([[0, 0, 8, 8], [20, 20, 28, 28]], dtype=np.float64)
        gt = np.array([[0, 0, 30, 30]])  # IoU with both anchors < 0.5
        res = assign_targets(anchors, gt, np.array([5]))
        assert res.num_positive == 1  # the best anchor is forced positive

    def test_randomized_against_oracle(self, rng, desk_model_config):
        anchors = concat_anchors(generate_anchors(desk_model_config, 128))
        sel = rng.choice(anchors.shape[0], size=200, replace=False)
        sub = anchors[sel]
        for _ in range(10):
            n_gt = int(rng.integers(1, 6))
            xy = rng.uniform(0, 100, size=(n_gt, 2))
            wh = rng.uniform(8, 40, size=(n_gt, 2))
            gt = np.concatenate([xy, xy + wh], axis=1)
            cls = rng.integers(1, 10, size=n_gt)
            res = assign_targets(sub, gt, cls)
            labels, matched = oracle_assign(sub, gt, cls)
            np.testing.assert_array_equal(res.labels, labels)
            np.testing.assert_array_equal(res.matched_gt, matched)

    def test_monotonicity_in_positive_threshold(self, rng, desk_model_config):
        anchors = concat_anchors(generate_anchors(desk_model_config, 128))
        gt = np.array([[30, 30, 60, 58], [70, 80, 100, 120]], dtype=np.float64)
        cls = np.array([1, 2])
        counts = [assign_targets(anchors, gt, cls, pos_thresh=t).num_positive
                  for t in (0.3, 0.5, 0.7, 0.9)]
        assert counts == sorted(counts, reverse=True)

    def test_positive_anchors_carry_encoded_targets(self):
        anchors = np.array([[10, 10, 20, 20]], dtype=np.float64)
        gt = np.array([[11, 9, 21, 19]], dtype=np.float64)
        res = assign_targets(anchors, gt, np.array([2]))
        np.testing.assert_allclose(res.reg_targets[0], encode_boxes(anchors, gt)[0], rtol=1e-6)


class TestBoxCoding:
    def test_identity_encoding(self):
        a = np.array([[10, 10, 30, 30]], dtype=np.float64)
        np.testing.assert_allclose(encode_boxes(a, a), 0.0, atol=1e-12)

    def test_zero_deltas_decode_to_anchor(self):
        a = np.array([[10, 10, 30, 30]], dtype=np.float64)
        np.testing.assert_allclose(decode_boxes(a, np.zeros((1, 4))), a, atol=1e-5)

    def test_round_trip_thousand_random_pairs(self, rng):
        xy = rng.uniform(0, 90, size=(1000, 2))
        wh = rng.uniform(2, 38, size=(1000, 2))
        boxes = np.concatenate([xy, xy + wh], axis=1)
        axy = rng.uniform(0, 90, size=(1000, 2))
        awh = rng.uniform(4, 38, size=(1000, 2))
        anchors = np.concatenate([axy, axy + awh], axis=1)
        back = decode_boxes(anchors, encode_boxes(anchors, boxes), image_size=(128, 128))
        assert np.abs(back - boxes).max() < 1e-5

    def test_log_scale_clamp(self):
        a = np.array([[0, 0, 16, 16]], dtype=np.float64)
        out = decode_boxes(a, np.array([[0, 0, 50.0, 50.0]]))
        assert (out[0, 2] - out[0, 0]) == pytest.approx(16 * 1000 / 16, rel=1e-6)

    def test_decode_clips_to_image(self):
        a = np.array([[100, 100, 140, 140]], dtype=np.float64)
        out = decode_boxes(a, np.array([[2.0, 2.0, 1.0, 1.0]]), image_size=(128, 128))
        assert out.max() <= 128.0 and out.min() >= 0.0

    def test_non_positive_anchor_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            encode_boxes(np.array([[5, 5, 5, 10]]), np.array([[0, 0, 10, 10]]))

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_round_trip_property(self, seed):
        r = np.random.default_rng(seed)
        anchor = np.array([[0, 0, *r.uniform(4, 60, 2)]])
        box = np.array([[*r.uniform(0, 50, 2), 0, 0]])
        box[0, 2:] = box[0, :2] + r.uniform(1, 60, 2)
        back = decode_boxes(anchor, encode_boxes(anchor, box))
        assert np.abs(back - box).max() < 1e-5
