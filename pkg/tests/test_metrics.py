import math

import numpy as np
import pytest

from planekit.errors import ConfigurationError
from planekit.geometry import CameraIntrinsics, Plane
from planekit.metrics import (
    RecallSpec,
    annotation_to_labels,
    evaluate_annotations,
    mask_iou,
    plane_recall,
    rand_index,
    seg_covering,
    variation_of_information,
)
from planekit.plane_fitting import PlaneAnnotation, PlaneInstance

CAM = CameraIntrinsics(32.0, 32.0, 16.0, 12.0, 32, 24)


def pairwise_rand_index(a, b):
    """O(N^2) oracle: fraction of pixel pairs with agreeing co-membership."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    same_a = np.equal.outer(a, a)
    same_b = np.equal.outer(b, b)
    upper = np.triu_indices(len(a), 1)
    return float((same_a == same_b)[upper].mean())


def annotation_of(mask_plane_pairs):
    instances = [
        PlaneInstance(plane, mask, int(mask.sum()), 0.0, plane.offset, k + 1)
        for k, (mask, plane) in enumerate(mask_plane_pairs)
    ]
    return PlaneAnnotation(instances, CAM.width, CAM.height, CAM)


class TestRandIndex:
    def test_identical(self):
        labels = np.array([[0, 1], [2, 2]])
        assert rand_index(labels, labels) == 1.0

    def test_four_pixel_case(self):
        assert rand_index(np.array([[0, 0, 1, 1]]), np.array([[0, 1, 1, 1]])) == 0.5

    def test_label_permutation_invariance(self):
        rng = np.random.default_rng(0)
        a = rng.integers(0, 5, (12, 9))
        b = rng.integers(0, 4, (12, 9))
        lut = rng.permutation(5)
        assert rand_index(lut[a], b) == rand_index(a, b)

    def test_matches_pairwise_enumeration(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            shape = (int(rng.integers(2, 33)), int(rng.integers(2, 33)))
            a = rng.integers(0, 5, shape)
            b = rng.integers(0, 5, shape)
            assert rand_index(a, b) == pairwise_rand_index(a, b)

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigurationError):
            rand_index(np.zeros((2, 2)), np.zeros((2, 3)))


class TestVariationOfInformation:
    def test_identical_is_zero(self):
        rng = np.random.default_rng(2)
        labels = rng.integers(0, 6, (20, 20))
        assert variation_of_information(labels, labels) <= 1e-12

    def test_split_vs_constant_is_ln2(self):
        a = np.array([[0, 0, 1, 1]])
        b = np.zeros((1, 4), dtype=int)
        assert abs(variation_of_information(a, b) - math.log(2)) <= 1e-12

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        a = rng.integers(0, 4, (15, 15))
        b = rng.integers(0, 3, (15, 15))
        assert abs(variation_of_information(a, b) - variation_of_information(b, a)) <= 1e-12

    def test_label_permutation_invariance(self):
        rng = np.random.default_rng(4)
        a = rng.integers(0, 5, (10, 10))
        b = rng.integers(0, 5, (10, 10))
        lut = rng.permutation(5)
        assert abs(variation_of_information(lut[a], b) - variation_of_information(a, b)) <= 1e-12


class TestSegCovering:
    def test_identical(self):
        rng = np.random.default_rng(5)
        labels = rng.integers(0, 5, (16, 16))
        assert seg_covering(labels, labels) == 1.0

    def test_split_vs_constant(self):
        assert seg_covering(np.array([[0, 0, 1, 1]]), np.zeros((1, 4), dtype=int)) == 0.5

    def test_even_split_matches_direct_iou_table(self):
        # Every gt segment splits evenly into two pred segments.
        gt = np.repeat(np.arange(4), 8).reshape(4, 8)
        pred = gt * 2 + (np.arange(8)[None, :] >= 4)
        expected = 0.0
        n = gt.size
        for g in np.unique(gt):
            best = 0.0
            for p in np.unique(pred):
                inter = ((gt == g) & (pred == p)).sum()
                union = ((gt == g) | (pred == p)).sum()
                best = max(best, inter / union)
            expected += (gt == g).sum() / n * best
        assert abs(seg_covering(gt, pred) - expected) <= 1e-12
        assert abs(expected - 0.5) <= 1e-12

    def test_range(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            a = rng.integers(0, 6, (9, 9))
            b = rng.integers(0, 6, (9, 9))
            value = seg_covering(a, b)
            assert 0.0 <= value <= 1.0


def full_mask():
    return np.ones((24, 32), dtype=bool)


class TestPlaneRecall:
    def test_perfect_prediction(self):
        plane = Plane(np.array([0.0, 0.0, 1.0]), 2.0)
        gt = annotation_of([(full_mask(), plane)])
        report = plane_recall(gt, gt, CAM, RecallSpec.indoor())
        assert report.depth_recall == {0.05: 1.0, 0.1: 1.0, 0.6: 1.0}
        assert report.normal_recall == {5.0: 1.0, 10.0: 1.0, 30.0: 1.0}

    def test_no_predictions(self):
        plane = Plane(np.array([0.0, 0.0, 1.0]), 2.0)
        gt = annotation_of([(full_mask(), plane)])
        pred = annotation_of([])
        report = plane_recall(pred, gt, CAM, RecallSpec.indoor())
        assert all(v == 0.0 for v in report.depth_recall.values())
        assert all(v == 0.0 for v in report.normal_recall.values())

    def test_constant_offset_error_thresholds(self):
        gt = annotation_of([(full_mask(), Plane(np.array([0.0, 0.0, 1.0]), 2.0))])
        pred = annotation_of([(full_mask(), Plane(np.array([0.0, 0.0, 1.0]), 2.07))])
        report = plane_recall(pred, gt, CAM, RecallSpec.indoor())
        assert report.depth_recall[0.05] == 0.0
        assert report.depth_recall[0.1] == 1.0
        assert report.depth_recall[0.6] == 1.0
        assert report.normal_recall == {5.0: 1.0, 10.0: 1.0, 30.0: 1.0}
        assert abs(report.matched[0].depth_error - 0.07) < 1e-12

    def test_empty_gt_flagged_undefined(self):
        pred = annotation_of([(full_mask(), Plane(np.array([0.0, 0.0, 1.0]), 2.0))])
        gt = annotation_of([])
        report = plane_recall(pred, gt, CAM, RecallSpec.indoor())
        assert report.undefined_recall
        assert all(v is None for v in report.depth_recall.values())
        assert all(v is None for v in report.normal_recall.values())

    def test_iou_floor_ordering(self):
        plane = Plane(np.array([0.0, 0.0, 1.0]), 2.0)
        partial = np.zeros((24, 32), dtype=bool)
        partial[:, :13] = True  # IoU just above 0.4
        gt = annotation_of([(full_mask(), plane)])
        pred = annotation_of([(partial, plane)])
        assert mask_iou(partial, full_mask()) < 0.5
        strict = plane_recall(pred, gt, CAM, RecallSpec(0.5))
        loose = plane_recall(pred, gt, CAM, RecallSpec(0.25))
        for threshold in strict.depth_recall:
            assert strict.depth_recall[threshold] <= loose.depth_recall[threshold]
        assert loose.depth_recall[0.05] == 1.0
        assert strict.depth_recall[0.05] == 0.0

    def test_recall_monotone_in_threshold(self):
        rng = np.random.default_rng(7)
        planes = []
        for offset, col in ((2.0, 0), (3.0, 11), (4.0, 22)):
            mask = np.zeros((24, 32), dtype=bool)
            mask[:, col : col + 10] = True
            planes.append((mask, Plane(np.array([0.0, 0.0, 1.0]), offset)))
        gt = annotation_of(planes)
        jittered = [
            (mask, Plane(np.array([0.0, 0.0, 1.0]), plane.offset + rng.uniform(0.0, 0.4)))
            for mask, plane in planes
        ]
        pred = annotation_of(jittered)
        spec = RecallSpec(0.5, (0.05, 0.1, 0.2, 0.4, 0.6), (5.0, 10.0, 30.0))
        report = plane_recall(pred, gt, CAM, spec)
        values = [report.depth_recall[t] for t in spec.depth_thresholds]
        assert values == sorted(values)

    def test_greedy_matching_is_one_to_one(self):
        plane = Plane(np.array([0.0, 0.0, 1.0]), 2.0)
        left = np.zeros((24, 32), dtype=bool)
        left[:, :16] = True
        gt = annotation_of([(left, plane), (~left, plane)])
        report = plane_recall(gt, gt, CAM)
        assert {(m.gt_index, m.pred_index) for m in report.matched} == {(0, 0), (1, 1)}

    def test_camera_mismatch(self):
        plane = Plane(np.array([0.0, 0.0, 1.0]), 2.0)
        gt = annotation_of([(full_mask(), plane)])
        other = CameraIntrinsics(32.0, 32.0, 16.0, 12.0, 33, 24)
        with pytest.raises(ConfigurationError):
            plane_recall(gt, gt, other)


class TestEvaluateAnnotations:
    def test_identical_gives_perfect_scores(self):
        plane_a = Plane(np.array([0.0, 0.0, 1.0]), 2.0)
        plane_b = Plane(np.array([0.0, 0.0, 1.0]), 3.0)
        left = np.zeros((24, 32), dtype=bool)
        left[:, :10] = True
        right = np.zeros((24, 32), dtype=bool)
        right[:, 20:] = True
        annotation = annotation_of([(left, plane_a), (right, plane_b)])
        report = evaluate_annotations(annotation, annotation, CAM)
        assert report.rand_index == 1.0
        assert report.variation_of_information <= 1e-12
        assert report.seg_covering == 1.0
        assert report.depth_recall[0.05] == 1.0

    def test_labels_raster(self):
        left = np.zeros((24, 32), dtype=bool)
        left[:, :10] = True
        annotation = annotation_of([(left, Plane(np.array([0.0, 0.0, 1.0]), 2.0))])
        labels = annotation_to_labels(annotation)
        assert set(np.unique(labels)) == {0, 1}
        assert (labels[left] == 1).all()


class TestRecallSpec:
    def test_domain_presets(self):
        assert RecallSpec.indoor().depth_thresholds == (0.05, 0.1, 0.6)
        assert RecallSpec.outdoor().depth_thresholds == (1.0, 3.0, 10.0)
        assert RecallSpec.indoor().normal_thresholds == (5.0, 10.0, 30.0)

    def test_validation(self):
        with pytest.raises(ValueError):
            RecallSpec(iou_threshold=0.0)
        with pytest.raises(ValueError):
            RecallSpec(depth_thresholds=(0.1, 0.05))
