"""Plane segmentation quality (RI, VOI, SC) and geometric plane recall.

Label rasters treat 0 as the non-planar segment; it participates in all
three segmentation metrics as an ordinary segment. VOI uses natural-log
entropies (nats).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .geometry import CameraIntrinsics, angle_between, render_planar_depth

INDOOR_DEPTH_THRESHOLDS = (0.05, 0.1, 0.6)
OUTDOOR_DEPTH_THRESHOLDS = (1.0, 3.0, 10.0)
NORMAL_THRESHOLDS_DEG = (5.0, 10.0, 30.0)


@dataclass(frozen=True)
class RecallSpec:
    """Matching IoU floor and the error thresholds to report recall at."""

    iou_threshold: float = 0.5
    depth_thresholds: tuple[float, ...] = INDOOR_DEPTH_THRESHOLDS
    normal_thresholds: tuple[float, ...] = NORMAL_THRESHOLDS_DEG

    def __post_init__(self):
        if not 0 < self.iou_threshold < 1:
            raise ValueError("iou_threshold must be in (0, 1)")
        for values in (self.depth_thresholds, self.normal_thresholds):
            arr = np.asarray(values, dtype=float)
            if arr.size == 0 or (arr <= 0).any() or (np.diff(arr) <= 0).any():
                raise ValueError("thresholds must be positive and strictly ascending")

    @classmethod
    def indoor(cls, iou_threshold: float = 0.5) -> "RecallSpec":
        return cls(iou_threshold, INDOOR_DEPTH_THRESHOLDS, NORMAL_THRESHOLDS_DEG)

    @classmethod
    def outdoor(cls, iou_threshold: float = 0.5) -> "RecallSpec":
        return cls(iou_threshold, OUTDOOR_DEPTH_THRESHOLDS, NORMAL_THRESHOLDS_DEG)


@dataclass(eq=False)
class MatchedPair:
    """One matched (gt, pred) plane pair with its errors."""

    gt_index: int
    pred_index: int
    iou: float
    depth_error: float
    normal_error_deg: float


@dataclass(eq=False)
class EvalReport:
    """Per-image evaluation: recall tables plus optional segmentation scores.

    Recall values are None when the image has no ground-truth planes
    (undefined rather than zero).
    """

    gt_count: int
    pred_count: int
    matched: list[MatchedPair]
    depth_recall: dict[float, float | None]
    normal_recall: dict[float, float | None]
    rand_index: float | None = None
    variation_of_information: float | None = None
    seg_covering: float | None = None

    @property
    def undefined_recall(self) -> bool:
        return self.gt_count == 0


def _contingency(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ConfigurationError("labelings must share dimensions")
    if a.size == 0:
        raise ConfigurationError("labelings must be nonempty")
    _, a_inv = np.unique(a.ravel(), return_inverse=True)
    b_ids, b_inv = np.unique(b.ravel(), return_inverse=True)
    n_b = len(b_ids)
    flat = a_inv * n_b + b_inv
    table = np.bincount(flat, minlength=(a_inv.max() + 1) * n_b)
    return table.reshape(-1, n_b).astype(np.int64)


def rand_index(a, b) -> float:
    """Fraction of pixel pairs on which two labelings agree about co-membership.

    Computed in closed form from the label co-occurrence table; single-pixel
    images score 1 by convention.
    """
    table = _contingency(a, b)
    n = int(table.sum())
    if n < 2:
        return 1.0

    def pairs(x):
        return (x * (x - 1) // 2).sum()

    same_both = pairs(table)
    same_a = pairs(table.sum(axis=1))
    same_b = pairs(table.sum(axis=0))
    total = n * (n - 1) // 2
    return float((total - same_a - same_b + 2 * same_both) / total)


def variation_of_information(a, b) -> float:
    """VOI = H(a) + H(b) - 2 I(a; b) in nats, computed as 2 H(joint) - H(a) - H(b)."""
    table = _contingency(a, b)
    n = table.sum()

    def entropy(counts):
        p = counts[counts > 0] / n
        return float(-(p * np.log(p)).sum())

    voi = 2.0 * entropy(table.ravel()) - entropy(table.sum(axis=1)) - entropy(table.sum(axis=0))
    return max(voi, 0.0)


def seg_covering(gt, pred) -> float:
    """Size-weighted best-IoU covering of ground-truth segments by predictions."""
    table = _contingency(gt, pred).astype(float)
    n = table.sum()
    gt_sizes = table.sum(axis=1)
    pred_sizes = table.sum(axis=0)
    union = gt_sizes[:, None] + pred_sizes[None, :] - table
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(table > 0, table / union, 0.0)
    return float((gt_sizes * iou.max(axis=1)).sum() / n)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = int((a & b).sum())
    union = int((a | b).sum())
    return inter / union if union else 0.0


def annotation_to_labels(annotation) -> np.ndarray:
    """Label raster from an annotation: 0 non-planar, plane k at label k (1-based)."""
    labels = np.zeros((annotation.height, annotation.width), dtype=np.int32)
    for index, inst in enumerate(annotation.planes):
        labels[inst.mask] = index + 1
    return labels


def plane_recall(pred, gt, camera: CameraIntrinsics, spec: RecallSpec | None = None) -> EvalReport:
    """Geometric plane recall at the spec's depth and normal thresholds.

    Candidate pairs exceed the IoU floor and are matched one-to-one greedily
    in descending IoU order. Depth error is the mean absolute difference of
    the two planes' rendered depth over the mask intersection; normal error
    is the angle between unit normals. Recall at a threshold counts matched
    ground-truth planes whose error is within it, over all ground-truth
    planes.
    """
    spec = spec if spec is not None else RecallSpec()
    if (pred.width, pred.height) != (gt.width, gt.height):
        raise ConfigurationError("annotations must share the image size")
    if (camera.width, camera.height) != (gt.width, gt.height):
        raise ConfigurationError("camera does not match the annotations")
    candidates = []
    for gi, g_inst in enumerate(gt.planes):
        for pi, p_inst in enumerate(pred.planes):
            iou = mask_iou(g_inst.mask, p_inst.mask)
            if iou > spec.iou_threshold:
                candidates.append((iou, gi, pi))
    candidates.sort(key=lambda item: (-item[0], item[1], item[2]))
    used_gt: set[int] = set()
    used_pred: set[int] = set()
    matched: list[MatchedPair] = []
    for iou, gi, pi in candidates:
        if gi in used_gt or pi in used_pred:
            continue
        used_gt.add(gi)
        used_pred.add(pi)
        intersection = gt.planes[gi].mask & pred.planes[pi].mask
        gt_depth = render_planar_depth(gt.planes[gi].plane, intersection, camera)
        pred_depth = render_planar_depth(pred.planes[pi].plane, intersection, camera)
        both = gt_depth.validity & pred_depth.validity
        if both.any():
            depth_error = float(np.abs(gt_depth.values[both] - pred_depth.values[both]).mean())
        else:
            depth_error = math.inf
        normal_error = math.degrees(
            angle_between(gt.planes[gi].plane.normal, pred.planes[pi].plane.normal)
        )
        matched.append(MatchedPair(gi, pi, iou, depth_error, normal_error))

    gt_count = len(gt.planes)

    def recall_table(thresholds, errors):
        table: dict[float, float | None] = {}
        for threshold in thresholds:
            if gt_count == 0:
                table[float(threshold)] = None
            else:
                hits = sum(1 for err in errors if err <= threshold)
                table[float(threshold)] = hits / gt_count
        return table

    return EvalReport(
        gt_count=gt_count,
        pred_count=len(pred.planes),
        matched=matched,
        depth_recall=recall_table(spec.depth_thresholds, [m.depth_error for m in matched]),
        normal_recall=recall_table(spec.normal_thresholds, [m.normal_error_deg for m in matched]),
    )


def evaluate_annotations(pred, gt, camera: CameraIntrinsics, spec: RecallSpec | None = None) -> EvalReport:
    """Full per-image report: RI, VOI, SC, and both recall tables."""
    report = plane_recall(pred, gt, camera, spec)
    gt_labels = annotation_to_labels(gt)
    pred_labels = annotation_to_labels(pred)
    report.rand_index = rand_index(gt_labels, pred_labels)
    report.variation_of_information = variation_of_information(gt_labels, pred_labels)
    report.seg_covering = seg_covering(gt_labels, pred_labels)
    return report
