"""Bipartite matching between predicted and ground-truth planes, plus losses.

Pure numeric functions over plain arrays: no gradients, no network. The
matching cost pairs classification and mask terms only; geometry terms
apply after matching.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import expit

from .errors import ConfigurationError
from .exemplars import PlaneTarget
from .geometry import DepthMap, NormalMap
from .plane_fitting import PlaneAnnotation

PROB_EPS = 1e-12
DICE_SMOOTHING = 1.0


@dataclass(frozen=True)
class LossWeights:
    """Weights of the individual loss terms."""

    plane_class: float = 2.0
    mask: float = 5.0
    normal_class: float = 1.0
    normal_residual: float = 5.0
    offset_class: float = 1.0
    offset_residual: float = 2.0
    pixel_depth: float = 0.5
    pixel_normal_l1: float = 1.0
    pixel_normal_cos: float = 5.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"loss weight '{name}' must be nonnegative")


@dataclass(eq=False)
class PredictionSet:
    """Per-query decoder outputs as plain arrays.

    Shapes: plane_probs (Q,), mask_logits (Q, H, W), normal_class_logits
    (Q, K_n), normal_residuals (Q, K_n, 3), offset_class_logits (Q, K_d),
    offset_residuals (Q, K_d). The optional pixel maps are (H, W) depth and
    (H, W, 3) normals.
    """

    plane_probs: np.ndarray
    mask_logits: np.ndarray
    normal_class_logits: np.ndarray
    normal_residuals: np.ndarray
    offset_class_logits: np.ndarray
    offset_residuals: np.ndarray
    pixel_depth: np.ndarray | None = None
    pixel_normals: np.ndarray | None = None

    def __post_init__(self):
        self.plane_probs = np.asarray(self.plane_probs, dtype=float).ravel()
        self.mask_logits = np.asarray(self.mask_logits, dtype=float)
        self.normal_class_logits = np.asarray(self.normal_class_logits, dtype=float)
        self.normal_residuals = np.asarray(self.normal_residuals, dtype=float)
        self.offset_class_logits = np.asarray(self.offset_class_logits, dtype=float)
        self.offset_residuals = np.asarray(self.offset_residuals, dtype=float)
        q = len(self.plane_probs)
        if self.mask_logits.ndim != 3 or self.mask_logits.shape[0] != q:
            raise ConfigurationError("mask_logits must have shape (Q, H, W)")
        if self.normal_class_logits.ndim != 2 or self.normal_class_logits.shape[0] != q:
            raise ConfigurationError("normal_class_logits must have shape (Q, K_n)")
        if self.normal_residuals.shape != (q, self.normal_class_logits.shape[1], 3):
            raise ConfigurationError("normal_residuals must have shape (Q, K_n, 3)")
        if self.offset_class_logits.ndim != 2 or self.offset_class_logits.shape[0] != q:
            raise ConfigurationError("offset_class_logits must have shape (Q, K_d)")
        if self.offset_residuals.shape != self.offset_class_logits.shape:
            raise ConfigurationError("offset_residuals must match offset_class_logits")
        if ((self.plane_probs < 0) | (self.plane_probs > 1)).any():
            raise ConfigurationError("plane_probs must lie in [0, 1]")
        if self.pixel_depth is not None:
            self.pixel_depth = np.asarray(self.pixel_depth, dtype=float)
            if self.pixel_depth.shape != self.mask_logits.shape[1:]:
                raise ConfigurationError("pixel_depth must match the mask raster size")
        if self.pixel_normals is not None:
            self.pixel_normals = np.asarray(self.pixel_normals, dtype=float)
            if self.pixel_normals.shape != self.mask_logits.shape[1:] + (3,):
                raise ConfigurationError("pixel_normals must have shape (H, W, 3)")

    @property
    def query_count(self) -> int:
        return len(self.plane_probs)


@dataclass(frozen=True)
class LossBreakdown:
    """Individual loss terms and their weighted total."""

    plane_class: float
    mask: float
    normal_class: float
    normal_residual: float
    offset_class: float
    offset_residual: float
    pixel_depth: float
    pixel_normal_l1: float
    pixel_normal_cos: float
    total: float

    @property
    def pixel_normal(self) -> float:
        return self.pixel_normal_l1 + self.pixel_normal_cos


def binary_cross_entropy(probs: np.ndarray, target: np.ndarray) -> float:
    """Mean per-pixel binary cross-entropy with probability clamping."""
    p = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    t = target.astype(float)
    return float(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).mean())


def dice_loss(probs: np.ndarray, target: np.ndarray) -> float:
    """Smoothed dice loss: 1 - (2|P.G| + eps) / (|P| + |G| + eps)."""
    t = target.astype(float)
    inter = float((probs * t).sum())
    return 1.0 - (2.0 * inter + DICE_SMOOTHING) / (float(probs.sum()) + float(t.sum()) + DICE_SMOOTHING)


def matching_cost(
    preds: PredictionSet, gt: PlaneAnnotation, weights: LossWeights | None = None
) -> np.ndarray:
    """Q x G matching cost: classification plus mask (BCE + dice) terms."""
    weights = weights if weights is not None else LossWeights()
    if preds.mask_logits.shape[1:] != (gt.height, gt.width):
        raise ConfigurationError("prediction raster size does not match the annotation")
    q_count = preds.query_count
    g_count = len(gt.planes)
    cost = np.empty((q_count, g_count))
    class_term = weights.plane_class * (1.0 - preds.plane_probs)
    for q in range(q_count):
        probs = expit(preds.mask_logits[q])
        for g, inst in enumerate(gt.planes):
            mask_term = binary_cross_entropy(probs, inst.mask) + dice_loss(probs, inst.mask)
            cost[q, g] = class_term[q] + weights.mask * mask_term
    return cost


def hungarian(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment of ``min(Q, G)`` pairs.

    Returns row-sorted (query, target) pairs. Among equally optimal
    assignments the lexicographically smallest pair list is chosen.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    q_count, g_count = cost.shape
    if q_count == 0 or g_count == 0:
        return []
    if not np.isfinite(cost).all():
        raise ValueError("cost entries must be finite")
    n_pairs = min(q_count, g_count)
    base = _optimal_total(cost)
    tol = 1e-9 * max(1.0, abs(base))
    pairs: list[tuple[int, int]] = []
    columns = list(range(g_count))
    accumulated = 0.0
    row_start = 0
    for k in range(n_pairs):
        remaining = n_pairs - k - 1
        placed = False
        for r in range(row_start, q_count):
            if q_count - r - 1 < remaining:
                break
            for c in columns:
                rest_cols = [cc for cc in columns if cc != c]
                if remaining:
                    sub = cost[np.ix_(range(r + 1, q_count), rest_cols)]
                    completion = _optimal_total(sub)
                else:
                    completion = 0.0
                if accumulated + cost[r, c] + completion <= base + tol:
                    pairs.append((r, c))
                    accumulated += cost[r, c]
                    columns.remove(c)
                    row_start = r + 1
                    placed = True
                    break
            if placed:
                break
        if not placed:
            raise RuntimeError("failed to extend an optimal assignment")
    return pairs


def _optimal_total(cost: np.ndarray) -> float:
    if cost.size == 0:
        return 0.0
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def _softmax_cross_entropy(logits: np.ndarray, target_class: int) -> float:
    shifted = logits - logits.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[target_class])


def compute_losses(
    preds: PredictionSet,
    gt: PlaneAnnotation,
    gt_targets: list[PlaneTarget],
    gt_pixel_depth: DepthMap | None,
    gt_pixel_normals: NormalMap | None,
    assignment: list[tuple[int, int]],
    weights: LossWeights | None = None,
) -> LossBreakdown:
    """Evaluate every loss term for one prediction set under an assignment.

    Classification runs over all queries (matched ones target "plane",
    unmatched "no plane"); mask, class, and residual terms average over
    matched pairs; residual L1 uses the prediction row selected by the
    ground-truth class and averages elementwise. Pixel terms average over
    the valid pixels of the supplied ground-truth maps and are zero when the
    supervision set is empty or a map is absent.
    """
    weights = weights if weights is not None else LossWeights()
    if preds.mask_logits.shape[1:] != (gt.height, gt.width):
        raise ConfigurationError("prediction raster size does not match the annotation")
    if len(gt_targets) != len(gt.planes):
        raise ConfigurationError("one target per ground-truth plane required")
    q_count = preds.query_count
    g_count = len(gt.planes)
    seen_q: set[int] = set()
    seen_g: set[int] = set()
    for q, g in assignment:
        if not (0 <= q < q_count and 0 <= g < g_count):
            raise ConfigurationError("assignment index out of range")
        if q in seen_q or g in seen_g:
            raise ConfigurationError("assignment must be one-to-one")
        seen_q.add(q)
        seen_g.add(g)

    probs = np.clip(preds.plane_probs, PROB_EPS, 1.0 - PROB_EPS)
    matched = np.zeros(q_count, dtype=bool)
    for q, _ in assignment:
        matched[q] = True
    loss_cls = float(-np.where(matched, np.log(probs), np.log1p(-probs)).mean()) if q_count else 0.0

    mask_terms, ncls_terms, nres_terms, dcls_terms, dres_terms = [], [], [], [], []
    for q, g in assignment:
        target = gt_targets[g]
        mask_probs = expit(preds.mask_logits[q])
        mask_terms.append(
            binary_cross_entropy(mask_probs, gt.planes[g].mask)
            + dice_loss(mask_probs, gt.planes[g].mask)
        )
        ncls_terms.append(_softmax_cross_entropy(preds.normal_class_logits[q], target.normal_class))
        dcls_terms.append(_softmax_cross_entropy(preds.offset_class_logits[q], target.offset_class))
        nres_terms.append(
            float(np.abs(preds.normal_residuals[q, target.normal_class] - target.normal_residual).mean())
        )
        dres_terms.append(
            abs(float(preds.offset_residuals[q, target.offset_class]) - target.offset_residual)
        )

    def _mean(values):
        return float(np.mean(values)) if values else 0.0

    loss_pixel_depth = 0.0
    if preds.pixel_depth is not None and gt_pixel_depth is not None:
        if gt_pixel_depth.values.shape != preds.pixel_depth.shape:
            raise ConfigurationError("ground-truth depth size does not match the prediction")
        valid = gt_pixel_depth.validity
        if valid.any():
            diff = np.abs(preds.pixel_depth[valid] - gt_pixel_depth.values[valid])
            loss_pixel_depth = float(diff.mean())

    loss_pixel_normal_l1 = 0.0
    loss_pixel_normal_cos = 0.0
    if preds.pixel_normals is not None and gt_pixel_normals is not None:
        if gt_pixel_normals.values.shape != preds.pixel_normals.shape:
            raise ConfigurationError("ground-truth normals size does not match the prediction")
        valid = gt_pixel_normals.validity
        if valid.any():
            pred_n = preds.pixel_normals[valid]
            gt_n = gt_pixel_normals.values[valid]
            loss_pixel_normal_l1 = float(np.abs(pred_n - gt_n).mean())
            lengths = np.linalg.norm(pred_n, axis=1)
            unit = pred_n / np.maximum(lengths, 1e-12)[:, None]
            cosine = np.clip((unit * gt_n).sum(axis=1), -1.0, 1.0)
            loss_pixel_normal_cos = float((1.0 - cosine).mean())

    breakdown = dict(
        plane_class=loss_cls,
        mask=_mean(mask_terms),
        normal_class=_mean(ncls_terms),
        normal_residual=_mean(nres_terms),
        offset_class=_mean(dcls_terms),
        offset_residual=_mean(dres_terms),
        pixel_depth=loss_pixel_depth,
        pixel_normal_l1=loss_pixel_normal_l1,
        pixel_normal_cos=loss_pixel_normal_cos,
    )
    total = sum(getattr(weights, name) * value for name, value in breakdown.items())
    return LossBreakdown(total=total, **breakdown)
