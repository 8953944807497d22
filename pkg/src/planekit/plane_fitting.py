"""Dense plane annotation: per-instance sequential RANSAC, merging, filtering.

The pipeline back-projects each segmentation instance's valid depth pixels,
extracts planes one by one with RANSAC (inliers leave the working set after
each accepted plane), merges near-identical planes within an instance, and
drops tiny masks. Fitting-error thresholds scale with the proposal's mean
depth so near and far geometry are treated alike.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DegenerateSampleError, PipelineWarning
from .geometry import (
    CameraIntrinsics,
    DepthMap,
    NormalMap,
    Plane,
    PointCloud,
    angle_between,
    backproject,
    fit_plane_lsq,
    plane_from_three_points,
    point_plane_residuals,
    render_planar_depth,
)

DEFAULT_CLASS_RANGES = {
    "road": (1, 2),
    "wall": (1, 2),
    "building": (1, 5),
    "vehicle": (0, 2),
    "floor": (0, 1),
    "furniture": (0, 5),
}
DEFAULT_RANGE = (0, 3)


@dataclass(frozen=True)
class FittingConfig:
    """Knobs for RANSAC plane extraction and merging."""

    ransac_iterations: int = 200
    reference_error: float = 0.05
    reference_depth: float = 10.0
    min_plane_pixels: int = 200
    min_inlier_ratio: float = 0.10
    merge_angle_tol: float = 10.0
    merge_offset_rel_tol: float = 0.05
    seed: int = 0
    # When False, hypothesis scoring uses the flat reference error and the
    # depth-adaptive threshold applies only at final proposal rejection.
    adaptive_inlier_scoring: bool = True

    def __post_init__(self):
        if self.ransac_iterations < 1 or self.min_plane_pixels < 1:
            raise ValueError("counts must be at least 1")
        if self.reference_error <= 0 or self.reference_depth <= 0:
            raise ValueError("reference error and depth must be positive")
        if not 0 < self.min_inlier_ratio <= 1:
            raise ValueError("min_inlier_ratio must be in (0, 1]")
        if self.merge_angle_tol <= 0 or self.merge_offset_rel_tol <= 0:
            raise ValueError("merge tolerances must be positive")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")


@dataclass
class CategoryRangeTable:
    """Per-class (min, max) plane counts, with a fallback for unknown classes."""

    ranges: dict[str, tuple[int, int]] = field(
        default_factory=lambda: dict(DEFAULT_CLASS_RANGES)
    )
    default: tuple[int, int] = DEFAULT_RANGE

    def __post_init__(self):
        for name, pair in list(self.ranges.items()):
            self.ranges[name] = _checked_range(name, pair)
        self.default = _checked_range("default", self.default)

    def range_for(self, semantic_class: str) -> tuple[int, int]:
        return self.ranges.get(semantic_class, self.default)


def _checked_range(name, pair) -> tuple[int, int]:
    lo, hi = int(pair[0]), int(pair[1])
    if not 0 <= lo <= hi:
        raise ValueError(f"range for '{name}' must satisfy 0 <= min <= max")
    return lo, hi


@dataclass(eq=False)
class Segmentation:
    """Instance label raster (0 = unlabeled) plus instance-to-class names."""

    labels: np.ndarray
    classes: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ValueError("labels must be a 2-D raster")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be nonnegative")

    def class_of(self, instance_id: int) -> str:
        return self.classes.get(instance_id, "default")


@dataclass(eq=False)
class PlaneInstance:
    """One fitted plane: parameters, pixel mask, and fit statistics."""

    plane: Plane
    mask: np.ndarray
    inlier_count: int
    mean_fit_error: float
    mean_depth: float
    instance_id: int
    semantic_class: str = "default"

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if not self.mask.any():
            raise ValueError("plane mask must be nonempty")


@dataclass(eq=False)
class PlaneAnnotation:
    """All plane instances of one image; uncovered pixels are non-planar."""

    planes: list[PlaneInstance]
    width: int
    height: int
    camera: CameraIntrinsics

    def __post_init__(self):
        coverage = np.zeros((self.height, self.width), dtype=np.int32)
        for inst in self.planes:
            if inst.mask.shape != (self.height, self.width):
                raise ValueError("plane mask does not match the image size")
            coverage += inst.mask
        if self.planes and coverage.max() > 1:
            raise ValueError("plane masks must be pairwise disjoint")


def adaptive_threshold(mean_depth: float, cfg: FittingConfig) -> float:
    """Distance-aware fitting error threshold.

    Scales the reference error linearly with the proposal's mean depth past
    the reference depth and never drops below the reference error:
    ``max(reference_error * mean_depth / reference_depth, reference_error)``.
    """
    if mean_depth <= 0:
        raise ValueError("mean depth must be positive")
    return max(cfg.reference_error * (mean_depth / cfg.reference_depth), cfg.reference_error)


def _sample_triple(rng, n: int) -> np.ndarray:
    while True:
        idx = rng.integers(0, n, size=3)
        if idx[0] != idx[1] and idx[0] != idx[2] and idx[1] != idx[2]:
            return idx


def ransac_single(points: PointCloud, cfg: FittingConfig, rng) -> tuple[Plane, np.ndarray, float] | None:
    """One RANSAC plane extraction over a point set.

    Runs exactly ``cfg.ransac_iterations`` hypothesis rounds of three distinct
    points each (degenerate triples are skipped but still count as rounds),
    keeps the hypothesis with the most inliers, refits it by total least
    squares on its inliers, and returns ``(plane, inlier_indices,
    mean_fit_error)``. Returns None when the best inlier set is smaller than
    ``max(3, min_inlier_ratio * len(points))`` or the refit's mean error
    exceeds the adaptive threshold for its mean depth.

    Inlier counting uses the adaptive threshold recomputed once per
    hypothesis from the candidate inliers' mean depth (a flat reference-error
    threshold when ``adaptive_inlier_scoring`` is off).
    """
    n = len(points)
    if n < 3:
        raise DegenerateSampleError(f"RANSAC needs >= 3 points, got {n}")
    xyz = points.points
    z = xyz[:, 2]
    if cfg.adaptive_inlier_scoring:
        bootstrap = adaptive_threshold(float(z.mean()), cfg)
    else:
        bootstrap = cfg.reference_error
    best_count = 0
    best_inliers = None
    for _ in range(cfg.ransac_iterations):
        idx = _sample_triple(rng, n)
        try:
            hyp = plane_from_three_points(xyz[idx[0]], xyz[idx[1]], xyz[idx[2]])
        except DegenerateSampleError:
            continue
        residuals = np.abs(xyz @ hyp.normal - hyp.offset)
        candidate = residuals < bootstrap
        if not candidate.any():
            continue
        if cfg.adaptive_inlier_scoring:
            threshold = adaptive_threshold(float(z[candidate].mean()), cfg)
            inliers = residuals < threshold
        else:
            inliers = candidate
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers
    if best_inliers is None or best_count < max(3.0, cfg.min_inlier_ratio * n):
        return None
    keep = np.nonzero(best_inliers)[0]
    try:
        plane = fit_plane_lsq(points.subset(keep))
    except DegenerateSampleError:
        return None
    mean_error = float(np.abs(xyz[keep] @ plane.normal - plane.offset).mean())
    if mean_error > adaptive_threshold(float(z[keep].mean()), cfg):
        return None
    return plane, keep, mean_error


def fit_instance(
    points: PointCloud,
    plane_range: tuple[int, int],
    cfg: FittingConfig,
    rng,
    image_shape: tuple[int, int],
    instance_id: int = 0,
    semantic_class: str = "default",
) -> list[PlaneInstance]:
    """Sequentially extract up to ``max`` planes from one instance's points.

    Accepted inliers leave the working set before the next extraction.
    Finding fewer than ``min`` planes is a warning, not an error.
    """
    lo, hi = _checked_range("plane_range", plane_range)
    height, width = image_shape
    found: list[PlaneInstance] = []
    if hi == 0:
        return found
    working = np.arange(len(points))
    while len(found) < hi and working.size >= 3:
        result = ransac_single(points.subset(working), cfg, rng)
        if result is None:
            break
        plane, local_idx, mean_error = result
        chosen = working[local_idx]
        mask = np.zeros((height, width), dtype=bool)
        pixels = points.source_pixels[chosen]
        mask[pixels[:, 1], pixels[:, 0]] = True
        found.append(
            PlaneInstance(
                plane=plane,
                mask=mask,
                inlier_count=int(chosen.size),
                mean_fit_error=mean_error,
                mean_depth=float(points.points[chosen, 2].mean()),
                instance_id=instance_id,
                semantic_class=semantic_class,
            )
        )
        remaining = np.ones(working.size, dtype=bool)
        remaining[local_idx] = False
        working = working[remaining]
    if len(found) < lo:
        warnings.warn(
            f"instance {instance_id}: found {len(found)} plane(s), expected at least {lo}",
            PipelineWarning,
        )
    return found


def merge_close_planes(
    instances: list[PlaneInstance],
    cfg: FittingConfig,
    depth: DepthMap,
    camera: CameraIntrinsics,
) -> list[PlaneInstance]:
    """Merge adjacent same-instance planes with near-identical parameters.

    Two planes merge when they share an instance id, their masks touch within
    a 1-pixel 8-neighborhood dilation, their normals differ by less than
    ``merge_angle_tol`` degrees, and their offsets differ by less than
    ``merge_offset_rel_tol`` relative to the larger one. The merged plane is
    refit on the union's back-projected points and must still pass the
    adaptive error threshold. Pairs are processed in ascending list order and
    merging iterates to a fixed point.
    """
    items = list(instances)
    angle_tol = np.radians(cfg.merge_angle_tol)
    structure = np.ones((3, 3), dtype=bool)
    merged_any = True
    while merged_any:
        merged_any = False
        for i in range(len(items)):
            for j in range(i + 1, len(items)):
                merged = _try_merge(items[i], items[j], angle_tol, cfg, depth, camera, structure)
                if merged is not None:
                    items[i] = merged
                    del items[j]
                    merged_any = True
                    break
            if merged_any:
                break
    return items


def _try_merge(a, b, angle_tol, cfg, depth, camera, structure):
    if a.instance_id != b.instance_id:
        return None
    if angle_between(a.plane.normal, b.plane.normal) >= angle_tol:
        return None
    gap = abs(a.plane.offset - b.plane.offset) / max(a.plane.offset, b.plane.offset)
    if gap >= cfg.merge_offset_rel_tol:
        return None
    if not (ndimage.binary_dilation(a.mask, structure=structure) & b.mask).any():
        return None
    union = a.mask | b.mask
    points = backproject(depth, camera, union)
    if len(points) < 3:
        return None
    try:
        plane = fit_plane_lsq(points)
    except DegenerateSampleError:
        return None
    mean_error = float(point_plane_residuals(plane, points).mean())
    mean_depth = float(points.points[:, 2].mean())
    if mean_error > adaptive_threshold(mean_depth, cfg):
        return None
    return PlaneInstance(
        plane=plane,
        mask=union,
        inlier_count=len(points),
        mean_fit_error=mean_error,
        mean_depth=mean_depth,
        instance_id=a.instance_id,
        semantic_class=a.semantic_class,
    )


def annotate_image(
    depth: DepthMap,
    seg: Segmentation,
    camera: CameraIntrinsics,
    ranges: CategoryRangeTable | None = None,
    cfg: FittingConfig | None = None,
) -> PlaneAnnotation:
    """Fit plane annotations for one image.

    Each segmentation instance is processed in ascending id order with its
    own RNG stream derived from ``(cfg.seed, instance_id)``, so results do
    not depend on scheduling. After per-instance extraction, close planes are
    merged and masks smaller than ``min_plane_pixels`` are dropped.
    """
    ranges = ranges if ranges is not None else CategoryRangeTable()
    cfg = cfg if cfg is not None else FittingConfig()
    if (depth.height, depth.width) != (camera.height, camera.width):
        raise ConfigurationError("depth map dimensions do not match the camera")
    if seg.labels.shape != depth.values.shape:
        raise ConfigurationError("segmentation dimensions do not match the depth map")
    instances: list[PlaneInstance] = []
    ids = np.unique(seg.labels)
    for instance_id in ids[ids > 0].tolist():
        semantic_class = seg.class_of(instance_id)
        lo, hi = ranges.range_for(semantic_class)
        pixels = (seg.labels == instance_id) & depth.validity
        # An instance below the final pixel filter cannot yield a surviving
        # plane, so RANSAC is skipped outright.
        if pixels.sum() < max(3, cfg.min_plane_pixels):
            if lo > 0:
                warnings.warn(
                    f"instance {instance_id}: too few valid pixels for its plane range",
                    PipelineWarning,
                )
            continue
        rng = np.random.default_rng([cfg.seed, instance_id])
        points = backproject(depth, camera, pixels)
        instances.extend(
            fit_instance(
                points,
                (lo, hi),
                cfg,
                rng,
                (camera.height, camera.width),
                instance_id=instance_id,
                semantic_class=semantic_class,
            )
        )
    merged = merge_close_planes(instances, cfg, depth, camera)
    kept = [inst for inst in merged if int(inst.mask.sum()) >= cfg.min_plane_pixels]
    return PlaneAnnotation(kept, camera.width, camera.height, camera)


def annotation_from_planes(
    labels: np.ndarray,
    planes: list[tuple[int, Plane]],
    depth: DepthMap,
    camera: CameraIntrinsics,
    semantic_class: str = "synthetic",
) -> PlaneAnnotation:
    """Package generator ground truth as an annotation.

    Fit statistics are nominal: the planes are exact, so the fit error is
    recorded as zero and the mean depth comes from the supplied depth map.
    """
    instances = []
    for instance_id, plane in planes:
        mask = (labels == instance_id) & depth.validity
        if not mask.any():
            continue
        instances.append(
            PlaneInstance(
                plane=plane,
                mask=mask,
                inlier_count=int(mask.sum()),
                mean_fit_error=0.0,
                mean_depth=float(depth.values[mask].mean()),
                instance_id=int(instance_id),
                semantic_class=semantic_class,
            )
        )
    return PlaneAnnotation(instances, camera.width, camera.height, camera)


def annotation_planar_depth(annotation: PlaneAnnotation, camera: CameraIntrinsics) -> DepthMap:
    """Composite planar depth over all annotation masks."""
    values = np.zeros((camera.height, camera.width))
    validity = np.zeros((camera.height, camera.width), dtype=bool)
    for inst in annotation.planes:
        rendered = render_planar_depth(inst.plane, inst.mask, camera)
        values[rendered.validity] = rendered.values[rendered.validity]
        validity |= rendered.validity
    return DepthMap(values, validity)


def annotation_normal_map(annotation: PlaneAnnotation) -> NormalMap:
    """Per-pixel plane normals over all annotation masks."""
    values = np.zeros((annotation.height, annotation.width, 3))
    validity = np.zeros((annotation.height, annotation.width), dtype=bool)
    for inst in annotation.planes:
        values[inst.mask] = inst.plane.normal
        validity |= inst.mask
    return NormalMap(values, validity)
