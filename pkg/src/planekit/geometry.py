"""Camera model, plane algebra, planar depth rendering, synthetic scenes, meshes.

Conventions used throughout the package:

* pixels are addressed as ``(u, v)`` = (column, row); rasters are numpy
  arrays indexed ``[v, u]``;
* the camera looks down +z, a pixel's viewing ray is
  ``K^-1 (u, v, 1) = ((u - cx) / fx, (v - cy) / fy, 1)``;
* a plane is ``{X : normal . X = offset}`` with a unit normal and a strictly
  positive offset (distance from the camera center to the plane, meters).
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DegenerateSampleError, GenerationError

# Rays with normal . ray below this are treated as parallel to the plane.
RAY_EPS = 1e-6

# Offsets below this (after normalization) mean the plane passes through the
# camera center and cannot be oriented canonically.
CENTER_EPS = 1e-12


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigurationError("image dimensions must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigurationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ConfigurationError("principal point must lie inside the image")

    def rays(self) -> np.ndarray:
        """Viewing rays K^-1 (u, v, 1) for every pixel, shape (H, W, 3)."""
        u = (np.arange(self.width, dtype=float) - self.cx) / self.fx
        v = (np.arange(self.height, dtype=float) - self.cy) / self.fy
        out = np.empty((self.height, self.width, 3))
        out[..., 0] = u[None, :]
        out[..., 1] = v[:, None]
        out[..., 2] = 1.0
        return out


@dataclass(eq=False)
class DepthMap:
    """Per-pixel depth (z-coordinate, meters) plus a validity raster."""

    values: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.validity = np.asarray(self.validity, dtype=bool)
        if self.values.ndim != 2 or self.values.shape != self.validity.shape:
            raise ValueError("values and validity must be matching 2-D rasters")
        held = self.values[self.validity]
        if held.size and not (np.isfinite(held).all() and (held > 0).all()):
            raise ValueError("valid depth values must be finite and positive")

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass(eq=False)
class NormalMap:
    """Per-pixel unit normals in the camera frame plus a validity raster."""

    values: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.validity = np.asarray(self.validity, dtype=bool)
        if self.values.ndim != 3 or self.values.shape[2] != 3:
            raise ValueError("normal values must have shape (H, W, 3)")
        if self.values.shape[:2] != self.validity.shape:
            raise ValueError("values and validity must cover the same raster")
        norms = np.linalg.norm(self.values[self.validity], axis=-1)
        if norms.size and np.abs(norms - 1.0).max() > 1e-6:
            raise ValueError("valid normals must have unit length")

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class Plane:
    """Oriented plane ``normal . X = offset`` with unit normal and offset > 0."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        normal = np.asarray(self.normal, dtype=float)
        object.__setattr__(self, "normal", normal)
        object.__setattr__(self, "offset", float(self.offset))
        if normal.shape != (3,):
            raise ValueError("normal must be a 3-vector")
        if abs(np.linalg.norm(normal) - 1.0) > 1e-9:
            raise ValueError("normal must have unit length")
        if self.offset <= 0:
            raise ValueError("offset must be positive")

    @classmethod
    def canonical(cls, normal, offset) -> "Plane":
        """Normalize ``normal`` and flip orientation so the offset is positive.

        Raises DegenerateSampleError for zero normals and for planes through
        the camera center, which have no canonical orientation.
        """
        normal = np.asarray(normal, dtype=float)
        length = np.linalg.norm(normal)
        if length < CENTER_EPS:
            raise DegenerateSampleError("normal has zero length")
        normal = normal / length
        offset = float(offset) / length
        if abs(offset) <= CENTER_EPS:
            raise DegenerateSampleError("plane passes through the camera center")
        if offset < 0:
            normal, offset = -normal, -offset
        return cls(normal, offset)


@dataclass(eq=False)
class PointCloud:
    """3D points in the camera frame with their source pixel coordinates."""

    points: np.ndarray
    source_pixels: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.source_pixels = np.asarray(self.source_pixels, dtype=np.int64).reshape(-1, 2)
        if len(self.points) != len(self.source_pixels):
            raise ValueError("points and source_pixels must have equal length")
        if len(self.points) and not (self.points[:, 2] > 0).all():
            raise ValueError("all points must have positive z")

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, indices) -> "PointCloud":
        return PointCloud(self.points[indices], self.source_pixels[indices])


@dataclass(frozen=True)
class SceneSpec:
    """Parameters for a synthetic piecewise-planar scene."""

    plane_count: int
    depth_range: tuple[float, float]
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.plane_count <= 64:
            raise ValueError("plane_count must be in [1, 64]")
        lo, hi = self.depth_range
        if not 0 < lo < hi:
            raise ValueError("depth_range must satisfy 0 < min < max")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")


@dataclass(eq=False)
class Mesh:
    """Triangle mesh with one color per vertex."""

    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        if len(self.colors) != len(self.vertices):
            raise ValueError("one color per vertex required")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face indices out of range")


def angle_between(a, b) -> float:
    """Angle in radians between two unit vectors, accurate for tiny angles."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    chord = np.linalg.norm(a - b)
    return float(2.0 * math.asin(min(chord / 2.0, 1.0)))


def backproject(depth: DepthMap, camera: CameraIntrinsics, mask: np.ndarray | None = None) -> PointCloud:
    """Lift valid depth pixels to camera-frame 3D points.

    Emits ``X = z * K^-1 (u, v, 1)`` for every valid pixel inside ``mask``
    (all valid pixels when ``mask`` is None), in row-major pixel order.
    """
    if (depth.height, depth.width) != (camera.height, camera.width):
        raise ConfigurationError("depth map dimensions do not match the camera")
    select = depth.validity
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != depth.values.shape:
            raise ConfigurationError("mask dimensions do not match the depth map")
        select = select & mask
    vs, us = np.nonzero(select)
    z = depth.values[vs, us]
    points = np.stack(
        [z * (us - camera.cx) / camera.fx, z * (vs - camera.cy) / camera.fy, z], axis=1
    )
    return PointCloud(points, np.stack([us, vs], axis=1))


def project(points: np.ndarray, camera: CameraIntrinsics) -> np.ndarray:
    """Project camera-frame points to continuous (u, v) pixel coordinates."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    u = camera.fx * pts[:, 0] / pts[:, 2] + camera.cx
    v = camera.fy * pts[:, 1] / pts[:, 2] + camera.cy
    return np.stack([u, v], axis=1)


def render_planar_depth(plane: Plane, mask: np.ndarray, camera: CameraIntrinsics) -> DepthMap:
    """Depth induced by a plane along each masked pixel ray: ``offset / (n . ray)``.

    Pixels whose ray is parallel to the plane or faces away from it
    (``n . ray <= RAY_EPS``) are marked invalid rather than raising.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (camera.height, camera.width):
        raise ConfigurationError("mask dimensions do not match the camera")
    denom = camera.rays() @ plane.normal
    valid = mask & (denom > RAY_EPS)
    values = np.zeros(mask.shape)
    values[valid] = plane.offset / denom[valid]
    return DepthMap(values, valid)


def plane_from_three_points(p0, p1, p2) -> Plane:
    """Canonical plane through three non-collinear points."""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    normal = np.cross(p1 - p0, p2 - p0)
    if np.linalg.norm(normal) < 1e-12:
        raise DegenerateSampleError("points are collinear or coincident")
    return Plane.canonical(normal, float(normal @ p0))


def fit_plane_lsq(points: PointCloud) -> Plane:
    """Total-least-squares plane fit (orthogonal distance).

    Minimizes the sum of squared point-plane distances via the centroid and
    the smallest principal direction of the scatter matrix.
    """
    if len(points) < 3:
        raise DegenerateSampleError(f"plane fit needs >= 3 points, got {len(points)}")
    xyz = points.points
    centroid = xyz.mean(axis=0)
    centered = xyz - centroid
    scatter = centered.T @ centered
    evals, evecs = np.linalg.eigh(scatter)
    if evals[1] <= max(evals[2], 0.0) * 1e-12:
        raise DegenerateSampleError("points are collinear or coincident")
    normal = evecs[:, 0]
    return Plane.canonical(normal, float(normal @ centroid))


def point_plane_residuals(plane: Plane, points: PointCloud) -> np.ndarray:
    """Orthogonal distance of each point to the plane, meters."""
    return np.abs(points.points @ plane.normal - plane.offset)


def synth_scene(
    spec: SceneSpec,
    camera: CameraIntrinsics,
    *,
    max_partition_tries: int = 25,
    max_plane_tries: int = 64,
) -> tuple[DepthMap, np.ndarray, list[tuple[int, Plane]]]:
    """Generate a random piecewise-planar scene.

    The image is partitioned into ``plane_count`` convex cells (nearest random
    site), each cell gets a random plane whose rendered depth stays inside
    ``depth_range``, and optional multiplicative Gaussian noise is applied.
    Returns the (possibly noisy) depth map, a 1-based instance label raster,
    and the exact ground-truth plane per instance. Deterministic per seed.
    """
    rng = np.random.default_rng(spec.seed)
    labels = _random_partition(rng, spec.plane_count, camera, max_partition_tries)
    rays = camera.rays()
    values = np.zeros((camera.height, camera.width))
    planes = []
    for instance_id in range(1, spec.plane_count + 1):
        region = labels == instance_id
        plane, region_depth = _sample_region_plane(
            rng, rays[region], spec.depth_range, max_plane_tries
        )
        values[region] = region_depth
        planes.append((instance_id, plane))
    validity = np.ones_like(values, dtype=bool)
    if spec.noise_sigma > 0:
        values = values * (1.0 + spec.noise_sigma * rng.standard_normal(values.shape))
        validity = values > 0
        values = np.where(validity, values, 0.0)
    return DepthMap(values, validity), labels, planes


def _random_partition(rng, count: int, camera: CameraIntrinsics, tries: int) -> np.ndarray:
    """Nearest-site partition of the image into `count` nonempty convex cells."""
    uu = np.arange(camera.width, dtype=float)[None, :]
    vv = np.arange(camera.height, dtype=float)[:, None]
    for _ in range(tries):
        sites = rng.uniform([0.0, 0.0], [camera.width, camera.height], (count, 2))
        best = np.full((camera.height, camera.width), np.inf)
        labels = np.zeros((camera.height, camera.width), dtype=np.int32)
        for i, (sx, sy) in enumerate(sites):
            d2 = (uu - sx) ** 2 + (vv - sy) ** 2
            closer = d2 < best
            labels[closer] = i + 1
            best = np.where(closer, d2, best)
        if np.bincount(labels.ravel(), minlength=count + 1)[1:].min() > 0:
            return labels
    raise GenerationError(
        f"could not place {count} nonempty regions on a "
        f"{camera.width}x{camera.height} canvas after {tries} tries"
    )


def _sample_region_plane(rng, region_rays: np.ndarray, depth_range, tries: int):
    """Random plane whose depth over the region stays inside depth_range.

    The tilt cap shrinks to zero over the retry budget, so the final attempt
    is fronto-parallel and always satisfies a nonempty depth range.
    """
    lo, hi = depth_range
    margin = 0.05 * (hi - lo)
    mean_ray = region_rays.mean(axis=0)
    max_tilt = math.radians(60.0)
    for attempt in range(tries):
        cap = max_tilt * (1.0 - attempt / max(tries - 1, 1))
        tilt = rng.uniform(0.0, cap)
        azimuth = rng.uniform(0.0, 2.0 * math.pi)
        normal = np.array(
            [math.sin(tilt) * math.cos(azimuth), math.sin(tilt) * math.sin(azimuth), math.cos(tilt)]
        )
        target = rng.uniform(lo + margin, hi - margin)
        offset = target * float(normal @ mean_ray)
        if offset <= 0:
            continue
        denom = region_rays @ normal
        if denom.min() <= 1e-3:
            continue
        depth = offset / denom
        if depth.min() >= lo and depth.max() <= hi:
            return Plane.canonical(normal, offset), depth
    raise GenerationError("no valid plane placement for a region")


def instance_color(index: int) -> np.ndarray:
    """Deterministic distinct color for plane instance `index`, uint8 RGB."""
    hue = (index * 0.61803398875) % 1.0
    rgb = colorsys.hsv_to_rgb(hue, 0.65, 0.95)
    return np.array([round(255 * c) for c in rgb], dtype=np.uint8)


def export_mesh(annotation, camera: CameraIntrinsics) -> Mesh:
    """Triangulate an annotation's plane masks at their planar depth.

    ``annotation`` needs ``.planes`` entries with ``.plane`` and ``.mask``
    attributes. Each 2x2 block of 4-adjacent mask pixels yields two
    triangles; vertices are emitted row-major per plane, planes in
    annotation order, one color per plane instance.
    """
    vertices, faces, colors = [], [], []
    base = 0
    for index, inst in enumerate(annotation.planes):
        depth = render_planar_depth(inst.plane, inst.mask, camera)
        valid = depth.validity
        count = int(valid.sum())
        if count == 0:
            continue
        cloud = backproject(depth, camera)
        vertex_id = np.full(valid.shape, -1, dtype=np.int64)
        vs, us = np.nonzero(valid)
        vertex_id[vs, us] = base + np.arange(count)
        quad = valid[:-1, :-1] & valid[1:, :-1] & valid[:-1, 1:] & valid[1:, 1:]
        qv, qu = np.nonzero(quad)
        a = vertex_id[qv, qu]
        b = vertex_id[qv + 1, qu]
        c = vertex_id[qv, qu + 1]
        d = vertex_id[qv + 1, qu + 1]
        faces.append(np.stack([a, b, c], axis=1))
        faces.append(np.stack([b, d, c], axis=1))
        vertices.append(cloud.points)
        colors.append(np.tile(instance_color(index), (count, 1)))
        base += count
    if not vertices:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3), dtype=np.uint8))
    return Mesh(np.vstack(vertices), np.vstack(faces), np.vstack(colors))
