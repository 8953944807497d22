"""Plane-parameter exemplars: clustering, classification targets, decoding.

Plane normals and offsets are quantized against cluster centers
("exemplars"); a plane is encoded as a class index plus a residual, and
decoding adds them back. Residuals absorb all quantization, so the
round trip is exact.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DecodeError, PipelineWarning
from .geometry import Plane

DEFAULT_NORMAL_EXEMPLARS = 7
DEFAULT_OFFSET_SPLIT = 20.0
DEFAULT_OFFSETS_PER_GROUP = 10


@dataclass(eq=False)
class ExemplarSet:
    """Normal and offset cluster centers with clustering provenance."""

    normals: np.ndarray
    offsets: np.ndarray
    split_threshold: float = DEFAULT_OFFSET_SPLIT
    seed: int = 0
    offset_group_counts: tuple[int, int] | None = None

    def __post_init__(self):
        self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
        self.offsets = np.asarray(self.offsets, dtype=float).ravel()
        if len(self.normals) < 1:
            raise ValueError("need at least one normal exemplar")
        if len(self.offsets) < 2:
            raise ValueError("need at least two offset exemplars")
        norms = np.linalg.norm(self.normals, axis=1)
        if np.abs(norms - 1.0).max() > 1e-9:
            raise ValueError("normal exemplars must be unit vectors")
        if (self.offsets <= 0).any():
            raise ValueError("offset exemplars must be positive")
        if (np.diff(self.offsets) <= 0).any():
            raise ValueError("offset exemplars must be strictly ascending")

    @property
    def normal_count(self) -> int:
        return len(self.normals)

    @property
    def offset_count(self) -> int:
        return len(self.offsets)


@dataclass(eq=False)
class PlaneTarget:
    """Classification-then-regression target for one plane."""

    normal_class: int
    normal_residual: np.ndarray
    offset_class: int
    offset_residual: float

    def __post_init__(self):
        self.normal_residual = np.asarray(self.normal_residual, dtype=float).reshape(3)
        self.offset_residual = float(self.offset_residual)


def kmeans(vectors, k: int, seed: int = 0, max_iters: int = 100, return_inertia: bool = False):
    """Seeded Lloyd k-means with farthest-point initialization.

    Iterates until the assignment reaches a fixpoint or ``max_iters``. Empty
    clusters are re-seeded with the point farthest from its assigned center,
    which keeps the recorded within-cluster sum of squares non-increasing.
    Returns the (k, D) centers, plus the per-iteration inertia when
    ``return_inertia`` is set.
    """
    vectors = np.asarray(vectors, dtype=float)
    if vectors.ndim == 1:
        vectors = vectors[:, None]
    n = len(vectors)
    if k < 1:
        raise ValueError("k must be at least 1")
    if n < k:
        raise ValueError(f"need at least {k} vectors, got {n}")
    rng = np.random.default_rng(seed)
    centers = _farthest_point_init(vectors, k, rng)
    assignment = np.full(n, -1)
    inertia_path = []
    for _ in range(max_iters):
        d2 = ((vectors[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assignment = d2.argmin(axis=1)
        # Recenter before fixing empty clusters: moving the farthest point
        # into an empty cluster then only ever lowers the recorded inertia.
        for c in range(k):
            chosen = new_assignment == c
            if chosen.any():
                centers[c] = vectors[chosen].mean(axis=0)
        own = ((vectors - centers[new_assignment]) ** 2).sum(axis=1)
        for c in range(k):
            if (new_assignment == c).any():
                continue
            far = int(own.argmax())
            new_assignment[far] = c
            centers[c] = vectors[far]
            own[far] = -1.0
        inertia_path.append(float(((vectors - centers[new_assignment]) ** 2).sum()))
        if (new_assignment == assignment).all():
            break
        assignment = new_assignment
    if return_inertia:
        return centers, inertia_path
    return centers


def _farthest_point_init(vectors: np.ndarray, k: int, rng) -> np.ndarray:
    first = int(rng.integers(len(vectors)))
    centers = [vectors[first]]
    min_d2 = ((vectors - vectors[first]) ** 2).sum(axis=1)
    for _ in range(1, k):
        nxt = int(min_d2.argmax())
        centers.append(vectors[nxt])
        min_d2 = np.minimum(min_d2, ((vectors - vectors[nxt]) ** 2).sum(axis=1))
    return np.array(centers, dtype=float)


def build_normal_exemplars(normals, k: int = DEFAULT_NORMAL_EXEMPLARS, seed: int = 0) -> np.ndarray:
    """Cluster unit normals in 3-space and renormalize the centers.

    A center that averages to zero length (antipodal members) is re-seeded
    with its cluster's farthest member before normalization.
    """
    arr = np.asarray(normals, dtype=float).reshape(-1, 3)
    lengths = np.linalg.norm(arr, axis=1)
    if (lengths < 1e-12).any():
        raise ValueError("input normals must be nonzero")
    arr = arr / lengths[:, None]
    centers = kmeans(arr, k, seed=seed)
    d2 = ((arr[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    for c in range(k):
        if np.linalg.norm(centers[c]) >= 1e-9:
            continue
        members = np.nonzero(labels == c)[0]
        pool = members if members.size else np.arange(len(arr))
        far = pool[int(d2[pool, c].argmax())]
        centers[c] = arr[far]
    return centers / np.linalg.norm(centers, axis=1)[:, None]


def build_offset_exemplars(
    offsets,
    split: float = DEFAULT_OFFSET_SPLIT,
    per_group: int = DEFAULT_OFFSETS_PER_GROUP,
    seed: int = 0,
) -> np.ndarray:
    """Cluster offsets separately below and above ``split``, then merge.

    Each group contributes ``min(len(group), per_group)`` 1-D cluster
    centers; under-filled groups are flagged with a warning instead of
    failing. The merged result is sorted ascending with exact duplicates
    collapsed.
    """
    arr = np.asarray(offsets, dtype=float).ravel()
    if arr.size == 0:
        raise ValueError("no offsets to cluster")
    if (arr <= 0).any():
        raise ValueError("offsets must be positive")
    pieces = []
    for name, group in (("near", arr[arr <= split]), ("far", arr[arr > split])):
        if group.size == 0:
            warnings.warn(f"offset group '{name}' is empty", PipelineWarning)
            continue
        k = min(group.size, per_group)
        if k < per_group:
            warnings.warn(
                f"offset group '{name}' has {group.size} members, "
                f"fewer than the requested {per_group} exemplars",
                PipelineWarning,
            )
        pieces.append(kmeans(group[:, None], k, seed=seed).ravel())
    return np.unique(np.concatenate(pieces))


def build_exemplar_set(
    planes,
    k_normals: int = DEFAULT_NORMAL_EXEMPLARS,
    split: float = DEFAULT_OFFSET_SPLIT,
    per_group: int = DEFAULT_OFFSETS_PER_GROUP,
    seed: int = 0,
) -> ExemplarSet:
    """Cluster a collection of planes into a full exemplar set."""
    planes = list(planes)
    if not planes:
        raise ValueError("no planes to cluster")
    normals = np.array([p.normal for p in planes])
    offsets = np.array([p.offset for p in planes])
    return ExemplarSet(
        normals=build_normal_exemplars(normals, k_normals, seed=seed),
        offsets=build_offset_exemplars(offsets, split=split, per_group=per_group, seed=seed),
        split_threshold=split,
        seed=seed,
        offset_group_counts=(int((offsets <= split).sum()), int((offsets > split).sum())),
    )


def encode_plane(plane: Plane, exemplars: ExemplarSet) -> PlaneTarget:
    """Encode a plane as exemplar classes plus residuals.

    The normal class maximizes the dot product with the plane normal, the
    offset class minimizes the absolute offset difference; ties pick the
    smallest index (for offsets, the smaller exemplar).
    """
    i = int((exemplars.normals @ plane.normal).argmax())
    j = int(np.abs(exemplars.offsets - plane.offset).argmin())
    return PlaneTarget(
        normal_class=i,
        normal_residual=plane.normal - exemplars.normals[i],
        offset_class=j,
        offset_residual=plane.offset - exemplars.offsets[j],
    )


def decode_plane(
    exemplars: ExemplarSet,
    normal_class: int,
    normal_residual,
    offset_class: int,
    offset_residual: float,
) -> Plane:
    """Reconstruct a plane from exemplar classes and residuals.

    The raw normal ``exemplar + residual`` is renormalized to unit length;
    the decoded offset must come out positive.
    """
    if not 0 <= normal_class < exemplars.normal_count:
        raise ValueError(f"normal class {normal_class} out of range")
    if not 0 <= offset_class < exemplars.offset_count:
        raise ValueError(f"offset class {offset_class} out of range")
    raw = exemplars.normals[normal_class] + np.asarray(normal_residual, dtype=float).reshape(3)
    length = np.linalg.norm(raw)
    if length < 1e-12:
        raise DecodeError("decoded normal has zero length")
    offset = float(exemplars.offsets[offset_class] + offset_residual)
    if offset <= 0:
        raise DecodeError(f"decoded offset {offset} is not positive")
    return Plane(raw / length, offset)


def decode_target(exemplars: ExemplarSet, target: PlaneTarget) -> Plane:
    """Decode a full PlaneTarget."""
    return decode_plane(
        exemplars,
        target.normal_class,
        target.normal_residual,
        target.offset_class,
        target.offset_residual,
    )
