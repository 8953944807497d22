"""File formats: depth rasters, segmentation, annotations, intrinsics, config.

All writers are deterministic (sorted JSON keys, fixed layouts) and every
save/load pair round-trips losslessly: rasters bit-exactly, JSON floats
via shortest exact repr. Formats:

* depth: 16-bit single-channel PNG (``value = depth * scale``, sentinel for
  invalid pixels) or a raw little-endian float32 raster
  (``F32DEPTH`` magic, u32 width, u32 height, row-major data, NaN invalid);
* segmentation: 8/16-bit indexed PNG plus a JSON ``{id: class}`` table;
* annotation: ``masks.png`` indexed raster (0 non-planar, k = plane k) plus
  a ``planes.json`` sidecar with parameters and fit statistics;
* intrinsics: JSON ``{fx, fy, cx, cy, width, height}``;
* exemplars: JSON ``{normals, offsets, split_threshold, seed}``;
* config: one JSON file with ``fitting``, ``class_ranges`` and
  ``loss_weights`` sections, all optional;
* meshes: ASCII PLY with per-vertex uchar colors.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, FormatError, PipelineWarning
from .exemplars import ExemplarSet
from .geometry import CameraIntrinsics, DepthMap, Mesh, Plane
from .matching_losses import LossWeights
from .plane_fitting import (
    CategoryRangeTable,
    FittingConfig,
    PlaneAnnotation,
    PlaneInstance,
    Segmentation,
)

RAW_DEPTH_MAGIC = b"F32DEPTH"
MASK_FILENAME = "masks.png"
SIDECAR_FILENAME = "planes.json"

_INT_PNG_MODES = {"I", "I;16", "I;16B", "I;16L", "I;16N"}


@dataclass(frozen=True)
class DepthEncoding:
    """Scaled-integer depth encoding for 16-bit PNG rasters."""

    scale: float = 1000.0
    invalid_value: int = 0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if not 0 <= self.invalid_value <= 65535:
            raise ValueError("invalid_value must fit 16 bits")


def _dump_json(payload, path: Path) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _parse_json(path: Path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path} is not valid JSON: {exc}") from exc


def _open_indexed_png(path: Path, allow_8bit: bool) -> np.ndarray:
    try:
        image = Image.open(path)
        image.load()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if image.mode in _INT_PNG_MODES:
        return np.asarray(image).astype(np.int64)
    if allow_8bit and image.mode == "L":
        return np.asarray(image).astype(np.int64)
    raise FormatError(f"{path}: expected a single-channel PNG, got mode '{image.mode}'")


def save_depth(depth: DepthMap, path, encoding: DepthEncoding | None = None) -> None:
    """Write a depth map: 16-bit PNG for ``.png`` paths, raw float32 otherwise.

    PNG quantizes to ``round(depth * scale)`` and stores the sentinel at
    invalid pixels; depths that exceed the 16-bit range raise rather than
    clip. A valid pixel that quantizes to the sentinel loads back as invalid.
    """
    encoding = encoding if encoding is not None else DepthEncoding()
    path = Path(path)
    if path.suffix.lower() == ".png":
        scaled = np.round(depth.values * encoding.scale)
        scaled = np.where(depth.validity, scaled, float(encoding.invalid_value))
        if scaled.max(initial=0.0) > 65535:
            raise FormatError("depth exceeds the 16-bit range at this scale")
        Image.fromarray(scaled.astype(np.uint16)).save(path)
        return
    values = np.where(depth.validity, depth.values, np.nan).astype("<f4")
    with open(path, "wb") as handle:
        handle.write(RAW_DEPTH_MAGIC)
        handle.write(struct.pack("<II", depth.width, depth.height))
        handle.write(values.tobytes())


def load_depth(path, encoding: DepthEncoding | None = None) -> DepthMap:
    """Read a depth map written by :func:`save_depth`."""
    encoding = encoding if encoding is not None else DepthEncoding()
    path = Path(path)
    if path.suffix.lower() == ".png":
        raw = _open_indexed_png(path, allow_8bit=False)
        validity = raw != encoding.invalid_value
        values = np.where(validity, raw / encoding.scale, 0.0)
        return DepthMap(values, validity & (values > 0))
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    header = len(RAW_DEPTH_MAGIC) + 8
    if len(blob) < header or blob[: len(RAW_DEPTH_MAGIC)] != RAW_DEPTH_MAGIC:
        raise FormatError(f"{path} is not a raw float32 depth raster")
    width, height = struct.unpack_from("<II", blob, len(RAW_DEPTH_MAGIC))
    expected = header + 4 * width * height
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    values = np.frombuffer(blob, dtype="<f4", offset=header).reshape(height, width).astype(float)
    validity = np.isfinite(values) & (values > 0)
    return DepthMap(np.where(validity, values, 0.0), validity)


def save_segmentation(seg: Segmentation, mask_path, table_path) -> None:
    """Write an instance label raster (8 or 16-bit PNG) and its class table."""
    labels = seg.labels
    top = int(labels.max(initial=0))
    if top > 65535:
        raise FormatError("instance ids exceed the 16-bit raster range")
    dtype = np.uint8 if top <= 255 else np.uint16
    Image.fromarray(labels.astype(dtype)).save(mask_path)
    _dump_json({str(key): value for key, value in sorted(seg.classes.items())}, table_path)


def load_segmentation(mask_path, table_path) -> Segmentation:
    """Read a segmentation; raster ids missing from the table get a warning."""
    labels = _open_indexed_png(Path(mask_path), allow_8bit=True)
    table = _parse_json(table_path)
    if not isinstance(table, dict):
        raise FormatError(f"{table_path}: expected an object mapping id to class")
    try:
        classes = {int(key): str(value) for key, value in table.items()}
    except ValueError as exc:
        raise FormatError(f"{table_path}: instance ids must be integers") from exc
    present = np.unique(labels)
    missing = [int(i) for i in present if i > 0 and int(i) not in classes]
    if missing:
        warnings.warn(
            f"{table_path}: no class for instance ids {missing}, using 'default'",
            PipelineWarning,
        )
    return Segmentation(labels, classes)


def _camera_payload(camera: CameraIntrinsics) -> dict:
    return {
        "fx": camera.fx,
        "fy": camera.fy,
        "cx": camera.cx,
        "cy": camera.cy,
        "width": camera.width,
        "height": camera.height,
    }


def save_annotation(annotation: PlaneAnnotation, directory) -> None:
    """Write one annotation: indexed mask raster plus JSON sidecar.

    Raster label k corresponds to the k-th sidecar entry (1-based); label 0
    is non-planar.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    count = len(annotation.planes)
    if count > 65535:
        raise FormatError("too many planes for a 16-bit raster")
    labels = np.zeros((annotation.height, annotation.width), dtype=np.int64)
    entries = []
    for index, inst in enumerate(annotation.planes):
        labels[inst.mask] = index + 1
        entries.append(
            {
                "id": index + 1,
                "normal": [float(c) for c in inst.plane.normal],
                "offset": inst.plane.offset,
                "inlier_count": int(inst.inlier_count),
                "mean_fit_error": float(inst.mean_fit_error),
                "mean_depth": float(inst.mean_depth),
                "semantic_class": inst.semantic_class,
                "source_instance_id": int(inst.instance_id),
            }
        )
    dtype = np.uint8 if count <= 255 else np.uint16
    Image.fromarray(labels.astype(dtype)).save(directory / MASK_FILENAME)
    payload = {
        "camera": _camera_payload(annotation.camera),
        "image": {"width": annotation.width, "height": annotation.height},
        "planes": entries,
    }
    _dump_json(payload, directory / SIDECAR_FILENAME)


def load_annotation(directory) -> PlaneAnnotation:
    """Read an annotation directory written by :func:`save_annotation`."""
    directory = Path(directory)
    labels = _open_indexed_png(directory / MASK_FILENAME, allow_8bit=True)
    payload = _parse_json(directory / SIDECAR_FILENAME)
    try:
        camera = CameraIntrinsics(**payload["camera"])
        width = int(payload["image"]["width"])
        height = int(payload["image"]["height"])
        entries = payload["planes"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{directory / SIDECAR_FILENAME}: malformed sidecar") from exc
    if labels.shape != (height, width):
        raise FormatError(f"{directory}: raster size does not match the sidecar")
    raster_ids = {int(i) for i in np.unique(labels) if i > 0}
    sidecar_ids = {int(entry.get("id", -1)) for entry in entries}
    if raster_ids != sidecar_ids or len(sidecar_ids) != len(entries):
        raise FormatError(f"{directory}: raster labels and sidecar entries disagree")
    planes = []
    for entry in sorted(entries, key=lambda e: e["id"]):
        try:
            normal = np.asarray(entry["normal"], dtype=float)
            length = np.linalg.norm(normal)
            if abs(length - 1.0) > 1e-6:
                raise FormatError(f"{directory}: plane {entry['id']} normal is not unit length")
            if abs(length - 1.0) > 1e-9:
                normal = normal / length  # tolerate hand-written low-precision sidecars
            plane = Plane(normal, float(entry["offset"]))
            planes.append(
                PlaneInstance(
                    plane=plane,
                    mask=labels == entry["id"],
                    inlier_count=int(entry["inlier_count"]),
                    mean_fit_error=float(entry["mean_fit_error"]),
                    mean_depth=float(entry["mean_depth"]),
                    instance_id=int(entry.get("source_instance_id", 0)),
                    semantic_class=str(entry.get("semantic_class", "default")),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{directory}: malformed plane entry: {exc}") from exc
    return PlaneAnnotation(planes, width, height, camera)


def save_intrinsics(camera: CameraIntrinsics, path) -> None:
    _dump_json(_camera_payload(camera), path)


def load_intrinsics(path) -> CameraIntrinsics:
    """Read and validate camera intrinsics.

    A principal point far from the image center (beyond a quarter of either
    dimension) usually means the intrinsics were not rescaled together with
    the image; that case is flagged with a warning.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"camera file not found: {path}")
    payload = _parse_json(path)
    try:
        camera = CameraIntrinsics(
            fx=float(payload["fx"]),
            fy=float(payload["fy"]),
            cx=float(payload["cx"]),
            cy=float(payload["cy"]),
            width=int(payload["width"]),
            height=int(payload["height"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"{path}: invalid intrinsics: {exc}") from exc
    if (
        abs(camera.cx / camera.width - 0.5) > 0.25
        or abs(camera.cy / camera.height - 0.5) > 0.25
    ):
        warnings.warn(
            f"{path}: principal point far from the image center; "
            "check that intrinsics match the raster resolution",
            PipelineWarning,
        )
    return camera


def save_exemplars(exemplars: ExemplarSet, path) -> None:
    _dump_json(
        {
            "normals": [[float(c) for c in row] for row in exemplars.normals],
            "offsets": [float(v) for v in exemplars.offsets],
            "split_threshold": float(exemplars.split_threshold),
            "seed": int(exemplars.seed),
        },
        path,
    )


def load_exemplars(path) -> ExemplarSet:
    payload = _parse_json(path)
    try:
        return ExemplarSet(
            normals=np.asarray(payload["normals"], dtype=float),
            offsets=np.asarray(payload["offsets"], dtype=float),
            split_threshold=float(payload["split_threshold"]),
            seed=int(payload["seed"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed exemplar file: {exc}") from exc


def load_config(path) -> tuple[FittingConfig, CategoryRangeTable, LossWeights]:
    """Read the shared configuration file; missing sections use defaults."""
    payload = _parse_json(path)
    if not isinstance(payload, dict):
        raise ConfigurationError(f"{path}: expected a JSON object")
    known = {"fitting", "class_ranges", "loss_weights"}
    unknown = set(payload) - known
    if unknown:
        raise ConfigurationError(f"{path}: unknown config sections {sorted(unknown)}")
    try:
        fitting = FittingConfig(**payload.get("fitting", {}))
        weights = LossWeights(**payload.get("loss_weights", {}))
        ranges_raw = dict(payload.get("class_ranges", {}))
        default = tuple(ranges_raw.pop("default", CategoryRangeTable().default))
        ranges = CategoryRangeTable(
            {name: tuple(pair) for name, pair in ranges_raw.items()}, default
        )
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{path}: invalid configuration: {exc}") from exc
    return fitting, ranges, weights


def save_mesh_ply(mesh: Mesh, path) -> None:
    """Write an ASCII PLY mesh with per-vertex colors."""
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        f"element face {len(mesh.faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for vertex, color in zip(mesh.vertices, mesh.colors):
        lines.append(
            "%.6f %.6f %.6f %d %d %d"
            % (vertex[0], vertex[1], vertex[2], color[0], color[1], color[2])
        )
    for face in mesh.faces:
        lines.append("3 %d %d %d" % (face[0], face[1], face[2]))
    Path(path).write_text("\n".join(lines) + "\n")
