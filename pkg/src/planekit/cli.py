"""Batch command-line front end.

Every subcommand is a thin composition of library calls over directories of
rasters. All randomness derives from the ``--seed`` flag (per-image streams
are mixed with the image index over sorted inputs), so outputs are
byte-identical regardless of ``--jobs``. Flags can also be set through
environment variables with the ``PLANEKIT_`` prefix (``PLANEKIT_SEED``,
``PLANEKIT_CAMERA``, ...); explicit flags win.

Exit codes: 0 success, 2 usage, 3 configuration, 4 degenerate geometry,
5 generation, 6 format, 7 decode, 8 bad argument value, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dataset_io import (
    DepthEncoding,
    load_annotation,
    load_config,
    load_depth,
    load_exemplars,
    load_intrinsics,
    load_segmentation,
    save_annotation,
    save_depth,
    save_exemplars,
    save_intrinsics,
    save_mesh_ply,
    save_segmentation,
)
from .errors import ConfigurationError, FormatError, PlanekitError
from .exemplars import (
    DEFAULT_NORMAL_EXEMPLARS,
    DEFAULT_OFFSET_SPLIT,
    DEFAULT_OFFSETS_PER_GROUP,
    build_exemplar_set,
    encode_plane,
)
from .geometry import SceneSpec, export_mesh, synth_scene
from .matching_losses import PredictionSet, compute_losses, hungarian, matching_cost
from .metrics import RecallSpec, evaluate_annotations
from .plane_fitting import (
    CategoryRangeTable,
    FittingConfig,
    Segmentation,
    annotate_image,
    annotation_from_planes,
    annotation_normal_map,
    annotation_planar_depth,
)

ENV_PREFIX = "PLANEKIT_"
EXIT_USAGE = 2
EXIT_VALUE = 8

_PREDICTION_KEYS = (
    "plane_probs",
    "mask_logits",
    "normal_class_logits",
    "normal_residuals",
    "offset_class_logits",
    "offset_residuals",
)


def _env(name: str, fallback, cast=str):
    raw = os.environ.get(ENV_PREFIX + name)
    if raw is None:
        return fallback
    return cast(raw)


def _mix_seed(base: int, index: int) -> int:
    return (base * 1_000_003 + index) % (2**63)


def _progress(index: int, total: int, name: str) -> None:
    print(f"[{index + 1}/{total}] {name}", file=sys.stderr)


def _load_pipeline_config(path):
    if path is None:
        return FittingConfig(), CategoryRangeTable(), None
    fitting, ranges, weights = load_config(path)
    return fitting, ranges, weights


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="planekit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, camera=False, config=False, seed=False, jobs=False, scale=False, domain=False):
        if camera:
            p.add_argument("--camera", default=_env("CAMERA", None), help="intrinsics JSON file")
        if config:
            p.add_argument("--config", default=_env("CONFIG", None), help="configuration JSON file")
        if seed:
            p.add_argument("--seed", type=int, default=_env("SEED", 0, int))
        if jobs:
            p.add_argument("--jobs", type=int, default=_env("JOBS", 1, int), help="worker count")
        if scale:
            p.add_argument(
                "--depth-scale",
                type=float,
                default=_env("DEPTH_SCALE", 1000.0, float),
                help="units per meter for 16-bit PNG depth",
            )
        if domain:
            p.add_argument(
                "--domain",
                choices=("indoor", "outdoor"),
                default=_env("DOMAIN", "indoor"),
                help="selects the depth recall threshold set",
            )

    p = sub.add_parser("synth", help="generate synthetic piecewise-planar scenes")
    common(p, camera=True, seed=True)
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=1)
    p.add_argument("--planes", type=int, default=5)
    p.add_argument("--depth-min", type=float, default=2.0)
    p.add_argument("--depth-max", type=float, default=6.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("annotate", help="fit plane annotations from depth + segmentation")
    common(p, camera=True, config=True, seed=True, jobs=True, scale=True)
    p.add_argument("--depth", required=True, help="directory of depth rasters")
    p.add_argument("--seg", required=True, help="directory of segmentation rasters + tables")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_annotate)

    p = sub.add_parser("cluster", help="build an exemplar set from annotations")
    common(p, seed=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--normal-exemplars", type=int, default=DEFAULT_NORMAL_EXEMPLARS)
    p.add_argument("--split", type=float, default=DEFAULT_OFFSET_SPLIT)
    p.add_argument("--per-group", type=int, default=DEFAULT_OFFSETS_PER_GROUP)
    p.set_defaults(func=_cmd_cluster)

    p = sub.add_parser("encode", help="encode annotation planes against exemplars")
    p.add_argument("--annotations", required=True)
    p.add_argument("--exemplars", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("evaluate", help="score predicted annotations against ground truth")
    common(p, camera=True, jobs=True, domain=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--out", default=None, help="JSON report path")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("render-depth", help="render the planar depth of an annotation")
    common(p, scale=True)
    p.add_argument("--annotation", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_render_depth)

    p = sub.add_parser("export-mesh", help="triangulate an annotation into a PLY mesh")
    p.add_argument("--annotation", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export_mesh)

    p = sub.add_parser("loss-check", help="print the loss breakdown for a prediction dump")
    common(p, config=True)
    p.add_argument("--pred", required=True, help="prediction dump (.npz or .json)")
    p.add_argument("--gt", required=True, help="ground-truth annotation directory")
    p.add_argument("--exemplars", required=True)
    p.add_argument("--out", default=None, help="JSON breakdown path")
    p.set_defaults(func=_cmd_loss_check)

    return parser


def run(argv) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else EXIT_USAGE
    except ValueError as exc:  # malformed environment overrides
        print(f"error[ValueError]: {exc}", file=sys.stderr)
        return EXIT_VALUE
    try:
        return args.func(args)
    except PlanekitError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error[ValueError]: {exc}", file=sys.stderr)
        return EXIT_VALUE


def main(argv=None) -> None:
    sys.exit(run(sys.argv[1:] if argv is None else argv))


def _cmd_synth(args) -> int:
    camera = load_intrinsics(_require(args.camera, "--camera"))
    out = Path(args.out)
    for sub in ("depth", "seg", "gt"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for index in range(args.images):
        stem = f"{index:04d}"
        _progress(index, args.images, stem)
        spec = SceneSpec(
            plane_count=args.planes,
            depth_range=(args.depth_min, args.depth_max),
            noise_sigma=args.noise,
            seed=_mix_seed(args.seed, index),
        )
        depth, labels, planes = synth_scene(spec, camera)
        save_depth(depth, out / "depth" / f"{stem}.f32")
        seg = Segmentation(labels, {iid: "synthetic" for iid, _ in planes})
        save_segmentation(seg, out / "seg" / f"{stem}.png", out / "seg" / f"{stem}.json")
        save_annotation(annotation_from_planes(labels, planes, depth, camera), out / "gt" / stem)
    save_intrinsics(camera, out / "camera.json")
    return 0


def _list_depth_rasters(depth_dir: Path) -> list[Path]:
    files = sorted(p for p in depth_dir.iterdir() if p.is_file() and p.suffix != ".json")
    if not files:
        raise ConfigurationError(f"no depth rasters found in {depth_dir}")
    return files


def _annotate_task(task) -> str:
    depth_path, mask_path, table_path, out_dir, camera, cfg, ranges, scale = task
    depth = load_depth(depth_path, DepthEncoding(scale=scale))
    seg = load_segmentation(mask_path, table_path)
    save_annotation(annotate_image(depth, seg, camera, ranges, cfg), out_dir)
    return Path(out_dir).name


def _cmd_annotate(args) -> int:
    camera = load_intrinsics(_require(args.camera, "--camera"))
    cfg, ranges, _ = _load_pipeline_config(args.config)
    depth_dir, seg_dir, out = Path(args.depth), Path(args.seg), Path(args.out)
    if not depth_dir.is_dir() or not seg_dir.is_dir():
        raise ConfigurationError("--depth and --seg must be directories")
    out.mkdir(parents=True, exist_ok=True)
    tasks = []
    for index, depth_path in enumerate(_list_depth_rasters(depth_dir)):
        stem = depth_path.stem
        mask_path = seg_dir / f"{stem}.png"
        table_path = seg_dir / f"{stem}.json"
        if not mask_path.exists() or not table_path.exists():
            raise ConfigurationError(f"missing segmentation for {stem}")
        per_image = replace(cfg, seed=_mix_seed(args.seed, index))
        tasks.append(
            (depth_path, mask_path, table_path, out / stem, camera, per_image, ranges, args.depth_scale)
        )
    if args.jobs <= 1:
        for index, task in enumerate(tasks):
            _progress(index, len(tasks), _annotate_task(task))
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for index, name in enumerate(pool.map(_annotate_task, tasks)):
                _progress(index, len(tasks), name)
    return 0


def _annotation_dirs(root: Path) -> list[Path]:
    if (root / "planes.json").exists():
        return [root]
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "planes.json").exists())
    if not dirs:
        raise ConfigurationError(f"no annotations found under {root}")
    return dirs


def _cmd_cluster(args) -> int:
    planes = []
    for directory in _annotation_dirs(Path(args.annotations)):
        planes.extend(inst.plane for inst in load_annotation(directory).planes)
    if not planes:
        raise ConfigurationError("annotations contain no planes to cluster")
    exemplars = build_exemplar_set(
        planes,
        k_normals=args.normal_exemplars,
        split=args.split,
        per_group=args.per_group,
        seed=args.seed,
    )
    save_exemplars(exemplars, args.out)
    print(
        f"clustered {len(planes)} planes into {exemplars.normal_count} normal "
        f"and {exemplars.offset_count} offset exemplars"
    )
    return 0


def _cmd_encode(args) -> int:
    exemplars = load_exemplars(args.exemplars)
    payload = {}
    for directory in _annotation_dirs(Path(args.annotations)):
        targets = []
        for inst in load_annotation(directory).planes:
            target = encode_plane(inst.plane, exemplars)
            targets.append(
                {
                    "normal_class": target.normal_class,
                    "normal_residual": [float(c) for c in target.normal_residual],
                    "offset_class": target.offset_class,
                    "offset_residual": target.offset_residual,
                }
            )
        payload[directory.name] = targets
    Path(args.out).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return 0


def _finite_or_none(value: float) -> float | None:
    return value if value is not None and math.isfinite(value) else None


def _report_payload(report) -> dict:
    return {
        "gt_count": report.gt_count,
        "pred_count": report.pred_count,
        "rand_index": report.rand_index,
        "variation_of_information": report.variation_of_information,
        "seg_covering": report.seg_covering,
        "depth_recall": {str(k): v for k, v in report.depth_recall.items()},
        "normal_recall": {str(k): v for k, v in report.normal_recall.items()},
        "matched": [
            {
                "gt": pair.gt_index,
                "pred": pair.pred_index,
                "iou": pair.iou,
                "depth_error": _finite_or_none(pair.depth_error),
                "normal_error_deg": pair.normal_error_deg,
            }
            for pair in report.matched
        ],
    }


def _evaluate_task(task):
    pred_dir, gt_dir, camera, spec = task
    report = evaluate_annotations(load_annotation(pred_dir), load_annotation(gt_dir), camera, spec)
    return Path(gt_dir).name, _report_payload(report)


def _cmd_evaluate(args) -> int:
    camera = load_intrinsics(_require(args.camera, "--camera"))
    spec = RecallSpec.indoor(args.iou) if args.domain == "indoor" else RecallSpec.outdoor(args.iou)
    gt_dirs = _annotation_dirs(Path(args.gt))
    pred_root = Path(args.pred)
    tasks = []
    for gt_dir in gt_dirs:
        pred_dir = pred_root / gt_dir.name if gt_dir != Path(args.gt) else pred_root
        if not (pred_dir / "planes.json").exists():
            raise ConfigurationError(f"missing prediction for {gt_dir.name}")
        tasks.append((pred_dir, gt_dir, camera, spec))
    per_image = {}
    if args.jobs <= 1:
        results = [_evaluate_task(task) for task in tasks]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_evaluate_task, tasks))
    for index, (name, payload) in enumerate(results):
        _progress(index, len(tasks), name)
        per_image[name] = payload

    aggregate = _aggregate_reports(per_image, spec)
    payload = {"aggregate": aggregate, "images": per_image}
    if args.out:
        Path(args.out).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    _print_table(aggregate, spec)
    return 0


def _aggregate_reports(per_image: dict, spec: RecallSpec) -> dict:
    names = sorted(per_image)
    gt_total = sum(per_image[n]["gt_count"] for n in names)

    def mean_of(key):
        values = [per_image[n][key] for n in names if per_image[n][key] is not None]
        return float(np.mean(values)) if values else None

    def recall(thresholds, error_key):
        table = {}
        for threshold in thresholds:
            if gt_total == 0:
                table[str(threshold)] = None
                continue
            hits = 0
            for n in names:
                for pair in per_image[n]["matched"]:
                    err = pair[error_key]
                    if err is not None and err <= threshold:
                        hits += 1
            table[str(threshold)] = hits / gt_total
        return table

    return {
        "images": len(names),
        "gt_count": gt_total,
        "rand_index": mean_of("rand_index"),
        "variation_of_information": mean_of("variation_of_information"),
        "seg_covering": mean_of("seg_covering"),
        "depth_recall": recall(spec.depth_thresholds, "depth_error"),
        "normal_recall": recall(spec.normal_thresholds, "normal_error_deg"),
    }


def _print_table(aggregate: dict, spec: RecallSpec) -> None:
    def fmt(value):
        return "  n/a" if value is None else f"{value:.4f}"

    print(f"images evaluated: {aggregate['images']}   ground-truth planes: {aggregate['gt_count']}")
    print(
        f"RI(up) {fmt(aggregate['rand_index'])}   "
        f"VOI(down) {fmt(aggregate['variation_of_information'])}   "
        f"SC(up) {fmt(aggregate['seg_covering'])}"
    )
    depth = "  ".join(
        f"@{t}m {fmt(aggregate['depth_recall'][str(t)])}" for t in spec.depth_thresholds
    )
    normal = "  ".join(
        f"@{t}deg {fmt(aggregate['normal_recall'][str(t)])}" for t in spec.normal_thresholds
    )
    print(f"depth recall   {depth}")
    print(f"normal recall  {normal}")


def _cmd_render_depth(args) -> int:
    annotation = load_annotation(args.annotation)
    depth = annotation_planar_depth(annotation, annotation.camera)
    save_depth(depth, args.out, DepthEncoding(scale=args.depth_scale))
    return 0


def _cmd_export_mesh(args) -> int:
    annotation = load_annotation(args.annotation)
    save_mesh_ply(export_mesh(annotation, annotation.camera), args.out)
    return 0


def _load_predictions(path) -> PredictionSet:
    path = Path(path)
    if path.suffix == ".npz":
        try:
            archive = np.load(path)
        except OSError as exc:
            raise FormatError(f"cannot read {path}: {exc}") from exc
        data = {key: archive[key] for key in archive.files}
    elif path.suffix == ".json":
        raw = json.loads(path.read_text())
        data = {key: np.asarray(value, dtype=float) for key, value in raw.items()}
    else:
        raise FormatError(f"{path}: prediction dumps must be .npz or .json")
    missing = [key for key in _PREDICTION_KEYS if key not in data]
    if missing:
        raise FormatError(f"{path}: missing prediction arrays {missing}")
    return PredictionSet(
        **{key: data[key] for key in _PREDICTION_KEYS},
        pixel_depth=data.get("pixel_depth"),
        pixel_normals=data.get("pixel_normals"),
    )


def _cmd_loss_check(args) -> int:
    preds = _load_predictions(args.pred)
    gt = load_annotation(args.gt)
    exemplars = load_exemplars(args.exemplars)
    weights = None
    if args.config:
        _, _, weights = load_config(args.config)
    targets = [encode_plane(inst.plane, exemplars) for inst in gt.planes]
    assignment = hungarian(matching_cost(preds, gt, weights))
    breakdown = compute_losses(
        preds,
        gt,
        targets,
        annotation_planar_depth(gt, gt.camera),
        annotation_normal_map(gt),
        assignment,
        weights,
    )
    fields = (
        "plane_class",
        "mask",
        "normal_class",
        "normal_residual",
        "offset_class",
        "offset_residual",
        "pixel_depth",
        "pixel_normal_l1",
        "pixel_normal_cos",
        "total",
    )
    for name in fields:
        print(f"{name:18s} {getattr(breakdown, name):.9f}")
    if args.out:
        payload = {name: getattr(breakdown, name) for name in fields}
        payload["assignment"] = [[q, g] for q, g in assignment]
        Path(args.out).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return 0


def _require(value, flag: str):
    if value is None:
        raise ConfigurationError(f"{flag} is required")
    return value


if __name__ == "__main__":
    main()
