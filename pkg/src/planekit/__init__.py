"""Plane annotation, exemplar encoding, matching losses, and evaluation."""

from .errors import (
    ConfigurationError,
    DecodeError,
    DegenerateSampleError,
    FormatError,
    GenerationError,
    PipelineWarning,
    PlanekitError,
)
from .exemplars import (
    ExemplarSet,
    PlaneTarget,
    build_exemplar_set,
    build_normal_exemplars,
    build_offset_exemplars,
    decode_plane,
    decode_target,
    encode_plane,
    kmeans,
)
from .geometry import (
    CameraIntrinsics,
    DepthMap,
    Mesh,
    NormalMap,
    Plane,
    PointCloud,
    SceneSpec,
    angle_between,
    backproject,
    export_mesh,
    fit_plane_lsq,
    plane_from_three_points,
    point_plane_residuals,
    project,
    render_planar_depth,
    synth_scene,
)
from .matching_losses import (
    LossBreakdown,
    LossWeights,
    PredictionSet,
    compute_losses,
    hungarian,
    matching_cost,
)
from .metrics import (
    EvalReport,
    RecallSpec,
    annotation_to_labels,
    evaluate_annotations,
    plane_recall,
    rand_index,
    seg_covering,
    variation_of_information,
)
from .plane_fitting import (
    CategoryRangeTable,
    FittingConfig,
    PlaneAnnotation,
    PlaneInstance,
    Segmentation,
    adaptive_threshold,
    annotate_image,
    annotation_from_planes,
    annotation_normal_map,
    annotation_planar_depth,
    fit_instance,
    merge_close_planes,
    ransac_single,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
