"""Tomato-leaf length and width from organized point clouds and per-leaf masks."""

__version__ = "0.1.0"

from .cloud_io import (
    LeafMask,
    PointCloud,
    ScanManifest,
    extract_leaf_points,
    load_manifest,
    parse_mask,
    parse_ply,
    write_ply,
)
from .evaluate import (
    EvalReport,
    GroundTruthTable,
    error_percentage,
    evaluate,
    r_squared,
    rmse,
    scatter_svg,
)
from .measure import (
    ExtentConfig,
    LeafMeasurement,
    combined_estimate,
    measure_leaf,
    measure_scan,
)
from .plane import (
    PlaneBasis,
    PlaneModel,
    RansacConfig,
    fit_plane_lstsq,
    fit_plane_ransac,
    plane_basis,
    point_plane_distance,
    project_to_plane,
)
from .synth import (
    CubeSpec,
    LeafSpec,
    generate_cube_face_scan,
    generate_leaf,
)

__all__ = [
    "LeafMask",
    "PointCloud",
    "ScanManifest",
    "extract_leaf_points",
    "load_manifest",
    "parse_mask",
    "parse_ply",
    "write_ply",
    "EvalReport",
    "GroundTruthTable",
    "error_percentage",
    "evaluate",
    "r_squared",
    "rmse",
    "scatter_svg",
    "ExtentConfig",
    "LeafMeasurement",
    "combined_estimate",
    "measure_leaf",
    "measure_scan",
    "PlaneBasis",
    "PlaneModel",
    "RansacConfig",
    "fit_plane_lstsq",
    "fit_plane_ransac",
    "plane_basis",
    "point_plane_distance",
    "project_to_plane",
    "CubeSpec",
    "LeafSpec",
    "generate_cube_face_scan",
    "generate_leaf",
]
