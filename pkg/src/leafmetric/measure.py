"""Leaf length/width from a fitted plane and the principal axes of the projection."""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .cloud_io import (
    GridError,
    ScanManifest,
    TooFewPointsError,
    as_points,
    extract_leaf_points,
    read_mask,
    read_ply,
)
from .plane import (
    PlaneFitError,
    PlaneModel,
    RansacConfig,
    fit_plane_ransac,
    fit_plane_variants,
    plane_basis,
    project_to_plane,
)

METHODS = ("plain", "refined", "combined", "selected")

# relative eigenvalue gap below which the 2D principal axes count as tied
_EIG_TIE = 1e-9


class MeasureError(ValueError):
    pass


@dataclass(frozen=True)
class ExtentConfig:
    trim_percentile: float = 0.0
    ransac: RansacConfig = field(default_factory=RansacConfig)

    def __post_init__(self):
        if not 0 <= self.trim_percentile < 0.5:
            raise ValueError("trim_percentile must be in [0, 0.5)")


@dataclass(frozen=True)
class LeafMeasurement:
    leaf_id: str
    length: float
    width: float
    method: str
    inlier_fraction: float
    plane_rms: float

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not (self.length >= self.width > 0):
            raise ValueError(f"need length >= width > 0, got {self.length} x {self.width}")
        if not 0 < self.inlier_fraction <= 1:
            raise ValueError(f"inlier_fraction {self.inlier_fraction} outside (0, 1]")

    def as_dict(self) -> dict:
        return {
            "leaf_id": self.leaf_id,
            "method": self.method,
            "length_mm": self.length,
            "width_mm": self.width,
            "inlier_fraction": self.inlier_fraction,
            "plane_rms": self.plane_rms,
        }


@dataclass(frozen=True)
class SkipRecord:
    leaf_id: str
    error: str

    def as_dict(self) -> dict:
        return {"leaf_id": self.leaf_id, "error": self.error}


def principal_extents(coords: np.ndarray, trim: float = 0.0) -> Tuple[float, float, np.ndarray]:
    """Extents of 2D points along their principal axes.

    Returns ``(major, minor, axes)`` where ``axes`` holds the major and minor
    unit vectors as rows. Extents are the spread between the ``trim`` and
    ``1 - trim`` quantiles (min-max when ``trim`` is 0).
    """
    coords = np.asarray(coords, dtype=np.float64)
    if len(np.unique(coords, axis=0)) < 3:
        raise MeasureError("fewer than 3 distinct projected points")
    centered = coords - coords.mean(axis=0)
    vals, vecs = np.linalg.eigh(centered.T @ centered)
    major, minor = vecs[:, 1].copy(), vecs[:, 0].copy()
    if vals[1] - vals[0] <= _EIG_TIE * max(abs(vals[1]), np.finfo(float).tiny):
        # near-circular: take the axis closer to the in-plane u direction
        if abs(minor[0]) > abs(major[0]):
            major, minor = minor, major
    for vec in (major, minor):
        nz = np.flatnonzero(np.abs(vec) > 0)
        if len(nz) and vec[nz[0]] < 0:
            vec *= -1
    ext = []
    for vec in (major, minor):
        t = coords @ vec
        if trim > 0:
            lo, hi = np.quantile(t, [trim, 1.0 - trim])
        else:
            lo, hi = t.min(), t.max()
        ext.append(float(hi - lo))
    length, width = ext
    if width > length:
        length, width = width, length
        major, minor = minor, major
    return length, width, np.stack([major, minor])


def _measure_on_plane(pts: np.ndarray, plane: PlaneModel, trim: float) -> Tuple[float, float]:
    basis = plane_basis(plane, pts)
    coords = project_to_plane(pts, basis)
    length, width, _ = principal_extents(coords, trim)
    return length, width


def _from_plane(leaf_id: str, pts: np.ndarray, plane: PlaneModel, trim: float, method: str) -> LeafMeasurement:
    length, width = _measure_on_plane(pts, plane, trim)
    if not width > 0:
        raise MeasureError("leaf has zero width on the fitted plane")
    return LeafMeasurement(leaf_id, length, width, method, len(plane.inliers) / len(pts), plane.rms_distance)


def _single(leaf_id: str, pts: np.ndarray, config: ExtentConfig, refine: bool) -> LeafMeasurement:
    plane = fit_plane_ransac(pts, replace(config.ransac, refine=refine))
    return _from_plane(leaf_id, pts, plane, config.trim_percentile, "refined" if refine else "plain")


def _pair(leaf_id: str, pts: np.ndarray, config: ExtentConfig):
    plain, refined = fit_plane_variants(pts, config.ransac)
    trim = config.trim_percentile
    return (_from_plane(leaf_id, pts, plain, trim, "plain"),
            _from_plane(leaf_id, pts, refined, trim, "refined"))


def combined_estimate(a: LeafMeasurement, b: LeafMeasurement) -> LeafMeasurement:
    """Average the plain and refined measurements of one leaf."""
    if a.leaf_id != b.leaf_id:
        raise MeasureError(f"leaf_id mismatch: {a.leaf_id!r} vs {b.leaf_id!r}")
    return LeafMeasurement(
        a.leaf_id,
        (a.length + b.length) / 2.0,
        (a.width + b.width) / 2.0,
        "combined",
        (a.inlier_fraction + b.inlier_fraction) / 2.0,
        (a.plane_rms + b.plane_rms) / 2.0,
    )


def selected_estimate(plain: LeafMeasurement, refined: LeafMeasurement) -> LeafMeasurement:
    """Length from the plain fit, width from the refined fit."""
    if plain.leaf_id != refined.leaf_id:
        raise MeasureError(f"leaf_id mismatch: {plain.leaf_id!r} vs {refined.leaf_id!r}")
    length, width = plain.length, refined.width
    if width > length:
        length, width = width, length
    return LeafMeasurement(
        plain.leaf_id,
        length,
        width,
        "selected",
        (plain.inlier_fraction + refined.inlier_fraction) / 2.0,
        (plain.plane_rms + refined.plane_rms) / 2.0,
    )


def measure_leaf(leaf_points, config: Optional[ExtentConfig] = None, method: str = "selected",
                 leaf_id: str = "") -> LeafMeasurement:
    """Measure one leaf.

    Every valid leaf point is projected onto the fitted plane, not only the
    RANSAC inliers, so the plain and refined variants differ only through the
    plane orientation.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, not {method!r}")
    config = config or ExtentConfig()
    pts = as_points(leaf_points)
    pts = pts[np.all(np.isfinite(pts), axis=1)]
    if len(pts) < config.ransac.min_inliers:
        raise TooFewPointsError(
            f"leaf {leaf_id!r}: {len(pts)} valid points, need at least {config.ransac.min_inliers}"
        )
    if method == "plain":
        return _single(leaf_id, pts, config, False)
    if method == "refined":
        return _single(leaf_id, pts, config, True)
    plain, refined = _pair(leaf_id, pts, config)
    if method == "combined":
        return combined_estimate(plain, refined)
    return selected_estimate(plain, refined)


def measure_all_methods(leaf_points, config: Optional[ExtentConfig] = None, leaf_id: str = ""):
    """All four methods from a single pair of plane fits, keyed by method."""
    config = config or ExtentConfig()
    pts = as_points(leaf_points)
    pts = pts[np.all(np.isfinite(pts), axis=1)]
    if len(pts) < config.ransac.min_inliers:
        raise TooFewPointsError(f"leaf {leaf_id!r}: {len(pts)} valid points")
    plain, refined = _pair(leaf_id, pts, config)
    return {
        "plain": plain,
        "refined": refined,
        "combined": combined_estimate(plain, refined),
        "selected": selected_estimate(plain, refined),
    }


@dataclass
class ScanResult:
    measurements: List[LeafMeasurement]
    skipped: List[SkipRecord]


_PER_LEAF_ERRORS = (TooFewPointsError, PlaneFitError, MeasureError, GridError)


def measure_scan(manifest: ScanManifest, config: Optional[ExtentConfig] = None,
                 method: str = "selected", workers: int = 1) -> ScanResult:
    """Measure every mask of a scan, in manifest order.

    Loading the cloud or a mask file raises; geometric failures on a single
    leaf become :class:`SkipRecord` entries instead.
    """
    config = config or ExtentConfig()
    cloud = read_ply(manifest.cloud)
    if cloud.grid is None:
        raise GridError(f"{manifest.cloud}: cloud is not organized (no width/height grid)")
    masks = [read_mask(m.path, m.leaf_id) for m in manifest.masks]

    def one(mask):
        try:
            pts = extract_leaf_points(cloud, mask)
            return measure_leaf(pts, config, method, mask.leaf_id)
        except _PER_LEAF_ERRORS as exc:
            return SkipRecord(mask.leaf_id, f"{type(exc).__name__}: {exc}")

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, masks))
    else:
        results = [one(m) for m in masks]
    return ScanResult(
        [r for r in results if isinstance(r, LeafMeasurement)],
        [r for r in results if isinstance(r, SkipRecord)],
    )


# --------------------------------------------------------------------------
# serialization

CSV_FIELDS = ("leaf_id", "method", "length_mm", "width_mm", "inlier_fraction", "plane_rms")


def _num(v: float) -> str:
    return repr(float(v))


def measurements_to_csv(measurements: Sequence[LeafMeasurement]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for m in measurements:
        w.writerow([m.leaf_id, m.method, _num(m.length), _num(m.width),
                    _num(m.inlier_fraction), _num(m.plane_rms)])
    return buf.getvalue()


def measurements_to_json(measurements: Sequence[LeafMeasurement]) -> str:
    return json.dumps([m.as_dict() for m in measurements], indent=2) + "\n"


def skips_to_json(skips: Sequence[SkipRecord]) -> str:
    return json.dumps([s.as_dict() for s in skips], indent=2) + "\n"


def measurements_from_csv(text: str) -> List[LeafMeasurement]:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for i, row in enumerate(rows, start=2):
        missing = [f for f in CSV_FIELDS if f not in row or row[f] is None]
        if missing:
            raise ValueError(f"line {i}: missing columns {missing}")
        try:
            out.append(LeafMeasurement(
                row["leaf_id"], float(row["length_mm"]), float(row["width_mm"]), row["method"],
                float(row["inlier_fraction"]), float(row["plane_rms"]),
            ))
        except ValueError as exc:
            raise ValueError(f"line {i}: {exc}") from None
    return out


def measurements_from_json(text: str) -> List[LeafMeasurement]:
    doc = json.loads(text)
    if not isinstance(doc, list):
        raise ValueError("measurement JSON must be an array")
    return [
        LeafMeasurement(d["leaf_id"], float(d["length_mm"]), float(d["width_mm"]), d["method"],
                        float(d["inlier_fraction"]), float(d["plane_rms"]))
        for d in doc
    ]
