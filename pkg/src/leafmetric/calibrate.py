"""Cube-based calibration: face segmentation and edge-length estimation."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np

from .cloud_io import TooFewPointsError, as_points
from .plane import PlaneFitError, PlaneModel, RansacConfig, fit_plane_lstsq, fit_plane_ransac, plane_distances


_TIE_MM = 1e-9


class CalibrationError(ValueError):
    """The cloud does not contain three fittable, mutually orthogonal faces."""


@dataclass(frozen=True)
class CubeFace:
    plane: PlaneModel
    indices: np.ndarray
    rms: float
    inlier_fraction: float


@dataclass(frozen=True)
class CubeCalibration:
    faces: Tuple[CubeFace, ...]
    edge_estimates: Tuple[float, ...]
    edge: float
    true_edge: Optional[float] = None

    @property
    def error_percentage(self) -> float:
        if self.true_edge is None:
            raise ValueError("no true edge given")
        return 100.0 * abs(self.edge - self.true_edge) / self.true_edge

    @property
    def rmse(self) -> float:
        """RMS deviation of the individual edge estimates from the true edge."""
        if self.true_edge is None:
            raise ValueError("no true edge given")
        return float(np.sqrt(np.mean((np.array(self.edge_estimates) - self.true_edge) ** 2)))


def segment_faces(points, config: Optional[RansacConfig] = None, n_faces: int = 3,
                  min_fraction: float = 0.8, max_skew_deg: float = 10.0,
                  reassign_rounds: int = 3) -> List[CubeFace]:
    """Find ``n_faces`` orthogonal planar faces.

    Planes are found by sequential RANSAC, then every point is reassigned to
    its nearest plane and each face is refit by least squares. A face counts
    only if at least ``min_fraction`` of its points lie within the distance
    threshold; all pairs of faces must be within ``max_skew_deg`` of
    perpendicular.
    """
    config = config or RansacConfig(refine=True)
    pts = as_points(points)
    pts = pts[np.all(np.isfinite(pts), axis=1)]
    remaining = np.arange(len(pts))
    planes = []
    for k in range(n_faces):
        try:
            model = fit_plane_ransac(pts[remaining], replace(config, refine=True, seed=config.seed + k))
        except (PlaneFitError, TooFewPointsError) as exc:
            raise CalibrationError(f"found only {k} of {n_faces} faces: {exc}") from None
        planes.append(model)
        remaining = np.delete(remaining, model.inliers)

    for _ in range(reassign_rounds):
        dist = np.stack([plane_distances(pts, p) for p in planes], axis=1)
        # points on a shared edge belong to both faces
        member = dist <= dist.min(axis=1, keepdims=True) + _TIE_MM
        counts = member.sum(axis=0)
        if np.any(counts < config.min_inliers):
            raise CalibrationError(f"face point counts {counts.tolist()} below min_inliers")
        planes = [fit_plane_lstsq(pts[member[:, k]]) for k in range(n_faces)]
    dist = np.stack([plane_distances(pts, p) for p in planes], axis=1)
    member = dist <= dist.min(axis=1, keepdims=True) + _TIE_MM

    faces = []
    for k, plane in enumerate(planes):
        idx = np.flatnonzero(member[:, k])
        d = plane_distances(pts[idx], plane)
        frac = float(np.mean(d <= config.distance_threshold))
        if frac < min_fraction:
            raise CalibrationError(
                f"face {k}: only {100 * frac:.1f}% of its points lie within "
                f"{config.distance_threshold} mm of the fitted plane"
            )
        faces.append(CubeFace(plane, idx, float(np.sqrt(np.mean(d ** 2))), frac))

    limit = math.sin(math.radians(max_skew_deg))
    for i in range(n_faces):
        for j in range(i + 1, n_faces):
            c = abs(float(faces[i].plane.normal @ faces[j].plane.normal))
            if c > limit:
                angle = math.degrees(math.acos(min(1.0, c)))
                raise CalibrationError(f"faces {i} and {j} meet at {angle:.1f} deg, not perpendicular")
    return faces


def _extent(t: np.ndarray, trim: float) -> float:
    if trim > 0:
        lo, hi = np.quantile(t, [trim, 1.0 - trim])
        # rescale assuming uniform coverage along the edge direction
        return float(hi - lo) / (1.0 - 2.0 * trim)
    return float(t.max() - t.min())


def estimate_cube_edge(points, true_edge: Optional[float] = None, config: Optional[RansacConfig] = None,
                       trim: float = 0.0) -> CubeCalibration:
    """Edge length of a cube from three visible faces.

    Each face's edges run along the normals of the other two faces, so every
    face yields two edge estimates: its extent along each neighbouring normal.
    The reported edge is the mean of the six.
    """
    if not 0 <= trim < 0.5:
        raise ValueError("trim must be in [0, 0.5)")
    pts = as_points(points)
    pts = pts[np.all(np.isfinite(pts), axis=1)]
    faces = segment_faces(pts, config)
    estimates = []
    for i, face in enumerate(faces):
        for j, other in enumerate(faces):
            if i != j:
                estimates.append(_extent(pts[face.indices] @ other.plane.normal, trim))
    return CubeCalibration(tuple(faces), tuple(estimates), float(np.mean(estimates)), true_edge)
