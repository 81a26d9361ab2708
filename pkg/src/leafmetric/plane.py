"""Robust plane fitting, plane bases and projection onto a plane."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cloud_io import TooFewPointsError, as_points

# Distance rows evaluated per block; block shape never changes the result
# because distances are computed elementwise.
_BLOCK_ELEMENTS = 1 << 21


class PlaneFitError(ValueError):
    """RANSAC could not produce an acceptable plane."""


class DegenerateSampleError(PlaneFitError):
    """Every minimal sample was collinear."""


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 1000
    distance_threshold: float = 2.0
    min_inliers: int = 12
    seed: int = 0
    refine: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.distance_threshold > 0:
            raise ValueError("distance_threshold must be > 0")
        if self.min_inliers < 3:
            raise ValueError("min_inliers must be >= 3")


@dataclass(frozen=True, eq=False)
class PlaneModel:
    """Plane ``normal . p = offset`` with the inliers it was scored on."""

    normal: np.ndarray
    offset: float
    inliers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    rms_distance: float = 0.0

    def __post_init__(self):
        n = np.array(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(n)
        if not np.isfinite(norm) or norm == 0:
            raise ValueError("plane normal must be a finite non-zero vector")
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"plane normal must be unit length, |n| = {norm}")
        n.flags.writeable = False
        inl = np.array(self.inliers, dtype=np.intp)
        inl.flags.writeable = False
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))
        object.__setattr__(self, "inliers", inl)
        object.__setattr__(self, "rms_distance", float(self.rms_distance))

    @classmethod
    def from_normal_offset(cls, normal, offset: float, **kw) -> "PlaneModel":
        """Normalize and orient ``normal`` before building the model."""
        n, d = canonical_orientation(np.asarray(normal, dtype=np.float64), float(offset))
        return cls(n, d, **kw)


@dataclass(frozen=True, eq=False)
class PlaneBasis:
    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.u, self.v)


def canonical_orientation(normal: np.ndarray, offset: float):
    """Scale to unit length and flip so the largest-magnitude component is positive."""
    norm = np.linalg.norm(normal)
    n = normal / norm
    d = offset / norm
    if n[int(np.argmax(np.abs(n)))] < 0:
        n, d = -n, -d
    return n, d


def _signed_distances(points: np.ndarray, normal: np.ndarray, offset: float) -> np.ndarray:
    # Written out (no BLAS) so every caller gets bit-identical values.
    return points[:, 0] * normal[0] + points[:, 1] * normal[1] + points[:, 2] * normal[2] - offset


def point_plane_distance(p, plane: PlaneModel) -> float:
    """Unsigned distance from a single point to the plane."""
    p = np.asarray(p, dtype=np.float64).reshape(1, 3)
    return float(abs(_signed_distances(p, plane.normal, plane.offset)[0]))


def plane_distances(points, plane: PlaneModel) -> np.ndarray:
    """Unsigned distances of every point to the plane (NaN for invalid points)."""
    return np.abs(_signed_distances(as_points(points), plane.normal, plane.offset))


def sample_schedule(n: int, iterations: int, seed: int) -> np.ndarray:
    """Draw ``iterations`` triples of distinct indices in ``range(n)`` up front.

    Each triple is uniform over ordered distinct triples; the whole schedule is
    fixed by ``seed`` before any scoring happens.
    """
    if n < 3:
        raise TooFewPointsError(f"need at least 3 points to sample a plane, got {n}")
    rng = np.random.default_rng(np.uint64(seed % (1 << 64)))
    a = rng.integers(0, n, size=iterations)
    b = rng.integers(0, n - 1, size=iterations)
    c = rng.integers(0, n - 2, size=iterations)
    b = b + (b >= a)
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    c = c + (c >= lo)
    c = c + (c >= hi)
    return np.stack([a, b, c], axis=1)


def _score(points, normals, offsets, threshold):
    """Inlier counts and inlier rms for each candidate plane."""
    k = len(normals)
    counts = np.zeros(k, dtype=np.int64)
    ss = np.zeros(k)
    rows = max(1, _BLOCK_ELEMENTS // max(len(points), 1))
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    for s in range(0, k, rows):
        nb = normals[s:s + rows]
        dist = np.multiply.outer(nb[:, 0], x)
        dist += np.multiply.outer(nb[:, 1], y)
        dist += np.multiply.outer(nb[:, 2], z)
        dist -= offsets[s:s + rows, None]
        np.abs(dist, out=dist)
        inl = dist <= threshold
        counts[s:s + rows] = np.count_nonzero(inl, axis=1)
        np.multiply(dist, dist, out=dist)
        dist *= inl
        ss[s:s + rows] = dist.sum(axis=1)
    rms = np.full(k, np.inf)
    has = counts > 0
    rms[has] = np.sqrt(ss[has] / counts[has])
    return counts, rms


def _inliers_and_rms(points, valid_idx, normal, offset, threshold):
    dist = np.abs(_signed_distances(points[valid_idx], normal, offset))
    keep = dist <= threshold
    inliers = valid_idx[keep]
    rms = float(np.sqrt(np.mean(dist[keep] ** 2))) if keep.any() else float("inf")
    return inliers, rms


def fit_plane_lstsq(points) -> PlaneModel:
    """Total-least-squares plane through all given points.

    The normal is the eigenvector of the smallest eigenvalue of the scatter
    matrix about the centroid, which minimizes the sum of squared orthogonal
    distances.
    """
    pts = as_points(points)
    pts = pts[np.all(np.isfinite(pts), axis=1)]
    if len(pts) < 3:
        raise TooFewPointsError(f"need at least 3 points, got {len(pts)}")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    _, vecs = np.linalg.eigh(centered.T @ centered)
    n, d = canonical_orientation(vecs[:, 0], float(vecs[:, 0] @ centroid))
    dist = np.abs(_signed_distances(pts, n, d))
    return PlaneModel(n, d, np.arange(len(pts)), float(np.sqrt(np.mean(dist ** 2))))


def _consensus(pts: np.ndarray, valid_idx: np.ndarray, config: RansacConfig):
    """Winning minimal-sample plane, canonically oriented."""
    vp = pts[valid_idx]
    sched = sample_schedule(len(vp), config.iterations, config.seed)
    p0, p1, p2 = vp[sched[:, 0]], vp[sched[:, 1]], vp[sched[:, 2]]
    e1, e2 = p1 - p0, p2 - p0
    cross = np.cross(e1, e2)
    cnorm = np.linalg.norm(cross, axis=1)
    scale = np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)
    ok = (scale > 0) & (cnorm >= 1e-12 * scale)
    if not ok.any():
        raise DegenerateSampleError(
            f"all {config.iterations} samples were collinear; points do not span a plane"
        )
    normals = cross[ok] / cnorm[ok, None]
    offsets = np.einsum("ij,ij->i", normals, p0[ok])
    iters = np.flatnonzero(ok)

    counts, rms = _score(vp, normals, offsets, config.distance_threshold)
    # lexsort: last key is primary
    best = np.lexsort((iters, rms, -counts))[0]
    return canonical_orientation(normals[best], float(offsets[best]))


def _finish(pts, valid_idx, normal, offset, config: RansacConfig, refine: bool) -> PlaneModel:
    inliers, fit_rms = _inliers_and_rms(pts, valid_idx, normal, offset, config.distance_threshold)
    if refine and len(inliers) >= 3:
        ls = fit_plane_lstsq(pts[inliers])
        normal, offset = ls.normal, ls.offset
        inliers, fit_rms = _inliers_and_rms(pts, valid_idx, normal, offset, config.distance_threshold)
    if len(inliers) < config.min_inliers:
        raise PlaneFitError(
            f"best plane has {len(inliers)} inliers, below min_inliers={config.min_inliers}"
        )
    return PlaneModel(normal, offset, inliers, fit_rms)


def _valid_rows(points):
    pts = as_points(points)
    valid_idx = np.flatnonzero(np.all(np.isfinite(pts), axis=1))
    if len(valid_idx) < 3:
        raise TooFewPointsError(f"plane fit needs at least 3 valid points, got {len(valid_idx)}")
    return pts, valid_idx


def fit_plane_ransac(points, config: Optional[RansacConfig] = None) -> PlaneModel:
    """Best-of-N minimal-sample plane consensus.

    Candidates are ranked by inlier count, then inlier rms, then iteration
    index. With ``config.refine`` the winner's inliers are refit by total
    least squares and the inlier set is recomputed once against the refit.
    Inlier indices refer to rows of ``points`` (invalid rows never qualify).
    """
    config = config or RansacConfig()
    pts, valid_idx = _valid_rows(points)
    normal, offset = _consensus(pts, valid_idx, config)
    return _finish(pts, valid_idx, normal, offset, config, config.refine)


def fit_plane_variants(points, config: Optional[RansacConfig] = None):
    """``(plain, refined)`` models from one consensus search.

    Equal to calling :func:`fit_plane_ransac` with ``refine`` False and True,
    since the sample schedule depends only on the seed.
    """
    config = config or RansacConfig()
    pts, valid_idx = _valid_rows(points)
    normal, offset = _consensus(pts, valid_idx, config)
    return (_finish(pts, valid_idx, normal, offset, config, False),
            _finish(pts, valid_idx, normal, offset, config, True))


def plane_basis(plane: PlaneModel, points) -> PlaneBasis:
    """Orthonormal in-plane frame centred on the projected centroid of ``points``.

    ``u`` is the projection of the coordinate axis least parallel to the normal
    (lowest axis index on ties) and ``v = normal x u``.
    """
    n = plane.normal
    pts = as_points(points)
    pts = pts[np.all(np.isfinite(pts), axis=1)]
    if len(pts):
        centroid = pts.mean(axis=0)
        origin = centroid - (float(n @ centroid) - plane.offset) * n
    else:
        origin = plane.offset * n
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(n)))] = 1.0
    u = axis - (axis @ n) * n
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    v /= np.linalg.norm(v)
    return PlaneBasis(origin, u, v)


def project_to_plane(points, basis: PlaneBasis) -> np.ndarray:
    """2D in-plane coordinates ``((p - origin).u, (p - origin).v)`` of valid points."""
    pts = as_points(points)
    pts = pts[np.all(np.isfinite(pts), axis=1)]
    rel = pts - basis.origin
    return np.stack([rel @ basis.u, rel @ basis.v], axis=1)


def project_point(p, plane: PlaneModel) -> np.ndarray:
    """Orthogonal foot of ``p`` on the plane."""
    p = np.asarray(p, dtype=np.float64)
    return p - (float(plane.normal @ p) - plane.offset) * plane.normal
