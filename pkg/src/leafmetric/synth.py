"""Synthetic leaves, calibration cubes and complete test scans with known truth."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .cloud_io import LeafMask, PointCloud


class SynthError(ValueError):
    pass


def rotation_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about ``axis`` by ``angle`` radians."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation (QR of a Gaussian matrix, sign-fixed)."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``p -> rotation @ p + translation``."""

    rotation: Tuple[Tuple[float, ...], ...] = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    @classmethod
    def from_arrays(cls, rotation, translation=(0.0, 0.0, 0.0)) -> "Pose":
        r = np.asarray(rotation, dtype=np.float64)
        if r.shape != (3, 3) or not np.allclose(r @ r.T, np.eye(3), atol=1e-9) or np.linalg.det(r) < 0:
            raise SynthError("pose rotation must be a proper 3x3 rotation matrix")
        return cls(tuple(map(tuple, r.tolist())), tuple(float(t) for t in translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ np.asarray(self.rotation).T + np.asarray(self.translation)


@dataclass(frozen=True)
class LeafSpec:
    """Elliptical leaf outline with optional bend, noise and outliers.

    Outliers keep the leaf's lateral footprint (as mask pixels of an organized
    scan would) and sit between ``outlier_min_distance`` and
    ``1.5 * length`` off the leaf surface.
    """

    length: float
    width: float
    point_spacing: float = 0.5
    noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    bend_radius: float = math.inf
    pose: Pose = field(default_factory=Pose)
    seed: int = 0
    outlier_min_distance: float = 10.0

    def __post_init__(self):
        if not (self.length >= self.width > 0):
            raise SynthError(f"need length >= width > 0, got {self.length} x {self.width}")
        if not self.point_spacing > 0:
            raise SynthError("point_spacing must be > 0")
        if self.noise_sigma < 0:
            raise SynthError("noise_sigma must be >= 0")
        if not 0 <= self.outlier_fraction < 1:
            raise SynthError("outlier_fraction must be in [0, 1)")
        if not self.bend_radius > 0:
            raise SynthError("bend_radius must be > 0 (inf for a flat leaf)")


def leaf_outline_points(length: float, width: float, spacing: float) -> np.ndarray:
    """Flat leaf in its local frame: grid interior plus the outline.

    The leaf is centred at the origin with its length on x and width on y. The
    outline is sampled at angles symmetric about both axes and includes the
    four ellipse vertices, so the min-max extents equal the truth exactly.
    """
    a, b = length / 2.0, width / 2.0
    nx = int(math.floor(a / spacing))
    ny = int(math.floor(b / spacing))
    gx = np.arange(-nx, nx + 1) * spacing
    gy = np.arange(-ny, ny + 1) * spacing
    xx, yy = np.meshgrid(gx, gy)
    xx, yy = xx.ravel(), yy.ravel()
    # strictly inside so interior points never duplicate outline points
    inside = (xx / a) ** 2 + (yy / b) ** 2 < 1.0 - 1e-12
    # Ramanujan's perimeter approximation sets the outline density
    h = ((a - b) / (a + b)) ** 2
    perimeter = math.pi * (a + b) * (1 + 3 * h / (10 + math.sqrt(4 - 3 * h)))
    m = max(4, 4 * int(math.ceil(perimeter / spacing / 4)))
    t = 2 * math.pi * np.arange(m) / m
    ox, oy = a * np.cos(t), b * np.sin(t)
    # exact vertices; cos/sin of multiples of pi/2 are not exact in floating point
    q = m // 4
    ox[[0, q, 2 * q, 3 * q]] = [a, 0.0, -a, 0.0]
    oy[[0, q, 2 * q, 3 * q]] = [0.0, b, 0.0, -b]
    x = np.concatenate([xx[inside], ox])
    y = np.concatenate([yy[inside], oy])
    return np.stack([x, y, np.zeros_like(x)], axis=1)


def bend_onto_cylinder(points: np.ndarray, radius: float) -> np.ndarray:
    """Wrap the local xy-plane onto a cylinder whose axis is parallel to y.

    Arc length along x is preserved; the leaf curls toward +z.
    """
    if math.isinf(radius):
        return points.copy()
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    theta = x / radius
    r = radius - z
    return np.stack([r * np.sin(theta), y, radius - r * np.cos(theta)], axis=1)


def generate_leaf(spec: LeafSpec) -> Tuple[PointCloud, Tuple[float, float]]:
    """Synthetic leaf cloud and its flat (length, width) truth."""
    rng = np.random.default_rng(spec.seed)
    pts = leaf_outline_points(spec.length, spec.width, spec.point_spacing)
    if len(pts) < 3:
        raise SynthError(f"leaf spec yields only {len(pts)} points")
    pts = bend_onto_cylinder(pts, spec.bend_radius)
    if spec.noise_sigma > 0:
        pts = pts + rng.normal(scale=spec.noise_sigma, size=pts.shape)
    n_out = int(round(spec.outlier_fraction * len(pts)))
    if n_out:
        a, b = spec.length / 2.0, spec.width / 2.0
        idx = rng.choice(len(pts), size=n_out, replace=False)
        depth = rng.uniform(spec.outlier_min_distance, max(1.5 * spec.length, spec.outlier_min_distance), n_out)
        depth *= rng.choice([-1.0, 1.0], size=n_out)
        lateral = np.stack([rng.uniform(-a, a, n_out), rng.uniform(-b, b, n_out)], axis=1)
        # place relative to the (possibly bent) surface under the same footprint
        surf = bend_onto_cylinder(np.column_stack([lateral, np.zeros(n_out)]), spec.bend_radius)
        pts[idx] = surf + np.column_stack([np.zeros((n_out, 2)), depth])
    pts = spec.pose.apply(pts)
    return PointCloud(pts), (float(spec.length), float(spec.width))


# --------------------------------------------------------------------------
# calibration cube


@dataclass(frozen=True)
class CubeSpec:
    """Cube seen by a pinhole camera along the (1, 1, 1) diagonal.

    ``camera_distance`` is measured to the cube centre. Rays are spaced by
    ``angular_resolution`` radians, so the point spacing on the faces grows
    linearly with distance. When ``noise_reference_distance`` is set,
    ``noise_sigma`` applies at that distance and scales with the squared
    distance ratio, as depth noise of triangulating sensors does.
    """

    edge: float = 50.0
    camera_distance: float = 400.0
    noise_sigma: float = 0.0
    seed: int = 0
    angular_resolution: float = 1.5e-3
    noise_reference_distance: Optional[float] = None

    @property
    def effective_sigma(self) -> float:
        if self.noise_reference_distance is None:
            return self.noise_sigma
        return self.noise_sigma * (self.camera_distance / self.noise_reference_distance) ** 2

    def __post_init__(self):
        if not self.edge > 0:
            raise SynthError("edge must be > 0")
        if not self.camera_distance > self.edge:
            raise SynthError("camera must be outside the cube")
        if not self.angular_resolution > 0:
            raise SynthError("angular_resolution must be > 0")
        if self.noise_sigma < 0:
            raise SynthError("noise_sigma must be >= 0")
        if self.noise_reference_distance is not None and not self.noise_reference_distance > 0:
            raise SynthError("noise_reference_distance must be > 0")


CUBE_VIEW = np.array([1.0, 1.0, 1.0]) / math.sqrt(3.0)


def _ray_box_entry(origin: np.ndarray, dirs: np.ndarray, half: float):
    """Slab test: entry distance of each ray into the axis-aligned box [-half, half]^3."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (-half - origin) * inv
        t2 = (half - origin) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tmax >= tmin) & (tmax > 0)
    return tmin, hit


def generate_cube_face_scan(spec: CubeSpec) -> Tuple[PointCloud, float]:
    """Single-view scan of the three camera-facing faces of an axis-aligned cube.

    The cube is centred at the origin; the camera sits at
    ``camera_distance * (1, 1, 1) / sqrt(3)`` looking at the centre.
    """
    rng = np.random.default_rng(spec.seed)
    half = spec.edge / 2.0
    cam = spec.camera_distance * CUBE_VIEW
    forward = -CUBE_VIEW
    right = np.cross(forward, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    # the cube's silhouette fits inside the circumscribed sphere
    reach = math.asin(min(1.0, half * math.sqrt(3.0) / spec.camera_distance)) * 1.05
    n = int(math.ceil(math.tan(reach) / math.tan(spec.angular_resolution)))
    ticks = np.arange(-n, n + 1) * math.tan(spec.angular_resolution)
    tu, tv = np.meshgrid(ticks, ticks)
    dirs = forward + tu.ravel()[:, None] * right + tv.ravel()[:, None] * up
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    t, hit = _ray_box_entry(cam, dirs, half)
    pts = cam + t[hit, None] * dirs[hit]
    sigma = spec.effective_sigma
    if sigma > 0:
        pts = pts + rng.normal(scale=sigma, size=pts.shape)
    return PointCloud(pts), float(spec.edge)


def cube_surface_grid(edge: float = 50.0, divisions: int = 50) -> PointCloud:
    """Noise-free grid on the three faces of ``[0, edge]^3`` meeting at the
    ``(edge, edge, edge)`` corner, edges included."""
    g = np.linspace(0.0, edge, divisions + 1)
    a, b = (m.ravel() for m in np.meshgrid(g, g))
    full = np.full_like(a, edge)
    faces = [np.stack(c, axis=1) for c in ((full, a, b), (a, full, b), (a, b, full))]
    pts = np.unique(np.concatenate(faces), axis=0)
    return PointCloud(pts)


# --------------------------------------------------------------------------
# complete organized scans


@dataclass(frozen=True)
class SynthLeaf:
    leaf_id: str
    spec: LeafSpec


@dataclass(frozen=True)
class SynthScan:
    cloud: PointCloud
    masks: Tuple[LeafMask, ...]
    truth: Tuple[Tuple[str, float, float], ...]


def generate_scan(leaves: Sequence[SynthLeaf], pixel_pitch: Optional[float] = None,
                  gap: float = 10.0) -> SynthScan:
    """Lay leaves side by side on an organized pixel grid.

    Every point of every synthetic leaf gets its own pixel (leaves occupy
    disjoint pixel blocks); the remaining pixels are invalid (NaN). Each
    leaf's mask covers exactly its own points, so extracting a mask returns
    the leaf cloud the generator produced, in pixel order.
    """
    if not leaves:
        raise SynthError("scan needs at least one leaf")
    clouds = [generate_leaf(l.spec)[0] for l in leaves]
    blocks = []
    for cloud in clouds:
        n = len(cloud)
        side = int(math.ceil(math.sqrt(n)))
        blocks.append((side, int(math.ceil(n / side))))
    width = sum(b[0] for b in blocks) + max(1, int(gap)) * (len(blocks) + 1)
    height = max(b[1] for b in blocks) + 2
    pts = np.full((height * width, 3), np.nan)
    masks = []
    c0 = max(1, int(gap))
    for leaf, cloud, (bw, bh) in zip(leaves, clouds, blocks):
        n = len(cloud)
        k = np.arange(n)
        rows, cols = 1 + k // bw, c0 + k % bw
        flat = rows * width + cols
        pts[flat] = cloud.points
        m = np.zeros((height, width), dtype=bool)
        m[rows, cols] = True
        masks.append(LeafMask(m, leaf.leaf_id))
        c0 += bw + max(1, int(gap))
    truth = tuple((l.leaf_id, float(l.spec.length), float(l.spec.width)) for l in leaves)
    return SynthScan(PointCloud(pts, grid=(width, height)), tuple(masks), truth)
