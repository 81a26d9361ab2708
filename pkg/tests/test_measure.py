import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leafmetric.cloud_io import MaskEntry, PointCloud, ScanManifest, TooFewPointsError, write_mask, write_ply
from leafmetric.measure import (
    ExtentConfig,
    LeafMeasurement,
    MeasureError,
    combined_estimate,
    measure_all_methods,
    measure_leaf,
    measure_scan,
    measurements_from_csv,
    measurements_from_json,
    measurements_to_csv,
    measurements_to_json,
    principal_extents,
    selected_estimate,
)
from leafmetric.plane import RansacConfig
from leafmetric.synth import LeafSpec, Pose, SynthLeaf, generate_leaf, generate_scan

from oracles import random_rotation

FAST = ExtentConfig(ransac=RansacConfig(iterations=200))


def rectangle(length, width, step=0.5):
    x = np.arange(0, length + 1e-9, step)
    y = np.arange(0, width + 1e-9, step)
    xx, yy = np.meshgrid(x, y)
    return np.stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)], axis=1)


def test_rectangle_extents():
    m = measure_leaf(rectangle(60, 35), FAST, "plain", "r")
    assert m.length == pytest.approx(60, abs=1e-9)
    assert m.width == pytest.approx(35, abs=1e-9)
    assert m.inlier_fraction == 1.0 and m.leaf_id == "r"


@pytest.mark.parametrize("method", ["plain", "refined", "combined", "selected"])
def test_rotated_rectangle_every_method(method):
    R = random_rotation(np.random.default_rng(3))
    pts = rectangle(60, 35) @ R.T + [100, -50, 400]
    m = measure_leaf(pts, FAST, method)
    assert m.method == method
    assert m.length == pytest.approx(60, abs=1e-6)
    assert m.width == pytest.approx(35, abs=1e-6)


def test_principal_extents_known_axes():
    coords = np.array([[0.0, 0], [10, 0], [10, 2], [0, 2]])
    length, width, axes = principal_extents(coords)
    assert (length, width) == (10, 2)
    np.testing.assert_allclose(np.abs(axes), np.eye(2), atol=1e-12)


def test_principal_extents_trim():
    t = np.linspace(0, 100, 1001)
    coords = np.stack([t, (t % 7) / 7], axis=1)
    length, _, _ = principal_extents(coords, trim=0.01)
    assert length == pytest.approx(98.0, rel=1e-3)


def test_principal_extents_square_tie_is_deterministic():
    sq = np.array([[0.0, 0], [1, 0], [1, 1], [0, 1]])
    a = principal_extents(sq)
    b = principal_extents(sq[::-1])
    np.testing.assert_array_equal(a[2], b[2])


def test_principal_extents_degenerate():
    with pytest.raises(MeasureError):
        principal_extents(np.array([[0.0, 0], [0, 0], [1, 1]]))


def test_collinear_leaf_is_error():
    pts = np.outer(np.linspace(0, 50, 40), [1, 0, 0])
    with pytest.raises(Exception):
        measure_leaf(pts, FAST)


def test_too_few_points():
    with pytest.raises(TooFewPointsError):
        measure_leaf(rectangle(2, 1, 1.0), FAST)


@given(st.integers(0, 2**32 - 1), st.floats(0.2, 5.0))
@settings(max_examples=25, deadline=None)
def test_rigid_invariance_and_scaling(seed, scale):
    rng = np.random.default_rng(seed)
    cloud, _ = generate_leaf(LeafSpec(50, 30, point_spacing=1.0, noise_sigma=0.2, seed=seed % 1000))
    pts = cloud.points
    cfg = ExtentConfig(ransac=RansacConfig(iterations=200, distance_threshold=1.0))
    base = measure_leaf(pts, cfg, "refined")
    R = random_rotation(rng)
    moved = measure_leaf(pts @ R.T + rng.uniform(-500, 500, 3), cfg, "refined")
    assert abs(moved.length - base.length) < 1e-6
    assert abs(moved.width - base.width) < 1e-6
    # scaling the cloud and the threshold together scales the extents
    cfg_s = ExtentConfig(ransac=RansacConfig(iterations=200, distance_threshold=scale))
    scaled = measure_leaf(pts * scale, cfg_s, "refined")
    assert scaled.length == pytest.approx(scale * base.length, rel=1e-9)
    assert scaled.width == pytest.approx(scale * base.width, rel=1e-9)


def test_bent_leaf_length_below_arc():
    for radius in (40.0, 80.0, 200.0):
        cloud, (L, W) = generate_leaf(LeafSpec(70, 35, bend_radius=radius))
        m = measure_leaf(cloud.points, ExtentConfig(ransac=RansacConfig(distance_threshold=30)), "refined")
        assert m.length <= L + 1e-9
        assert m.width == pytest.approx(W, abs=1e-6)
        assert m.length >= 2 * radius * math.sin(L / (2 * radius)) - 1e-6


def test_combined_and_selected():
    a = LeafMeasurement("x", 60.0, 30.0, "plain", 0.9, 0.5)
    b = LeafMeasurement("x", 62.0, 31.0, "refined", 0.8, 0.4)
    c = combined_estimate(a, b)
    assert (c.length, c.width, c.method) == (61.0, 30.5, "combined")
    assert min(a.length, b.length) <= c.length <= max(a.length, b.length)
    s = selected_estimate(a, b)
    assert (s.length, s.width, s.method) == (60.0, 31.0, "selected")
    with pytest.raises(MeasureError):
        combined_estimate(a, LeafMeasurement("y", 1.0, 1.0, "refined", 1.0, 0))


def test_all_methods_consistent_with_single_calls():
    cloud, _ = generate_leaf(LeafSpec(60, 30, noise_sigma=0.5, outlier_fraction=0.05, seed=3))
    every = measure_all_methods(cloud.points, FAST, "q")
    for method, m in every.items():
        single = measure_leaf(cloud.points, FAST, method, "q")
        assert (m.length, m.width) == (single.length, single.width)
    c = every["combined"]
    assert c.length == (every["plain"].length + every["refined"].length) / 2


@pytest.mark.parametrize("kw", [dict(length=10, width=20), dict(length=10, width=0), dict(inlier_fraction=0)])
def test_measurement_validation(kw):
    args = dict(leaf_id="a", length=10.0, width=5.0, method="plain", inlier_fraction=1.0, plane_rms=0.0)
    args.update(kw)
    with pytest.raises(ValueError):
        LeafMeasurement(**args)


def test_serialization_roundtrip():
    ms = [LeafMeasurement("a,1", 60.1234567890123, 30.5, "combined", 0.75, 0.1),
          LeafMeasurement("b", 45.0, 20.0, "combined", 1.0, 0.0)]
    assert measurements_from_csv(measurements_to_csv(ms)) == ms
    assert measurements_from_json(measurements_to_json(ms)) == ms


def write_scan(tmp_path, scan, extra_masks=()):
    (tmp_path / "masks").mkdir(exist_ok=True)
    (tmp_path / "cloud.ply").write_bytes(write_ply(scan.cloud))
    entries = []
    for mask in list(scan.masks) + list(extra_masks):
        path = tmp_path / "masks" / f"{mask.leaf_id}.pgm"
        path.write_bytes(write_mask(mask))
        entries.append(MaskEntry(mask.leaf_id, path))
    return ScanManifest(tmp_path / "cloud.ply", tuple(entries), "scan", "2023-05-01")


def test_measure_scan_six_leaves(tmp_path):
    leaves = [SynthLeaf(f"L{i}", LeafSpec(40 + 8 * i, 20 + 4 * i, seed=i)) for i in range(6)]
    scan = generate_scan(leaves)
    manifest = write_scan(tmp_path, scan)
    result = measure_scan(manifest, FAST, "selected")
    assert not result.skipped
    assert [m.leaf_id for m in result.measurements] == [f"L{i}" for i in range(6)]
    for m, (_, L, W) in zip(result.measurements, scan.truth):
        assert m.length == pytest.approx(L, abs=1e-6)
        assert m.width == pytest.approx(W, abs=1e-6)
    threaded = measure_scan(manifest, FAST, "selected", workers=4)
    assert threaded.measurements == result.measurements


def test_measure_scan_skips_nan_only_mask(tmp_path):
    from leafmetric.cloud_io import LeafMask

    scan = generate_scan([SynthLeaf("good", LeafSpec(50, 25))])
    w, h = scan.cloud.grid
    arr = np.zeros((h, w), dtype=bool)
    arr[0, :] = True  # the top row is padding, all NaN
    manifest = write_scan(tmp_path, scan, [LeafMask(arr, "empty")])
    result = measure_scan(manifest, FAST)
    assert [m.leaf_id for m in result.measurements] == ["good"]
    assert [s.leaf_id for s in result.skipped] == ["empty"]
    assert "TooFewPointsError" in result.skipped[0].error


def test_measure_scan_requires_grid(tmp_path):
    from leafmetric.cloud_io import GridError

    (tmp_path / "cloud.ply").write_bytes(write_ply(PointCloud(np.zeros((4, 3)))))
    manifest = ScanManifest(tmp_path / "cloud.ply", (), "s", "2023-01-01")
    with pytest.raises(GridError):
        measure_scan(manifest)


def test_pose_translation_only_changes_nothing():
    spec = LeafSpec(55, 25, noise_sigma=0.3, seed=4)
    moved = LeafSpec(55, 25, noise_sigma=0.3, seed=4, pose=Pose(translation=(1e3, -2e3, 5e2)))
    a = measure_leaf(generate_leaf(spec)[0].points, FAST, "refined")
    b = measure_leaf(generate_leaf(moved)[0].points, FAST, "refined")
    assert abs(a.length - b.length) < 1e-6 and abs(a.width - b.width) < 1e-6
