import json
import subprocess
import sys

import numpy as np
import pytest

from leafmetric.cli import build_parser, main
from leafmetric.cloud_io import PointCloud, write_ply
from leafmetric.synth import cube_surface_grid

SPEC = {
    "scan_id": "synthetic-1",
    "date": "2023-06-01",
    "seed": 4,
    "point_spacing": 1.0,
    "noise_sigma": 0.3,
    "outlier_fraction": 0.05,
    "leaves": [
        {"leaf_id": "L1", "length": 60, "width": 30},
        {"leaf_id": "L2", "length": 45, "width": 25},
        {"leaf_id": "L3", "length": 80, "width": 40, "bend_radius": 120},
    ],
}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def scan_dir(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(SPEC))
    out = tmp_path / "scan"
    assert run("synth", spec, "--out-dir", out) == 0
    return out


def listing(d):
    return sorted(p.relative_to(d).as_posix() for p in d.rglob("*") if p.is_file())


def test_synth_files(scan_dir):
    assert listing(scan_dir) == ["cloud.ply", "manifest.json", "masks/L1.pgm", "masks/L2.pgm",
                                 "masks/L3.pgm", "truth.csv"]
    manifest = json.loads((scan_dir / "manifest.json").read_text())
    assert manifest["scan_id"] == "synthetic-1" and manifest["cloud"] == "cloud.ply"
    assert (scan_dir / "truth.csv").read_text().splitlines()[0] == "leaf_id,length_mm,width_mm,source"


def test_measure_then_eval(scan_dir, tmp_path, capsys):
    out = tmp_path / "m"
    assert run("measure", scan_dir / "manifest.json", "--method", "all", "--iterations", "300",
               "--out-dir", out) == 0
    assert listing(out) == ["measurements.csv", "measurements.json", "skipped.json"]
    rows = (out / "measurements.csv").read_text().splitlines()
    assert len(rows) == 1 + 4 * 3
    rep = tmp_path / "r"
    capsys.readouterr()
    assert run("eval", out / "measurements.csv", scan_dir / "truth.csv", "--out-dir", rep,
               "--format", "table,json,csv,svg") == 0
    table = capsys.readouterr().out
    for word in ("Length", "Width", "RMSE(mm)", "R²", "RANSAC - Combined"):
        assert word in table
    files = listing(rep)
    assert "report.txt" in files and "report.json" in files and "report.csv" in files
    assert sum(f.endswith(".svg") for f in files) == 8


def test_reruns_are_byte_identical(scan_dir, tmp_path):
    outs = []
    for k, workers in enumerate((1, 1, 4)):
        out = tmp_path / f"run{k}"
        assert run("measure", scan_dir / "manifest.json", "--iterations", "200", "--workers", workers,
                   "--out-dir", out) == 0
        outs.append({f: (out / f).read_bytes() for f in listing(out)})
    assert outs[0] == outs[1] == outs[2]


def test_synth_is_reproducible(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(SPEC))
    run("synth", spec, "--out-dir", tmp_path / "a")
    run("synth", spec, "--out-dir", tmp_path / "b")
    for f in listing(tmp_path / "a"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_seed_env_fallback(scan_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("LEAFMETRIC_SEED", "7")
    run("measure", scan_dir / "manifest.json", "--iterations", "50", "--out-dir", tmp_path / "env")
    monkeypatch.delenv("LEAFMETRIC_SEED")
    run("measure", scan_dir / "manifest.json", "--iterations", "50", "--seed", "7", "--out-dir", tmp_path / "flag")
    assert (tmp_path / "env" / "measurements.csv").read_bytes() == (tmp_path / "flag" / "measurements.csv").read_bytes()
    monkeypatch.setenv("LEAFMETRIC_SEED", "abc")
    assert run("measure", scan_dir / "manifest.json", "--out-dir", tmp_path / "bad") == 1


def test_missing_cloud_exit_1_without_outputs(scan_dir, tmp_path):
    (scan_dir / "cloud.ply").unlink()
    out = tmp_path / "none"
    assert run("measure", scan_dir / "manifest.json", "--out-dir", out) == 1
    assert not out.exists() or listing(out) == []


def test_every_leaf_skipped_exit_2(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"leaves": [{"leaf_id": "tiny", "length": 2, "width": 1}], "point_spacing": 1.0}))
    run("synth", spec, "--out-dir", tmp_path / "s")
    out = tmp_path / "m"
    assert run("measure", tmp_path / "s" / "manifest.json", "--out-dir", out) == 2
    skipped = json.loads((out / "skipped.json").read_text())
    assert [s["leaf_id"] for s in skipped] == ["tiny"]


def test_zero_leaf_spec_exit_1(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"leaves": []}))
    assert run("synth", spec, "--out-dir", tmp_path / "s") == 1
    assert not (tmp_path / "s").exists()


def test_eval_disjoint_ids_exit_2(tmp_path):
    (tmp_path / "m.csv").write_text("leaf_id,method,length_mm,width_mm,inlier_fraction,plane_rms\n"
                                    "a,plain,50,20,1,0\nb,plain,60,30,1,0\n")
    (tmp_path / "t.csv").write_text("leaf_id,length_mm,width_mm,source\nx,50,20,manual\ny,60,30,manual\n")
    assert run("eval", tmp_path / "m.csv", tmp_path / "t.csv", "--out-dir", tmp_path / "r") == 2


def test_calibrate_exact_cube(tmp_path, capsys):
    (tmp_path / "cube.ply").write_bytes(write_ply(cube_surface_grid(50, 50)))
    assert run("calibrate", tmp_path / "cube.ply", "--true-edge", 50, "--distance", 400,
               "--out-dir", tmp_path / "c", "--format", "table,json") == 0
    out = capsys.readouterr().out
    row = out.splitlines()[1].split()
    assert row[:3] == ["400", "0.00", "0.00"]
    doc = json.loads((tmp_path / "c" / "calibration.json").read_text())
    assert doc["edge_mm"] == pytest.approx(50, abs=1e-9)


def test_calibrate_sphere_exit_2(tmp_path):
    rng = np.random.default_rng(0)
    v = rng.normal(size=(3000, 3))
    (tmp_path / "s.ply").write_bytes(write_ply(PointCloud(25 * v / np.linalg.norm(v, axis=1, keepdims=True))))
    assert run("calibrate", tmp_path / "s.ply") == 2


def test_calibrate_missing_cloud_exit_1(tmp_path):
    assert run("calibrate", tmp_path / "nope.ply", "--out-dir", tmp_path / "c") == 1
    assert not (tmp_path / "c").exists()


@pytest.mark.parametrize("argv", [
    [], ["bogus"], ["measure"], ["measure", "m.json"], ["measure", "m.json", "--out-dir", "o", "--trim", "0.7"],
    ["measure", "m.json", "--out-dir", "o", "--format", "xml"], ["measure", "m.json", "--out-dir", "o", "--out"],
    ["eval", "a.csv", "--out-dir", "o"], ["measure", "m.json", "--out-dir", "o", "--workers", "0"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert "usage" in capsys.readouterr().err


def test_help_lists_flags():
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    for name, flags in {
        "measure": ["--method", "--out-dir", "--iterations", "--threshold-mm", "--seed", "--trim", "--format", "--workers"],
        "eval": ["--r2", "--method", "--out-dir", "--format"],
        "synth": ["--out-dir", "--seed"],
        "calibrate": ["--true-edge", "--distance", "--out-dir", "--trim"],
    }.items():
        text = sub[name].format_help()
        for flag in flags:
            assert flag in text, (name, flag)


def test_console_script_runs():
    proc = subprocess.run([sys.executable, "-m", "leafmetric.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("measure", "eval", "synth", "calibrate"):
        assert cmd in proc.stdout


def test_all_nan_masks_exit_2(scan_dir, tmp_path):
    from leafmetric.cloud_io import LeafMask, read_ply, write_mask

    w, h = read_ply(scan_dir / "cloud.ply").grid
    entries = []
    for i in range(6):
        arr = np.zeros((h, w), dtype=bool)
        arr[0, i * 3:(i + 1) * 3] = True  # the top row of a synthetic scan is NaN padding
        (scan_dir / "masks" / f"nan{i}.pgm").write_bytes(write_mask(LeafMask(arr, f"nan{i}")))
        entries.append({"leaf_id": f"nan{i}", "path": f"masks/nan{i}.pgm"})
    doc = {"cloud": "cloud.ply", "masks": entries, "scan_id": "s", "date": "2023-06-01"}
    (scan_dir / "nan.json").write_text(json.dumps(doc))
    out = tmp_path / "nan"
    assert run("measure", scan_dir / "nan.json", "--out-dir", out) == 2
    skipped = json.loads((out / "skipped.json").read_text())
    assert [s["leaf_id"] for s in skipped] == [f"nan{i}" for i in range(6)]
    assert (out / "measurements.csv").read_text().splitlines() == [
        "leaf_id,method,length_mm,width_mm,inlier_fraction,plane_rms"]
