"""``leafmetric`` command line: measure, eval, synth and calibrate."""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .calibrate import CalibrationError, estimate_cube_edge
from .cloud_io import (
    GridError,
    ManifestError,
    MaskEntry,
    MaskError,
    PlyError,
    ScanManifest,
    load_manifest,
    read_ply,
    write_mask,
    write_ply,
)
from .evaluate import (
    EvalError,
    GroundTruthTable,
    TruthRow,
    evaluate_by_method,
    format_table,
    reports_to_json,
    scatter_svg,
    truth_from_csv,
    truth_to_csv,
)
from .measure import (
    METHODS,
    ExtentConfig,
    LeafMeasurement,
    measure_all_methods,
    measure_scan,
    measurements_from_csv,
    measurements_from_json,
    measurements_to_csv,
    measurements_to_json,
    skips_to_json,
)
from .plane import RansacConfig
from .synth import (
    CubeSpec,
    LeafSpec,
    Pose,
    SynthError,
    SynthLeaf,
    generate_cube_face_scan,
    generate_scan,
    random_rotation,
)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_EMPTY = 2

SEED_ENV = "LEAFMETRIC_SEED"
FORMATS = ("csv", "json", "svg", "table")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _formats(value: str) -> List[str]:
    items = [v.strip() for v in value.split(",") if v.strip()]
    bad = [v for v in items if v not in FORMATS]
    if bad or not items:
        raise argparse.ArgumentTypeError(f"formats must be a comma-separated subset of {','.join(FORMATS)}")
    return items


def _trim(value: str) -> float:
    v = float(value)
    if not 0 <= v < 0.5:
        raise argparse.ArgumentTypeError("trim must be in [0, 0.5)")
    return v


def _positive_int(value: str) -> int:
    v = int(value)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _add_common(p: argparse.ArgumentParser, out_required: bool = True, formats: str = "csv,json"):
    p.add_argument("--out-dir", required=out_required, type=Path,
                   help="directory for output files (created if missing)")
    p.add_argument("--iterations", type=_positive_int, default=1000, help="RANSAC iterations (default 1000)")
    p.add_argument("--threshold-mm", type=float, default=2.0, help="RANSAC inlier distance in mm (default 2.0)")
    p.add_argument("--seed", type=int, default=None,
                   help=f"RANSAC/generator seed; falls back to ${SEED_ENV}, then 0")
    p.add_argument("--trim", type=_trim, default=0.0,
                   help="quantile trimmed from each end of an extent, in [0, 0.5); 0 = min-max")
    p.add_argument("--format", type=_formats, default=_formats(formats),
                   help=f"comma-separated output formats from {{{','.join(FORMATS)}}} (default {formats})")
    p.add_argument("--workers", type=_positive_int, default=1, help="threads for per-leaf work (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="leafmetric", description="Leaf length/width from point clouds and leaf masks.",
                     allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("measure", help="measure every leaf of a scan manifest", allow_abbrev=False)
    p.add_argument("manifest", type=Path, help="scan manifest JSON")
    p.add_argument("--method", choices=(*METHODS, "all"), default="selected",
                   help="plane-fitting estimator (default selected; 'all' writes every method)")
    _add_common(p)

    p = sub.add_parser("eval", help="score measurements against ground truth", allow_abbrev=False)
    p.add_argument("measurements", type=Path, help="measurements CSV or JSON")
    p.add_argument("truth", type=Path, help="ground-truth CSV (leaf_id,length_mm,width_mm,source)")
    p.add_argument("--r2", choices=("determination", "pearson"), default="determination",
                   help="R² definition (default: coefficient of determination)")
    p.add_argument("--method", choices=METHODS, default=None, help="only evaluate this method")
    _add_common(p, formats="table,json")

    p = sub.add_parser("synth", help="generate a synthetic scan with known truth", allow_abbrev=False)
    p.add_argument("spec", type=Path, help="synthetic scan spec JSON")
    _add_common(p)

    p = sub.add_parser("calibrate", help="estimate a cube edge and its error", allow_abbrev=False)
    p.add_argument("cloud", type=Path, help="cube point cloud PLY")
    p.add_argument("--true-edge", type=float, default=50.0, help="true cube edge in mm (default 50)")
    p.add_argument("--distance", type=float, default=None, help="camera-to-cube distance label for the report row")
    _add_common(p, out_required=False, formats="table")
    return parser


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"${SEED_ENV}={env!r} is not an integer") from None
    return 0


def _ransac(args) -> RansacConfig:
    return RansacConfig(iterations=args.iterations, distance_threshold=args.threshold_mm, seed=_seed(args))


def write_outputs(out_dir: Path, files: Dict[str, bytes]) -> None:
    """Write every file to a temp name first, then rename them all into place."""
    out_dir.mkdir(parents=True, exist_ok=True)
    staged = []
    try:
        for name, data in files.items():
            dest = out_dir / name
            dest.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(prefix=f".{dest.name}.", dir=dest.parent)
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            staged.append((tmp, dest))
    except BaseException:
        for tmp, _ in staged:
            os.unlink(tmp)
        raise
    for tmp, dest in staged:
        os.replace(tmp, dest)


def _err(msg: str) -> None:
    print(f"leafmetric: {msg}", file=sys.stderr)


# --------------------------------------------------------------------------


def cmd_measure(args) -> int:
    config = ExtentConfig(args.trim, _ransac(args))
    try:
        manifest = load_manifest(args.manifest)
        if args.method == "all":
            result = measure_scan(manifest, config, "selected", workers=args.workers)
            measurements = _all_methods(manifest, config, result)
        else:
            result = measure_scan(manifest, config, args.method, workers=args.workers)
            measurements = result.measurements
    except (OSError, ManifestError, PlyError, MaskError, GridError) as exc:
        _err(f"cannot load scan: {exc}")
        return EXIT_INPUT

    files = {"skipped.json": skips_to_json(result.skipped).encode()}
    if "csv" in args.format:
        files["measurements.csv"] = measurements_to_csv(measurements).encode()
    if "json" in args.format:
        files["measurements.json"] = measurements_to_json(measurements).encode()
    write_outputs(args.out_dir, files)
    for s in result.skipped:
        _err(f"skipped leaf {s.leaf_id}: {s.error}")
    if not result.measurements:
        _err("no leaf could be measured")
        return EXIT_EMPTY
    n = len({m.leaf_id for m in measurements})
    print(f"measured {n} of {len(manifest.masks)} leaves ({len(result.skipped)} skipped)")
    return EXIT_OK


def _all_methods(manifest: ScanManifest, config: ExtentConfig, result) -> List[LeafMeasurement]:
    """Re-measure the leaves that succeeded with every method, grouped by method."""
    from .cloud_io import extract_leaf_points, read_mask

    cloud = read_ply(manifest.cloud)
    ok = {m.leaf_id for m in result.measurements}
    per_leaf = []
    for entry in manifest.masks:
        if entry.leaf_id in ok:
            pts = extract_leaf_points(cloud, read_mask(entry.path, entry.leaf_id))
            per_leaf.append(measure_all_methods(pts, config, entry.leaf_id))
    return [leaf[method] for method in METHODS for leaf in per_leaf]


def _read_measurements(path: Path) -> List[LeafMeasurement]:
    text = path.read_text()
    if path.suffix.lower() == ".json":
        return measurements_from_json(text)
    return measurements_from_csv(text)


def cmd_eval(args) -> int:
    try:
        measurements = _read_measurements(args.measurements)
        truth = truth_from_csv(args.truth.read_text())
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        _err(f"cannot read inputs: {exc}")
        return EXIT_INPUT
    if args.method:
        measurements = [m for m in measurements if m.method == args.method]
    try:
        reports = evaluate_by_method(measurements, truth, args.r2)
    except EvalError as exc:
        _err(str(exc))
        return EXIT_EMPTY
    if not reports:
        _err("no measurements to evaluate")
        return EXIT_EMPTY

    sources = sorted({r.source for r in truth.rows})
    table = format_table(reports, f"Ground truth: {'/'.join(sources)}")
    files = {}
    if "table" in args.format:
        files["report.txt"] = table.encode()
    if "json" in args.format:
        files["report.json"] = reports_to_json(reports).encode()
    if "svg" in args.format:
        for rep in reports:
            for dim, (pred, true) in rep.pairs.items():
                files[f"scatter_{rep.method}_{dim}.svg"] = scatter_svg(pred, true, f"{rep.method} {dim}")
    if "csv" in args.format:
        lines = ["method,dimension,error_percentage,rmse_mm,r_squared,n"]
        for rep in reports:
            for dim in ("length", "width"):
                d = rep.dimension(dim)
                lines.append(f"{rep.method},{dim},{d.error_percentage!r},{d.rmse!r},{d.r_squared!r},{d.n}")
        files["report.csv"] = ("\n".join(lines) + "\n").encode()
    write_outputs(args.out_dir, files)
    for rep in reports:
        if rep.unmatched_measurements or rep.unmatched_truth:
            _err(f"{rep.method}: unmatched measurements {list(rep.unmatched_measurements)}, "
                 f"unmatched truth {list(rep.unmatched_truth)}")
    sys.stdout.write(table)
    return EXIT_OK


# --------------------------------------------------------------------------
# synth


def _leaf_specs(doc: dict, seed: int) -> List[SynthLeaf]:
    leaves = doc.get("leaves")
    if not isinstance(leaves, list) or not leaves:
        raise SynthError("spec must contain a non-empty 'leaves' list")
    defaults = {k: doc[k] for k in ("point_spacing", "noise_sigma", "outlier_fraction", "bend_radius",
                                    "outlier_min_distance") if k in doc}
    random_pose = bool(doc.get("random_pose", True))
    ss = np.random.SeedSequence(seed)
    out = []
    seen = set()
    for i, (leaf, child) in enumerate(zip(leaves, ss.spawn(len(leaves)))):
        if not isinstance(leaf, dict):
            raise SynthError(f"leaves[{i}] must be an object")
        leaf_id = str(leaf.get("leaf_id", f"leaf{i:02d}"))
        if leaf_id in seen:
            raise SynthError(f"duplicate leaf_id {leaf_id!r}")
        seen.add(leaf_id)
        params = {**defaults, **{k: v for k, v in leaf.items() if k != "leaf_id"}}
        try:
            length, width = float(params.pop("length")), float(params.pop("width"))
        except KeyError as exc:
            raise SynthError(f"leaves[{i}] lacks {exc}") from None
        if params.get("bend_radius") is None:
            params.pop("bend_radius", None)
        unknown = set(params) - {"point_spacing", "noise_sigma", "outlier_fraction", "bend_radius",
                                 "outlier_min_distance"}
        if unknown:
            raise SynthError(f"leaves[{i}]: unknown fields {sorted(unknown)}")
        rng = np.random.default_rng(child)
        pose = Pose()
        if random_pose:
            pose = Pose.from_arrays(random_rotation(rng), rng.uniform(-150.0, 150.0, 3))
        leaf_seed = int(rng.integers(0, 2**63))
        out.append(SynthLeaf(leaf_id, LeafSpec(length, width, pose=pose, seed=leaf_seed,
                                               **{k: float(v) for k, v in params.items()})))
    return out


def cmd_synth(args) -> int:
    try:
        doc = json.loads(args.spec.read_text())
        if not isinstance(doc, dict):
            raise SynthError("spec must be a JSON object")
        seed = args.seed if args.seed is not None else doc.get("seed", _seed(args))
        leaves = _leaf_specs(doc, int(seed))
        scan = generate_scan(leaves)
        cloud_fmt = doc.get("cloud_format", "binary_little_endian")
        cube = doc.get("cube")
        cube_scan = None
        if cube is not None:
            cube_spec = CubeSpec(**{"seed": int(seed), **cube})
            cube_scan = generate_cube_face_scan(cube_spec)
    except (OSError, json.JSONDecodeError, SynthError, TypeError, ValueError) as exc:
        _err(f"invalid synth spec: {exc}")
        return EXIT_INPUT

    files = {"cloud.ply": write_ply(scan.cloud, cloud_fmt)}
    entries = []
    for mask in scan.masks:
        name = f"masks/{mask.leaf_id}.pgm"
        files[name] = write_mask(mask)
        entries.append(MaskEntry(mask.leaf_id, Path(name)))
    manifest = ScanManifest(Path("cloud.ply"), tuple(entries), str(doc.get("scan_id", "synthetic")),
                            str(doc.get("date", "2000-01-01")))
    files["manifest.json"] = manifest.to_json().encode()
    truth = GroundTruthTable(tuple(TruthRow(i, l, w, "synthetic") for i, l, w in scan.truth))
    files["truth.csv"] = truth_to_csv(truth).encode()
    if cube_scan is not None:
        files["cube.ply"] = write_ply(cube_scan[0], cloud_fmt)
        files["cube_truth.json"] = (json.dumps({"edge_mm": cube_scan[1], **cube}, indent=2, sort_keys=True)
                                    + "\n").encode()
    write_outputs(args.out_dir, files)
    print(f"wrote {len(scan.masks)} leaves to {args.out_dir}")
    return EXIT_OK


# --------------------------------------------------------------------------
# calibrate


def cmd_calibrate(args) -> int:
    try:
        cloud = read_ply(args.cloud)
    except (OSError, PlyError) as exc:
        _err(f"cannot load cloud: {exc}")
        return EXIT_INPUT
    if not args.true_edge > 0:
        _err("--true-edge must be > 0")
        return EXIT_INPUT
    config = replace(_ransac(args), refine=True)
    try:
        cal = estimate_cube_edge(cloud, args.true_edge, config, trim=args.trim)
    except CalibrationError as exc:
        _err(f"calibration failed: {exc}")
        return EXIT_EMPTY

    label = f"{args.distance:g}" if args.distance is not None else "-"
    head = ("Camera to cube(mm)", "Error Percentage (%)", "RMSE (mm)", "Edge (mm)")
    row = (label, f"{cal.error_percentage:.2f}", f"{cal.rmse:.2f}", f"{cal.edge:.3f}")
    widths = [max(len(a), len(b)) for a, b in zip(head, row)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(head, widths)),
             "  ".join(c.rjust(w) for c, w in zip(row, widths))]
    for k, face in enumerate(cal.faces):
        lines.append(f"face {k}: rms {face.rms:.3f} mm, {len(face.indices)} points, "
                     f"normal ({', '.join(f'{c:.4f}' for c in face.plane.normal)})")
    text = "\n".join(lines) + "\n"
    if args.out_dir is not None:
        files = {}
        if "table" in args.format:
            files["calibration.txt"] = text.encode()
        if "json" in args.format:
            doc = {
                "distance_mm": args.distance,
                "true_edge_mm": args.true_edge,
                "edge_mm": cal.edge,
                "error_percentage": cal.error_percentage,
                "rmse_mm": cal.rmse,
                "edge_estimates_mm": list(cal.edge_estimates),
                "faces": [{"rms_mm": f.rms, "points": int(len(f.indices)),
                           "normal": [float(c) for c in f.plane.normal]} for f in cal.faces],
            }
            files["calibration.json"] = (json.dumps(doc, indent=2) + "\n").encode()
        write_outputs(args.out_dir, files)
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"measure": cmd_measure, "eval": cmd_eval, "synth": cmd_synth, "calibrate": cmd_calibrate}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
