"""Accuracy metrics against a ground-truth table, text/JSON reports and SVG scatter plots."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .measure import METHODS, LeafMeasurement

SOURCES = ("manual", "software", "synthetic")
DIMENSIONS = ("length", "width")
R2_KINDS = ("determination", "pearson")


class EvalError(ValueError):
    pass


class DegenerateInputError(EvalError):
    pass


def _pair(pred, truth) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if len(p) != len(t):
        raise EvalError(f"length mismatch: {len(p)} predictions vs {len(t)} truths")
    if len(p) == 0:
        raise EvalError("empty input")
    return p, t


def rmse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return math.sqrt(float(np.mean((p - t) ** 2)))


def r_squared(pred, truth) -> float:
    """Coefficient of determination of ``pred`` as a predictor of ``truth``."""
    p, t = _pair(pred, truth)
    if len(p) < 2:
        raise EvalError("R^2 needs at least 2 pairs")
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0:
        raise DegenerateInputError("truth values are constant; R^2 is undefined")
    ss_res = float(np.sum((p - t) ** 2))
    return 1.0 - ss_res / ss_tot


def pearson_r_squared(pred, truth) -> float:
    """Squared Pearson correlation, i.e. R^2 of the least-squares line through the scatter."""
    p, t = _pair(pred, truth)
    if len(p) < 2:
        raise EvalError("R^2 needs at least 2 pairs")
    dp, dt = p - p.mean(), t - t.mean()
    sp, st = float(dp @ dp), float(dt @ dt)
    if st == 0:
        raise DegenerateInputError("truth values are constant; R^2 is undefined")
    if sp == 0:
        raise DegenerateInputError("predictions are constant; correlation is undefined")
    return float(dp @ dt) ** 2 / (sp * st)


def error_percentage(pred, truth) -> float:
    """Mean absolute error as a percentage of the mean true size."""
    p, t = _pair(pred, truth)
    mean_truth = float(np.mean(t))
    if not mean_truth > 0:
        raise DegenerateInputError(f"mean truth must be > 0, got {mean_truth}")
    return 100.0 * float(np.mean(np.abs(p - t))) / mean_truth


# --------------------------------------------------------------------------
# ground truth


@dataclass(frozen=True)
class TruthRow:
    leaf_id: str
    length: float
    width: float
    source: str


@dataclass(frozen=True)
class GroundTruthTable:
    rows: Tuple[TruthRow, ...]

    def __post_init__(self):
        seen = set()
        for r in self.rows:
            if r.leaf_id in seen:
                raise EvalError(f"duplicate leaf_id {r.leaf_id!r} in ground truth")
            seen.add(r.leaf_id)
            if not (r.length > 0 and r.width > 0):
                raise EvalError(f"leaf {r.leaf_id!r}: ground-truth sizes must be > 0")
            if r.source not in SOURCES:
                raise EvalError(f"leaf {r.leaf_id!r}: unknown source {r.source!r}")

    def by_id(self) -> Dict[str, TruthRow]:
        return {r.leaf_id: r for r in self.rows}


TRUTH_FIELDS = ("leaf_id", "length_mm", "width_mm", "source")


def truth_from_csv(text: str) -> GroundTruthTable:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != TRUTH_FIELDS:
        raise EvalError(f"ground-truth header must be {','.join(TRUTH_FIELDS)}, got {header}")
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != 4:
            raise EvalError(f"line {lineno}: expected 4 columns, got {len(rec)}")
        try:
            rows.append(TruthRow(rec[0], float(rec[1]), float(rec[2]), rec[3].strip()))
        except ValueError:
            raise EvalError(f"line {lineno}: non-numeric size in {rec}") from None
    return GroundTruthTable(tuple(rows))


def truth_to_csv(table: GroundTruthTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRUTH_FIELDS)
    for r in table.rows:
        w.writerow([r.leaf_id, repr(float(r.length)), repr(float(r.width)), r.source])
    return buf.getvalue()


# --------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class DimensionReport:
    rmse: float
    r_squared: float
    error_percentage: float
    residuals: Dict[str, float]
    n: int

    def as_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "r_squared": self.r_squared,
            "error_percentage": self.error_percentage,
            "residuals": dict(self.residuals),
            "n": self.n,
        }


@dataclass(frozen=True)
class EvalReport:
    method: str
    length: DimensionReport
    width: DimensionReport
    unmatched_measurements: Tuple[str, ...] = ()
    unmatched_truth: Tuple[str, ...] = ()
    r2_kind: str = "determination"
    pairs: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False, compare=False)

    def dimension(self, name: str) -> DimensionReport:
        return {"length": self.length, "width": self.width}[name]

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "r2_kind": self.r2_kind,
            "length": self.length.as_dict(),
            "width": self.width.as_dict(),
            "unmatched_measurements": list(self.unmatched_measurements),
            "unmatched_truth": list(self.unmatched_truth),
        }


def evaluate(measurements: Sequence[LeafMeasurement], truth: GroundTruthTable,
             r2_kind: str = "determination") -> EvalReport:
    """Join measurements to ground truth on ``leaf_id`` and score both dimensions.

    Ids present on only one side are listed in the report and left out of
    every metric.
    """
    if r2_kind not in R2_KINDS:
        raise ValueError(f"r2_kind must be one of {R2_KINDS}")
    methods = {m.method for m in measurements}
    if len(methods) > 1:
        raise EvalError(f"measurements mix methods {sorted(methods)}; evaluate them separately")
    ids = [m.leaf_id for m in measurements]
    if len(set(ids)) != len(ids):
        raise EvalError("duplicate leaf_id among measurements")
    gt = truth.by_id()
    matched = [m for m in measurements if m.leaf_id in gt]
    if len(matched) < 2:
        raise EvalError(f"only {len(matched)} leaf_ids match the ground truth; need at least 2")
    r2 = r_squared if r2_kind == "determination" else pearson_r_squared
    dims = {}
    pairs = {}
    for dim in DIMENSIONS:
        pred = np.array([getattr(m, dim) for m in matched])
        true = np.array([getattr(gt[m.leaf_id], dim) for m in matched])
        dims[dim] = DimensionReport(
            rmse(pred, true),
            r2(pred, true),
            error_percentage(pred, true),
            {m.leaf_id: float(p - t) for m, p, t in zip(matched, pred, true)},
            len(matched),
        )
        pairs[dim] = (pred, true)
    id_set = set(ids)
    return EvalReport(
        matched[0].method,
        dims["length"],
        dims["width"],
        tuple(i for i in ids if i not in gt),
        tuple(r.leaf_id for r in truth.rows if r.leaf_id not in id_set),
        r2_kind,
        pairs,
    )


def evaluate_by_method(measurements: Iterable[LeafMeasurement], truth: GroundTruthTable,
                       r2_kind: str = "determination") -> List[EvalReport]:
    """One report per method present, in the canonical method order."""
    groups: Dict[str, List[LeafMeasurement]] = {}
    for m in measurements:
        groups.setdefault(m.method, []).append(m)
    return [evaluate(groups[k], truth, r2_kind) for k in METHODS if k in groups]


_METHOD_LABELS = {
    "plain": "RANSAC - plain",
    "refined": "RANSAC - refined",
    "combined": "RANSAC - Combined",
    "selected": "RANSAC - selected",
}


def format_table(reports: Sequence[EvalReport], title: str = "") -> str:
    """Aligned text table with one Length and one Width row per method."""
    r2_head = "R²" if all(r.r2_kind == "determination" for r in reports) else "R² (pearson)"
    head = ("Method", "", "Error Percentage(%)", "RMSE(mm)", r2_head, "n")
    rows = []
    for rep in reports:
        label = _METHOD_LABELS[rep.method]
        for dim in DIMENSIONS:
            d = rep.dimension(dim)
            rows.append((label, dim.capitalize(), f"{d.error_percentage:.2f}", f"{d.rmse:.2f}",
                         f"{d.r_squared:.3f}", str(d.n)))
            label = ""
    widths = [max(len(r[i]) for r in [head, *rows]) for i in range(len(head))]

    def line(cells):
        return "  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths))).rstrip()

    out = []
    if title:
        out.append(title)
    out.append(line(head))
    out.append("  ".join("-" * w for w in widths))
    out.extend(line(r) for r in rows)
    return "\n".join(out) + "\n"


def reports_to_json(reports: Sequence[EvalReport]) -> str:
    return json.dumps({"reports": [r.as_dict() for r in reports]}, indent=2) + "\n"


# --------------------------------------------------------------------------
# SVG scatter


def _f(v: float) -> str:
    s = f"{v:.3f}"
    return "0.000" if s == "-0.000" else s


def scatter_svg(pred, truth, title: str = "", size: int = 480) -> bytes:
    """Standalone SVG scatter of predictions against truth.

    Draws the identity line, the least-squares line of prediction on truth
    (when it is defined) and an RMSE/R² annotation. Output depends only on
    the inputs.
    """
    p, t = _pair(pred, truth)
    lo = float(min(p.min(), t.min()))
    hi = float(max(p.max(), t.max()))
    span = hi - lo
    pad = 0.05 * span if span > 0 else max(1.0, abs(lo) * 0.05)
    lo, hi = lo - pad, hi + pad
    margin = 56.0
    plot = size - 2 * margin

    def sx(v):
        return margin + (v - lo) / (hi - lo) * plot

    def sy(v):
        return size - margin - (v - lo) / (hi - lo) * plot

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
        f'<rect x="{_f(margin)}" y="{_f(margin)}" width="{_f(plot)}" height="{_f(plot)}" '
        f'fill="none" stroke="black" stroke-width="1"/>',
    ]
    for k in range(6):
        v = lo + (hi - lo) * k / 5
        parts.append(f'<text x="{_f(sx(v))}" y="{_f(size - margin + 16)}" font-size="10" '
                     f'text-anchor="middle">{v:.1f}</text>')
        parts.append(f'<text x="{_f(margin - 6)}" y="{_f(sy(v) + 3)}" font-size="10" '
                     f'text-anchor="end">{v:.1f}</text>')
    parts.append(f'<text x="{_f(size / 2)}" y="{_f(size - 12)}" font-size="12" '
                 f'text-anchor="middle">ground truth (mm)</text>')
    parts.append(f'<text x="14" y="{_f(size / 2)}" font-size="12" text-anchor="middle" '
                 f'transform="rotate(-90 14 {_f(size / 2)})">estimate (mm)</text>')
    if title:
        parts.append(f'<text x="{_f(size / 2)}" y="24" font-size="14" text-anchor="middle">'
                     f'{_escape(title)}</text>')
    parts.append(f'<line id="identity" x1="{_f(sx(lo))}" y1="{_f(sy(lo))}" x2="{_f(sx(hi))}" '
                 f'y2="{_f(sy(hi))}" stroke="gray" stroke-dasharray="4 3"/>')

    note = [f"RMSE = {rmse(p, t):.2f} mm"]
    dt = t - t.mean()
    if len(t) >= 2 and float(dt @ dt) > 0:
        slope = float(dt @ (p - p.mean())) / float(dt @ dt)
        icpt = float(p.mean() - slope * t.mean())
        parts.append(f'<line id="fit" x1="{_f(sx(lo))}" y1="{_f(sy(icpt + slope * lo))}" '
                     f'x2="{_f(sx(hi))}" y2="{_f(sy(icpt + slope * hi))}" stroke="crimson"/>')
        note.append(f"R² = {r_squared(p, t):.3f}")
    for k, line in enumerate(note):
        parts.append(f'<text x="{_f(margin + 8)}" y="{_f(margin + 16 + 14 * k)}" '
                     f'font-size="11">{_escape(line)}</text>')
    for pv, tv in zip(p, t):
        parts.append(f'<circle class="marker" cx="{_f(sx(tv))}" cy="{_f(sy(pv))}" r="3" '
                     f'fill="steelblue"/>')
    parts.append("</svg>")
    return ("\n".join(parts) + "\n").encode("utf-8")


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
