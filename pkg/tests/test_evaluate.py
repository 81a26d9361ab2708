import re
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leafmetric.evaluate import (
    DegenerateInputError,
    EvalError,
    GroundTruthTable,
    TruthRow,
    error_percentage,
    evaluate,
    evaluate_by_method,
    format_table,
    pearson_r_squared,
    r_squared,
    reports_to_json,
    rmse,
    scatter_svg,
    truth_from_csv,
    truth_to_csv,
)
from leafmetric.measure import LeafMeasurement

import oracles


def test_hand_values():
    pred, truth = [1, 2, 3], [1, 2, 4]
    assert rmse(pred, truth) == pytest.approx(0.5773502692, abs=1e-9)
    assert r_squared(pred, truth) == pytest.approx(0.7857142857, abs=1e-9)
    assert error_percentage(pred, truth) == pytest.approx(100 * (1 / 3) / (7 / 3), abs=1e-12)
    assert rmse([5, 5], [5, 5]) == 0
    assert r_squared([1, 2, 3], [1, 2, 3]) == 1.0


def test_pearson_is_squared_correlation():
    p, t = np.array([1.0, 2.5, 2.9, 4.2]), np.array([1.0, 2.0, 3.0, 4.0])
    assert pearson_r_squared(p, t) == pytest.approx(np.corrcoef(p, t)[0, 1] ** 2, rel=1e-12)
    # a biased predictor correlates perfectly but is not a perfect fit
    assert pearson_r_squared(t + 5, t) == pytest.approx(1.0)
    assert r_squared(t + 5, t) < 0


def test_constant_truth_is_degenerate():
    with pytest.raises(DegenerateInputError):
        r_squared([1, 2, 3], [2, 2, 2])
    with pytest.raises(DegenerateInputError):
        pearson_r_squared([1, 2, 3], [2, 2, 2])
    with pytest.raises(EvalError):
        rmse([], [])
    with pytest.raises(EvalError):
        rmse([1, 2], [1])


vals = st.lists(st.floats(1, 200), min_size=2, max_size=30)


@given(st.data())
@settings(max_examples=100, deadline=None)
def test_metrics_match_oracle(data):
    truth = data.draw(vals)
    pred = data.draw(st.lists(st.floats(1, 200), min_size=len(truth), max_size=len(truth)))
    assert rmse(pred, truth) == pytest.approx(oracles.rmse(pred, truth), rel=1e-9, abs=1e-12)
    n = len(pred)
    ss_res = sum((p - t) ** 2 for p, t in zip(pred, truth))
    assert rmse(pred, truth) ** 2 * n == pytest.approx(ss_res, rel=1e-9, abs=1e-9)
    if np.ptp(truth) > 1e-6:
        assert r_squared(pred, truth) == pytest.approx(oracles.r2_determination(pred, truth), rel=1e-6, abs=1e-9)
    # order of the pairs does not matter
    perm = np.random.default_rng(n).permutation(n)
    p2, t2 = np.array(pred)[perm], np.array(truth)[perm]
    assert rmse(p2, t2) == pytest.approx(rmse(pred, truth), rel=1e-12)
    # a common scale factor scales RMSE and leaves the relative measures alone
    assert rmse(np.array(pred) * 3, np.array(truth) * 3) == pytest.approx(3 * rmse(pred, truth), rel=1e-9)
    assert error_percentage(np.array(pred) * 3, np.array(truth) * 3) == pytest.approx(
        error_percentage(pred, truth), rel=1e-9)


def table(*rows):
    return GroundTruthTable(tuple(TruthRow(i, L, W, "manual") for i, L, W in rows))


def meas(method, *rows):
    return [LeafMeasurement(i, L, W, method, 1.0, 0.0) for i, L, W in rows]


def test_evaluate_joins_on_id():
    gt = table(("a", 50, 20), ("b", 60, 30), ("c", 70, 40), ("z", 10, 5))
    ms = meas("plain", ("c", 71, 41), ("a", 50, 20), ("b", 59, 30), ("x", 99, 9))
    rep = evaluate(ms, gt)
    assert rep.unmatched_measurements == ("x",)
    assert rep.unmatched_truth == ("z",)
    assert rep.length.n == 3
    assert rep.length.residuals == {"c": 1.0, "a": 0.0, "b": -1.0}
    assert rep.length.rmse == pytest.approx(np.sqrt(2 / 3))
    assert rep.width.rmse == pytest.approx(np.sqrt(1 / 3))


def test_evaluate_errors():
    gt = table(("a", 50, 20), ("b", 60, 30))
    with pytest.raises(EvalError, match="match"):
        evaluate(meas("plain", ("q", 1, 1), ("r", 2, 1)), gt)
    with pytest.raises(EvalError, match="mix"):
        evaluate(meas("plain", ("a", 50, 20)) + meas("refined", ("b", 60, 30)), gt)
    with pytest.raises(EvalError):
        table(("a", 50, 20), ("a", 60, 30))
    with pytest.raises(EvalError):
        GroundTruthTable((TruthRow("a", 1, 1, "guess"),))


def test_truth_csv_roundtrip():
    gt = GroundTruthTable((TruthRow("a", 50.5, 20.25, "manual"), TruthRow("b", 60, 30, "synthetic")))
    assert truth_from_csv(truth_to_csv(gt)) == gt
    with pytest.raises(EvalError, match="header"):
        truth_from_csv("id,length,width,source\n")
    with pytest.raises(EvalError, match="line 2"):
        truth_from_csv("leaf_id,length_mm,width_mm,source\na,big,3,manual\n")


def test_format_table_rows():
    gt = table(("a", 50, 20), ("b", 60, 30), ("c", 70, 40))
    ms = []
    for method in ("plain", "refined", "combined", "selected"):
        ms += meas(method, ("a", 51, 20), ("b", 60, 31), ("c", 70, 40))
    reports = evaluate_by_method(ms, gt)
    assert [r.method for r in reports] == ["plain", "refined", "combined", "selected"]
    text = format_table(reports, "Scan 1")
    for word in ("Length", "Width", "RMSE(mm)", "R²", "Error Percentage(%)", "RANSAC - Combined"):
        assert word in text
    body = [l for l in text.splitlines()[3:] if l.strip()]
    assert len(body) == 8
    assert '"r_squared"' in reports_to_json(reports)


def svg_root(data):
    return ET.fromstring(data.decode())


def test_svg_structure_and_determinism():
    pred, truth = [50.5, 61, 69], [50, 60, 70]
    svg = scatter_svg(pred, truth, "Length")
    assert svg == scatter_svg(pred, truth, "Length")
    root = svg_root(svg)
    ns = {"s": "http://www.w3.org/2000/svg"}
    markers = root.findall(".//s:circle[@class='marker']", ns)
    assert len(markers) == 3
    ids = {e.get("id") for e in root.iter() if e.get("id")}
    assert {"identity", "fit"} <= ids
    text = "".join(root.itertext())
    assert "RMSE" in text and "R²" in text


def test_svg_single_point_and_constant_truth():
    root = svg_root(scatter_svg([5.0], [5.0]))
    ids = {e.get("id") for e in root.iter() if e.get("id")}
    assert "identity" in ids and "fit" not in ids
    root = svg_root(scatter_svg([1.0, 2.0], [3.0, 3.0]))
    assert "fit" not in {e.get("id") for e in root.iter() if e.get("id")}


def test_svg_escapes_title():
    svg = scatter_svg([1, 2], [1, 2], "a<b & c").decode()
    assert "a&lt;b &amp; c" in svg
    assert not re.search(r"-0\.000", svg)
