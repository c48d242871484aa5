import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from halfpel.errors import PreconditionError
from halfpel.eval_report import (
    BDRateError,
    CurveOrderError,
    NoOverlapError,
    RDCurve,
    SequenceResult,
    TooFewPointsError,
    bd_rate,
    compare_report,
    mean_bd_rate,
    mse,
    psnr,
    read_compare_csv,
    read_rd_csv,
    write_rd_csv,
)

ANCHOR = [(1000.0, 32.0), (1800.0, 34.5), (3100.0, 37.0), (5600.0, 39.2)]


def scaled(points, c):
    return [(r * c, q) for r, q in points]


def test_mse_psnr(rng):
    a = rng.uniform(0, 255, (6, 7))
    assert mse(a, a) == 0.0 and math.isinf(psnr(a, a))
    assert mse(a, a + 1) == pytest.approx(1.0)
    assert psnr(a, a + 1) == pytest.approx(20 * math.log10(255), abs=1e-9)
    assert round(psnr(a, a + 1), 2) == 48.13
    b = rng.uniform(0, 255, (6, 7))
    ref = sum((a[i, j] - b[i, j]) ** 2 for i in range(6) for j in range(7)) / 42
    assert abs(mse(a, b) - ref) < 1e-12 * max(1.0, ref)
    assert psnr(a, b) == pytest.approx(10 * math.log10(255**2 / mse(a, b)))
    with pytest.raises(PreconditionError):
        mse(a, b[:, :3])


def test_bd_rate_identity_exact():
    assert bd_rate(RDCurve(ANCHOR), RDCurve(ANCHOR)) == 0.0


@pytest.mark.parametrize("c,expect", [(1.1, 10.0), (0.9, -10.0), (0.5, -50.0)])
def test_bd_rate_scaling(c, expect):
    assert abs(bd_rate(RDCurve(ANCHOR), RDCurve(scaled(ANCHOR, c))) - expect) < 1e-9


@given(st.floats(0.3, 3.0), st.floats(0.2, 2.0), st.floats(0.5, 3.0))
@settings(max_examples=40, deadline=None)
def test_bd_rate_scaling_property(c, slope, gap):
    pts = [(100.0 * (1 + slope) ** i, 30.0 + gap * i) for i in range(5)]
    assert abs(bd_rate(pts, scaled(pts, c)) - (c - 1) * 100) < 1e-9


def test_bd_rate_antisymmetric_sign():
    test = [(r * (1.0 + 0.02 * i), q + 0.1) for i, (r, q) in enumerate(ANCHOR)]
    a, b = bd_rate(ANCHOR, test), bd_rate(test, ANCHOR)
    assert a != 0 and np.sign(a) == -np.sign(b)


def test_bd_rate_errors():
    with pytest.raises(TooFewPointsError):
        RDCurve(ANCHOR[:3])
    with pytest.raises(CurveOrderError):
        RDCurve([(1, 30), (2, 29), (3, 31), (4, 32)])
    with pytest.raises(CurveOrderError):
        RDCurve([(0, 30), (2, 31), (3, 32), (4, 33)])
    far = [(r, q + 20) for r, q in ANCHOR]
    with pytest.raises(NoOverlapError):
        bd_rate(ANCHOR, far)


def test_curve_sorted_by_rate():
    c = RDCurve(list(reversed(ANCHOR)))
    assert list(c.rates) == [p[0] for p in ANCHOR]


def _result(name, points, sse=(1.0, 2.0, 3.0, 4.0), qps=(22, 27, 32, 37)):
    r = SequenceResult(name)
    for q, (rate, p), s in zip(reversed(qps), points, reversed(sse)):
        r.add(q, rate, p, s)
    return r


def test_rd_csv_round_trip(tmp_path):
    results = [_result("a", ANCHOR), _result("b", scaled(ANCHOR, 2.0))]
    path = tmp_path / "rd.csv"
    write_rd_csv(results, path)
    assert path.read_text().splitlines()[0] == "sequence,qp,rate,psnr,sse"
    back = read_rd_csv(path)
    assert [(r.name, r.qps, r.rate, r.psnr, r.sse) for r in back] == [
        (r.name, r.qps, r.rate, r.psnr, r.sse) for r in results
    ]


@pytest.mark.parametrize(
    "text",
    [
        "seq,qp,rate\n",
        "sequence,qp,rate,psnr,sse\na,22,1.0,30\n",
        "sequence,qp,rate,psnr,sse\na,22,x,30,1\n",
        "sequence,qp,rate,psnr,sse\na,22,inf,30,1\n",
        "sequence,qp,rate,psnr,sse\n",
    ],
)
def test_rd_csv_malformed(tmp_path, text):
    (tmp_path / "bad.csv").write_text(text)
    with pytest.raises(BDRateError):
        read_rd_csv(tmp_path / "bad.csv")


def test_compare_identical(tmp_path):
    results = [_result("a", ANCHOR), _result("b", scaled(ANCHOR, 1.5))]
    rows = compare_report(results, results, tmp_path / "cmp.csv")
    assert rows[-1]["sequence"] == "Overall"
    for row in rows:
        assert all(v == 0.0 for k, v in row.items() if k != "sequence")


def test_compare_mean_row_and_round_trip(tmp_path):
    anchors = [_result("a", ANCHOR), _result("b", scaled(ANCHOR, 2.0))]
    tests = [_result("a", scaled(ANCHOR, 1.1)), _result("b", scaled(ANCHOR, 2.0 * 0.8))]
    rows = compare_report(anchors, tests, tmp_path / "cmp.csv")
    assert rows[-1]["bd_rate"] == pytest.approx((rows[0]["bd_rate"] + rows[1]["bd_rate"]) / 2)
    assert rows[-1]["bd_rate"] == pytest.approx(-5.0, abs=1e-9)
    assert mean_bd_rate(anchors, tests) == rows[-1]["bd_rate"]
    assert "dpsnr_qp22" in rows[0] and "dsse_qp37" in rows[0]
    assert read_compare_csv(tmp_path / "cmp.csv") == rows


def test_compare_mismatched_sets():
    with pytest.raises(PreconditionError):
        compare_report([_result("a", ANCHOR)], [_result("b", ANCHOR)])
