"""MSE/PSNR, Bjøntegaard delta rate and interpolator comparison reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import HalfpelError, PreconditionError
from .image_core import MAX_VALUE, as_plane


def mse(a, b) -> float:
    a, b = as_plane(a), as_plane(b)
    if a.shape != b.shape:
        raise PreconditionError(f"shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(d * d))


def psnr(a, b) -> float:
    """PSNR in dB with peak 255; ``math.inf`` for identical planes."""
    m = mse(a, b)
    return math.inf if m == 0 else 10.0 * math.log10(MAX_VALUE**2 / m)


# ---------------------------------------------------------------------------
# BD-rate
# ---------------------------------------------------------------------------


class BDRateError(HalfpelError, ValueError):
    pass


class TooFewPointsError(BDRateError):
    pass


class NoOverlapError(BDRateError):
    pass


class CurveOrderError(BDRateError):
    pass


@dataclass(frozen=True)
class RDPoint:
    rate: float
    psnr: float


@dataclass
class RDCurve:
    points: list

    def __post_init__(self):
        self.points = [p if isinstance(p, RDPoint) else RDPoint(*p) for p in self.points]
        if len(self.points) < 4:
            raise TooFewPointsError(f"an RD curve needs at least 4 points, got {len(self.points)}")
        pts = sorted(self.points, key=lambda p: p.rate)
        rates = np.array([p.rate for p in pts])
        quality = np.array([p.psnr for p in pts])
        if np.any(rates <= 0) or not np.all(np.isfinite(rates)) or not np.all(np.isfinite(quality)):
            raise CurveOrderError("rates must be positive and PSNRs finite")
        if np.any(np.diff(rates) <= 0) or np.any(np.diff(quality) <= 0):
            raise CurveOrderError("rate and PSNR must both increase strictly along the curve")
        self.points = pts

    @property
    def rates(self):
        return np.array([p.rate for p in self.points])

    @property
    def psnrs(self):
        return np.array([p.psnr for p in self.points])


def _mean_log_rate(curve: RDCurve, lo: float, hi: float) -> float:
    # cubic least-squares fit of log10(rate) against PSNR, on a [-1, 1]-mapped domain
    fit = np.polynomial.Polynomial.fit(curve.psnrs, np.log10(curve.rates), 3)
    anti = fit.integ()
    return (anti(hi) - anti(lo)) / (hi - lo)


def bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    """Average rate difference of ``test`` over ``anchor`` in percent (negative = savings)."""
    if not isinstance(anchor, RDCurve):
        anchor = RDCurve(anchor)
    if not isinstance(test, RDCurve):
        test = RDCurve(test)
    lo = max(anchor.psnrs.min(), test.psnrs.min())
    hi = min(anchor.psnrs.max(), test.psnrs.max())
    if hi <= lo:
        raise NoOverlapError(f"PSNR ranges do not overlap ({lo:.3f} >= {hi:.3f})")
    delta = _mean_log_rate(test, lo, hi) - _mean_log_rate(anchor, lo, hi)
    return (10.0**delta - 1.0) * 100.0


# ---------------------------------------------------------------------------
# Per-sequence results and comparison
# ---------------------------------------------------------------------------


@dataclass
class SequenceResult:
    """One RD curve plus prediction SSE, one entry per QP."""

    name: str
    qps: list = field(default_factory=list)
    rate: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    sse: list = field(default_factory=list)

    def add(self, qp, rate, psnr_db, sse):
        self.qps.append(int(qp))
        self.rate.append(float(rate))
        self.psnr.append(float(psnr_db))
        self.sse.append(float(sse))

    def curve(self) -> RDCurve:
        return RDCurve(list(zip(self.rate, self.psnr)))


RD_HEADER = ["sequence", "qp", "rate", "psnr", "sse"]


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


def write_rd_csv(results, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RD_HEADER)
        for r in results:
            for row in zip(r.qps, r.rate, r.psnr, r.sse):
                w.writerow([r.name, row[0], _fmt(row[1]), _fmt(row[2]), _fmt(row[3])])


def read_rd_csv(path) -> list:
    """Parse an RD CSV into :class:`SequenceResult` objects, in file order."""
    out: dict[str, SequenceResult] = {}
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != RD_HEADER:
                raise BDRateError(f"{path}: expected header {','.join(RD_HEADER)}")
            for lineno, row in enumerate(reader, 2):
                if not row:
                    continue
                if len(row) != len(RD_HEADER):
                    raise BDRateError(f"{path}:{lineno}: expected {len(RD_HEADER)} fields")
                name, qp, rate, q, sse = row
                if "inf" in rate.lower() or "inf" in sse.lower():
                    raise BDRateError(f"{path}:{lineno}: 'inf' only allowed in the psnr column")
                out.setdefault(name, SequenceResult(name)).add(int(qp), float(rate), float(q), float(sse))
    except ValueError as exc:
        if isinstance(exc, BDRateError):
            raise
        raise BDRateError(f"{path}: {exc}") from None
    if not out:
        raise BDRateError(f"{path}: no data rows")
    return list(out.values())


def mean_bd_rate(anchor_results, test_results) -> float:
    """Mean per-sequence BD-rate over the sequences of two matched result sets."""
    rows = compare_rows(anchor_results, test_results)
    return rows[-1]["bd_rate"]


def compare_rows(anchor_results, test_results) -> list:
    anchors = {r.name: r for r in anchor_results}
    tests = {r.name: r for r in test_results}
    if set(anchors) != set(tests):
        raise PreconditionError(f"sequence sets differ: {sorted(anchors)} vs {sorted(tests)}")
    qps = None
    rows = []
    for name in anchors:
        a, t = anchors[name], tests[name]
        if a.qps != t.qps:
            raise PreconditionError(f"{name}: QP sets differ")
        if qps is None:
            qps = a.qps
        elif qps != a.qps:
            raise PreconditionError("all sequences must share one QP set")
        row = {"sequence": name}
        for i, qp in enumerate(a.qps):
            row[f"dpsnr_qp{qp}"] = t.psnr[i] - a.psnr[i]
        for i, qp in enumerate(a.qps):
            row[f"dsse_qp{qp}"] = t.sse[i] - a.sse[i]
        row["bd_rate"] = bd_rate(a.curve(), t.curve())
        rows.append(row)
    if not rows:
        raise PreconditionError("no sequences to compare")
    mean_row = {"sequence": "Overall"}
    for key in rows[0]:
        if key != "sequence":
            mean_row[key] = float(np.mean([r[key] for r in rows]))
    rows.append(mean_row)
    return rows


def compare_report(anchor_results, test_results, out=None) -> list:
    """Per-sequence PSNR/SSE deltas and BD-rate, plus an ``Overall`` mean row."""
    rows = compare_rows(anchor_results, test_results)
    if out is not None:
        write_compare_csv(rows, out)
    return rows


def write_compare_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        keys = list(rows[0].keys())
        w.writerow(keys)
        for r in rows:
            w.writerow([r["sequence"]] + [_fmt(r[k]) for k in keys[1:]])


def read_compare_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [{k: (v if k == "sequence" else float(v)) for k, v in row.items()} for row in reader]


def load_results(path):
    return read_rd_csv(Path(path))
