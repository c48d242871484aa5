"""Block motion estimation / compensation with pluggable half-pel interpolators.

Motion vectors are in half-pel units. A vector ``(dx, dy)`` predicts block
sample ``(x, y)`` from plane ``[a, b, h, j][(dx & 1) + 2 * (dy & 1)]`` at
``(x + (dx >> 1), y + (dy >> 1))``; reads outside the frame replicate the
edge.
"""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import astuple, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import _kernels
from .cnn_engine import Network, interpolate_plane, load_weights
from .datagen import MODEL_QPS, SR_POSITION, select_model_qp
from .errors import ConfigError, PreconditionError
from .eval_report import SequenceResult
from .fixed_filters import AVG2, HEVC_HALF, interp_half_d, interp_half_h, interp_half_v
from .image_core import (
    as_plane,
    block_dct,
    block_idct,
    degrade_intra_surrogate,
    extract_phases,
    load_pgm,
    qstep,
    resize_bicubic,
    round_half_away,
)

log = logging.getLogger(__name__)

KINDS = ("DCTIF", "CNN", "AVG2", "SR_ANCHOR")
MV_BITS_PER_BLOCK = 6


class HalfPelField(NamedTuple):
    a: np.ndarray
    b: np.ndarray
    h: np.ndarray
    j: np.ndarray


def cnn_weight_name(position: str, qp: int) -> str:
    return f"cnnif_{position.lower()}_qp{qp}.cnif"


@dataclass
class InterpolatorSpec:
    """Which interpolator to use.

    For ``CNN`` either ``weights`` maps each of H/V/D to a weight file (or a
    loaded :class:`Network`), or ``model_dir`` holds the bank
    ``cnnif_{h,v,d}_qp{22,27,32,37}.cnif`` and ``qp`` picks the nearest model.
    ``SR_ANCHOR`` needs ``weights["S"]``.
    """

    kind: str
    weights: dict = field(default_factory=dict)
    qp: int | None = None
    model_dir: str | None = None

    def __post_init__(self):
        self.kind = self.kind.upper()
        if self.kind not in KINDS:
            raise ConfigError(f"unknown interpolator kind {self.kind!r}")
        if self.kind == "CNN":
            if self.model_dir is None and set(self.weights) < {"H", "V", "D"}:
                raise ConfigError("CNN interpolator needs weights for H, V and D")
            if self.model_dir is not None and self.qp is None:
                raise ConfigError("a CNN model bank needs a qp to select from")
        if self.kind == "SR_ANCHOR" and SR_POSITION not in self.weights:
            raise ConfigError("SR anchor needs a super-resolution network")

    def with_qp(self, qp):
        return InterpolatorSpec(self.kind, dict(self.weights), qp, self.model_dir)

    def networks(self) -> dict:
        """Load (or pass through) the networks this spec needs, checking tags."""
        if self.kind == "CNN":
            model_qp = None if self.qp is None else select_model_qp(self.qp)
            out = {}
            for pos in ("H", "V", "D"):
                src = self.weights.get(pos)
                if src is None:
                    src = Path(self.model_dir) / cnn_weight_name(pos, model_qp)
                out[pos] = _resolve(src, pos, model_qp)
            return out
        if self.kind == "SR_ANCHOR":
            return {SR_POSITION: _resolve(self.weights[SR_POSITION], None, None)}
        return {}


def _resolve(src, position, qp):
    if isinstance(src, Network):
        if position is not None and src.position != position:
            raise ConfigError(f"network tagged {src.position} supplied for position {position}")
        return src
    try:
        return load_weights(src, position=position, qp=qp)
    except FileNotFoundError:
        raise ConfigError(f"weight file not found: {src}") from None


def build_halfpel_field(ref, spec: InterpolatorSpec, networks: dict | None = None) -> HalfPelField:
    ref = as_plane(ref)
    if spec.kind in ("DCTIF", "AVG2"):
        k = HEVC_HALF if spec.kind == "DCTIF" else AVG2
        return HalfPelField(ref, interp_half_h(ref, k), interp_half_v(ref, k), interp_half_d(ref, k))
    nets = networks if networks is not None else spec.networks()
    if spec.kind == "SR_ANCHOR":
        return sr_anchor_field(ref, nets[SR_POSITION])
    return HalfPelField(
        ref,
        interpolate_plane(nets["H"], ref),
        interpolate_plane(nets["V"], ref),
        interpolate_plane(nets["D"], ref),
    )


def upscale2(ref) -> np.ndarray:
    """Bicubic x2 enlargement on the standard centre-aligned resampling grid."""
    ref = as_plane(ref)
    return resize_bicubic(ref, 2 * ref.shape[0], 2 * ref.shape[1])


def sr_anchor_field(ref, net: Network) -> HalfPelField:
    """Half-pel planes taken from phases 1-3 of a super-resolved x2 frame.

    Phase 0 of the enlarged frame is discarded; the integer plane is the
    reference itself.
    """
    ref = as_plane(ref)
    phases = extract_phases(interpolate_plane(net, upscale2(ref)))
    return HalfPelField(ref, phases.b, phases.h, phases.j)


# ---------------------------------------------------------------------------
# Estimation and compensation
# ---------------------------------------------------------------------------


def motion_estimate(cur, field: HalfPelField, block_size: int = 16, search_range: int = 8):
    """Full integer-pel SAD search in +-search_range, then 8-neighbour half-pel refinement.

    Returns ``(mvs, sads)``: ``mvs[by, bx] = (dx, dy)`` in half-pel units and the
    winning SAD per block. Ties prefer smaller ``|dx| + |dy|``, then smaller
    ``dy``, then smaller ``dx``.
    """
    cur = as_plane(cur)
    if cur.shape != field.a.shape:
        raise PreconditionError("current frame and reference differ in size")
    if min(cur.shape) < block_size:
        raise PreconditionError(f"frame {cur.shape} smaller than block size {block_size}")
    if search_range < 0:
        raise PreconditionError("search_range must be non-negative")
    return _kernels.block_search(cur, field.a, field.b, field.h, field.j, block_size, search_range)


def motion_compensate(field: HalfPelField, mvs, block_size: int = 16) -> np.ndarray:
    height, width = field.a.shape
    nby, nbx = -(-height // block_size), -(-width // block_size)
    mvs = np.asarray(mvs)
    if mvs.shape != (nby, nbx, 2):
        raise PreconditionError(f"MV grid {mvs.shape} does not match block partition {(nby, nbx, 2)}")
    pred = np.empty((height, width))
    for by in range(nby):
        rows = np.arange(by * block_size, min(height, (by + 1) * block_size))
        for bx in range(nbx):
            cols = np.arange(bx * block_size, min(width, (bx + 1) * block_size))
            dx, dy = int(mvs[by, bx, 0]), int(mvs[by, bx, 1])
            plane = field[(dx & 1) + 2 * (dy & 1)]
            ry = np.clip(rows + (dy >> 1), 0, height - 1)
            rx = np.clip(cols + (dx >> 1), 0, width - 1)
            pred[np.ix_(rows, cols)] = plane[np.ix_(ry, rx)]
    return pred


def entropy_bits(symbols) -> float:
    """Order-0 entropy in bits per symbol."""
    _, counts = np.unique(np.asarray(symbols).ravel(), return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum()) + 0.0


# ---------------------------------------------------------------------------
# Sequence simulation
# ---------------------------------------------------------------------------


@dataclass
class FrameStats:
    frame: str
    sse: float
    psnr_db: float
    mean_sad: float
    int_mv_count: int
    half_mv_count: int
    entropy_bps: float


REPORT_HEADER = [f.name for f in fields(FrameStats)]


@dataclass
class McReport:
    frames: list
    total: FrameStats


def _mse_psnr(sse, n):
    return psnr_from_mse(sse / n)


def psnr_from_mse(mse: float) -> float:
    return math.inf if mse == 0 else 10.0 * math.log10(255.0**2 / mse)


def _check_frames(frames):
    frames = [as_plane(f) for f in frames]
    if len(frames) < 2:
        raise PreconditionError("need at least two frames")
    if any(f.shape != frames[0].shape for f in frames):
        raise PreconditionError("frames differ in size")
    return frames


def simulate_sequence(frames, spec: InterpolatorSpec, block_size: int = 16, search_range: int = 8) -> McReport:
    """Predict every frame from the original previous frame (open loop)."""
    frames = _check_frames(frames)
    nets = spec.networks()
    stats, residuals, all_sads = [], [], []
    total_sse = 0.0
    n_int = n_half = 0
    for t in range(1, len(frames)):
        cur = frames[t]
        field = build_halfpel_field(frames[t - 1], spec, nets)
        mvs, sads = motion_estimate(cur, field, block_size, search_range)
        pred = motion_compensate(field, mvs, block_size)
        resid = cur - pred
        sse = float(np.sum(resid * resid))
        is_int = ((mvs[..., 0] & 1) == 0) & ((mvs[..., 1] & 1) == 0)
        rounded = round_half_away(resid)
        stats.append(
            FrameStats(
                str(t),
                sse,
                _mse_psnr(sse, resid.size),
                float(sads.mean()),
                int(is_int.sum()),
                int((~is_int).sum()),
                entropy_bits(rounded),
            )
        )
        residuals.append(rounded.ravel())
        all_sads.append(sads.ravel())
        total_sse += sse
        n_int += stats[-1].int_mv_count
        n_half += stats[-1].half_mv_count
    n_pix = sum(r.size for r in residuals)
    total = FrameStats(
        "all",
        total_sse,
        _mse_psnr(total_sse, n_pix),
        float(np.concatenate(all_sads).mean()),
        n_int,
        n_half,
        entropy_bits(np.concatenate(residuals)),
    )
    return McReport(stats, total)


def rd_sweep(
    frames,
    spec: InterpolatorSpec,
    qps=MODEL_QPS,
    block_size: int = 16,
    search_range: int = 8,
    name: str = "seq",
) -> SequenceResult:
    """Rate/PSNR points, one per QP, for BD-rate comparison.

    At each QP the reference is the intra-surrogate reconstruction of the
    previous original frame; the prediction residual is coded by the same
    8x8 DCT quantizer. Rate = order-0 entropy of the quantized levels plus
    a flat motion-vector cost, in bits per sample. PSNR is that of the
    reconstruction. ``sse`` records the prediction (pre-residual) error.
    """
    frames = _check_frames(frames)
    result = SequenceResult(name)
    for qp in qps:
        qspec = spec.with_qp(qp)
        nets = qspec.networks()
        levels, recon_sse, pred_sse, n_pix, n_blocks = [], 0.0, 0.0, 0, 0
        step = qstep(qp)
        for t in range(1, len(frames)):
            cur = frames[t]
            ref = degrade_intra_surrogate(frames[t - 1], qp)
            field = build_halfpel_field(ref, qspec, nets)
            mvs, _ = motion_estimate(cur, field, block_size, search_range)
            pred = motion_compensate(field, mvs, block_size)
            resid = cur - pred
            lv = round_half_away(block_dct(resid) / step)
            recon = np.clip(pred + block_idct(lv * step, resid.shape), 0.0, 255.0)
            levels.append(lv.ravel())
            recon_sse += float(np.sum((cur - recon) ** 2))
            pred_sse += float(np.sum(resid * resid))
            n_pix += cur.size
            n_blocks += mvs.shape[0] * mvs.shape[1]
        lv_all = np.concatenate(levels)
        bits = entropy_bits(lv_all) * lv_all.size + MV_BITS_PER_BLOCK * n_blocks
        result.add(qp, bits / n_pix, _mse_psnr(recon_sse, n_pix), pred_sse)
    return result


# ---------------------------------------------------------------------------
# Frame directories and report CSV
# ---------------------------------------------------------------------------

_FRAME_RE = re.compile(r"^frame_(\d{4})\.pgm$")


def frame_paths(directory) -> list:
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"frame directory not found: {directory}")
    numbered = sorted(
        (int(m.group(1)), p) for p in directory.iterdir() if (m := _FRAME_RE.match(p.name))
    )
    if len(numbered) < 2:
        raise ConfigError(f"{directory}: need at least two frame_NNNN.pgm files")
    idx = [i for i, _ in numbered]
    if idx != list(range(idx[0], idx[0] + len(idx))):
        raise ConfigError(f"{directory}: frame numbering has gaps: {idx}")
    return [p for _, p in numbered]


def load_frames(directory) -> list:
    return [load_pgm(p) for p in frame_paths(directory)]


def _fmt(v):
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


def write_report_csv(report: McReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for row in report.frames + [report.total]:
            w.writerow([_fmt(v) for v in astuple(row)])


def read_report_csv(path) -> McReport:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != REPORT_HEADER:
            raise ConfigError(f"{path}: unexpected header {header}")
        rows = []
        for r in reader:
            rows.append(FrameStats(r[0], float(r[1]), float(r[2]), float(r[3]), int(r[4]), int(r[5]), float(r[6])))
    if not rows or rows[-1].frame != "all":
        raise ConfigError(f"{path}: missing aggregate row")
    return McReport(rows[:-1], rows[-1])
