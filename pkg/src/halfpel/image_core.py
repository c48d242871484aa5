"""Planes, PGM I/O, blurring, phase extraction and the intra-coding surrogate.

A plane is a 2-D ``float64`` numpy array indexed ``[y, x]`` holding samples on
the 0..255 scale. Values are only rounded and clipped when written to a file.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import _kernels
from .errors import HalfpelError, PreconditionError

BIT_DEPTH = 8
MAX_VALUE = 255.0


class PgmError(HalfpelError, ValueError):
    pass


class PgmHeaderError(PgmError):
    pass


class PgmMaxvalError(PgmError):
    pass


class PgmTruncatedError(PgmError):
    pass


def as_plane(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise PreconditionError(f"a plane must be a non-empty 2-D array, got shape {arr.shape}")
    return arr


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def to_bytes(plane: np.ndarray) -> np.ndarray:
    """Round half away from zero and clip to uint8."""
    return np.clip(round_half_away(as_plane(plane)), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def load_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM with maxval 255."""
    data = Path(path).read_bytes()
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise PgmHeaderError(f"{path}: incomplete PGM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P5":
        raise PgmHeaderError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise PgmHeaderError(f"{path}: non-numeric PGM header field") from None
    if width < 1 or height < 1:
        raise PgmHeaderError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise PgmMaxvalError(f"{path}: maxval {maxval} unsupported (need 255)")
    if pos >= len(data) or data[pos : pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise PgmTruncatedError(f"{path}: missing payload")
    pos += 1
    need = width * height
    payload = data[pos : pos + need]
    if len(payload) < need:
        raise PgmTruncatedError(f"{path}: expected {need} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).astype(np.float64)


def save_pgm(plane, path) -> None:
    samples = to_bytes(plane)
    height, width = samples.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (width, height))
        fh.write(samples.tobytes())


# ---------------------------------------------------------------------------
# Blur
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlurKernel:
    """Symmetric, odd-length, unit-gain separable kernel."""

    taps: tuple

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim != 1 or taps.size % 2 == 0:
            raise PreconditionError("blur kernel needs an odd number of taps")
        if abs(taps.sum() - 1.0) > 1e-12:
            raise PreconditionError(f"blur taps sum to {taps.sum()!r}, not 1")
        if not np.allclose(taps, taps[::-1], rtol=0, atol=1e-15):
            raise PreconditionError("blur kernel must be symmetric")
        object.__setattr__(self, "taps", tuple(float(t) for t in taps))

    @classmethod
    def gaussian(cls, sigma: float = 0.8, size: int = 5) -> "BlurKernel":
        half = size // 2
        x = np.arange(-half, half + 1, dtype=np.float64)
        g = np.exp(-0.5 * (x / sigma) ** 2)
        g /= g.sum()
        g = 0.5 * (g + g[::-1])
        # absorb the last ulp of rounding into the centre tap
        g[half] += 1.0 - g.sum()
        return cls(tuple(g))


DEFAULT_BLUR = BlurKernel.gaussian(0.8, 5)


def blur(plane, kernel: BlurKernel = DEFAULT_BLUR) -> np.ndarray:
    p = as_plane(plane)
    taps = np.asarray(kernel.taps)
    off = -(len(taps) // 2)
    return _kernels.filter_cols(_kernels.filter_rows(p, taps, off), taps, off)


# ---------------------------------------------------------------------------
# Phases
# ---------------------------------------------------------------------------


class PhaseSet(NamedTuple):
    """Integer phase ``a`` and the half-pel phases ``b`` (right), ``h`` (below), ``j`` (diagonal)."""

    a: np.ndarray
    b: np.ndarray
    h: np.ndarray
    j: np.ndarray


def extract_phases(plane) -> PhaseSet:
    p = as_plane(plane)
    height, width = p.shape
    if height % 2 or width % 2:
        raise PreconditionError(f"phase extraction needs even dimensions, got {width}x{height}")
    return PhaseSet(
        p[0::2, 0::2].copy(),
        p[0::2, 1::2].copy(),
        p[1::2, 0::2].copy(),
        p[1::2, 1::2].copy(),
    )


def interleave_phases(phases: PhaseSet) -> np.ndarray:
    a, b, h, j = (as_plane(p) for p in phases)
    if not (a.shape == b.shape == h.shape == j.shape):
        raise PreconditionError("phase planes differ in size")
    height, width = a.shape
    out = np.empty((2 * height, 2 * width), dtype=np.float64)
    out[0::2, 0::2] = a
    out[0::2, 1::2] = b
    out[1::2, 0::2] = h
    out[1::2, 1::2] = j
    return out


def crop_even(plane) -> np.ndarray:
    """Drop the last row/column where needed to make both dimensions even."""
    p = as_plane(plane)
    return p[: p.shape[0] - p.shape[0] % 2, : p.shape[1] - p.shape[1] % 2]


# ---------------------------------------------------------------------------
# Intra-coding surrogate
# ---------------------------------------------------------------------------

BLOCK = 8


def dct_matrix(n: int = BLOCK) -> np.ndarray:
    """Orthonormal DCT-II basis, rows are frequencies."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    c = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    c[0] /= np.sqrt(2.0)
    return c


_DCT8 = dct_matrix(BLOCK)


def qstep(qp: int) -> float:
    return 2.0 ** ((qp - 4) / 6.0)


def _to_blocks(p: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    height, width = p.shape
    ph = -height % BLOCK
    pw = -width % BLOCK
    padded = np.pad(p, ((0, ph), (0, pw)), mode="edge")
    nby, nbx = padded.shape[0] // BLOCK, padded.shape[1] // BLOCK
    blocks = padded.reshape(nby, BLOCK, nbx, BLOCK).transpose(0, 2, 1, 3)
    return blocks, (nby, nbx)


def _from_blocks(blocks: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    nby, nbx = blocks.shape[:2]
    full = blocks.transpose(0, 2, 1, 3).reshape(nby * BLOCK, nbx * BLOCK)
    return full[: shape[0], : shape[1]]


def block_dct(p: np.ndarray) -> np.ndarray:
    blocks, _ = _to_blocks(as_plane(p))
    return _DCT8 @ blocks @ _DCT8.T


def block_idct(coeffs: np.ndarray, shape) -> np.ndarray:
    return _from_blocks(_DCT8.T @ coeffs @ _DCT8, shape)


def degrade_intra_surrogate(plane, qp: int) -> np.ndarray:
    """Stand-in for intra coding: 8x8 DCT, uniform rounding quantizer, inverse DCT, clip.

    The step size follows the usual QP mapping ``2 ** ((qp - 4) / 6)``.
    """
    if not (0 <= qp <= 51) or int(qp) != qp:
        raise PreconditionError(f"qp must be an integer in 0..51, got {qp}")
    p = as_plane(plane)
    step = qstep(int(qp))
    levels = round_half_away(block_dct(p) / step)
    return np.clip(block_idct(levels * step, p.shape), 0.0, MAX_VALUE)


# ---------------------------------------------------------------------------
# Bicubic resampling
# ---------------------------------------------------------------------------

CUBIC_A = -0.5  # Catmull-Rom


def _cubic(x: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Weights mapping ``n_in`` samples onto ``n_out``, pixel centres aligned.

    Output sample ``i`` sits at input coordinate ``(i + 0.5) * n_in / n_out - 0.5``
    (the usual image-resampling grid). When shrinking, the kernel is widened
    by the inverse scale to antialias. Edges replicate.
    """
    scale = n_out / n_in
    kscale = min(1.0, scale)
    support = 2.0 / kscale
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        centre = (i + 0.5) / scale - 0.5
        lo = int(np.floor(centre - support)) + 1
        taps = np.arange(lo, int(np.floor(centre + support)) + 1)
        w = _cubic((taps - centre) * kscale)
        w /= w.sum()
        np.add.at(m[i], np.clip(taps, 0, n_in - 1), w)
    return m


def resize_bicubic(plane, height: int, width: int) -> np.ndarray:
    p = as_plane(plane)
    rows = _resize_matrix(p.shape[0], height)
    cols = _resize_matrix(p.shape[1], width)
    return rows @ p @ cols.T
