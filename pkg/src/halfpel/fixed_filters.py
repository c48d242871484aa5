"""Fixed half-pel interpolators: the 8-tap DCT-based filter, 2-tap average and bilinear.

All outputs have the input's size. Sample ``out[y, x]`` of the horizontal
plane sits at ``(x + 0.5, y)``; vertical at ``(x, y + 0.5)``; diagonal at
``(x + 0.5, y + 0.5)``. Arithmetic is real-valued with a single final clip.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import PreconditionError
from .image_core import MAX_VALUE, as_plane

POSITIONS = ("H", "V", "D")


@dataclass(frozen=True)
class InterpKernel:
    taps: tuple
    scale: int

    def __post_init__(self):
        taps = tuple(int(t) for t in self.taps)
        if len(taps) == 0 or len(taps) % 2:
            raise PreconditionError("half-pel kernels need an even number of taps")
        if sum(taps) != self.scale or self.scale <= 0:
            raise PreconditionError(f"taps sum to {sum(taps)}, scale is {self.scale}")
        if taps != taps[::-1]:
            raise PreconditionError("half-pel kernel must be symmetric")
        object.__setattr__(self, "taps", taps)

    @property
    def offset(self) -> int:
        # first tap multiplies sample x - (n/2 - 1)
        return -(len(self.taps) // 2 - 1)


HEVC_HALF = InterpKernel((-1, 4, -11, 40, 40, -11, 4, -1), 64)
AVG2 = InterpKernel((1, 1), 2)
BILINEAR_HALF = AVG2


def _h(plane, kernel):
    return _kernels.filter_rows(plane, np.asarray(kernel.taps, dtype=np.float64), kernel.offset) / kernel.scale


def _v(plane, kernel):
    return _kernels.filter_cols(plane, np.asarray(kernel.taps, dtype=np.float64), kernel.offset) / kernel.scale


def interp_half_h(plane, kernel: InterpKernel = HEVC_HALF) -> np.ndarray:
    return np.clip(_h(as_plane(plane), kernel), 0.0, MAX_VALUE)


def interp_half_v(plane, kernel: InterpKernel = HEVC_HALF) -> np.ndarray:
    return np.clip(_v(as_plane(plane), kernel), 0.0, MAX_VALUE)


def interp_half_d(plane, kernel: InterpKernel = HEVC_HALF) -> np.ndarray:
    """Horizontal pass, then vertical pass on the unclipped intermediate."""
    return np.clip(_v(_h(as_plane(plane), kernel), kernel), 0.0, MAX_VALUE)


def interp_half(plane, position: str, kernel: InterpKernel = HEVC_HALF) -> np.ndarray:
    fn = {"H": interp_half_h, "V": interp_half_v, "D": interp_half_d}[_position(position)]
    return fn(plane, kernel)


def average2_half(plane, position: str) -> np.ndarray:
    """Mean of the 2 (H/V) or 4 (D) nearest integer samples."""
    return interp_half(plane, position, AVG2)


def _position(position: str) -> str:
    pos = str(position).upper()
    if pos not in POSITIONS:
        raise PreconditionError(f"position must be one of H, V, D; got {position!r}")
    return pos
