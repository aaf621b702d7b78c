"""Uniform symmetric grid, nearest-point quantizer and the discretized
Gaussian channel between the two decision makers.

The grid holds ``L`` points spaced ``delta`` apart and centred on zero.
An observation ``y2 = x1 + w`` with ``w ~ N(0, 1)`` is quantized to the
nearest grid point; the channel row for ``x1`` is the probability of each
quantization cell, with the two outermost cells absorbing the tails.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc

__all__ = [
    "Grid",
    "ChannelModel",
    "build_grid",
    "grid_for",
    "quantize",
    "quantize_index",
    "normal_cdf",
    "channel_row_exact",
    "channel_row_banded",
    "default_band",
    "build_channel",
]

_SQRT2 = math.sqrt(2.0)

# Noise standard deviations covered by the default channel band.
DEFAULT_BAND_SD = 8.0


def normal_cdf(x):
    """Standard normal CDF through ``erfc`` (accurate in the left tail)."""
    return 0.5 * erfc(-np.asarray(x, dtype=float) / _SQRT2)


def normal_sf(x):
    """Standard normal upper tail ``1 - cdf(x)`` (accurate in the right tail)."""
    return 0.5 * erfc(np.asarray(x, dtype=float) / _SQRT2)


@dataclass(frozen=True)
class Grid:
    """The point set ``{-delta*(L-1)/2, ..., delta*(L-1)/2}``."""

    L: int
    delta: float
    points: np.ndarray = field(repr=False, compare=False)

    @property
    def center(self) -> int:
        """Index of the zero point."""
        return (self.L - 1) // 2

    @property
    def extent(self) -> float:
        return self.delta * self.center

    def index_of(self, value: float, rtol: float = 1e-9) -> int:
        """Index of the grid point equal to ``value``; raises if off-grid."""
        i = quantize_index(self, value)
        if abs(self.points[i] - value) > rtol * max(1.0, self.delta):
            raise ValueError(f"{value!r} is not a point of the grid (L={self.L}, delta={self.delta})")
        return i


def build_grid(L: int, delta: float) -> Grid:
    if int(L) != L or L < 1 or L % 2 == 0:
        raise ValueError(f"L must be a positive odd integer, got {L!r}")
    if not (delta > 0 and math.isfinite(delta)):
        raise ValueError(f"delta must be positive and finite, got {delta!r}")
    L = int(L)
    delta = float(delta)
    c = (L - 1) // 2
    points = delta * np.arange(-c, c + 1, dtype=float)
    points.setflags(write=False)
    return Grid(L, delta, points)


def grid_for(L: int, sigma: float, span: float = 10.0) -> Grid:
    """Grid with ``delta = span*sigma/(L-1)``, so its extreme point is ``span*sigma/2``."""
    if L < 3:
        raise ValueError("the spacing rule needs L >= 3")
    return build_grid(L, span * sigma / (L - 1))


def _round_half_away(t):
    return np.sign(t) * np.floor(np.abs(t) + 0.5)


def quantize_index(grid: Grid, y):
    """Index of the grid point nearest ``y``; midpoints go away from zero.

    Accepts a scalar or an array and returns the same shape.
    """
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("quantize needs finite input")
    t = _round_half_away(y / grid.delta)
    idx = np.clip(t, -grid.center, grid.center).astype(np.int64) + grid.center
    return int(idx) if idx.ndim == 0 else idx


def quantize(grid: Grid, y):
    """Nearest grid point to ``y``, clamped to the extreme points."""
    idx = quantize_index(grid, y)
    return float(grid.points[idx]) if np.ndim(idx) == 0 else grid.points[idx]


def _cell_probabilities(grid: Grid, x1: float, lo: int, hi: int) -> np.ndarray:
    """P(cell j | x1) for cell indices ``lo..hi`` (inclusive), tails absorbed at the ends."""
    j = np.arange(lo, hi + 1)
    centres = grid.delta * (j - grid.center)
    upper = centres + 0.5 * grid.delta - x1
    lower = centres - 0.5 * grid.delta - x1
    # Difference of whichever tail is smaller keeps full relative precision.
    right = lower > 0
    p = np.where(right, normal_sf(lower) - normal_sf(upper), normal_cdf(upper) - normal_cdf(lower))
    if lo == 0:
        p[0] = normal_cdf(upper[0])
    if hi == grid.L - 1:
        p[-1] = normal_sf(lower[-1])
    return p


def channel_row_exact(grid: Grid, x1: float) -> np.ndarray:
    """Full channel row P(y2_cell | x1) over every grid cell."""
    x1 = float(x1)
    if not math.isfinite(x1):
        raise ValueError("x1 must be finite")
    return _cell_probabilities(grid, x1, 0, grid.L - 1)


def default_band(grid: Grid, band_sd: float = DEFAULT_BAND_SD) -> int:
    return max(1, math.ceil(band_sd / grid.delta - 1e-9))


def channel_row_banded(grid: Grid, x1_index: int, band_halfwidth: int):
    """Channel row for grid point ``x1_index`` truncated to ``band_halfwidth`` cells each side.

    Returns ``(lo, probs)``: ``probs[m]`` is the renormalized probability of cell ``lo + m``.
    """
    if band_halfwidth < 1:
        raise ValueError("band_halfwidth must be at least 1")
    if not 0 <= x1_index < grid.L:
        raise IndexError(x1_index)
    lo = max(0, x1_index - band_halfwidth)
    hi = min(grid.L - 1, x1_index + band_halfwidth)
    p = _cell_probabilities(grid, float(grid.points[x1_index]), lo, hi)
    return lo, p / p.sum()


@dataclass(frozen=True)
class ChannelModel:
    """Banded channel rows for every grid point.

    ``probs[i, m]`` is P(cell ``i + m - band`` | x1 = point i); columns that fall
    outside the grid hold zero and ``cols`` is clipped to a valid index there.
    """

    grid: Grid
    band_halfwidth: int
    probs: np.ndarray = field(repr=False)
    cols: np.ndarray = field(repr=False)

    def row(self, i: int) -> np.ndarray:
        """Dense length-L row for grid point ``i``."""
        out = np.zeros(self.grid.L)
        np.add.at(out, self.cols[i], self.probs[i])
        return out


def build_channel(grid: Grid, band_halfwidth: int | None = None) -> ChannelModel:
    if band_halfwidth is None:
        band_halfwidth = default_band(grid)
    if band_halfwidth < 1:
        raise ValueError("band_halfwidth must be at least 1")
    b = int(band_halfwidth)
    L = grid.L
    offsets = np.arange(-b, b + 1)
    probs = np.zeros((L, 2 * b + 1))
    # Interior rows are translates of one another; compute the shared row once.
    interior = _offset_row(grid, b)
    for i in range(L):
        lo = i - b
        hi = i + b
        if lo > 0 and hi < L - 1:
            probs[i] = interior
        else:
            start, p = channel_row_banded(grid, i, b)
            probs[i, start - lo:start - lo + p.size] = p
    cols = np.clip(np.arange(L)[:, None] + offsets[None, :], 0, L - 1)
    probs.setflags(write=False)
    cols.setflags(write=False)
    return ChannelModel(grid, b, probs, cols)


def _offset_row(grid: Grid, b: int) -> np.ndarray:
    # Row of a point whose band touches neither boundary cell, by offset.
    m = np.arange(-b, b + 1)
    upper = grid.delta * (m + 0.5)
    lower = grid.delta * (m - 0.5)
    right = lower > 0
    p = np.where(right, normal_sf(lower) - normal_sf(upper), normal_cdf(upper) - normal_cdf(lower))
    return p / p.sum()
