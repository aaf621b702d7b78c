"""Representations of the two decision functions.

The first-stage map ``x0 -> x1`` is kept either as per-sample grid
assignments over the positive half-line (its values on the negative half
follow by odd reflection) or as a staircase: thresholds ``A_0 < ... < A_M``
with a grid level per segment ``[A_i, A_{i+1})``. The second-stage map is a
lookup table indexed by grid point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import Grid

__all__ = [
    "InnerPolicySamples",
    "InnerPolicyThresholds",
    "OuterPolicy",
    "extract_thresholds",
    "evaluate_inner",
    "refine",
    "symmetrize_odd",
    "zero_outer",
]


@dataclass(frozen=True)
class InnerPolicySamples:
    """Grid index assigned to each positive Monte-Carlo sample of ``x0``."""

    x0_samples: np.ndarray = field(repr=False)
    assignments: np.ndarray = field(repr=False)

    def __post_init__(self):
        x = np.asarray(self.x0_samples, dtype=float)
        a = np.asarray(self.assignments, dtype=np.int64)
        if x.ndim != 1 or a.shape != x.shape:
            raise ValueError("x0_samples and assignments must be 1-D and the same length")
        if x.size and (x[0] <= 0 or np.any(np.diff(x) < 0)):
            raise ValueError("x0_samples must be positive and sorted ascending")
        object.__setattr__(self, "x0_samples", x)
        object.__setattr__(self, "assignments", a)


@dataclass(frozen=True)
class InnerPolicyThresholds:
    """Staircase over the whole real line.

    ``thresholds`` has ``M + 1`` entries starting at ``-inf`` and ending at
    ``+inf``; segment ``i`` maps ``[thresholds[i], thresholds[i+1])`` to grid
    point ``level_indices[i]`` of ``grid``.
    """

    grid: Grid
    thresholds: np.ndarray = field(repr=False)
    level_indices: np.ndarray = field(repr=False)

    def __post_init__(self):
        t = np.asarray(self.thresholds, dtype=float)
        idx = np.asarray(self.level_indices, dtype=np.int64)
        if t.size != idx.size + 1 or idx.size == 0:
            raise ValueError("need M >= 1 levels and M + 1 thresholds")
        if t[0] != -np.inf or t[-1] != np.inf:
            raise ValueError("outer thresholds must be -inf and +inf")
        if np.any(np.diff(t) <= 0):
            raise ValueError("thresholds must be strictly increasing")
        if np.any(idx < 0) or np.any(idx >= self.grid.L):
            raise ValueError("level index outside the grid")
        object.__setattr__(self, "thresholds", t)
        object.__setattr__(self, "level_indices", idx)

    @property
    def M(self) -> int:
        return int(self.level_indices.size)

    @property
    def levels(self) -> np.ndarray:
        return self.grid.points[self.level_indices]


@dataclass(frozen=True)
class OuterPolicy:
    """Second-stage output for every grid point."""

    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.grid.L,):
            raise ValueError(f"expected {self.grid.L} values, got shape {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def zero_outer(grid: Grid) -> OuterPolicy:
    return OuterPolicy(grid, np.zeros(grid.L))


def symmetrize_odd(values: np.ndarray) -> np.ndarray:
    """Project a table on a symmetric grid onto odd functions."""
    v = np.asarray(values, dtype=float)
    return 0.5 * (v - v[::-1])


def extract_thresholds(p: InnerPolicySamples, grid: Grid) -> InnerPolicyThresholds:
    """Convert per-sample assignments into a staircase on the whole line.

    Runs of equal assignments over the sorted samples become segments, split
    halfway between the last sample of one run and the first of the next.
    The positive half is mirrored with negated levels; the origin becomes a
    threshold unless the innermost level is zero.
    """
    x = p.x0_samples
    a = p.assignments
    if x.size == 0:
        raise ValueError("no samples to extract thresholds from")
    if np.any(a < 0) or np.any(a >= grid.L):
        raise ValueError("assignment outside the grid")
    change = np.flatnonzero(a[1:] != a[:-1])
    run_levels = np.concatenate([a[:1], a[change + 1]])
    cuts = 0.5 * (x[change] + x[change + 1])

    mirror = grid.L - 1 - run_levels[::-1]
    if run_levels[0] == grid.center:
        levels = np.concatenate([mirror[:-1], run_levels])
        inner = np.concatenate([-cuts[::-1], cuts])
    else:
        levels = np.concatenate([mirror, run_levels])
        inner = np.concatenate([-cuts[::-1], [0.0], cuts])
    thresholds = np.concatenate([[-np.inf], inner, [np.inf]])
    return InnerPolicyThresholds(grid, thresholds, levels)


def evaluate_inner(t: InnerPolicyThresholds, x0):
    """Level of the segment ``[A_i, A_{i+1})`` containing ``x0`` (scalar or array)."""
    seg = np.searchsorted(t.thresholds, x0, side="right") - 1
    out = t.levels[seg]
    return float(out) if np.ndim(out) == 0 else out


def refine(policy: OuterPolicy, new_grid: Grid, rtol: float = 1e-12) -> OuterPolicy:
    """Carry a second-stage table onto a finer grid with the same extent.

    Each new point takes the value of its nearest old point; points exactly
    midway go away from zero, so an odd table stays odd.
    """
    old = policy.grid
    if new_grid.L < old.L:
        raise ValueError("refinement needs L' >= L")
    if abs(new_grid.extent - old.extent) > rtol * max(old.extent, 1.0):
        raise ValueError(f"grid extents differ: {old.extent!r} vs {new_grid.extent!r}")
    if old.L == 1:
        return OuterPolicy(new_grid, np.full(new_grid.L, policy.values[0]))
    # Nearest old index in exact integer arithmetic: offset j' maps to j'(L-1)/(L'-1).
    num = np.arange(-new_grid.center, new_grid.center + 1, dtype=np.int64) * (old.L - 1)
    den = new_grid.L - 1
    mag = (2 * np.abs(num) + den) // (2 * den)
    idx = np.sign(num) * mag + old.center
    return OuterPolicy(new_grid, policy.values[idx])
