"""Alternating best-response design of the two decision functions.

With the second-stage table fixed, each sample ``x0`` is sent to the grid
point minimising ``k^2 (x1 - x0)^2 + D(x1)``, where ``D(x1)`` is the expected
squared estimation error when ``x1`` is transmitted. With the first stage
fixed, the table becomes the conditional mean of ``x1`` given the quantized
observation. Stages are run for a decreasing sequence of ``k`` values and
then on successively finer grids.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .exactcost import QuadratureConfig, total_cost
from .grid import ChannelModel, Grid, build_channel, default_band, grid_for, quantize_index
from .policy import (
    InnerPolicySamples,
    OuterPolicy,
    extract_thresholds,
    refine,
    symmetrize_odd,
    zero_outer,
)

log = logging.getLogger(__name__)

DEFAULT_K_SCHEDULE = (3.0, 2.0, 1.5, 1.0, 0.6, 0.4, 0.3, 0.2)
DEFAULT_L_SCHEDULE = (201, 401, 801, 1601, 3201, 6401, 12801)

# Relative slack allowed on the per-iteration cost before declaring divergence.
DESCENT_RTOL = 1e-12
# Conditional-mean denominators below this keep the previous table value.
DENOM_FLOOR = 1e-300


class DivergenceError(RuntimeError):
    """The sample cost went up between two best-response iterations."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class ProblemParams:
    k: float = 0.2
    sigma: float = 5.0

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError(f"k must be positive, got {self.k!r}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma!r}")


@dataclass(frozen=True)
class OptimizerConfig:
    k_schedule: tuple = DEFAULT_K_SCHEDULE
    L_schedule: tuple = DEFAULT_L_SCHEDULE
    n_samples: int = 400_000
    seed: int = 0
    stop_threshold: float = 1e-7
    band_sd: float = 8.0
    max_inner_iterations: int = 500
    grid_span: float = 10.0
    # "after": refine once k reaches its target; "each_k": rerun the whole k path on every grid.
    refine_mode: str = "after"

    def __post_init__(self):
        ks = tuple(float(k) for k in self.k_schedule)
        Ls = tuple(int(L) for L in self.L_schedule)
        object.__setattr__(self, "k_schedule", ks)
        object.__setattr__(self, "L_schedule", Ls)
        if not ks or any(k <= 0 for k in ks):
            raise ValueError("k_schedule must be a non-empty list of positive values")
        if any(b >= a for a, b in zip(ks, ks[1:])):
            raise ValueError("k_schedule must be strictly decreasing")
        if not Ls:
            raise ValueError("L_schedule must not be empty")
        for L in Ls:
            if L < 3 or L % 2 == 0:
                raise ValueError(f"L_schedule entries must be odd and >= 3, got {L}")
        if any(b <= a for a, b in zip(Ls, Ls[1:])):
            raise ValueError("L_schedule must be strictly increasing")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if not self.stop_threshold > 0:
            raise ValueError("stop_threshold must be positive")
        if not self.band_sd > 0:
            raise ValueError("band_sd must be positive")
        if self.max_inner_iterations < 1:
            raise ValueError("max_inner_iterations must be positive")
        if self.refine_mode not in ("after", "each_k"):
            raise ValueError(f"unknown refine_mode {self.refine_mode!r}")

    @property
    def k_target(self) -> float:
        return self.k_schedule[-1]


def linear_k_schedule(k_start: float, k_target: float, n_stages: int) -> tuple:
    """``n_stages`` evenly spaced values from ``k_start`` down to ``k_target``."""
    if n_stages < 1 or not k_start > k_target > 0:
        raise ValueError("need n_stages >= 1 and k_start > k_target > 0")
    if n_stages == 1:
        return (float(k_target),)
    return tuple(float(k) for k in np.linspace(k_start, k_target, n_stages))


def sample_source(n: int, sigma: float, seed: int) -> np.ndarray:
    """``n`` draws of ``|X0|`` with ``X0 ~ N(0, sigma^2)``, sorted ascending."""
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    x = np.abs(sigma * rng.standard_normal(n))
    x.sort()
    # |X0| = 0 has probability zero but would break the positive-half convention.
    x[x == 0.0] = np.nextafter(0.0, 1.0)
    return x


def distortion_profile(outer: OuterPolicy, channel: ChannelModel) -> np.ndarray:
    """``D(x1) = sum_y p(y|x1) (x1 - g2(y))^2`` for every grid point."""
    if outer.grid != channel.grid:
        raise ValueError("outer policy and channel live on different grids")
    x1 = channel.grid.points
    resid = x1[:, None] - outer.values[channel.cols]
    return np.einsum("ij,ij->i", channel.probs, resid * resid)


def _lower_envelope(slopes: np.ndarray, intercepts: np.ndarray):
    """Lines that attain the minimum of ``intercepts + slopes*x`` somewhere.

    ``slopes`` must be strictly decreasing. Returns the surviving line indices
    in order and the breakpoints between consecutive survivors.
    """
    hull = []
    breaks = []
    for j in range(slopes.size):
        mj, bj = slopes[j], intercepts[j]
        while hull:
            i = hull[-1]
            x = (bj - intercepts[i]) / (slopes[i] - mj)
            if breaks and x <= breaks[-1]:
                hull.pop()
                breaks.pop()
                continue
            hull.append(j)
            breaks.append(x)
            break
        else:
            hull.append(j)
    return np.asarray(hull, dtype=np.int64), np.asarray(breaks, dtype=float)


def update_inner(samples: np.ndarray, D: np.ndarray, k: float, grid: Grid) -> np.ndarray:
    """Grid index minimising ``k^2 (x1 - x0)^2 + D(x1)`` for every sample.

    Ties go to the smallest index. The per-sample objective is an affine
    function of ``x0`` plus a common ``k^2 x0^2``, so the minimiser is read
    off the lower envelope of ``L`` lines.
    """
    s = grid.points
    k2 = k * k
    D = np.asarray(D, dtype=float)
    if not np.all(np.isfinite(D)):
        raise ValueError("distortion profile must be finite")
    hull, breaks = _lower_envelope(-2.0 * k2 * s, k2 * s * s + D)
    pos = np.searchsorted(breaks, samples, side="left")
    # Settle near-breakpoint rounding with the direct objective on the neighbours.
    cand = np.stack([
        hull[np.maximum(pos - 1, 0)],
        hull[pos],
        hull[np.minimum(pos + 1, hull.size - 1)],
    ])
    obj = k2 * (s[cand] - samples) ** 2 + D[cand]
    best = obj.min(axis=0)
    pick = np.where(obj == best, cand, grid.L).min(axis=0)
    return pick


def level_counts(assignments: np.ndarray, grid: Grid) -> np.ndarray:
    """Sample counts per grid point for the full line (positive half plus mirror)."""
    c = np.bincount(assignments, minlength=grid.L).astype(float)
    return c + c[::-1]


def update_outer(counts: np.ndarray, channel: ChannelModel, grid: Grid, previous: OuterPolicy,
                 symmetrize: bool = True) -> OuterPolicy:
    """Conditional mean of ``x1`` given each quantized observation."""
    counts = np.asarray(counts, dtype=float)
    if counts.shape != (grid.L,):
        raise ValueError("counts must have one entry per grid point")
    if not counts.sum() > 0:
        raise ValueError("all level counts are zero")
    occ = np.flatnonzero(counts)
    w = counts[occ, None] * channel.probs[occ]
    cols = channel.cols[occ].ravel()
    den = np.bincount(cols, weights=w.ravel(), minlength=grid.L)
    num = np.bincount(cols, weights=(w * grid.points[occ, None]).ravel(), minlength=grid.L)
    ok = den >= DENOM_FLOOR
    values = np.array(previous.values, dtype=float)
    values[ok] = num[ok] / den[ok]
    if symmetrize:
        values = symmetrize_odd(values)
    return OuterPolicy(grid, values)


def per_sample_cost(samples, assignments, D, k, grid: Grid) -> np.ndarray:
    x1 = grid.points[assignments]
    return k * k * (x1 - samples) ** 2 + np.asarray(D)[assignments]


def sample_cost(samples, assignments, D, k, grid: Grid) -> float:
    """Monte-Carlo estimate of the total cost under the discretized channel."""
    return float(np.mean(per_sample_cost(samples, assignments, D, k, grid)))


@dataclass
class IterationState:
    grid: Grid
    channel: ChannelModel
    samples: np.ndarray = field(repr=False)
    assignments: np.ndarray = field(repr=False)
    outer: OuterPolicy = field(repr=False)
    k: float = 0.2
    cost: float = math.inf

    @property
    def counts(self) -> np.ndarray:
        return level_counts(self.assignments, self.grid)

    @property
    def inner(self) -> InnerPolicySamples:
        return InnerPolicySamples(self.samples, self.assignments)


def initial_state(samples: np.ndarray, grid: Grid, k: float, band_halfwidth: int | None = None,
                  outer: OuterPolicy | None = None) -> IterationState:
    channel = build_channel(grid, band_halfwidth)
    outer = zero_outer(grid) if outer is None else outer
    return IterationState(grid, channel, samples, quantize_index(grid, samples), outer, k)


def _relative_improvement(prev: float, cur: float) -> float:
    if math.isinf(prev):
        return 1.0
    if prev == 0.0:
        return 0.0
    return (prev - cur) / prev


@dataclass
class StageResult:
    k: float
    L: int
    iterations: int
    cost: float
    trace: list
    converged: bool
    exact: object = None  # CostReport, filled for stages run at the target k


def converge_inner(state: IterationState, delta: float = 1e-7, max_iter: int = 500):
    """Alternate the two best responses until the relative cost drop falls below ``delta``.

    Returns ``(new_state, trace)``. Raises :class:`DivergenceError` if the
    sample cost ever rises by more than the rounding slack.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be positive")
    grid, channel, k = state.grid, state.channel, state.k
    samples = state.samples
    outer = state.outer
    assignments = state.assignments
    D = distortion_profile(outer, channel)
    prev = math.inf
    trace = []
    converged = False
    for _ in range(max_iter):
        assignments = update_inner(samples, D, k, grid)
        outer = update_outer(level_counts(assignments, grid), channel, grid, outer)
        D = distortion_profile(outer, channel)
        cost = sample_cost(samples, assignments, D, k, grid)
        trace.append(cost)
        if not math.isinf(prev) and cost > prev * (1.0 + DESCENT_RTOL):
            bad = replace(state, assignments=assignments, outer=outer, cost=cost)
            raise DivergenceError(
                f"sample cost rose from {prev!r} to {cost!r} at k={k}, L={grid.L}", bad)
        if _relative_improvement(prev, cost) < delta:
            converged = True
            break
        prev = cost
    new = replace(state, assignments=assignments, outer=outer, cost=trace[-1])
    return new, StageResult(k, grid.L, len(trace), trace[-1], trace, converged)


@dataclass
class RelaxationResult:
    state: IterationState
    stages: list
    report: object = None
    wall_time: float = 0.0

    @property
    def thresholds(self):
        return extract_thresholds(self.state.inner, self.state.grid)


def _band(grid: Grid, config: OptimizerConfig) -> int:
    return default_band(grid, config.band_sd)


def _move_to_grid(state: IterationState, grid: Grid, config: OptimizerConfig) -> IterationState:
    outer = refine(state.outer, grid)
    channel = build_channel(grid, _band(grid, config))
    # Old points are a subset of the new grid when (L'-1) is a multiple of (L-1).
    ratio, rem = divmod(grid.L - 1, state.grid.L - 1)
    if rem == 0:
        assignments = (state.assignments - state.grid.center) * ratio + grid.center
    else:
        assignments = quantize_index(grid, state.grid.points[state.assignments])
    return replace(state, grid=grid, channel=channel, assignments=assignments, outer=outer)


def run_relaxation(params: ProblemParams, config: OptimizerConfig, progress=None,
                   quad: QuadratureConfig | None = None) -> RelaxationResult:
    """Full design: the ``k`` path at the first grid, then refinement at the target ``k``.

    ``params.k`` must equal the last entry of the schedule. ``progress``, if
    given, is called with each finished :class:`StageResult`.
    """
    if not math.isclose(params.k, config.k_target, rel_tol=0, abs_tol=0):
        raise ValueError(f"params.k={params.k} does not match the schedule target {config.k_target}")
    t0 = time.perf_counter()
    samples = sample_source(config.n_samples, params.sigma, config.seed)
    grid = grid_for(config.L_schedule[0], params.sigma, config.grid_span)
    state = initial_state(samples, grid, config.k_schedule[0], _band(grid, config))
    stages = []

    def stage(st, k):
        st = replace(st, k=k)
        st, res = converge_inner(st, config.stop_threshold, config.max_inner_iterations)
        log.info("k=%g L=%d iterations=%d J=%.8f", k, st.grid.L, res.iterations, res.cost)
        if k == config.k_target:
            res.exact = total_cost(extract_thresholds(st.inner, st.grid), st.outer, params, quad)
        stages.append(res)
        if progress is not None:
            progress(res)
        return st

    if config.refine_mode == "after":
        for k in config.k_schedule:
            state = stage(state, k)
        for L in config.L_schedule[1:]:
            state = _move_to_grid(state, grid_for(L, params.sigma, config.grid_span), config)
            state = stage(state, config.k_target)
    else:
        for n, L in enumerate(config.L_schedule):
            if n:
                state = _move_to_grid(state, grid_for(L, params.sigma, config.grid_span), config)
            for k in config.k_schedule:
                state = stage(state, k)
    result = RelaxationResult(state, stages)
    result.report = stages[-1].exact
    result.wall_time = time.perf_counter() - t0
    return result
