"""Accurate evaluation of the total cost of a staircase first stage.

Given thresholds ``A_i`` and levels ``alpha_i`` the cost splits into

    J1 = k^2 sum_i int_{A_i}^{A_{i+1}} p(x0) (alpha_i - x0)^2 dx0
    J2 = sum_i S(alpha_i) int_{A_i}^{A_{i+1}} p(x0) dx0,
    S(alpha) = sum_y P(y | alpha) (alpha - g2(y))^2,

with ``p`` the N(0, sigma^2) density and ``P(y | alpha)`` the full-tail
channel row. Segment integrals are either closed-form Gaussian moments or
adaptive quadrature; the first is the default, the second is kept as a
cross-check.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .grid import channel_row_exact, normal_cdf, normal_sf
from .policy import InnerPolicyThresholds, OuterPolicy

__all__ = [
    "QuadratureConfig",
    "CostReport",
    "segment_masses",
    "stage1_cost",
    "stage2_cost",
    "total_cost",
]

_EPS = np.finfo(float).eps
# Relative accuracy assumed for each erfc evaluation, in units of machine epsilon.
_ERFC_ULPS = 4.0
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class QuadratureConfig:
    tol: float = 1e-18
    method: str = "closed"  # "closed" or "quadrature"
    clip_sd: float = 10.0
    rtol: float = 1e-13  # relative floor handed to the adaptive integrator

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.method not in ("closed", "quadrature"):
            raise ValueError(f"unknown method {self.method!r}")


@dataclass(frozen=True)
class CostReport:
    J1: float
    J2: float
    J: float
    error_bound: float
    M: int
    quad_error: float = 0.0
    cdf_error: float = 0.0
    method: str = "closed"

    def as_dict(self) -> dict:
        return {
            "J1": self.J1, "J2": self.J2, "J": self.J, "error_bound": self.error_bound,
            "quad_error": self.quad_error, "cdf_error": self.cdf_error,
            "M": self.M, "method": self.method,
        }


def _std_bounds(t: InnerPolicyThresholds, sigma: float):
    if np.any(np.diff(t.thresholds) <= 0):
        raise ValueError("thresholds must be sorted ascending")
    u = t.thresholds / sigma
    return u[:-1], u[1:]


def _pdf(u):
    u = np.asarray(u, dtype=float)
    with np.errstate(over="ignore"):
        return np.where(np.isinf(u), 0.0, _INV_SQRT_2PI * np.exp(-0.5 * u * u))


def _mass(a, b):
    """Standard normal mass of ``[a, b)`` and an absolute error bound, elementwise."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    left = b <= 0
    right = a >= 0
    cb, ca = normal_cdf(b), normal_cdf(a)
    sa, sb = normal_sf(a), normal_sf(b)
    mass = np.where(left, cb - ca, np.where(right, sa - sb, 1.0 - ca - sb))
    err = _ERFC_ULPS * _EPS * np.where(left, cb + ca, np.where(right, sa + sb, 1.0 + ca + sb))
    return mass, err


def segment_masses(t: InnerPolicyThresholds, sigma: float) -> np.ndarray:
    """Probability of each segment under N(0, sigma^2)."""
    a, b = _std_bounds(t, sigma)
    return _mass(a, b)[0]


def _stage1_closed(t, k, sigma):
    a, b = _std_bounds(t, sigma)
    alpha = t.levels
    mass, mass_err = _mass(a, b)
    pa, pb = _pdf(a), _pdf(b)
    with np.errstate(invalid="ignore"):
        apa = np.where(np.isinf(a), 0.0, a * pa)
        bpb = np.where(np.isinf(b), 0.0, b * pb)
    m1 = sigma * (pa - pb)
    m2 = sigma * sigma * (mass + apa - bpb)
    seg = alpha * alpha * mass - 2.0 * alpha * m1 + m2
    # Rounding of the pdf/cdf inputs plus of the three-term combination.
    terms = alpha * alpha * mass + 2.0 * np.abs(alpha * m1) + np.abs(m2)
    err = (alpha * alpha + sigma * sigma) * mass_err \
        + _ERFC_ULPS * _EPS * (2.0 * np.abs(alpha) * sigma * (pa + pb) + sigma * sigma * (np.abs(apa) + np.abs(bpb))) \
        + 4.0 * _EPS * terms
    return k * k * seg, k * k * err


def _quad(f, lo, hi, q: QuadratureConfig):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, est = integrate.quad(f, lo, hi, epsabs=q.tol, epsrel=q.rtol, limit=400)
    return val, est


def _stage1_quadrature(t, k, sigma, q):
    lim = q.clip_sd * sigma
    alpha = t.levels
    vals = np.empty(t.M)
    ests = np.empty(t.M)
    for i in range(t.M):
        lo = max(t.thresholds[i], -lim)
        hi = min(t.thresholds[i + 1], lim)
        if hi <= lo:
            vals[i], ests[i] = 0.0, 0.0
            continue
        ai = float(alpha[i])

        def f(x, ai=ai):
            return (ai - x) ** 2 * _INV_SQRT_2PI / sigma * math.exp(-0.5 * (x / sigma) ** 2)

        vals[i], ests[i] = _quad(f, lo, hi, q)
    return k * k * vals, k * k * ests


def _clipped_tail(t, k, sigma, q):
    """Upper bound on the integrand mass dropped by clipping to +-clip_sd*sigma."""
    c = q.clip_sd
    amax = float(np.max(np.abs(t.levels)))
    # int_c^inf (A + sigma u)^2 phi(u) du <= 2 A^2 Q(c) + 2 sigma^2 (c phi(c) + Q(c)), both tails.
    tail = float(normal_sf(c))
    second = sigma * sigma * (c * float(_pdf(c)) + tail)
    return 2.0 * k * k * (2.0 * amax * amax * tail + 2.0 * second)


def stage1_cost(t: InnerPolicyThresholds, k: float, sigma: float, q: QuadratureConfig | None = None) -> float:
    """First-stage cost ``k^2 E[(g1~(X0) - X0)^2]``."""
    q = q or QuadratureConfig()
    if q.method == "closed":
        seg, _ = _stage1_closed(t, k, sigma)
    else:
        seg, _ = _stage1_quadrature(t, k, sigma, q)
    return float(np.sum(seg))


def _level_distortions(levels_idx: np.ndarray, outer: OuterPolicy):
    """``S(alpha)`` and its CDF-error bound for each distinct level index."""
    grid = outer.grid
    uniq, inv = np.unique(levels_idx, return_inverse=True)
    S = np.empty(uniq.size)
    err = np.empty(uniq.size)
    for n, i in enumerate(uniq):
        alpha = float(grid.points[i])
        row = channel_row_exact(grid, alpha)
        r2 = (alpha - outer.values) ** 2
        S[n] = float(np.sum(row * r2))
        err[n] = _ERFC_ULPS * _EPS * float(np.sum(_cell_tail_sums(grid, alpha) * r2)) + 4.0 * _EPS * S[n]
    return S[inv], err[inv]


def _cell_tail_sums(grid, x1):
    # Sum of the two tail values whose difference gives each cell probability.
    j = np.arange(grid.L)
    centres = grid.delta * (j - grid.center)
    upper = centres + 0.5 * grid.delta - x1
    lower = centres - 0.5 * grid.delta - x1
    right = lower > 0
    s = np.where(right, normal_sf(lower) + normal_sf(upper), normal_cdf(upper) + normal_cdf(lower))
    s[0] = normal_cdf(upper[0])
    s[-1] = normal_sf(lower[-1])
    return s


def _check_grid(t: InnerPolicyThresholds, outer: OuterPolicy):
    if t.grid != outer.grid:
        raise ValueError("levels are not points of the outer policy's grid")


def stage2_cost(t: InnerPolicyThresholds, outer: OuterPolicy, sigma: float,
                q: QuadratureConfig | None = None) -> float:
    """Second-stage cost ``E[(X1 - g2(Y2~))^2]`` with the full-tail channel."""
    _check_grid(t, outer)
    S, _ = _level_distortions(t.level_indices, outer)
    return float(np.sum(S * segment_masses(t, sigma)))


def total_cost(t: InnerPolicyThresholds, outer: OuterPolicy, params,
               q: QuadratureConfig | None = None) -> CostReport:
    """Both stage costs plus an absolute error bound.

    The quadrature part of the bound adds ``tol`` to every segment integral
    (``M`` first-stage integrals and ``M`` segment masses); the
    CDF part propagates a few-ulp relative error on every ``erfc`` value.
    """
    q = q or QuadratureConfig()
    _check_grid(t, outer)
    k, sigma = float(params.k), float(params.sigma)
    if q.method == "closed":
        seg1, err1 = _stage1_closed(t, k, sigma)
        clip = 0.0
    else:
        seg1, est1 = _stage1_quadrature(t, k, sigma, q)
        _, err1 = _stage1_closed(t, k, sigma)
        err1 = err1 + est1
        clip = _clipped_tail(t, k, sigma, q)
    a, b = _std_bounds(t, sigma)
    mass, mass_err = _mass(a, b)
    S, S_err = _level_distortions(t.level_indices, outer)

    J1 = float(np.sum(seg1))
    J2 = float(np.sum(S * mass))
    J = J1 + J2
    # Re-summing with tol added to every integral, done in closed form since tol is below one ulp of J.
    quad_error = q.tol * (k * k * t.M + float(np.sum(S))) + clip
    cdf_error = float(np.sum(err1) + np.sum(S * mass_err) + np.sum(S_err * mass))
    return CostReport(J1, J2, J, quad_error + cdf_error, t.M, quad_error, cdf_error, q.method)
