"""Batch front end: configuration, orchestration and output files.

Run ``witsenhausen --help`` for the flags. A full run writes, into ``--out``:

* ``inner_policy.csv``  staircase first stage (``segment,A_lo,A_hi,alpha_index,alpha_value``)
* ``outer_policy.csv``  second-stage table (``y2_index,y2_value,gamma2_value``)
* ``trace.csv``         sample cost per iteration (``stage_k,stage_L,iter,J_sample``)
* ``gamma1_plot.csv``   first stage sampled on ``[-2 sigma, 2 sigma]`` (``x0,gamma1``)
* ``report.json``       stage summaries, exact cost, step count, config echo

Exit status: 0 success, 1 configuration error, 2 numerical divergence, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .exactcost import CostReport, QuadratureConfig, total_cost
from .grid import build_grid
from .optimizer import (
    DEFAULT_K_SCHEDULE,
    DEFAULT_L_SCHEDULE,
    DivergenceError,
    OptimizerConfig,
    ProblemParams,
    per_sample_cost,
    distortion_profile,
    run_relaxation,
)
from .policy import InnerPolicyThresholds, OuterPolicy, evaluate_inner

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3

INNER_HEADER = ["segment", "A_lo", "A_hi", "alpha_index", "alpha_value"]
OUTER_HEADER = ["y2_index", "y2_value", "gamma2_value"]
TRACE_HEADER = ["stage_k", "stage_L", "iter", "J_sample"]
PLOT_POINTS = 2001


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    sigma: float = 5.0
    k_schedule: tuple = DEFAULT_K_SCHEDULE
    L_schedule: tuple = DEFAULT_L_SCHEDULE
    n_samples: int = 400_000
    seed: int = 0
    stop_threshold: float = 1e-7
    band_sd: float = 8.0
    max_inner_iterations: int = 500
    refine_mode: str = "after"
    quad_tol: float = 1e-18
    quad_method: str = "closed"
    jump_threshold: float = 1.0
    out: str = "witsenhausen_out"
    report_format: str = "json"

    @property
    def k_target(self) -> float:
        return self.k_schedule[-1]

    def params(self) -> ProblemParams:
        return ProblemParams(k=self.k_target, sigma=self.sigma)

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(
            k_schedule=self.k_schedule, L_schedule=self.L_schedule, n_samples=self.n_samples,
            seed=self.seed, stop_threshold=self.stop_threshold, band_sd=self.band_sd,
            max_inner_iterations=self.max_inner_iterations, refine_mode=self.refine_mode,
        )

    def quadrature(self) -> QuadratureConfig:
        return QuadratureConfig(tol=self.quad_tol, method=self.quad_method)

    def echo(self) -> dict:
        d = dataclasses.asdict(self)
        d["k_schedule"] = list(self.k_schedule)
        d["L_schedule"] = list(self.L_schedule)
        return d


def validate(cfg: RunConfig) -> RunConfig:
    """Raise :class:`ConfigError` naming the offending field."""
    checks = [
        ("sigma", cfg.sigma > 0, "must be positive"),
        ("k_schedule", len(cfg.k_schedule) > 0 and all(k > 0 for k in cfg.k_schedule),
         "must be a non-empty list of positive values"),
        ("k_schedule", all(b < a for a, b in zip(cfg.k_schedule, cfg.k_schedule[1:])),
         "must be strictly decreasing"),
        ("L_schedule", len(cfg.L_schedule) > 0 and all(L >= 3 and L % 2 == 1 for L in cfg.L_schedule),
         "entries must be odd integers >= 3"),
        ("L_schedule", all(b > a for a, b in zip(cfg.L_schedule, cfg.L_schedule[1:])),
         "must be strictly increasing"),
        ("n_samples", cfg.n_samples >= 1, "must be positive"),
        ("stop_threshold", cfg.stop_threshold > 0, "(delta) must be positive"),
        ("band_sd", cfg.band_sd > 0, "must be positive"),
        ("max_inner_iterations", cfg.max_inner_iterations >= 1, "must be positive"),
        ("refine_mode", cfg.refine_mode in ("after", "each_k"), "must be 'after' or 'each_k'"),
        ("quad_tol", cfg.quad_tol > 0, "must be positive"),
        ("quad_method", cfg.quad_method in ("closed", "quadrature"), "must be 'closed' or 'quadrature'"),
        ("jump_threshold", cfg.jump_threshold > 0, "must be positive"),
        ("report_format", cfg.report_format in ("json", "text"), "must be 'json' or 'text'"),
    ]
    for name, ok, msg in checks:
        if not ok:
            raise ConfigError(f"{name} {msg}: got {getattr(cfg, name)!r}")
    return cfg


def _float_list(text):
    try:
        return tuple(float(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}")


def _int_list(text):
    try:
        return tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="witsenhausen",
        description="Design two-stage team decision policies by alternating best responses.",
    )
    # Every default is None so that explicitly given flags can be told apart.
    p.add_argument("--config", help="JSON file with RunConfig fields")
    p.add_argument("--sigma", type=float, help="standard deviation of X0 (default 5)")
    p.add_argument("--k-target", type=float, help="target first-stage weight k (default 0.2)")
    p.add_argument("--k-schedule", type=_float_list, help="decreasing comma list ending at the target k")
    p.add_argument("--k-linear", type=str, metavar="K0,N",
                   help="N evenly spaced k values from K0 down to the target instead of a list")
    p.add_argument("--L-schedule", type=_int_list, dest="L_schedule", help="increasing comma list of odd grid sizes")
    p.add_argument("--samples", type=int, dest="n_samples", help="Monte-Carlo samples of |X0|")
    p.add_argument("--seed", type=int)
    p.add_argument("--delta", type=float, dest="stop_threshold", help="relative cost-drop stopping threshold")
    p.add_argument("--band", type=float, dest="band_sd", help="channel band half-width in noise standard deviations")
    p.add_argument("--max-iter", type=int, dest="max_inner_iterations")
    p.add_argument("--refine-mode", choices=("after", "each_k"))
    p.add_argument("--quad-tol", type=float, help="absolute tolerance per integral in the exact cost")
    p.add_argument("--quad-method", choices=("closed", "quadrature"))
    p.add_argument("--jump-threshold", type=float, help="level gap separating macro steps")
    p.add_argument("--format", dest="report_format", choices=("json", "text"))
    p.add_argument("--out", help="output directory")
    p.add_argument("--cost-only", nargs=2, metavar=("INNER_CSV", "OUTER_CSV"),
                   help="evaluate the exact cost of existing policy files and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


def parse_config(argv=None) -> tuple[RunConfig, argparse.Namespace]:
    """Defaults, overridden by ``--config`` file values, overridden by flags."""
    ns = build_parser().parse_args(argv)
    values = {}
    if ns.config:
        try:
            with open(ns.config) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"config: cannot read {ns.config!r}: {exc}")
        unknown = set(data) - _FIELDS - {"k_target"}
        if unknown:
            raise ConfigError(f"config: unknown fields {sorted(unknown)}")
        values.update(data)
    flags = {k: v for k, v in vars(ns).items() if v is not None and k in _FIELDS}
    values.update(flags)
    if ns.k_target is not None:
        values["k_target"] = ns.k_target

    k_target = values.pop("k_target", None)
    if ns.k_linear:
        try:
            k0, n = ns.k_linear.split(",")
            k0, n = float(k0), int(n)
        except ValueError:
            raise ConfigError(f"k_linear must look like K0,N: got {ns.k_linear!r}")
        kt = k_target if k_target is not None else 0.2
        if n < 1 or not k0 > kt > 0:
            raise ConfigError(f"k_linear needs N >= 1 and K0 > target k: got {ns.k_linear!r}")
        values["k_schedule"] = tuple(float(k) for k in np.linspace(k0, kt, n)) if n > 1 else (kt,)
    elif k_target is not None:
        if "k_schedule" in values:
            if float(values["k_schedule"][-1]) != k_target:
                raise ConfigError(f"k_schedule must end at k_target={k_target}: got {values['k_schedule']!r}")
        else:
            head = tuple(k for k in DEFAULT_K_SCHEDULE if k > k_target)
            values["k_schedule"] = head + (k_target,)

    for key in ("k_schedule",):
        if key in values:
            values[key] = tuple(float(v) for v in values[key])
    if "L_schedule" in values:
        values["L_schedule"] = tuple(int(v) for v in values["L_schedule"])
    return validate(RunConfig(**values)), ns


def plateau_groups(t: InnerPolicyThresholds, jump_threshold: float = 1.0) -> int:
    """Full-line groups of consecutive segments whose neighbouring levels differ by less than ``jump_threshold``."""
    gaps = np.abs(np.diff(t.levels))
    return 1 + int(np.count_nonzero(gaps >= jump_threshold))


def step_label(t: InnerPolicyThresholds, jump_threshold: float = 1.0) -> float:
    """Plateaus per half-line; a plateau straddling the origin counts as one half."""
    return plateau_groups(t, jump_threshold) / 2.0


def count_macro_steps(t: InnerPolicyThresholds, jump_threshold: float = 1.0) -> int:
    """Macro steps per half-line, rounding a half step at the origin up."""
    return math.ceil(step_label(t, jump_threshold))


# --- file formats ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_inner_csv(path, t: InnerPolicyThresholds):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(INNER_HEADER)
        for i in range(t.M):
            w.writerow([i, _fmt(t.thresholds[i]), _fmt(t.thresholds[i + 1]),
                        int(t.level_indices[i]), _fmt(t.levels[i])])


def write_outer_csv(path, outer: OuterPolicy):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(OUTER_HEADER)
        for i, (y, v) in enumerate(zip(outer.grid.points, outer.values)):
            w.writerow([i, _fmt(y), _fmt(v)])


def read_outer_csv(path) -> OuterPolicy:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or list(rows[0]) != OUTER_HEADER:
        raise ValueError(f"{path}: expected header {','.join(OUTER_HEADER)}")
    L = len(rows)
    if L < 3 or L % 2 == 0:
        raise ValueError(f"{path}: need an odd number (>= 3) of grid rows, got {L}")
    idx = [int(r["y2_index"]) for r in rows]
    if idx != list(range(L)):
        raise ValueError(f"{path}: y2_index must run 0..{L - 1}")
    ys = np.array([float(r["y2_value"]) for r in rows])
    # The point right of zero equals delta exactly.
    grid = build_grid(L, ys[(L - 1) // 2 + 1])
    if not np.allclose(grid.points, ys, rtol=0, atol=1e-9 * max(1.0, grid.extent)):
        raise ValueError(f"{path}: y2_value column is not a uniform symmetric grid")
    return OuterPolicy(grid, np.array([float(r["gamma2_value"]) for r in rows]))


def read_inner_csv(path, grid) -> InnerPolicyThresholds:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or list(rows[0]) != INNER_HEADER:
        raise ValueError(f"{path}: expected header {','.join(INNER_HEADER)}")
    lo = [float(r["A_lo"]) for r in rows]
    hi = [float(r["A_hi"]) for r in rows]
    if lo[1:] != hi[:-1]:
        raise ValueError(f"{path}: segments are not contiguous")
    levels = np.array([int(r["alpha_index"]) for r in rows])
    return InnerPolicyThresholds(grid, np.array(lo + hi[-1:]), levels)


def write_trace_csv(path, stages):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for st in stages:
            for i, J in enumerate(st.trace, start=1):
                w.writerow([_fmt(st.k), st.L, i, _fmt(J)])


def write_plot_csv(path, t: InnerPolicyThresholds, sigma: float):
    x = np.linspace(-2.0 * sigma, 2.0 * sigma, PLOT_POINTS)
    y = evaluate_inner(t, x)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x0", "gamma1"])
        for a, b in zip(x, y):
            w.writerow([_fmt(a), _fmt(b)])


def _write_text_atomic(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def format_report(report: dict, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(report, indent=2) + "\n"
    c = report["cost"]
    lines = [f"k={s['k']:g} L={s['L']} iterations={s['iterations']} J_sample={s['J_sample']:.8f}"
             for s in report["stages"]]
    lines += [
        f"J1 = {c['J1']:.8f}", f"J2 = {c['J2']:.8f}", f"J  = {c['J']:.8f}",
        f"error bound = {c['error_bound']:.3e}", f"M = {report['M']}",
        f"macro steps = {report['macro_steps']}", f"seed = {report['seed']}",
        f"wall time = {report['wall_time']:.1f} s",
    ]
    return "\n".join(lines) + "\n"


# --- orchestration --------------------------------------------------------------------------

def run(cfg: RunConfig, progress=None) -> dict:
    """Optimize, then write every output file into ``cfg.out``. Returns the report dict."""
    os.makedirs(cfg.out, exist_ok=True)
    t0 = time.perf_counter()
    result = run_relaxation(cfg.params(), cfg.optimizer_config(), progress=progress, quad=cfg.quadrature())
    state = result.state
    t = result.thresholds
    cost: CostReport = result.report
    D = distortion_profile(state.outer, state.channel)
    per = per_sample_cost(state.samples, state.assignments, D, state.k, state.grid)
    report = {
        "stages": [
            {"k": s.k, "L": s.L, "iterations": s.iterations, "J_sample": s.cost, "converged": s.converged,
             "J": s.exact.J if s.exact is not None else None}
            for s in result.stages
        ],
        "cost": cost.as_dict(),
        "J_sample": float(per.mean()),
        "J_sample_std": float(per.std(ddof=1)) if per.size > 1 else 0.0,
        "n_samples": int(per.size),
        "M": cost.M,
        "macro_steps": count_macro_steps(t, cfg.jump_threshold),
        "step_label": step_label(t, cfg.jump_threshold),
        "plateau_groups": plateau_groups(t, cfg.jump_threshold),
        "grid": {"L": state.grid.L, "delta": state.grid.delta},
        "seed": cfg.seed,
        "config": cfg.echo(),
        "wall_time": time.perf_counter() - t0,
    }
    out = cfg.out
    write_inner_csv(os.path.join(out, "inner_policy.csv"), t)
    write_outer_csv(os.path.join(out, "outer_policy.csv"), state.outer)
    write_trace_csv(os.path.join(out, "trace.csv"), result.stages)
    write_plot_csv(os.path.join(out, "gamma1_plot.csv"), t, cfg.sigma)
    name = "report.json" if cfg.report_format == "json" else "report.txt"
    _write_text_atomic(os.path.join(out, name), format_report(report, cfg.report_format))
    return report


def cost_only(inner_csv, outer_csv, cfg: RunConfig) -> CostReport:
    outer = read_outer_csv(outer_csv)
    t = read_inner_csv(inner_csv, outer.grid)
    return total_cost(t, outer, cfg.params(), cfg.quadrature())


def _dump_state(out, state):
    if state is None or not os.path.isdir(out):
        return
    np.savez(os.path.join(out, "divergence_state.npz"), samples=state.samples,
             assignments=state.assignments, outer=np.asarray(state.outer.values),
             L=state.grid.L, delta=state.grid.delta, k=state.k)


def main(argv=None) -> int:
    try:
        cfg, ns = parse_config(argv)
    except SystemExit as exc:
        # argparse exits with 2 on malformed flags; --help exits with 0.
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        if ns.cost_only:
            try:
                rep = cost_only(*ns.cost_only, cfg)
            except ValueError as exc:
                print(f"configuration error: {exc}", file=sys.stderr)
                return EXIT_CONFIG
            text = json.dumps(rep.as_dict(), indent=2)
            print(text)
            return EXIT_OK

        def progress(res):
            log.info("stage k=%g L=%d: %d iterations, J_sample=%.8f", res.k, res.L, res.iterations, res.cost)

        try:
            report = run(cfg, progress)
        except DivergenceError as exc:
            print(f"numerical divergence: {exc}", file=sys.stderr)
            try:
                _dump_state(cfg.out, exc.state)
            except OSError:
                pass
            return EXIT_DIVERGED
        c = report["cost"]
        print(f"J1={c['J1']:.8f} J2={c['J2']:.8f} J={c['J']:.8f} "
              f"M={report['M']} steps={report['macro_steps']} -> {cfg.out}")
        return EXIT_OK
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
