import math

import numpy as np
import pytest

from witsenhausen.grid import build_channel, build_grid, grid_for, quantize_index
from witsenhausen.optimizer import (
    DivergenceError,
    OptimizerConfig,
    ProblemParams,
    converge_inner,
    distortion_profile,
    initial_state,
    level_counts,
    run_relaxation,
    sample_cost,
    sample_source,
    update_inner,
    update_outer,
)
from witsenhausen.policy import OuterPolicy, symmetrize_odd, zero_outer

from oracles import naive_cost, naive_inner, naive_outer


def random_odd_outer(grid, rng, scale=3.0):
    return OuterPolicy(grid, symmetrize_odd(scale * rng.normal(size=grid.L)))


# --- sampling -------------------------------------------------------------------------------

def test_sample_source_deterministic_and_sorted():
    a = sample_source(1000, 5.0, 42)
    b = sample_source(1000, 5.0, 42)
    np.testing.assert_array_equal(a, b)
    assert np.all(a > 0) and np.all(np.diff(a) >= 0)
    assert not np.array_equal(a, sample_source(1000, 5.0, 43))


def test_sample_source_half_normal_mean():
    n = 400_000
    x = sample_source(n, 5.0, 7)
    half_sd = 5.0 * math.sqrt(1 - 2 / math.pi)
    assert half_sd == pytest.approx(3.01405, abs=1e-4)
    assert abs(x.mean() - 5.0 * math.sqrt(2 / math.pi)) <= 4 * half_sd / math.sqrt(n)


def test_sample_source_rejects_zero():
    with pytest.raises(ValueError):
        sample_source(0, 5.0, 1)


# --- distortion profile ---------------------------------------------------------------------

def test_distortion_zero_outer_is_square():
    g = grid_for(201, 5.0)
    D = distortion_profile(zero_outer(g), build_channel(g))
    np.testing.assert_allclose(D, g.points ** 2, rtol=1e-14, atol=0)


def test_distortion_identity_outer_three_points():
    g = build_grid(3, 1.0)
    D = distortion_profile(OuterPolicy(g, g.points), build_channel(g, 2))
    assert D[1] == pytest.approx(0.6170750774519738, abs=1e-15)


def test_distortion_symmetric_for_odd_outer():
    g = build_grid(61, 0.4)
    D = distortion_profile(random_odd_outer(g, np.random.default_rng(0)), build_channel(g))
    np.testing.assert_allclose(D, D[::-1], rtol=0, atol=1e-12)
    assert np.all(D >= 0)


# --- inner update ---------------------------------------------------------------------------

def test_update_inner_zero_distortion_quantizes():
    g = build_grid(41, 0.5)
    x = sample_source(500, 5.0, 3)
    np.testing.assert_array_equal(update_inner(x, np.zeros(g.L), 0.7, g), quantize_index(g, x))


def test_update_inner_zero_outer_beats_shrunk_quantization():
    g = grid_for(201, 5.0)
    k = 0.4
    x = sample_source(2000, 5.0, 4)
    D = g.points ** 2
    a = update_inner(x, D, k, g)
    obj = lambda idx: k * k * (g.points[idx] - x) ** 2 + D[idx]
    ref = quantize_index(g, x * k * k / (1 + k * k))
    assert np.all(obj(a) <= obj(ref))
    brute = np.argmin(k * k * (g.points[None, :] - x[:, None]) ** 2 + D[None, :], axis=1)
    np.testing.assert_array_equal(a, brute)


def test_update_inner_large_k_near_identity():
    g = grid_for(1001, 5.0)
    x = sample_source(5000, 5.0, 5)
    a = update_inner(x, g.points ** 2, 3.0, g)
    assert np.all(np.abs(g.points[a] - 0.9 * x) <= g.delta)


@pytest.mark.parametrize("seed", range(6))
def test_update_inner_matches_naive_double_sum(seed):
    rng = np.random.default_rng(seed)
    L = int(rng.choice([3, 5, 7, 9, 11]))
    g = build_grid(L, float(rng.uniform(0.3, 3.0)))
    ch = build_channel(g, int(rng.integers(1, L + 1)))
    outer = random_odd_outer(g, rng)
    k = float(rng.uniform(0.1, 2.0))
    x = np.sort(np.abs(rng.normal(0, 5, size=200)))
    D = distortion_profile(outer, ch)
    np.testing.assert_array_equal(update_inner(x, D, k, g), naive_inner(x, outer, ch, k))


def test_update_inner_exhaustive_optimality():
    rng = np.random.default_rng(11)
    g = build_grid(31, 0.8)
    D = rng.uniform(0, 20, size=g.L)
    x = np.sort(rng.uniform(0.01, 15, size=3000))
    a = update_inner(x, D, 0.35, g)
    obj = 0.35 ** 2 * (g.points[None, :] - x[:, None]) ** 2 + D[None, :]
    chosen = obj[np.arange(x.size), a]
    assert np.all(chosen <= obj.min(axis=1))
    np.testing.assert_array_equal(a, np.argmin(obj, axis=1))


def test_update_inner_tie_goes_to_smallest_index():
    g = build_grid(3, 1.0)
    # Points -1 and +1 tie at x0 = 0 when D is flat; index 0 wins.
    assert update_inner(np.array([1e-300]), np.array([0.0, 5.0, 0.0]), 1.0, g)[0] == 0


# --- outer update ---------------------------------------------------------------------------

def test_update_outer_point_mass():
    g = build_grid(21, 0.5)
    ch = build_channel(g)
    counts = np.zeros(g.L)
    counts[14] = 7
    out = update_outer(counts, ch, g, zero_outer(g), symmetrize=False)
    np.testing.assert_allclose(out.values, g.points[14], rtol=1e-14)


def test_update_outer_symmetric_mass_cancels():
    g = build_grid(21, 0.5)
    counts = np.zeros(g.L)
    counts[[4, 16]] = 5
    out = update_outer(counts, build_channel(g), g, zero_outer(g))
    assert out.values[g.center] == 0.0


def test_update_outer_two_levels_against_per_sample_mean():
    g = build_grid(9, 0.5)
    ch = build_channel(g, 4)
    # Three samples on level 1 and one on level 2, each also mirrored.
    idx = g.center + np.array([2, 2, 2, 4])
    out = update_outer(level_counts(idx, g), ch, g, zero_outer(g))
    np.testing.assert_allclose(out.values, naive_outer(idx, ch), rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_update_outer_matches_naive_random(seed):
    rng = np.random.default_rng(100 + seed)
    L = int(rng.choice([5, 7, 9, 11]))
    g = build_grid(L, float(rng.uniform(0.3, 2.0)))
    ch = build_channel(g, int(rng.integers(1, L + 1)))
    idx = rng.integers(0, L, size=int(rng.integers(1, 201)))
    out = update_outer(level_counts(idx, g), ch, g, zero_outer(g))
    np.testing.assert_allclose(out.values, naive_outer(idx, ch), rtol=0, atol=1e-12)


def test_update_outer_keeps_previous_where_unreachable():
    g = grid_for(201, 5.0)
    ch = build_channel(g)
    counts = np.zeros(g.L)
    counts[[g.center - 1, g.center + 1]] = 1
    prev = OuterPolicy(g, symmetrize_odd(np.arange(g.L, dtype=float)))
    out = update_outer(counts, ch, g, prev)
    np.testing.assert_array_equal(out.values[:10], prev.values[:10])


def test_update_outer_rejects_zero_counts():
    g = build_grid(5, 1.0)
    with pytest.raises(ValueError):
        update_outer(np.zeros(5), build_channel(g), g, zero_outer(g))


# --- sample cost ----------------------------------------------------------------------------

def test_sample_cost_quantizer_zero_outer():
    g = build_grid(41, 0.5)
    x = sample_source(1000, 5.0, 8)
    a = quantize_index(g, x)
    q = g.points[a]
    D = distortion_profile(zero_outer(g), build_channel(g))
    expected = np.mean(0.3 ** 2 * (q - x) ** 2 + q ** 2)
    assert sample_cost(x, a, D, 0.3, g) == pytest.approx(expected, rel=1e-13)


def test_sample_cost_all_zero_policy():
    g = grid_for(201, 5.0)
    x = sample_source(200_000, 5.0, 9)
    a = np.full(x.size, g.center)
    J = sample_cost(x, a, distortion_profile(zero_outer(g), build_channel(g)), 0.2, g)
    assert J == pytest.approx(0.04 * np.mean(x ** 2), rel=1e-13)
    assert J == pytest.approx(1.0, abs=0.02)


@pytest.mark.parametrize("seed", range(4))
def test_sample_cost_matches_naive_loop(seed):
    rng = np.random.default_rng(200 + seed)
    g = build_grid(int(rng.choice([5, 7, 9, 11])), float(rng.uniform(0.4, 2.0)))
    ch = build_channel(g, 3)
    outer = random_odd_outer(g, rng)
    x = np.sort(np.abs(rng.normal(0, 4, 150)))
    a = rng.integers(0, g.L, x.size)
    k = float(rng.uniform(0.1, 1.5))
    J = sample_cost(x, a, distortion_profile(outer, ch), k, g)
    assert J == pytest.approx(naive_cost(x, a, outer, ch, k), abs=1e-10)


# --- inner loop -----------------------------------------------------------------------------

def small_state(k=0.2, L=201, n=20_000, seed=1):
    g = grid_for(L, 5.0)
    return initial_state(sample_source(n, 5.0, seed), g, k)


def test_converge_infinite_delta_single_iteration():
    st, res = converge_inner(small_state(), delta=math.inf, max_iter=50)
    assert res.iterations == 1 and len(res.trace) == 1


def test_converge_from_fixed_point_stops_on_second_pass():
    st, _ = converge_inner(small_state(k=1.0), delta=1e-12, max_iter=500)
    st2, res = converge_inner(st, delta=1e-12, max_iter=500)
    assert res.iterations == 2
    assert res.trace[1] == res.trace[0]


def test_converge_direct_at_target_k():
    st, res = converge_inner(small_state(n=100_000), delta=1e-7, max_iter=500)
    assert res.converged and res.iterations < 500
    tr = np.array(res.trace)
    assert np.all(tr[1:] <= tr[:-1] * (1 + 1e-12))


def test_converged_outer_is_first_order_optimal():
    st, _ = converge_inner(small_state(k=0.3, n=20_000), delta=1e-12, max_iter=500)
    g, ch, k = st.grid, st.channel, st.k
    c = np.bincount(st.assignments, minlength=g.L)

    def full_line_cost(values):
        D = distortion_profile(OuterPolicy(g, values), ch)
        stage1 = k * k * np.mean((g.points[st.assignments] - st.samples) ** 2)
        return stage1 + 0.5 * (np.sum(c * D) + np.sum(c[::-1] * D)) / st.samples.size

    base = full_line_cost(st.outer.values)
    # Only grid points the channel reaches from occupied levels matter.
    reach = np.flatnonzero(np.abs(g.points) < 20)
    for j in reach[::7]:
        for eps in (1e-4, -1e-4):
            v = np.array(st.outer.values)
            v[j] += eps
            assert full_line_cost(v) >= base - 1e-15


def test_divergence_is_reported(monkeypatch):
    import witsenhausen.optimizer as opt
    calls = iter([1.0, 2.0, 3.0])
    monkeypatch.setattr(opt, "sample_cost", lambda *a, **k: next(calls))
    with pytest.raises(DivergenceError) as exc:
        converge_inner(small_state(n=1000), delta=1e-9, max_iter=5)
    assert exc.value.state is not None


# --- relaxation -----------------------------------------------------------------------------

def test_relaxation_degenerates_to_one_stage():
    cfg = OptimizerConfig(k_schedule=(0.5,), L_schedule=(101,), n_samples=20_000, seed=2)
    res = run_relaxation(ProblemParams(0.5, 5.0), cfg)
    st = initial_state(sample_source(20_000, 5.0, 2), grid_for(101, 5.0), 0.5)
    st, single = converge_inner(st, cfg.stop_threshold, cfg.max_inner_iterations)
    assert len(res.stages) == 1
    assert res.stages[0].trace == single.trace
    np.testing.assert_array_equal(res.state.outer.values, st.outer.values)


def test_relaxation_first_stage_near_identity():
    cfg = OptimizerConfig(k_schedule=(3.0,), L_schedule=(201,), n_samples=50_000, seed=3)
    res = run_relaxation(ProblemParams(3.0, 5.0), cfg)
    st = res.state
    inside = st.samples < 20.0
    err = np.abs(st.grid.points[st.assignments] - st.samples)[inside]
    assert np.all(err <= st.grid.delta)


def test_relaxation_rejects_mismatched_target():
    with pytest.raises(ValueError):
        run_relaxation(ProblemParams(0.3, 5.0), OptimizerConfig(k_schedule=(1.0, 0.2), L_schedule=(101,)))


@pytest.mark.parametrize("kwargs", [
    dict(k_schedule=(0.2, 0.3)), dict(L_schedule=(201, 200)), dict(L_schedule=(401, 201)),
    dict(stop_threshold=0.0), dict(n_samples=0), dict(refine_mode="sideways"),
])
def test_config_rejects(kwargs):
    with pytest.raises(ValueError):
        OptimizerConfig(**kwargs)


def test_relaxation_each_k_mode_runs():
    cfg = OptimizerConfig(k_schedule=(1.0, 0.5), L_schedule=(51, 101), n_samples=5000, seed=4,
                          refine_mode="each_k")
    res = run_relaxation(ProblemParams(0.5, 5.0), cfg)
    assert [(s.k, s.L) for s in res.stages] == [(1.0, 51), (0.5, 51), (1.0, 101), (0.5, 101)]


def test_relaxation_deterministic():
    cfg = OptimizerConfig(k_schedule=(1.0, 0.4), L_schedule=(101, 201), n_samples=10_000, seed=5)
    a = run_relaxation(ProblemParams(0.4, 5.0), cfg)
    b = run_relaxation(ProblemParams(0.4, 5.0), cfg)
    np.testing.assert_array_equal(a.state.assignments, b.state.assignments)
    np.testing.assert_array_equal(a.state.outer.values, b.state.outer.values)
    assert [s.trace for s in a.stages] == [s.trace for s in b.stages]
    assert a.report == b.report
