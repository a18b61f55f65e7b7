"""Tests for the adaptive differentiating filter."""

import time
import tracemalloc

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from adf_lab.adf import (
    AdaptiveDifferentiator,
    AdfError,
    AdfParams,
    InvalidParamsError,
    InvalidSampleError,
    NonIncreasingTimestampError,
    NonUniformSamplingError,
    Sample,
    feasible,
    ls_fit_constrained,
    ls_fit_unconstrained,
    precompute_phi_psi,
)
from adf_lab.differentiators import run_filter
from adf_lab.oracles import chebyshev_deviation, oracle_envelopes, oracle_feasible, oracle_ls

TRIPLE = [Sample(0.0, 0.0), Sample(1.0, 0.0), Sample(2.0, 1.0)]
SHIFTED_TRIPLE = [Sample(-2.0, 0.0), Sample(-1.0, 0.0), Sample(0.0, 1.0)]


@st.composite
def windows(draw, min_size=3, max_size=10):
    """Random windows with strictly increasing times."""
    n = draw(st.integers(min_size, max_size))
    gaps = draw(st.lists(st.floats(0.05, 2.0), min_size=n, max_size=n))
    values = draw(st.lists(st.floats(-1.0, 1.0), min_size=n, max_size=n))
    times = np.cumsum(gaps)
    return [Sample(float(t), float(x)) for t, x in zip(times, values)]


def noisy_line(n, slope, d, ts=0.0005, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(n) * ts
    x = slope * t + rng.uniform(-d, d, size=n)
    return [Sample(float(ti), float(xi)) for ti, xi in zip(t, x)]


# Construction -------------------------------------------------------------


def test_bench_parameters_construct():
    """Test the bench tuning builds a filter with a unit window."""
    adf = AdaptiveDifferentiator(AdfParams(delta=0.0001, r_max=140))

    assert adf.r == 1
    assert adf.samples_seen == 0
    assert adf.window() == []


@pytest.mark.parametrize(
    "kwargs",
    [
        {"delta": 0.0, "r_max": 5},
        {"delta": -1e-3, "r_max": 5},
        {"delta": float("nan"), "r_max": 5},
        {"delta": 0.1, "r_max": 0},
        {"delta": 0.1, "r_max": 2.5},
        {"delta": 0.1, "r_max": 5, "uniform": True},
    ],
)
def test_invalid_params(kwargs):
    """Test invalid tuning is rejected at construction."""
    with pytest.raises(InvalidParamsError):
        AdfParams(**kwargs)


# Stepping -----------------------------------------------------------------


def test_first_sample_has_no_derivative():
    """Test the first sample passes through without a derivative."""
    adf = AdaptiveDifferentiator(AdfParams(delta=0.1, r_max=5))
    out = adf.step(Sample(0.0, 4.2))

    assert out.x_hat == 4.2
    assert out.dx_hat is None
    assert out.has_derivative is False
    assert out.r_star is None


def test_exact_ramp():
    """Test a noise-free ramp gives its slope with a full window after warm-up."""
    adf = AdaptiveDifferentiator(AdfParams(delta=0.01, r_max=5))
    outputs = run_filter(adf, [Sample(float(t), 3.0 * t) for t in range(10)])

    for l, out in enumerate(outputs[1:], start=1):
        assert out.dx_hat == pytest.approx(3.0, abs=1e-12)
        assert out.r_star == min(l, 5)
    assert [out.r_star for out in outputs[5:]] == [5] * 5


def test_triple_narrow_band_shrinks_to_two_points():
    """Test the triple with delta=0.1 keeps only the newest pair."""
    adf = AdaptiveDifferentiator(AdfParams(delta=0.1, r_max=10))
    out = run_filter(adf, TRIPLE)[-1]

    assert out.r_star == 1
    assert out.dx_hat == pytest.approx(1.0)
    assert out.x_hat == pytest.approx(1.0)
    assert adf.window() == TRIPLE[1:]


def test_triple_wide_band_keeps_three_points():
    """Test the triple with delta=0.3 fits all three samples."""
    adf = AdaptiveDifferentiator(AdfParams(delta=0.3, r_max=10))
    out = run_filter(adf, TRIPLE)[-1]

    assert out.r_star == 2
    assert out.dx_hat == pytest.approx(0.5)
    assert out.x_hat == pytest.approx(5.0 / 6.0)
    assert out.constrained is False


def test_window_capped_by_samples_seen():
    """Test the window never reaches back before the first sample."""
    adf = AdaptiveDifferentiator(AdfParams(delta=1.0, r_max=50))
    outputs = run_filter(adf, [Sample(float(i), 0.0) for i in range(8)])

    assert [out.r_star for out in outputs[1:]] == list(range(1, 8))


def test_window_slides_at_r_max():
    """Test the window stays at r_max and follows the newest sample."""
    adf = AdaptiveDifferentiator(AdfParams(delta=1.0, r_max=3))
    run_filter(adf, [Sample(float(i), 0.0) for i in range(10)])

    assert adf.r == 3
    assert [s.t for s in adf.window()] == [6.0, 7.0, 8.0, 9.0]


def test_noise_within_delta_reaches_r_max():
    """Test noise bounded by delta never shrinks the window of a line."""
    delta = 1e-4
    adf = AdaptiveDifferentiator(AdfParams(delta=delta, r_max=140))
    outputs = run_filter(adf, noisy_line(600, 0.005, 0.999 * delta))

    assert all(out.r_star == min(l, 140) for l, out in enumerate(outputs) if l)


def test_slope_change_shrinks_window():
    """Test a kink larger than the band cuts the window shortly after it."""
    adf = AdaptiveDifferentiator(AdfParams(delta=1e-4, r_max=140))
    t = np.arange(400) * 0.0005
    x = np.where(t < 0.1, 0.0, 0.05 * (t - 0.1))
    outputs = run_filter(adf, [Sample(float(a), float(b)) for a, b in zip(t, x)])

    assert outputs[199].r_star == 140
    assert outputs[220].r_star < 60
    assert outputs[-1].dx_hat == pytest.approx(0.05, rel=1e-6)


def test_output_stays_in_band():
    """Test the estimate stays within delta of the newest measurement."""
    delta = 1e-4
    samples = noisy_line(800, 0.01, 3 * delta, seed=3)
    adf = AdaptiveDifferentiator(AdfParams(delta=delta, r_max=60))

    for s in samples:
        out = adf.step(s)
        assert abs(out.x_hat - s.x) <= delta + 1e-15


def test_r_star_is_largest_feasible_window():
    """Test every chosen window is feasible and one more sample is not."""
    delta = 0.05
    rng = np.random.default_rng(11)
    t = np.cumsum(rng.uniform(0.1, 1.0, size=120))
    x = np.sin(t) + rng.uniform(-0.08, 0.08, size=t.size)
    samples = [Sample(float(a), float(b)) for a, b in zip(t, x)]
    r_max = 15
    adf = AdaptiveDifferentiator(AdfParams(delta=delta, r_max=r_max))

    for l, s in enumerate(samples):
        out = adf.step(s)
        if l == 0:
            continue
        r = out.r_star
        assert oracle_feasible(samples[l - r : l + 1], delta)
        if r < min(r_max, l):
            assert not oracle_feasible(samples[l - r - 1 : l + 1], delta)


# Stream validation ---------------------------------------------------------


def test_non_increasing_timestamp_leaves_state():
    """Test a repeated timestamp is rejected and the state is untouched."""
    adf = AdaptiveDifferentiator(AdfParams(delta=0.3, r_max=10))
    run_filter(adf, TRIPLE)
    window, m_bar, big_m_bar = adf.window(), adf.m_bar, adf.M_bar

    with pytest.raises(NonIncreasingTimestampError):
        adf.step(Sample(2.0, 5.0))
    with pytest.raises(NonIncreasingTimestampError):
        adf.step(Sample(1.5, 5.0))

    assert adf.window() == window
    assert np.array_equal(adf.m_bar, m_bar)
    assert np.array_equal(adf.M_bar, big_m_bar)
    assert adf.samples_seen == 3


def test_non_finite_sample_rejected():
    """Test NaN values are rejected."""
    adf = AdaptiveDifferentiator(AdfParams(delta=0.1, r_max=5))
    adf.step(Sample(0.0, 0.0))

    with pytest.raises(InvalidSampleError):
        adf.step(Sample(1.0, float("nan")))
    assert adf.samples_seen == 1


def test_reset_restores_fresh_state():
    """Test reset makes the filter behave as newly built."""
    params = AdfParams(delta=0.3, r_max=10)
    adf = AdaptiveDifferentiator(params)
    run_filter(adf, TRIPLE)
    adf.reset()

    assert adf.samples_seen == 0
    assert adf.window() == []
    assert run_filter(adf, TRIPLE) == run_filter(AdaptiveDifferentiator(params), TRIPLE)


# Uniform fast path ---------------------------------------------------------


def test_uniform_path_matches_general_path():
    """Test precomputed weights give the same estimates as the general fit."""
    ts = 0.0005
    samples = noisy_line(1500, 0.02, 2e-4, ts=ts, seed=5)
    general = run_filter(AdaptiveDifferentiator(AdfParams(delta=1e-4, r_max=140)), samples)
    uniform = run_filter(
        AdaptiveDifferentiator(AdfParams(delta=1e-4, r_max=140, ts=ts, uniform=True)), samples
    )

    for a, b in zip(general[1:], uniform[1:]):
        assert a.r_star == b.r_star
        assert b.dx_hat == pytest.approx(a.dx_hat, rel=1e-7, abs=1e-9)
        assert b.x_hat == pytest.approx(a.x_hat, rel=1e-9, abs=1e-12)


def test_uniform_path_rejects_off_grid_sample():
    """Test the fast path refuses a sample off the sampling grid."""
    adf = AdaptiveDifferentiator(AdfParams(delta=1e-4, r_max=20, ts=0.0005, uniform=True))
    adf.step(Sample(0.0, 0.0))
    adf.step(Sample(0.0005, 0.0))

    with pytest.raises(NonUniformSamplingError):
        adf.step(Sample(0.0011, 0.0))
    assert adf.samples_seen == 2


# Envelopes -----------------------------------------------------------------


def test_add_right_envelopes():
    """Test adding (2, 1) to {(0, 0), (1, 0)} updates both envelopes."""
    adf = AdaptiveDifferentiator(AdfParams(delta=0.1, r_max=10))
    for s in TRIPLE:
        adf.add_right(s)

    assert list(adf.m_bar) == pytest.approx([0.8, 0.4])
    assert list(adf.M_bar) == pytest.approx([1.2, 0.2])


def test_add_right_to_singleton():
    """Test the first pair gives slope +/- 2 delta / dt."""
    adf = AdaptiveDifferentiator(AdfParams(delta=0.1, r_max=10))
    adf.add_right(Sample(0.0, 5.0))
    adf.add_right(Sample(1.0, 5.0))

    assert list(adf.m_bar) == pytest.approx([-0.2])
    assert list(adf.M_bar) == pytest.approx([0.2])


def test_remove_left_truncates():
    """Test removing the oldest sample drops the last envelope entry."""
    adf = AdaptiveDifferentiator(AdfParams(delta=0.1, r_max=10))
    for s in TRIPLE:
        adf.add_right(s)
    adf.remove_left()

    assert list(adf.m_bar) == pytest.approx([0.8])
    assert list(adf.M_bar) == pytest.approx([1.2])
    assert adf.is_feasible()
    with pytest.raises(AdfError):
        adf.remove_left()


def test_point_on_witness_line_keeps_slope_feasible():
    """Test a sample on a line that fits the window keeps that slope inside [m, M]."""
    delta = 0.05
    samples = noisy_line(20, 1.0, 0.03, ts=0.1, seed=2)
    adf = AdaptiveDifferentiator(AdfParams(delta=delta, r_max=30))
    run_filter(adf, samples)
    k = 0.5 * (adf.m_bar.max() + adf.M_bar.min())
    residuals = [s.x - k * s.t for s in adf.window()]
    b = 0.5 * (max(residuals) + min(residuals))
    t_new = samples[-1].t + 0.1
    adf.add_right(Sample(t_new, k * t_new + b))

    assert adf.m_bar.max() <= k + 1e-12
    assert k <= adf.M_bar.min() + 1e-12


@settings(max_examples=200, deadline=None)
@given(
    window=windows(min_size=2, max_size=12),
    delta=st.floats(0.01, 0.5),
    ops=st.lists(st.booleans(), max_size=12),
)
def test_envelopes_match_recomputation(window, delta, ops):
    """Test any add/remove interleaving keeps the envelopes equal to a full recomputation."""
    adf = AdaptiveDifferentiator(AdfParams(delta=delta, r_max=len(window)))
    adf.add_right(window[0])
    adf.add_right(window[1])
    pending = list(window[2:])
    for remove in ops:
        if remove and adf.r > 1:
            adf.remove_left()
        elif pending:
            adf.add_right(pending.pop(0))
        m_bar, big_m_bar, _, _ = oracle_envelopes(adf.window(), delta)
        assert list(adf.m_bar) == pytest.approx(m_bar, rel=1e-9, abs=1e-12)
        assert list(adf.M_bar) == pytest.approx(big_m_bar, rel=1e-9, abs=1e-12)


def test_envelopes_long_random_run():
    """Test 10,000 random add/remove steps keep the envelopes equal to a full recomputation."""
    rng = np.random.default_rng(77)
    delta = 0.05
    adf = AdaptiveDifferentiator(AdfParams(delta=delta, r_max=12))
    t = 0.0
    x = 0.0
    worst = 0.0
    for _ in range(10_000):
        if adf.samples_seen >= 2 and adf.r > 1 and rng.random() < 0.4:
            adf.remove_left()
        else:
            t += float(rng.uniform(0.01, 1.0))
            x += float(rng.normal(scale=0.1))
            adf.add_right(Sample(t, x))
        if adf.samples_seen < 2:
            continue
        m_bar, big_m_bar, _, _ = oracle_envelopes(adf.window(), delta)
        assert len(adf.m_bar) == len(m_bar) == adf.r
        for got, want in zip(np.concatenate([adf.m_bar, adf.M_bar]), m_bar + big_m_bar):
            worst = max(worst, abs(got - want) / max(abs(want), 1e-300))

    assert worst <= 1e-12


# Feasibility ---------------------------------------------------------------


def test_two_points_always_feasible():
    """Test any two points admit an exact line."""
    assert feasible([Sample(0.0, -3.0), Sample(0.001, 7.0)], 1e-9)
    assert feasible([Sample(0.0, 1.0)], 0.1)


def test_triple_feasibility_threshold():
    """Test the triple becomes feasible exactly at its minimax deviation 0.25."""
    assert not feasible(TRIPLE, 0.1)
    assert feasible(TRIPLE, 0.25)
    assert not feasible(TRIPLE, 0.249)


def test_feasible_rejects_bad_input():
    """Test feasibility checks its arguments."""
    with pytest.raises(InvalidParamsError):
        feasible(TRIPLE, 0.0)
    with pytest.raises(NonIncreasingTimestampError):
        feasible([Sample(1.0, 0.0), Sample(1.0, 1.0)], 0.1)


@settings(max_examples=300, deadline=None)
@given(window=windows(), delta=st.floats(0.01, 1.0))
def test_feasible_matches_oracle(window, delta):
    """Test the envelope test agrees with the minimax line fit."""
    assume(abs(chebyshev_deviation(window) - delta) > 1e-9)

    assert feasible(window, delta) == oracle_feasible(window, delta)


def test_feasible_matches_oracle_seeded_trials():
    """Test 1000 seeded random windows agree with the minimax line fit."""
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n = int(rng.integers(2, 11))
        t = np.cumsum(rng.uniform(0.01, 1.0, size=n))
        x = rng.normal(size=n)
        delta = float(rng.uniform(0.05, 1.5))
        window = [Sample(float(a), float(b)) for a, b in zip(t, x)]
        if abs(chebyshev_deviation(window) - delta) < 1e-9:
            continue
        assert feasible(window, delta) == oracle_feasible(window, delta)


def test_feasible_matches_oracle_mixed_scales():
    """Test agreement on windows of mixed time offsets and value scales with delta from 1e-6 to 1."""
    rng = np.random.default_rng(31)
    checked = 0
    elapsed = 0.0
    for _ in range(1500):
        n = int(rng.integers(2, 11))
        offset = 10.0 ** rng.uniform(-3.0, 3.0)
        t = offset + np.cumsum(rng.uniform(1e-3, 1.0, size=n))
        scale = 10.0 ** rng.uniform(-6.0, 1.0)
        x = scale * rng.normal(size=n)
        delta = float(10.0 ** rng.uniform(-6.0, 0.0))
        window = [Sample(float(a), float(b)) for a, b in zip(t, x)]
        if abs(chebyshev_deviation(window) - delta) <= 1e-9 * max(delta, scale):
            continue
        started = time.perf_counter()
        result = feasible(window, delta)
        elapsed += time.perf_counter() - started
        assert result == oracle_feasible(window, delta), (n, offset, scale, delta)
        checked += 1

    assert checked >= 1000
    assert elapsed < 5.0


@settings(max_examples=100, deadline=None)
@given(window=windows(min_size=4, max_size=10), delta=st.floats(0.01, 1.0))
def test_feasibility_is_monotone(window, delta):
    """Test every suffix of a feasible window is feasible."""
    if feasible(window, delta):
        for start in range(1, len(window) - 1):
            assert feasible(window[start:], delta)


# Least squares -------------------------------------------------------------


def test_ls_two_points():
    """Test two points are interpolated exactly."""
    k, b = ls_fit_unconstrained([Sample(-1.0, 0.0), Sample(0.0, 1.0)])

    assert k == pytest.approx(1.0)
    assert b == pytest.approx(1.0)


def test_ls_three_points():
    """Test the shifted triple fit."""
    k, b = ls_fit_unconstrained(SHIFTED_TRIPLE)

    assert k == pytest.approx(0.5)
    assert b == pytest.approx(5.0 / 6.0)


def test_ls_constant_window():
    """Test a constant window gives zero slope."""
    k, b = ls_fit_unconstrained([Sample(float(t), 2.5) for t in range(6)])

    assert k == pytest.approx(0.0, abs=1e-15)
    assert b == pytest.approx(2.5)


def test_ls_constrained_pins_intercept():
    """Test the intercept is clamped to the band and the slope refitted."""
    k, b, constrained = ls_fit_constrained(SHIFTED_TRIPLE, 0.1)

    assert constrained is True
    assert b == pytest.approx(0.9)
    assert k == pytest.approx(0.54)


def test_ls_constrained_passthrough():
    """Test an intercept already inside the band is kept."""
    k, b, constrained = ls_fit_constrained(SHIFTED_TRIPLE, 0.2)

    assert constrained is False
    assert (k, b) == pytest.approx((0.5, 5.0 / 6.0))


def test_ls_exact_line_is_unconstrained():
    """Test a line through every point is returned unchanged."""
    window = [Sample(float(t), 2.0 * t - 1.0) for t in range(5)]
    k, b, constrained = ls_fit_constrained(window, 1e-6)

    assert constrained is False
    assert k == pytest.approx(2.0)
    assert b == pytest.approx(7.0)


@settings(max_examples=150, deadline=None)
@given(window=windows(min_size=2, max_size=10), delta=st.floats(0.01, 0.5))
def test_ls_matches_oracle(window, delta):
    """Test both fits agree with the normal equations and the 1-D search."""
    k, b = ls_fit_unconstrained(window)
    k_ref, b_ref = oracle_ls(window)
    assert k == pytest.approx(k_ref, rel=1e-9, abs=1e-9)
    assert b == pytest.approx(b_ref, rel=1e-9, abs=1e-9)

    k_c, b_c, _ = ls_fit_constrained(window, delta)
    k_cref, b_cref = oracle_ls(window, delta)
    assert b_c == pytest.approx(b_cref, abs=1e-6)
    assert k_c == pytest.approx(k_cref, rel=1e-5, abs=1e-5)


def test_ls_needs_two_samples():
    """Test a single sample is not a window."""
    with pytest.raises(AdfError):
        ls_fit_unconstrained([Sample(0.0, 1.0)])


# Precomputed weights -------------------------------------------------------


def test_phi_psi_three_points():
    """Test the weights on the grid -2, -1, 0."""
    phi, psi = precompute_phi_psi(2, 1.0)

    assert phi == pytest.approx([-0.5, 0.0, 0.5])
    assert psi == pytest.approx([-1.0 / 6.0, 1.0 / 3.0, 5.0 / 6.0])
    assert float(np.dot([0.0, 0.0, 1.0], phi)) == pytest.approx(0.5)
    assert float(np.dot([0.0, 0.0, 1.0], psi)) == pytest.approx(5.0 / 6.0)


def test_phi_psi_two_points():
    """Test r=1 reduces to the two-point difference quotient."""
    phi, _ = precompute_phi_psi(1, 0.002)

    assert float(np.dot([3.0, 5.0], phi)) == pytest.approx(1000.0)


@pytest.mark.parametrize("r", [1, 2, 7, 140])
def test_phi_psi_sums(r):
    """Test constants give zero slope and their own value."""
    phi, psi = precompute_phi_psi(r, 0.0005)

    assert phi.sum() == pytest.approx(0.0, abs=1e-6)
    assert psi.sum() == pytest.approx(1.0)


# Resources -----------------------------------------------------------------


def test_no_memory_growth_after_warm_up():
    """Test steady-state stepping does not grow memory."""
    samples = noisy_line(6000, 0.005, 1e-4, seed=9)
    adf = AdaptiveDifferentiator(AdfParams(delta=1e-4, r_max=140))
    run_filter(adf, samples[:1000])

    tracemalloc.start()
    try:
        before, _ = tracemalloc.get_traced_memory()
        for s in samples[1000:]:
            adf.step(s)
        after, _ = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()

    assert after - before < 64 * 1024


def _ns_per_sample(r_max, samples):
    best = float("inf")
    for _ in range(3):
        adf = AdaptiveDifferentiator(AdfParams(delta=1e-4, r_max=r_max))
        started = time.perf_counter_ns()
        for s in samples:
            adf.step(s)
        best = min(best, (time.perf_counter_ns() - started) / len(samples))
    return best


def test_runtime_grows_at_most_linearly_in_r_max():
    """Test quadrupling r_max does not more than double the per-sample cost twice over."""
    samples = noisy_line(3000, 0.005, 1e-4, seed=4)
    cost = {r: _ns_per_sample(r, samples) for r in (35, 70, 140)}

    assert cost[70] < 4 * cost[35]
    assert cost[140] < 8 * cost[35]
