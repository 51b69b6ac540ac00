import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluxdpd import (
    NMSE_DB_FLOOR,
    BiasTeeHighPass,
    ExponentialOvershoot,
    FirTaps,
    IirFilterSpec,
    SecondOrderAwg,
    Signal,
    SingularSystemError,
    SynthesisConfig,
    apply_distortion,
    apply_fir,
    apply_iir,
    design_inverse_iir,
    design_residual_fir,
    evaluate_correction,
    make_step,
    nmse_db,
    search_min_taps,
)
from fluxdpd.synthesis import equation_error, solve_least_squares

FS = 2.4e9


def step(duration=1e-6, delay=0.0, amp=1.0):
    return make_step(amp, delay, duration, FS)


def overshoot_inverse(a, tau):
    r = math.exp(-1 / (FS * tau))
    return np.array([1 / (1 + a), -r / (1 + a)]), np.array([(r + a) / (1 + a)])


def test_identity_design():
    t = step()
    spec = design_inverse_iir(t, t, SynthesisConfig(0, 1))
    np.testing.assert_allclose(spec.feedforward, [1.0], rtol=1e-14)


@pytest.mark.parametrize("a,tau", [(0.1, 10e-9), (0.1, 100e-9), (-0.3, 50e-9)])
def test_overshoot_inverse_recovered(a, tau):
    t = step()
    m = apply_distortion(ExponentialOvershoot(a, tau), t)
    spec = design_inverse_iir(m, t, SynthesisConfig(1, 2))
    b, fb = overshoot_inverse(a, tau)
    np.testing.assert_allclose(spec.feedforward, b, atol=1e-9)
    np.testing.assert_allclose(spec.feedback, fb, atol=1e-9)
    assert equation_error(m, t, spec) < 1e-18
    assert nmse_db(t, apply_iir(m, spec)) < -150


def test_awg_inverse_exact_at_full_order():
    t = step(200e-9)
    m = apply_distortion(SecondOrderAwg.from_period(20e-9, 0.6), t)
    spec = design_inverse_iir(m, t, SynthesisConfig(2, 3))
    # the inverse has a double pole at z = -1 and taps of order 1e2, so
    # rounding alone leaves a residual near 1e-17
    assert equation_error(m, t, spec) < 1e-15
    np.testing.assert_allclose(np.roots(spec.denominator), [-1, -1], atol=1e-3)
    # running it lets rounding errors grow along the repeated pole
    assert nmse_db(t, apply_iir(m, spec)) < -90


def test_rank_deficient_window_is_reported():
    t = step(10e-9)
    with pytest.raises(SingularSystemError, match="window"):
        design_inverse_iir(t, t, SynthesisConfig(1, 2))


def test_window_shorter_than_unknowns_rejected():
    with pytest.raises(ValueError):
        SynthesisConfig(2, 3, fit_window=(0, 4))


@pytest.mark.parametrize("bad", [dict(m_a=-1, m_b=1), dict(m_a=0, m_b=0), dict(m_a=0, m_b=1, regularization=-1)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        SynthesisConfig(**bad)


def test_least_squares_fallback_and_ridge():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(20, 3))
    y = X @ np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(solve_least_squares(X, y), [1, -2, 0.5], rtol=1e-12)
    # ill conditioned but full rank: takes the orthogonal path
    X2 = X.copy()
    X2[:, 2] = X2[:, 1] + 1e-7 * rng.normal(size=20)
    coef = solve_least_squares(X2, X2 @ np.array([1.0, -2.0, 0.5]))
    np.testing.assert_allclose(X2 @ coef, X2 @ np.array([1.0, -2.0, 0.5]), atol=1e-9)
    # exactly collinear columns
    X3 = np.column_stack([X[:, 0], X[:, 0]])
    with pytest.raises(SingularSystemError):
        solve_least_squares(X3, y)
    # a ridge makes it solvable
    assert solve_least_squares(X3, X[:, 0], ridge=1e-9) == pytest.approx([0.5, 0.5], rel=1e-6)


# residual FIR


def test_fir_identity():
    t = step()
    np.testing.assert_allclose(design_residual_fir(t, t, 1).taps, [1.0], rtol=1e-14)


def test_fir_recovers_one_sample_delay():
    # the target is the corrected step one sample later
    corrected = step(100e-9, delay=5 / FS)
    target = step(100e-9, delay=6 / FS)
    g = design_residual_fir(corrected, target, 2, fit_window=(5, len(target)))
    np.testing.assert_allclose(g.taps, [0.0, 1.0], atol=1e-9)


def test_fir_only_uses_full_memory_rows():
    with pytest.raises(ValueError, match="full-memory"):
        design_residual_fir(step(10e-9), step(10e-9), 20)


def test_fir_ridge_pulls_towards_pass_through():
    # an undistorted step leaves the taps unidentifiable; the ridge picks a pass-through
    t = step(100e-9)
    g = design_residual_fir(t, t, 16, regularization=1e-6)
    expected = np.zeros(16)
    expected[0] = 1.0
    np.testing.assert_allclose(g.taps, expected, atol=1e-12)


def test_fir_corrects_residual_ringing():
    t = step(200e-9)
    m = apply_distortion(SecondOrderAwg.from_period(5e-9, 0.7), t)
    g = design_residual_fir(m, t, 48, regularization=1e-9)
    out = apply_fir(m, g)
    assert np.max(np.abs(out.samples[47:] - 1)) < 1e-3


# tap search


def test_search_no_distortion():
    t = step()
    res = search_min_taps(t, t, -30.0, 2, 4)
    assert (res.config.m_a, res.config.m_b) == (0, 1)
    assert res.met and res.nmse_db == NMSE_DB_FLOOR


def test_search_overshoot_needs_one_pole_when_a_gain_cannot_fix_it():
    # with a pronounced overshoot over a few time constants, (1, 2) is the first to pass
    t = step(100e-9)
    m = apply_distortion(ExponentialOvershoot(0.3, 10e-9), t)
    res = search_min_taps(m, t, -30.0, 2, 4)
    assert (res.config.m_a, res.config.m_b) == (1, 2)


def test_search_overshoot_small_amplitude_met_by_a_gain():
    # A = 0.1, tau = 10 ns is already below -30 dB after a single gain tap
    t = step(100e-9)
    m = apply_distortion(ExponentialOvershoot(0.1, 10e-9), t)
    res = search_min_taps(m, t, -30.0, 2, 4)
    assert (res.config.m_a, res.config.m_b) == (0, 1)
    assert res.nmse_db <= -30


def test_search_awg_regression():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = SecondOrderAwg(2 * math.pi * 50e6, 0.6)
    t = step(200e-9)
    m = apply_distortion(model, t)
    res = search_min_taps(m, t, -30.0, 2, 3)
    assert res.met
    assert (res.config.m_a, res.config.m_b) == (2, 3)
    assert res.nmse_db < -90


def test_search_reports_unmet():
    t = step(200e-9)
    m = apply_distortion(SecondOrderAwg.from_period(20e-9, 0.6), t)
    res = search_min_taps(m, t, -200.0, 1, 1)
    assert not res.met
    assert (res.config.m_a, res.config.m_b) in res.grid


def test_search_skips_unstable_bias_tee_inverse_unless_marginal_allowed():
    t = step(100e-6)
    m = apply_distortion(BiasTeeHighPass(100e-6), t)
    strict = search_min_taps(m, t, -30.0, 1, 2)
    assert any(k == (1, 2) for k, _ in strict.skipped)
    marginal = search_min_taps(m, t, -30.0, 1, 2, allow_marginal=True)
    assert (marginal.config.m_a, marginal.config.m_b) == (1, 2)
    assert marginal.nmse_db < -100


def test_search_parallel_matches_serial():
    t = step(200e-9)
    m = apply_distortion(SecondOrderAwg.from_period(20e-9, 0.6), t)
    a = search_min_taps(m, t, -60.0, 2, 4, exhaustive=True)
    b = search_min_taps(m, t, -60.0, 2, 4, exhaustive=True, workers=4)
    assert a.config == b.config
    assert a.grid == b.grid


@pytest.mark.parametrize(
    "model,duration",
    [
        (SecondOrderAwg.from_period(20e-9, 0.6), 200e-9),
        (ExponentialOvershoot(0.1, 100e-9), 1e-6),
        (ExponentialOvershoot(0.05, 8e-9), 100e-9),
    ],
)
def test_best_achievable_nmse_is_monotone(model, duration):
    t = step(duration)
    m = apply_distortion(model, t)
    grid = search_min_taps(m, t, -math.inf, 2, 4, exhaustive=True).grid
    # best over every configuration no larger in either order
    best = {
        (ma, mb): min(v for (a, b), v in grid.items() if a <= ma and b <= mb)
        for (ma, mb) in grid
    }
    for (ma, mb), v in best.items():
        for nxt in ((ma + 1, mb), (ma, mb + 1)):
            if nxt in best:
                assert best[nxt] <= v + 1e-9


def test_fir_only_nmse_is_monotone_in_length():
    t = step(200e-9)
    m = apply_distortion(SecondOrderAwg.from_period(20e-9, 0.6), t)
    grid = search_min_taps(m, t, -math.inf, 0, 8, exhaustive=True).grid
    values = [grid[(0, mb)] for mb in range(1, 9)]
    assert all(b <= a + 1e-9 for a, b in zip(values, values[1:]))


@settings(max_examples=25, deadline=None)
@given(st.floats(-0.5, 0.5).filter(lambda a: abs(a) > 1e-3), st.floats(5e-9, 1e-6), st.floats(0.01, 100))
def test_design_is_scale_invariant(a, tau, c):
    t = step(300e-9)
    m = apply_distortion(ExponentialOvershoot(a, tau), t)
    s1 = design_inverse_iir(m, t, SynthesisConfig(1, 2))
    s2 = design_inverse_iir(
        Signal(c * m.samples, FS), Signal(c * t.samples, FS), SynthesisConfig(1, 2)
    )
    np.testing.assert_allclose(s2.feedforward, s1.feedforward, atol=1e-9)
    np.testing.assert_allclose(s2.feedback, s1.feedback, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.floats(-0.5, 0.5), st.floats(5e-9, 1e-6), st.floats(0.2, 0.9))
def test_predistortion_commutes_with_distortion(a, tau, zeta):
    chain = ExponentialOvershoot(a, tau)
    iir = IirFilterSpec([0.7, 0.2], [zeta])
    x = step(200e-9, delay=3 / FS)
    pre = apply_distortion(chain, apply_iir(x, iir)).samples
    post = apply_iir(apply_distortion(chain, x), iir).samples
    np.testing.assert_allclose(pre, post, rtol=1e-9, atol=1e-12)


# evaluate_correction


def test_evaluate_identity_chain():
    t = step(100e-9)
    r = evaluate_correction(None, IirFilterSpec([1.0]), FirTaps([1.0]), t)
    assert r.max_dev_iir == 0.0 and r.max_dev_fir == 0.0
    assert r.nmse_db == NMSE_DB_FLOOR


def test_evaluate_analytic_overshoot_inverse():
    a, tau = 0.1, 100e-9
    b, fb = overshoot_inverse(a, tau)
    r = evaluate_correction(ExponentialOvershoot(a, tau), IirFilterSpec(b, fb), None, step())
    assert r.max_dev_iir < 1e-9
    assert r.max_dev_fir is None and r.stable


def test_evaluate_default_settle_skips_edge():
    t = step(100e-9, delay=10 / FS)
    # a one-sample smear of the edge is not counted
    r = evaluate_correction(None, IirFilterSpec([0.5, 0.5]), None, t)
    assert r.max_dev_iir == 0.0
    with pytest.raises(ValueError):
        evaluate_correction(None, IirFilterSpec([1.0]), None, t, settle_index=len(t))
