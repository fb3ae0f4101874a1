import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

import fracsmooth as fs
from fracsmooth.functionals import NormCurve, curve_time_grid, phi_q
from fracsmooth.smoothness import (Budgets, classify_ladder, equivalence_ladders,
                                   estimate_theta, interpolation_check,
                                   theta_one_diagnostic, verify_equivalence)

T_GRID = curve_time_grid(1.0, 40)


def _curve(values, kind="residual", times=None, ses=None, horizon=1.0):
    times = T_GRID if times is None else times
    return NormCurve(kind=kind, p=2.0, measure="Q", times=times,
                     values=np.asarray(values, dtype=float),
                     ses=np.zeros(len(times)) if ses is None else
                     np.asarray(ses, dtype=float), horizon=horizon)


# ------------------------------------------------------------- theta fitting

@pytest.mark.parametrize("theta", [0.25, 0.5, 0.75, 1.0])
def test_power_law_recovery_all_kinds(theta):
    taus = 1.0 - T_GRID
    for kind, exponent in (("residual", theta / 2),
                           ("gradient", (theta - 1) / 2),
                           ("hessian", (theta - 2) / 2)):
        fit = estimate_theta(_curve(taus ** exponent, kind=kind))
        assert fit.flag == "ok"
        assert fit.theta == pytest.approx(theta, abs=1e-9)


def test_injected_theta_070():
    fit = estimate_theta(_curve((1.0 - T_GRID) ** 0.35))
    assert fit.theta == pytest.approx(0.70, abs=1e-10)


@given(st.floats(0.1, 1.2))
@settings(max_examples=30, deadline=None)
def test_power_law_recovery_random_exponent(theta):
    taus = 1.0 - T_GRID
    fit = estimate_theta(_curve(taus ** (theta / 2)))
    assert fit.theta == pytest.approx(theta, abs=1e-8)


def test_too_few_points_is_inconclusive():
    times = T_GRID[:8]
    fit = estimate_theta(_curve((1.0 - times) ** 0.25, times=times))
    assert fit.flag == "inconclusive"
    assert np.isnan(fit.theta)


def test_noisy_points_are_downweighted_not_fatal():
    taus = 1.0 - T_GRID
    vals = taus ** 0.25
    ses = np.where(taus < 3e-3, vals * 0.6, vals * 0.01)  # drown the tail
    fit = estimate_theta(_curve(vals, ses=ses))
    assert fit.flag == "ok"
    assert fit.theta == pytest.approx(0.5, abs=0.02)


def _indicator_curves(times=T_GRID):
    # closed-form curves of the indicator payoff on standard Brownian motion
    t = times
    r = np.sqrt(0.25 - np.arcsin(t) / (2 * np.pi))
    g = np.sqrt(1.0 / (2 * np.pi * np.sqrt(1 - t * t)))
    h = np.sqrt(t * (1 - t) ** -1.5 * (1 + t) ** -1.5 / (2 * np.pi))
    return (_curve(r, "residual", times), _curve(g, "gradient", times),
            _curve(h, "hessian", times))


def test_indicator_closed_form_theta_half():
    rc, gc, hc = _indicator_curves()
    assert estimate_theta(rc).theta == pytest.approx(0.5, abs=0.05)
    assert estimate_theta(gc).theta == pytest.approx(0.5, abs=0.05)
    assert estimate_theta(hc).theta == pytest.approx(0.5, abs=0.05)


def test_power_payoff_theta_alpha_plus_half():
    # oracle route: R2(t)^2 = E[g^2] - E[v(t, B_t)^2] with v from the closed
    # form; the outer average needs adaptive quadrature split at the kink to
    # resolve the sqrt(tau) boundary layer
    from scipy.integrate import quad
    from fracsmooth.valuation import _power_moments
    alpha = 0.25
    e_g2 = float(_power_moments(np.array([0.0]), 2 * alpha)[0][0])

    def e_v2(t):
        tau = 1.0 - t
        st_ = math.sqrt(t)

        def f(x):
            c = x / math.sqrt(tau)
            v = tau ** (alpha / 2) * float(_power_moments(np.array([c]), alpha)[0][0])
            return v * v * norm.pdf(x, scale=st_)

        a1, _ = quad(f, -12 * st_, 0.0, limit=400, epsabs=1e-14, epsrel=1e-12)
        a2, _ = quad(f, 0.0, 12 * st_, limit=400, epsabs=1e-14, epsrel=1e-12)
        return a1 + a2

    # the power law carries a tau^(1/4) transient, so confirm it deep in tau
    taus = np.geomspace(1e-4, 1e-8, 17)
    vals = [math.sqrt(max(e_g2 - e_v2(1.0 - tau), 0.0)) for tau in taus]
    fit = estimate_theta(_curve(np.array(vals), times=1.0 - taus))
    assert fit.theta == pytest.approx(alpha + 0.5, abs=0.02)


# ------------------------------------------------------------------ ladders

def test_classify_ladder_rules():
    mk = lambda vals: phi_q(_curve(np.ones(len(T_GRID))), np.inf, 0.0)
    flat = mk(None)
    flat.ladder = np.array([1.0, 1.0, 1.01, 1.0])
    assert classify_ladder(flat) == "bounded"
    growing = mk(None)
    growing.ladder = np.array([1.0, 1.11, 1.23, 1.37])
    assert classify_ladder(growing) == "divergent"
    mixed = mk(None)
    mixed.ladder = np.array([1.0, 1.11, 1.11, 1.23])
    assert classify_ladder(mixed) == "bounded"


def test_indicator_ladders_bounded_at_half_divergent_at_08():
    rc, gc, hc = _indicator_curves()
    curves = {"residual": rc, "gradient": gc, "hessian": hc}
    lad_half = equivalence_ladders(curves, 0.5, np.inf)
    assert all(classify_ladder(l) == "bounded" for l in lad_half.values())
    lad_08 = equivalence_ladders(curves, 0.8, np.inf)
    assert classify_ladder(lad_08["residual"]) == "divergent"


# ------------------------------------------------------------- equivalence

def test_verify_equivalence_indicator_small_budget(bm, indicator):
    report = verify_equivalence(
        bm, indicator, None, 2.0, np.inf, 0.5,
        Budgets(n_outer=1000, n_inner=300, n_points=24, n_oracle_outer=2500),
        seed=41)
    assert report.verdict == "consistent"
    thetas = [report.fits[k].theta for k in ("residual", "gradient", "hessian")]
    for a in thetas:
        for b in thetas:
            assert abs(a - b) <= 0.1
    assert all(c == "bounded" for c in report.ladder_classes.values())
    # same curves probed at theta = 0.8: the residual ladder must diverge
    lad = equivalence_ladders(report.curves, 0.8, np.inf)
    assert classify_ladder(lad["residual"]) == "divergent"
    # serialization smoke
    assert "consistent" in report.to_json()
    assert "theta" in report.to_text()


def test_verdict_stable_across_seeds(bm, linear):
    reports = [verify_equivalence(
        bm, linear, None, 2.0, np.inf, 0.9,
        Budgets(n_outer=500, n_inner=150, n_points=24, n_oracle_outer=500),
        seed=s) for s in (1, 2)]
    assert reports[0].verdict == reports[1].verdict
    for kind in ("residual",):
        a, b = reports[0].fits[kind], reports[1].fits[kind]
        joint = math.hypot(a.theta_se, b.theta_se)
        assert abs(a.theta - b.theta) <= max(3.0 * joint, 0.01)


def test_measure_robustness_linear_small(bm, linear):
    budget = Budgets(n_outer=800, n_inner=200, n_points=24, n_oracle_outer=800)
    rep_q = verify_equivalence(bm, linear, None, 2.0, np.inf, 0.9, budget,
                               seed=43)
    rep_p = verify_equivalence(bm, linear, fs.constant_drift(1.0), 2.0,
                               np.inf, 0.9, budget, seed=43)
    a, b = rep_q.fits["residual"], rep_p.fits["residual"]
    joint = math.hypot(a.theta_se, b.theta_se)
    assert abs(a.theta - b.theta) <= 0.05 + 3.0 * joint


# ------------------------------------------------------------ interpolation

def _interp_grid(n=400):
    taus = np.geomspace(1.0, 1e-4, n)
    return np.unique(1.0 - taus)


def test_interpolation_hypotheses_hold_for_reference_triple():
    times = _interp_grid()
    taus = 1.0 - times
    d0 = _curve(np.sqrt(taus), "residual", times)
    d1 = _curve(np.ones(len(times)), "gradient", times)
    d2 = _curve(taus ** -0.5, "hessian", times)
    rep = interpolation_check(d0, d1, d2, theta=0.9, q=np.inf, A=1.0, D=2.0)
    assert rep.hypotheses_ok, rep.violations[:4]
    assert np.isfinite(rep.bracket_constant)
    assert rep.bracket_constant >= 1.0


def test_interpolation_detects_violating_second_curve():
    times = _interp_grid()
    taus = 1.0 - times
    d0 = _curve(np.sqrt(taus), "residual", times)
    d1 = _curve(np.ones(len(times)), "gradient", times)
    d2 = _curve(taus ** -2.0, "hessian", times)
    rep = interpolation_check(d0, d1, d2, theta=0.9, q=np.inf, A=1.0, D=2.0)
    assert not rep.hypotheses_ok
    assert any(v[0] == "lower-2" for v in rep.violations)


def test_interpolation_on_indicator_experiment_curves():
    times = _interp_grid(300)
    rc, gc, hc = _indicator_curves(times)
    taus = 1.0 - times
    d0 = _curve(np.sqrt(taus) + rc.values, "residual", times)
    d1 = _curve(1.0 + gc.values, "gradient", times)
    d2 = _curve(1.0 + hc.values, "hessian", times)
    # fitted constants: A is the gradient curve at time zero; D starts from
    # the smallest value admitted by the two lower hypotheses, then a short
    # search absorbs the integral hypotheses
    A = float(d1.values[0])
    need_low = max(np.max(taus ** 0.5 * d1.values / d0.values),
                   np.max(taus * d2.values / d0.values), 1.0)
    rep = None
    for factor in (1.1, 1.5, 2.0, 3.0):
        rep = interpolation_check(d0, d1, d2, theta=0.5, q=np.inf, A=A,
                                  D=factor * need_low)
        if rep.hypotheses_ok:
            break
    assert rep.hypotheses_ok, rep.violations[:4]
    assert np.isfinite(rep.bracket_constant)


# ------------------------------------------------------------ theta == 1

def test_theta_one_linear(bm, linear):
    rep = theta_one_diagnostic(bm, linear, Budgets(n_outer=400, n_points=36),
                               seed=3)
    assert rep.gradient_class == "bounded"
    assert rep.hessian_class == "bounded"


def test_theta_one_sqrt_pos_one_sided(bm):
    g = fs.make_terminal("sqrt-pos")
    rep = theta_one_diagnostic(bm, g, Budgets(n_outer=3000, n_points=36),
                               seed=3)
    # hessian route stays flat while the gradient route keeps growing
    assert rep.hessian_class == "bounded"
    assert np.all(np.diff(rep.gradient_ladder.ladder) > 0)
    assert rep.gradient_ladder.ladder[-1] / rep.gradient_ladder.ladder[0] > 1.05


def test_theta_one_indicator_diverges(bm, indicator):
    rep = theta_one_diagnostic(bm, indicator,
                               Budgets(n_outer=3000, n_points=36), seed=3)
    assert rep.gradient_class == "divergent"
    assert rep.hessian_class == "divergent"
