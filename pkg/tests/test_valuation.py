import numpy as np
import pytest
from scipy.stats import norm

import fracsmooth as fs
from fracsmooth import _rng
from fracsmooth.simulate import TimeGridSpec
from fracsmooth.valuation import GaussianValueOracle, value_gaussian
from conftest import assert_within_se


def test_linear_payoff_martingale(bm, linear):
    v, gr, he = value_gaussian(0.3, [[1.7]], linear, 1.0, np.eye(1),
                               np.zeros(1))
    assert v[0] == pytest.approx(1.7)
    assert gr[0, 0] == pytest.approx(1.0)
    assert he[0, 0, 0] == pytest.approx(0.0)


def test_indicator_heat_kernel(bm, indicator):
    t, x = 0.36, 0.5
    s = np.sqrt(1.0 - t)
    v, gr, he = value_gaussian(t, [[x]], indicator, 1.0, np.eye(1), np.zeros(1))
    assert v[0] == pytest.approx(norm.cdf(x / s))
    assert gr[0, 0] == pytest.approx(norm.pdf(x / s) / s)
    assert he[0, 0, 0] == pytest.approx(-(x / s) * norm.pdf(x / s) / s ** 2)


def test_rate_discounting(linear):
    model = fs.make_model("bm-rate", rate=0.1)
    orc = GaussianValueOracle(model, linear)
    v = orc.value(0.4, np.array([[2.0]]))
    assert v[0] == pytest.approx(np.exp(0.1 * 0.6) * 2.0)


def test_terminal_condition_and_boundedness(bm, indicator):
    orc = GaussianValueOracle(bm, indicator)
    xs = np.array([[0.4], [-0.2]])
    assert np.array_equal(orc.value(1.0, xs), indicator.g(xs))
    # k = 0 and bounded payoff: |v| <= sup |g| = 1
    for t in (0.0, 0.5, 0.99):
        assert np.all(np.abs(orc.value(t, xs)) <= 1.0 + 1e-12)


@pytest.mark.parametrize("tname,kwargs", [
    ("power", dict(power=0.6, threshold=0.2)),
    ("call", dict(threshold=-0.3)),
    ("sqrt-pos", {}),
    ("indicator", dict(threshold=0.1)),
])
def test_closed_forms_match_quadrature(bm, tname, kwargs):
    # dual route: analytic kernels against adaptive quadrature of the payoff
    terminal = fs.make_terminal(tname, **kwargs)
    t = 0.55
    xs = np.array([[-0.8], [0.0], [0.6], [1.4]])
    vc, gc, hc = value_gaussian(t, xs, terminal, 1.0, np.eye(1), np.zeros(1),
                                use_closed_form=True)
    vq, gq, hq = value_gaussian(t, xs, terminal, 1.0, np.eye(1), np.zeros(1),
                                use_closed_form=False)
    assert np.allclose(vc, vq, rtol=1e-7, atol=1e-9)
    assert np.allclose(gc[:, 0], gq[:, 0], rtol=1e-6, atol=1e-8)
    assert np.allclose(hc[:, 0, 0], hq[:, 0, 0], rtol=1e-5, atol=1e-7)


def test_unsupported_dimension_with_quadrature():
    model = fs.make_model("bm", dim=3)
    g = fs.TerminalFunction(g=lambda x: np.cos(x).sum(axis=1),
                            growth_const=3.0, growth_power=0.0)
    with pytest.raises(fs.valuation.UnsupportedModelError):
        value_gaussian(0.5, np.zeros((1, 3)), g, 1.0, np.eye(3), np.zeros(3))


def test_two_dimensional_quadrature():
    model = fs.make_model("bm", dim=2)
    g = fs.TerminalFunction(g=lambda x: x[:, 0] * x[:, 1], growth_const=2.0,
                            growth_power=1.0)
    v, gr, he = value_gaussian(0.5, np.array([[0.3, -0.4]]), g, 1.0,
                               np.eye(2), np.zeros(2))
    # E[(x1 + Z1)(x2 + Z2)] = x1 x2 for independent increments
    assert v[0] == pytest.approx(0.3 * -0.4, abs=1e-6)
    assert gr[0] == pytest.approx([-0.4, 0.3], abs=1e-5)
    assert he[0, 0, 1] == pytest.approx(1.0, abs=1e-4)


# ------------------------------------------------------------------ k factor

def test_k_factor_trivials(bm):
    batch = fs.euler_maruyama(bm, TimeGridSpec("uniform", 16), 50, seed=1)
    assert np.all(fs.k_factor(bm, batch).values == 1.0)

    rate_model = fs.make_model("bm-rate", rate=0.07)
    batch2 = fs.euler_maruyama(rate_model, TimeGridSpec("uniform", 16), 50,
                               seed=1)
    kf = fs.k_factor(rate_model, batch2)
    assert np.allclose(kf.values, np.exp(0.07 * batch2.times)[None, :],
                       rtol=1e-12)


def test_k_factor_cosine_bounds():
    model = fs.DiffusionModel(
        dim=1, horizon=1.0, x0=np.array([0.0]),
        sigma=lambda t, x: np.ones((x.shape[0], 1, 1)),
        drift=lambda t, x: np.zeros_like(x),
        potential=lambda t, x: np.cos(x[:, 0]),
        sigma_sup=1.0, sigma_inv_sup=1.0, b_sup=0.0, k_sup=1.0)
    batch = fs.euler_maruyama(model, TimeGridSpec("uniform", 32), 100, seed=2)
    kf = fs.k_factor(model, batch)
    assert kf.bounds_ok(batch.times)


# ------------------------------------------------------------------- grad_mc

def test_grad_mc_linear(bm, linear):
    est, se = fs.grad_mc(bm, linear, 0.25, [0.4], 4000,
                         _rng.probe_stream(3, 1))
    assert_within_se(est[0], 1.0, se[0], 3, "grad linear")


def test_grad_mc_indicator_frozen_value(bm, indicator):
    # phi(0) / sqrt(0.5) = 0.56418958354775628
    est, se = fs.grad_mc(bm, indicator, 0.5, [0.0], 20_000,
                         _rng.probe_stream(3, 2))
    assert_within_se(est[0], 0.5641895835477563, se[0], 3, "grad indicator")


def test_grad_mc_rate_model_matches_discounted_gradient(linear):
    model = fs.make_model("bm-rate", rate=0.15)
    est, se = fs.grad_mc(model, linear, 0.4, [0.2], 8000,
                         _rng.probe_stream(3, 3))
    assert_within_se(est[0], np.exp(0.15 * 0.6), se[0], 3, "grad rate")


def test_grad_mc_rejects_terminal_time(bm, linear):
    with pytest.raises(ValueError):
        fs.grad_mc(bm, linear, 1.0, [0.0], 10, _rng.probe_stream(3, 4))


def test_hessian_mc_trivials(bm, linear, indicator):
    he, se = fs.hessian_mc(bm, linear, 0.5, [0.3], 4000,
                           _rng.probe_stream(3, 5))
    assert_within_se(he[0, 0], 0.0, max(se[0, 0], 1e-12), 3, "hess linear")
    # odd symmetry of the indicator hessian at the threshold
    he2, se2 = fs.hessian_mc(bm, indicator, 0.5, [0.0], 20_000,
                             _rng.probe_stream(3, 6))
    assert_within_se(he2[0, 0], 0.0, se2[0, 0], 3, "hess indicator at 0")


def test_hessian_mc_matches_oracle(bm, indicator):
    orc = GaussianValueOracle(bm, indicator)
    t, x = 0.5, 0.3
    he, se = fs.hessian_mc(bm, indicator, t, [x], 40_000,
                           _rng.probe_stream(3, 7), oracle=orc)
    truth = orc.hess(t, np.array([[x]]))[0, 0, 0]
    h = np.sqrt(1.0 - t) / 20.0
    # fd bias bound: h^2/6 * sup |d4 v| near x, estimated from the oracle
    d4 = (orc.hess(t, np.array([[x + h]]))[0, 0, 0]
          - 2 * truth + orc.hess(t, np.array([[x - h]]))[0, 0, 0]) / h ** 2
    tol = max(3.0 * se[0, 0], h ** 2 * abs(d4))
    assert abs(he[0, 0] - truth) <= tol


# -------------------------------------------------------------- martingale M

def test_martingale_linear_is_state(bm, linear):
    batch = fs.euler_maruyama(bm, TimeGridSpec("uniform", 8), 64, seed=5)
    M = fs.martingale_M(batch, GaussianValueOracle(bm, linear))
    assert np.allclose(M, batch.states[:, :, 0], atol=1e-14)


def test_martingale_terminal_consistency():
    model = fs.make_model("bm-rate", rate=0.1)
    g = fs.make_terminal("call", threshold=0.2)
    batch = fs.euler_maruyama(model, TimeGridSpec("uniform", 8), 64, seed=5)
    kf = fs.k_factor(model, batch)
    M = fs.martingale_M(batch, GaussianValueOracle(model, g), kf)
    expected = kf.values[:, -1] * g.g(batch.terminal)
    assert np.allclose(M[:, -1], expected, rtol=1e-12)


@pytest.mark.parametrize("mname,tname", [
    ("bm", "indicator"), ("bm", "call"), ("bm-rate", "linear"),
    ("bm-drifted", "power"), ("bm", "sqrt-pos"),
])
def test_martingale_increment_mean_zero(mname, tname):
    model = fs.make_model(mname)
    g = fs.make_terminal(tname)
    batch = fs.euler_maruyama(model, TimeGridSpec("uniform", 10), 4000, seed=6)
    kf = fs.k_factor(model, batch) if model.k_sup > 0 else None
    M = fs.martingale_M(batch, GaussianValueOracle(model, g), kf)
    diff = M[:, -1][:, None] - M
    mean = diff.mean(axis=0)
    se = diff.std(axis=0, ddof=1) / np.sqrt(batch.n_paths)
    for j in range(1, M.shape[1] - 1):
        assert_within_se(mean[j], 0.0, se[j], 3, f"E[M_T - M_t] {mname}+{tname}")


# ------------------------------------------------------- backend agreement

@pytest.mark.parametrize("mname", ["bm", "bm-rate", "bm-drifted"])
@pytest.mark.parametrize("tname", ["linear", "indicator", "call", "power",
                                   "sqrt-pos"])
def test_grad_backend_agreement(mname, tname):
    model = fs.make_model(mname)
    terminal = fs.make_terminal(tname)
    orc = GaussianValueOracle(model, terminal)
    rng = np.random.default_rng(101)
    for probe in range(20):
        t = float(rng.uniform(0.1, 0.85))
        x = float(rng.uniform(-1.2, 1.2))
        truth = orc.grad(t, np.array([[x]]))[0, 0]
        cv = float(orc.value(t, np.array([[x]]))[0])
        est, se = fs.grad_mc(model, terminal, t, [x], 3000,
                             _rng.probe_stream(9, probe + 100),
                             inner_steps=12, control_value=cv)
        assert_within_se(est[0], truth, se[0], 3.0,
                         f"{mname}+{tname} probe {probe} at ({t:.2f},{x:.2f})")


def test_grad_mc_vs_finite_differences(bm, indicator):
    orc = GaussianValueOracle(bm, indicator)
    rng = np.random.default_rng(55)
    for probe in range(6):
        t = float(rng.uniform(0.2, 0.8))
        x = float(rng.uniform(-1.0, 1.0))
        h = 0.05
        fd = (orc.value(t, np.array([[x + h]]))[0]
              - orc.value(t, np.array([[x - h]]))[0]) / (2 * h)
        est, se = fs.grad_mc(bm, indicator, t, [x], 6000,
                             _rng.probe_stream(10, probe))
        curvature = abs(orc.hess(t, np.array([[x + h]]))[0, 0, 0]
                        - orc.hess(t, np.array([[x - h]]))[0, 0, 0]) / (2 * h)
        tol = max(3.0 * se[0], h * h * curvature)
        assert abs(est[0] - fd) <= tol


def test_blowup_envelope_slopes(bm, indicator):
    # sup-probe |grad v| grows no faster than (T-t)^(-1/2), |D2 v| than (T-t)^(-1)
    orc = GaussianValueOracle(bm, indicator)
    taus = np.geomspace(0.3, 1e-4, 12)
    xs = np.linspace(-0.5, 0.5, 41)[:, None]
    sup_g, sup_h = [], []
    for tau in taus:
        _, gr, he = orc.value_grad_hess(1.0 - tau, xs)
        sup_g.append(np.abs(gr[:, 0]).max())
        sup_h.append(np.abs(he[:, 0, 0]).max())
    slope_g = np.polyfit(np.log(taus), np.log(sup_g), 1)[0]
    slope_h = np.polyfit(np.log(taus), np.log(sup_h), 1)[0]
    assert slope_g >= -0.5 - 0.05
    assert slope_h >= -1.0 - 0.05
