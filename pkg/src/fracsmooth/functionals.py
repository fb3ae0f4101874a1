"""The three norm curves of the equivalence theorem and the weighted time
functional.

For a time grid strictly inside [0, T) the module computes, as curves with
Monte Carlo standard errors,

    residual:  || g(X_T) - E_P[g(X_T) | F_t] ||_{L_p(P)}
    residual_m: same with the compensated terminal value K_T g(X_T)
    gradient:  || grad v(t, X_t) ||_{L_p(P)}
    hessian:   || D^2  v(t, X_t) ||_{L_p(P)}

Conditional expectations are nested Monte Carlo: each outer path is restarted
at (t, X_t) with an independent inner stream, and the P-conditional mean is
the lambda-ratio weighted inner average.  The inner plug-in inflates the
p = 2 residual by Var(inner mean); that inflation is estimated per outer path
and subtracted.  For p != 2 no correction is applied; instead every curve
carries a second value at twice the inner budget as a bias diagnostic.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _rng
from .measure import stochastic_exponential, weighted_lp_norm
from .simulate import TimeGridSpec, euler_maruyama
from .valuation import k_factor

# restart-id offsets (shared by residual and residual_m so that k == 0 yields
# bitwise identical curves)
_SALT_RESIDUAL = 0


class InnerWeightUnderflow(RuntimeError):
    pass


def curve_time_grid(horizon, n_points=40, span_frac=0.9, eps_frac=1e-3):
    """Default curve grid: n_points geometric in T - t, from span_frac * T
    down to eps_frac * T (ascending in t)."""
    taus = np.geomspace(span_frac * horizon, eps_frac * horizon, n_points)
    return horizon - taus


def default_outer_grid(horizon, t_grid, n_base=48, eps_frac=1e-4):
    """Simulation grid for outer paths: geometric-toward-T base refined with
    every curve time (conditioning times must be grid points)."""
    base = TimeGridSpec(kind="geometric", n_steps=n_base,
                        eps=eps_frac * horizon).times(horizon)
    times = np.union1d(np.union1d(base, np.asarray(t_grid, dtype=float)),
                       np.array([0.0, horizon]))
    return times


@dataclass
class NormCurve:
    kind: str
    p: float
    measure: str
    times: np.ndarray
    values: np.ndarray
    ses: np.ndarray
    horizon: float
    inner_budget: int = 0
    values_2x: Optional[np.ndarray] = None
    q: Optional[float] = None

    @property
    def taus(self):
        return self.horizon - self.times

    def write_csv(self, fileobj):
        fileobj.write("kind,p,q,measure,t,T_minus_t,value,se,inner_budget\n")
        qs = "" if self.q is None else "%.17g" % self.q
        for t, v, s in zip(self.times, self.values, self.ses):
            fileobj.write("%s,%.17g,%s,%s,%.17g,%.17g,%.17g,%.17g,%d\n" % (
                self.kind, self.p, qs, self.measure, t, self.horizon - t,
                v, s, self.inner_budget))


def _measure_label(drift):
    return "Q" if drift is None else f"P[{drift.name}]"


def _inner_conditional_means(model, terminal, drift, paths, j, n_inner,
                             inner_steps, with_potential, block=16):
    """Nested inner estimates of the conditional mean at grid index j.

    Returns (mhat, varhat, mhat2, varhat2): self-normalized inner means of the
    target (g(X_T), or exp(int_t^T k) g(X_T) when with_potential) using
    n_inner and 2 n_inner inner paths, plus delta-method variances of each
    mean.  Shapes: (n_outer,) each.
    """
    T = float(paths.times[-1])
    t = float(paths.times[j])
    n_outer = paths.n_paths
    d = model.dim
    sub = TimeGridSpec(kind="geometric", n_steps=inner_steps,
                       eps=min(1e-3 * (T - t), (T - t) / (4 * inner_steps)))
    times_in = sub.times(T, start=t)
    m = len(times_in) - 1
    sqrt_dt = np.sqrt(np.diff(times_in))
    n_draw = 2 * n_inner

    mhat = np.empty(n_outer)
    varhat = np.empty(n_outer)
    mhat2 = np.empty(n_outer)
    varhat2 = np.empty(n_outer)

    for lo in range(0, n_outer, block):
        hi = min(lo + block, n_outer)
        nb = hi - lo
        incr = np.empty((nb, n_draw, m, d))
        for i in range(lo, hi):
            gen = _rng.restart_stream(paths.seed, i, _SALT_RESIDUAL + j)
            incr[i - lo] = gen.standard_normal((n_draw, m, d)) * sqrt_dt[None, :, None]
        flat = incr.reshape(nb * n_draw, m, d)
        x = np.repeat(paths.states[lo:hi, j, :], n_draw, axis=0)
        logw = np.zeros(nb * n_draw) if drift is not None else None
        k_int = np.zeros(nb * n_draw) if with_potential else None
        for step in range(m):
            ts = float(times_in[step])
            dt = float(times_in[step + 1] - times_in[step])
            dB = flat[:, step, :]
            if drift is not None:
                gam = drift.gamma(ts, x)
                logw += np.einsum("ni,ni->n", gam, dB) \
                    - 0.5 * np.einsum("ni,ni->n", gam, gam) * dt
            if with_potential:
                k_int += model.potential(ts, x) * dt
            x = x + np.einsum("nij,nj->ni", model.sigma(ts, x), dB) \
                + model.drift(ts, x) * dt
        target = terminal.g(x)
        if with_potential:
            target = np.exp(k_int) * target
        target = target.reshape(nb, n_draw)
        if drift is None:
            w = np.ones((nb, n_draw))
        else:
            logw = logw.reshape(nb, n_draw)
            shift = logw.max(axis=1, keepdims=True)
            if not np.all(np.isfinite(shift)):
                bad = lo + int(np.argmin(np.isfinite(shift[:, 0])))
                raise InnerWeightUnderflow(
                    f"inner weights underflow at outer path {bad}, t={t}")
            w = np.exp(logw - shift)

        for (sl, m_out, v_out) in (
                (slice(0, n_inner), mhat, varhat),
                (slice(0, n_draw), mhat2, varhat2)):
            ws = w[:, sl]
            ts_ = target[:, sl]
            wsum = ws.sum(axis=1)
            if np.any(wsum <= 0):
                bad = lo + int(np.argmin(wsum))
                raise InnerWeightUnderflow(
                    f"inner weights underflow at outer path {bad}, t={t}")
            mm = (ws * ts_).sum(axis=1) / wsum
            resid = ts_ - mm[:, None]
            vv = (ws ** 2 * resid ** 2).sum(axis=1) / wsum ** 2
            m_out[lo:hi] = mm
            v_out[lo:hi] = vv
    return mhat, varhat, mhat2, varhat2


def _residual_norm(resid, lam_T, lam_t, varhat, p, correct_bias):
    value, se = weighted_lp_norm(resid, lam_T, p)
    if correct_bias and p == 2.0:
        inflation = float(np.mean(lam_t * varhat))
        value = math.sqrt(max(value * value - inflation, 0.0))
    return value, se


def _residual_curve_impl(model, terminal, drift, p, t_grid, n_outer, n_inner,
                         seed, kind, inner_steps, outer_grid, bias_diagnostic,
                         bias_correction):
    T = model.horizon
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(t_grid >= T) or np.any(t_grid < 0):
        raise ValueError("curve times must lie in [0, T)")
    if n_outer < 1 or n_inner < 1:
        raise ValueError("budgets must be >= 1")
    times = default_outer_grid(T, t_grid) if outer_grid is None else outer_grid
    paths = euler_maruyama(model, times, n_outer, seed)
    weights = stochastic_exponential(paths, drift) if drift is not None else None
    lam_T = weights.lambda_terminal if weights is not None else np.ones(n_outer)

    with_potential = kind == "residual_m" and model.k_sup > 0.0
    if kind == "residual_m":
        kfac = k_factor(model, paths)
        outer_target = kfac.values[:, -1] * terminal.g(paths.terminal)
    else:
        kfac = None
        outer_target = terminal.g(paths.terminal)

    values = np.empty(len(t_grid))
    ses = np.empty(len(t_grid))
    values2 = np.empty(len(t_grid))
    for c, t in enumerate(t_grid):
        j = paths.time_index(t, tol=1e-9)
        mhat, varhat, mhat2, varhat2 = _inner_conditional_means(
            model, terminal, drift, paths, j, n_inner, inner_steps,
            with_potential)
        if kind == "residual_m" and kfac is not None:
            scale = kfac.values[:, j]
            mhat, mhat2 = scale * mhat, scale * mhat2
            varhat, varhat2 = scale ** 2 * varhat, scale ** 2 * varhat2
        lam_t = weights.lambda_at(j) if weights is not None else np.ones(n_outer)
        values[c], ses[c] = _residual_norm(outer_target - mhat, lam_T, lam_t,
                                           varhat, p, bias_correction)
        values2[c], _ = _residual_norm(outer_target - mhat2, lam_T, lam_t,
                                       varhat2, p, bias_correction)
    return NormCurve(kind=kind, p=p, measure=_measure_label(drift),
                     times=t_grid, values=values, ses=ses, horizon=T,
                     inner_budget=n_inner,
                     values_2x=values2 if bias_diagnostic else None)


def residual_curve(model, terminal, drift, p, t_grid, n_outer, n_inner, seed,
                   inner_steps=16, outer_grid=None, bias_diagnostic=True,
                   bias_correction=True):
    """R_p(t) = || g(X_T) - E_P[g(X_T)|F_t] ||_{L_p(P)} by nested Monte Carlo.

    The conditional mean is E_Q[(lambda_T/lambda_t) g | F_t] normalized by
    E_Q[lambda_T/lambda_t | F_t], both from the inner restart sample.  The
    curve's values_2x field holds the same estimate at twice the inner budget.
    """
    if not 2.0 <= p < np.inf:
        raise ValueError("p must lie in [2, inf)")
    return _residual_curve_impl(model, terminal, drift, p, t_grid, n_outer,
                                n_inner, seed, "residual", inner_steps,
                                outer_grid, bias_diagnostic, bias_correction)


def residual_m_curve(model, terminal, drift, p, t_grid, n_outer, n_inner, seed,
                     inner_steps=16, outer_grid=None, bias_diagnostic=True,
                     bias_correction=True):
    """Residual curve of the compensated terminal value K_T g(X_T).

    With k == 0 this reproduces residual_curve bit for bit (same streams).
    """
    if not 2.0 <= p < np.inf:
        raise ValueError("p must lie in [2, inf)")
    return _residual_curve_impl(model, terminal, drift, p, t_grid, n_outer,
                                n_inner, seed, "residual_m", inner_steps,
                                outer_grid, bias_diagnostic, bias_correction)


def _oracle_curve(model, terminal, drift, oracle, p, t_grid, n_outer, seed,
                  kind, outer_grid):
    T = model.horizon
    t_grid = np.asarray(t_grid, dtype=float)
    times = default_outer_grid(T, t_grid) if outer_grid is None else outer_grid
    paths = euler_maruyama(model, times, n_outer, seed)
    weights = stochastic_exponential(paths, drift) if drift is not None else None
    lam_T = weights.lambda_terminal if weights is not None else None

    values = np.empty(len(t_grid))
    ses = np.empty(len(t_grid))
    for c, t in enumerate(t_grid):
        j = paths.time_index(t, tol=1e-9)
        x = paths.states[:, j, :]
        if kind == "gradient":
            rows = oracle.grad(float(t), x)
            mag = np.linalg.norm(rows, axis=1)
        else:
            mats = oracle.hess(float(t), x)
            mag = np.sqrt(np.sum(mats * mats, axis=(1, 2)))
        values[c], ses[c] = weighted_lp_norm(mag, lam_T, p)
    return NormCurve(kind=kind, p=p, measure=_measure_label(drift),
                     times=t_grid, values=values, ses=ses, horizon=T)


def gradient_curve(model, terminal, drift, oracle, p, t_grid, n_outer, seed,
                   outer_grid=None):
    """G_p(t) = || grad v(t, X_t) ||_{L_p(P)} along simulated outer paths."""
    return _oracle_curve(model, terminal, drift, oracle, p, t_grid, n_outer,
                         seed, "gradient", outer_grid)


def hessian_curve(model, terminal, drift, oracle, p, t_grid, n_outer, seed,
                  outer_grid=None):
    """H_p(t) = || D^2 v(t, X_t) ||_{L_p(P)} (Hilbert-Schmidt norm) along paths."""
    return _oracle_curve(model, terminal, drift, oracle, p, t_grid, n_outer,
                         seed, "hessian", outer_grid)


# ---------------------------------------------------------------------------
# the singular-weight time functional
# ---------------------------------------------------------------------------

@dataclass
class PhiLadder:
    """Phi_q((T-t)^a h(t)) at a ladder of truncations T - eps.

    eps_values are descending (eps, eps/2, ...); the last rung uses the whole
    computed grid.  value is that last rung.
    """

    q: float
    exponent: float
    eps_values: np.ndarray
    ladder: np.ndarray
    value: float
    kind: str = ""

    def growth_ratios(self):
        prev, nxt = self.ladder[:-1], self.ladder[1:]
        out = np.ones(len(prev))
        nz = prev != 0
        out[nz] = nxt[nz] / prev[nz]
        out[~nz & (nxt != 0)] = np.inf
        return out


def phi_q(curve, q, exponent, n_rungs=4):
    """Weighted L_q([0,T), dt/(T-t)) norm of (T-t)^exponent * curve values.

    Finite q integrates the q-th power by the trapezoid rule in the flattening
    variable u = -log(T-t); q = inf takes the grid supremum.  Values are
    reported for truncations eps * 2^(n_rungs-1), ..., 2 eps, eps where eps is
    the smallest T - t on the curve grid, exposing divergence as eps -> 0.
    """
    taus = curve.taus
    if np.any(taus <= 0):
        raise ValueError("curve grid must lie strictly before T")
    order = np.argsort(taus)[::-1]  # ascending t
    taus = taus[order]
    vals = np.asarray(curve.values, dtype=float)[order]
    eps_min = taus.min()
    n_last_decade = int(np.sum(taus <= 10.0 * eps_min))
    if n_last_decade < 8:
        raise ValueError(
            "curve grid too coarse near T: only %d points in the last decade "
            "of T - t; use a geometric grid with at least 8 points per decade"
            % n_last_decade)

    weighted = taus ** exponent * vals
    eps_ladder = eps_min * 2.0 ** np.arange(n_rungs - 1, -1, -1)
    ladder = np.empty(n_rungs)
    for i, eps in enumerate(eps_ladder):
        keep = taus >= eps * (1.0 - 1e-12)
        if q == np.inf:
            ladder[i] = weighted[keep].max()
        else:
            u = -np.log(taus[keep])
            ladder[i] = np.trapezoid(weighted[keep] ** q, u) ** (1.0 / q)
    return PhiLadder(q=q, exponent=exponent, eps_values=eps_ladder,
                     ladder=ladder, value=float(ladder[-1]), kind=curve.kind)
