"""Value function v(t, x), its space derivatives, the potential factor K_t,
and the martingale M_t = K_t v(t, X_t).

Two oracle backends:

* Gaussian closed forms / kernel quadrature for constant-coefficient models.
  With mean m = x_1 + b_1 (T-t) and std s = sqrt(A_11 (T-t)) of the terminal
  first coordinate, v(t,x) = exp(r (T-t)) F(m, s) where F is the heat-kernel
  convolution of the payoff.  linear / indicator / call / power / sqrt-pos
  payoffs get exact formulas; anything else is integrated adaptively on a
  +-8 std window (d <= 2).

* Monte Carlo for general models: the gradient is estimated from the
  martingale representation

      (T-t) K_t grad v(t, x) =
          E[(M_T - M_t) (int_t^T (sigma^{-1} dX/dx)' dB)']
        + E[M_T  int_t^T (T-s) grad k  dX/dx ds],

  with the flow started at the identity and the potential factor normalized
  to 1 at the restart time.  Second derivatives come from central finite
  differences of that estimator under common random numbers.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import gamma as gamma_fn, hyp1f1, pbdv
from scipy.stats import norm

from . import _rng
from .simulate import (PathBatch, TimeGridSpec, _euler_block, first_variation)

_ASYMPTOTIC_CUT = 25.0


class UnsupportedModelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# closed-form heat kernel convolutions F(m, s), dF/dm, d2F/dm2
# ---------------------------------------------------------------------------

def _forms_linear(K, a):
    def F(m, s):
        return m

    def Fm(m, s):
        return np.ones_like(m)

    def Fmm(m, s):
        return np.zeros_like(m)

    return F, Fm, Fmm


def _forms_indicator(K, a):
    def F(m, s):
        return norm.cdf((m - K) / s)

    def Fm(m, s):
        return norm.pdf((m - K) / s) / s

    def Fmm(m, s):
        u = (m - K) / s
        return -u * norm.pdf(u) / (s * s)

    return F, Fm, Fmm


def _forms_call(K, a):
    def F(m, s):
        u = (m - K) / s
        return (m - K) * norm.cdf(u) + s * norm.pdf(u)

    def Fm(m, s):
        return norm.cdf((m - K) / s)

    def Fmm(m, s):
        return norm.pdf((m - K) / s) / s

    return F, Fm, Fmm


def _power_moments(u, a):
    """E|Z + u|^a and its first two u-derivatives (Z standard normal)."""
    u = np.asarray(u, dtype=float)
    kappa = 2.0 ** (a / 2.0) * gamma_fn((a + 1.0) / 2.0) / math.sqrt(math.pi)
    F = np.empty_like(u)
    Fp = np.empty_like(u)
    Fpp = np.empty_like(u)
    near = np.abs(u) <= _ASYMPTOTIC_CUT
    if np.any(near):
        un = u[near]
        z = -un * un / 2.0
        m0 = hyp1f1(-a / 2.0, 0.5, z)
        m1 = hyp1f1(1.0 - a / 2.0, 1.5, z)
        m2 = hyp1f1(2.0 - a / 2.0, 2.5, z)
        F[near] = kappa * m0
        Fp[near] = kappa * a * un * m1
        Fpp[near] = kappa * a * (m1 - un * un * (2.0 - a) / 3.0 * m2)
    if np.any(~near):
        uf = u[~near]
        au = np.abs(uf)
        sg = np.sign(uf)
        F[~near] = au ** a * (1.0 + a * (a - 1.0) / (2.0 * au * au))
        Fp[~near] = sg * a * au ** (a - 1.0) * (1.0 + (a - 1.0) * (a - 2.0) / (2.0 * au * au))
        Fpp[~near] = a * (a - 1.0) * au ** (a - 2.0) * (1.0 + (a - 2.0) * (a - 3.0) / (2.0 * au * au))
    return F, Fp, Fpp


def _forms_power(K, a):
    def F(m, s):
        f, _, _ = _power_moments((m - K) / s, a)
        return s ** a * f

    def Fm(m, s):
        _, fp, _ = _power_moments((m - K) / s, a)
        return s ** (a - 1.0) * fp

    def Fmm(m, s):
        _, _, fpp = _power_moments((m - K) / s, a)
        return s ** (a - 2.0) * fpp

    return F, Fm, Fmm


def _halfpower_moment(a, c):
    """G(a, c) = E[((c + Z)_+)^a] via parabolic cylinder functions."""
    return gamma_fn(a + 1.0) * np.exp(-c * c / 4.0) * pbdv(-a - 1.0, -c)[0] \
        / math.sqrt(2.0 * math.pi)


def _forms_sqrtpos(K, a):
    # payoff sqrt(x_1 ^ 0); K is unused (threshold fixed at 0)
    def _split(c):
        mid = np.abs(c) <= _ASYMPTOTIC_CUT
        pos = c > _ASYMPTOTIC_CUT
        return mid, pos

    def F(m, s):
        c = m / s
        out = np.zeros_like(c)
        mid, pos = _split(c)
        if np.any(mid):
            out[mid] = _halfpower_moment(0.5, c[mid])
        if np.any(pos):
            cp = c[pos]
            out[pos] = np.sqrt(cp) * (1.0 - 1.0 / (8.0 * cp * cp))
        return np.sqrt(s) * out

    def Fm(m, s):
        c = m / s
        out = np.zeros_like(c)
        mid, pos = _split(c)
        if np.any(mid):
            out[mid] = 0.5 * _halfpower_moment(-0.5, c[mid])
        if np.any(pos):
            cp = c[pos]
            out[pos] = 0.5 / np.sqrt(cp) * (1.0 + 3.0 / (8.0 * cp * cp))
        return out / np.sqrt(s)

    def Fmm(m, s):
        c = m / s
        out = np.zeros_like(c)
        mid, pos = _split(c)
        if np.any(mid):
            cm = c[mid]
            out[mid] = (_halfpower_moment(2.5, cm)
                        - 2.0 * cm * _halfpower_moment(1.5, cm)
                        + (cm * cm - 1.0) * _halfpower_moment(0.5, cm))
        if np.any(pos):
            cp = c[pos]
            out[pos] = -0.25 * cp ** -1.5 * (1.0 + 15.0 / (8.0 * cp * cp))
        return out * s ** -1.5

    return F, Fm, Fmm


_FORM_BUILDERS = {
    "linear": _forms_linear,
    "indicator": _forms_indicator,
    "call": _forms_call,
    "power": _forms_power,
    "sqrt-pos": _forms_sqrtpos,
}


def _quadrature_forms(terminal, dim):
    """Adaptive-quadrature F, Fm, Fmm for arbitrary payoffs (d = 1 only here;
    d = 2 is handled directly in value_gaussian)."""
    from scipy.integrate import quad

    def _point(m, s, weight):
        lo, hi = m - 8.0 * s, m + 8.0 * s
        val, _ = quad(lambda xi: float(terminal.g(np.array([[xi]]))[0])
                      * weight(xi, m, s) * math.exp(-(xi - m) ** 2 / (2 * s * s))
                      / (s * math.sqrt(2 * math.pi)),
                      lo, hi, limit=200)
        return val

    def F(m, s):
        m = np.atleast_1d(m)
        return np.array([_point(mi, s, lambda xi, mm, ss: 1.0) for mi in m])

    def Fm(m, s):
        m = np.atleast_1d(m)
        return np.array([_point(mi, s, lambda xi, mm, ss: (xi - mm) / (ss * ss))
                         for mi in m])

    def Fmm(m, s):
        m = np.atleast_1d(m)
        return np.array([
            _point(mi, s, lambda xi, mm, ss: ((xi - mm) ** 2 - ss * ss) / ss ** 4)
            for mi in m])

    return F, Fm, Fmm


def value_gaussian(t, x, terminal, horizon, sigma_const, b_const, rate=0.0,
                   use_closed_form=True):
    """(v, grad v, D2 v) for a constant-coefficient model, vectorized over x.

    x has shape (n, d) (or (d,)); returns (n,), (n, d), (n, d, d).  At t ==
    horizon the value equals the payoff and the derivatives are NaN.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, d = x.shape
    sigma_const = np.asarray(sigma_const, dtype=float)
    b_const = np.asarray(b_const, dtype=float)
    tau = float(horizon) - float(t)
    if tau < 0:
        raise ValueError("t must not exceed the horizon")
    if tau == 0.0:
        v = terminal.g(x)
        return v, np.full((n, d), np.nan), np.full((n, d, d), np.nan)

    disc = math.exp(rate * tau)
    A = sigma_const @ sigma_const.T

    if terminal.form in _FORM_BUILDERS or (terminal.form == "custom" and d == 1):
        # payoff depends on the first coordinate only (catalog convention)
        m = x[:, 0] + b_const[0] * tau
        s = math.sqrt(A[0, 0] * tau)
        if terminal.form in _FORM_BUILDERS and use_closed_form:
            F, Fm, Fmm = _FORM_BUILDERS[terminal.form](terminal.threshold,
                                                       terminal.power)
        else:
            F, Fm, Fmm = _quadrature_forms(terminal, d)
        v = disc * F(m, s)
        grad = np.zeros((n, d))
        grad[:, 0] = disc * Fm(m, s)
        hess = np.zeros((n, d, d))
        hess[:, 0, 0] = disc * Fmm(m, s)
        return v, grad, hess

    if d == 2:
        return _value_gaussian_2d(x, terminal, tau, A, b_const, disc)
    raise UnsupportedModelError(
        "quadrature backend supports d <= 2; use the monte-carlo oracle")


def _value_gaussian_2d(x, terminal, tau, A, b_const, disc):
    from scipy.integrate import dblquad
    n, d = x.shape
    L = np.linalg.cholesky(A)
    Linv = np.linalg.inv(L)
    sq = math.sqrt(tau)
    v = np.empty(n)
    grad = np.empty((n, d))
    hess = np.empty((n, d, d))
    phi = lambda z: math.exp(-z * z / 2.0) / math.sqrt(2.0 * math.pi)

    for i in range(n):
        mean = x[i] + b_const * tau

        def payoff(z1, z2):
            xi = mean + sq * (L @ np.array([z1, z2]))
            return float(terminal.g(xi[None, :])[0]) * phi(z1) * phi(z2)

        def moment(fz):
            val, _ = dblquad(lambda z2, z1: payoff(z1, z2) * fz(np.array([z1, z2])),
                             -8.0, 8.0, -8.0, 8.0, epsabs=1e-10, epsrel=1e-8)
            return val

        v[i] = disc * moment(lambda z: 1.0)
        gz = np.array([moment(lambda z, j=j: z[j]) for j in range(d)])
        grad[i] = disc * (Linv.T @ gz) / sq
        hz = np.empty((d, d))
        for a_ in range(d):
            for b_ in range(a_, d):
                hz[a_, b_] = hz[b_, a_] = moment(
                    lambda z, a=a_, b=b_: z[a] * z[b] - (1.0 if a == b else 0.0))
        hess[i] = disc * (Linv.T @ hz @ Linv) / tau
    return v, grad, hess


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

class GaussianValueOracle:
    """Closed-form / quadrature oracle for a constant-coefficient model."""

    def __init__(self, model, terminal, use_closed_form=True):
        if not model.is_constant:
            raise UnsupportedModelError("model does not declare constant coefficients")
        self.model = model
        self.terminal = terminal
        self.use_closed_form = use_closed_form

    def value_grad_hess(self, t, x):
        return value_gaussian(t, x, self.terminal, self.model.horizon,
                              self.model.sigma_const, self.model.b_const,
                              rate=self.model.k_const or 0.0,
                              use_closed_form=self.use_closed_form)

    def value(self, t, x):
        return self.value_grad_hess(t, x)[0]

    def grad(self, t, x):
        return self.value_grad_hess(t, x)[1]

    def hess(self, t, x):
        return self.value_grad_hess(t, x)[2]


class MonteCarloValueOracle:
    """Nested-simulation oracle for models without closed-form kernels.

    Values are inner-restart means of K_T g(X_T); gradients use grad_mc;
    second derivatives use hessian_mc.  Streams are derived from (seed, probe
    counter) so repeated calls are reproducible.
    """

    def __init__(self, model, terminal, n_inner=4000, inner_steps=24, seed=0):
        self.model = model
        self.terminal = terminal
        self.n_inner = n_inner
        self.inner_steps = inner_steps
        self.seed = seed
        self._counter = 0

    def _stream(self):
        self._counter += 1
        return _rng.generator(self.seed, _rng.PROBE, self._counter)

    def value(self, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if t >= self.model.horizon:
            return self.terminal.g(x)
        out = np.empty(x.shape[0])
        for i in range(x.shape[0]):
            batch = _restart_batch(self.model, t, x[i], self.n_inner,
                                   self.inner_steps, self._stream())
            kT = _terminal_k_factor(self.model, batch)
            out[i] = float(np.mean(kT * self.terminal.g(batch.terminal)))
        return out

    def grad(self, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty((x.shape[0], self.model.dim))
        for i in range(x.shape[0]):
            est, _ = grad_mc(self.model, self.terminal, t, x[i], self.n_inner,
                             self._stream(), inner_steps=self.inner_steps)
            out[i] = est
        return out

    def hess(self, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        d = self.model.dim
        out = np.empty((x.shape[0], d, d))
        for i in range(x.shape[0]):
            est, _ = hessian_mc(self.model, self.terminal, t, x[i], self.n_inner,
                                self._stream(), inner_steps=self.inner_steps)
            out[i] = est
        return out


def make_oracle(model, terminal, **kwargs):
    if model.is_constant:
        return GaussianValueOracle(model, terminal)
    return MonteCarloValueOracle(model, terminal, **kwargs)


# ---------------------------------------------------------------------------
# potential factor and martingale
# ---------------------------------------------------------------------------

@dataclass
class PotentialFactor:
    """K_t = exp(int_0^t k(r, X_r) dr), left-point quadrature along each path."""

    values: np.ndarray  # (n_paths, m+1)
    k_sup: float

    def bounds_ok(self, times):
        lo = np.exp(-self.k_sup * times)[None, :]
        hi = np.exp(self.k_sup * times)[None, :]
        return bool(np.all((self.values >= lo - 1e-12) & (self.values <= hi + 1e-12)))


def k_factor(model, paths):
    n, m, _ = paths.increments.shape
    log_k = np.zeros((n, m + 1))
    acc = np.zeros(n)
    for j in range(m):
        t = float(paths.times[j])
        dt = float(paths.times[j + 1] - paths.times[j])
        acc = acc + model.potential(t, paths.states[:, j, :]) * dt
        log_k[:, j + 1] = acc
    return PotentialFactor(values=np.exp(log_k), k_sup=model.k_sup)


def martingale_M(paths, oracle, kfac=None):
    """M_t = K_t v(t, X_t) tabulated on the path grid; M_T = K_T g(X_T)."""
    n, m, _ = paths.increments.shape
    M = np.empty((n, m + 1))
    for j in range(m + 1):
        M[:, j] = oracle.value(float(paths.times[j]), paths.states[:, j, :])
    if kfac is not None:
        M = M * kfac.values
    return M


# ---------------------------------------------------------------------------
# Monte Carlo gradient / Hessian at a point
# ---------------------------------------------------------------------------

def _restart_batch(model, t, x, n_inner, inner_steps, stream):
    T = model.horizon
    sub = TimeGridSpec(kind="geometric", n_steps=inner_steps,
                       eps=min(1e-3 * (T - t), (T - t) / (4 * inner_steps)))
    from .simulate import resimulate_from
    return resimulate_from(model, t, x, sub, n_inner, stream)


def _terminal_k_factor(model, batch):
    acc = np.zeros(batch.n_paths)
    for j in range(batch.n_steps):
        t = float(batch.times[j])
        dt = float(batch.times[j + 1] - batch.times[j])
        acc += model.potential(t, batch.states[:, j, :]) * dt
    return np.exp(acc)


def _grad_summands(model, terminal, batch, control_value=None):
    """Per-inner-path summands of the gradient representation at the restart
    time t = batch.times[0]; their mean estimates grad v(t, x)."""
    T = float(batch.times[-1])
    t0 = float(batch.times[0])
    n, m, d = batch.increments.shape
    flows = first_variation(model, batch)
    W = np.zeros((n, d))
    J = np.zeros((n, d))
    has_k = model.k_sup > 0.0
    for j in range(m):
        t = float(batch.times[j])
        dt = float(batch.times[j + 1] - batch.times[j])
        x = batch.states[:, j, :]
        sig_inv = np.linalg.inv(model.sigma(t, x))
        Mj = np.einsum("nij,njk->nik", sig_inv, flows.flow[:, j])
        W += np.einsum("nij,ni->nj", Mj, batch.increments[:, j, :])
        if has_k and model.dpotential is not None:
            dk = model.dpotential(t, x)
            J += (T - t) * np.einsum("ni,nij->nj", dk, flows.flow[:, j]) * dt
    kT = _terminal_k_factor(model, batch)
    M_T = kT * terminal.g(batch.terminal)
    v_cv = float(np.mean(M_T)) if control_value is None else float(control_value)
    summands = ((M_T - v_cv)[:, None] * W + M_T[:, None] * J) / (T - t0)
    return summands


def grad_mc(model, terminal, t, x, n_inner, stream, inner_steps=24,
            control_value=None):
    """Monte Carlo estimate of grad v(t, x) with per-component standard errors.

    control_value: v(t, x) from an oracle when available; defaults to the
    inner-sample mean of K_T g(X_T) (which estimates the same quantity).
    """
    if t >= model.horizon:
        raise ValueError("gradient estimator requires t < horizon")
    batch = _restart_batch(model, t, np.asarray(x, dtype=float), n_inner,
                           inner_steps, stream)
    summands = _grad_summands(model, terminal, batch, control_value)
    est = summands.mean(axis=0)
    se = summands.std(axis=0, ddof=1) / math.sqrt(n_inner)
    return est, se


def hessian_mc(model, terminal, t, x, n_inner, stream, h_fd=None,
               inner_steps=24, oracle=None):
    """Central finite differences of the gradient representation, common
    random numbers across the stencil.  Default width sqrt(T-t)/20."""
    T = model.horizon
    if t >= T:
        raise ValueError("hessian estimator requires t < horizon")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d = model.dim
    h = math.sqrt(T - t) / 20.0 if h_fd is None else float(h_fd)

    sub = TimeGridSpec(kind="geometric", n_steps=inner_steps,
                       eps=min(1e-3 * (T - t), (T - t) / (4 * inner_steps)))
    times = sub.times(T, start=t)
    m = len(times) - 1
    normals = stream.standard_normal((n_inner, m, d))
    increments = normals * np.sqrt(np.diff(times))[None, :, None]

    def summands_at(pt):
        states = _euler_block(model, times, np.broadcast_to(pt, (n_inner, d)),
                              increments)
        batch = PathBatch(times=times, states=states, increments=increments,
                          seed=-1, stream_idents=np.zeros((n_inner, 2), np.uint64))
        cv = float(oracle.value(t, pt[None, :])[0]) if oracle is not None else None
        return _grad_summands(model, terminal, batch, cv)

    hess = np.empty((d, d))
    se = np.empty((d, d))
    for l in range(d):
        e = np.zeros(d)
        e[l] = h
        diff = (summands_at(x + e) - summands_at(x - e)) / (2.0 * h)
        hess[l] = diff.mean(axis=0)
        se[l] = diff.std(axis=0, ddof=1) / math.sqrt(n_inner)
    hess = 0.5 * (hess + hess.T)
    se = 0.5 * np.sqrt(se ** 2 + se.T ** 2)
    return hess, se
