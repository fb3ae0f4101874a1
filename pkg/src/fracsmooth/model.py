"""Diffusion models and terminal payoffs with machine-checkable regularity bounds.

A model carries its coefficients as vectorized callables together with the
bounds its author declares for them (sup of |sigma|, |sigma^-1|, |b|, |k| in
Hilbert-Schmidt / Euclidean norm).  ``validate_model`` probes the coefficients
on a random box and flags any bound violation; Hoelder-continuity assumptions
are declared metadata only and are not sampled.

Coefficient conventions (n = batch of states, d = dimension):
    sigma(t, x[n,d])     -> [n,d,d]
    drift(t, x[n,d])     -> [n,d]
    potential(t, x[n,d]) -> [n]
    dsigma[n,i,j,l] = d sigma_ij / d x_l
    ddrift[n,i,l]   = d b_i / d x_l
    dpotential[n,l] = d k / d x_l
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _rng


class CoefficientError(ValueError):
    """Non-finite coefficient value met during validation probing."""


@dataclass
class DiffusionModel:
    dim: int
    horizon: float
    x0: np.ndarray
    sigma: Callable
    drift: Callable
    potential: Callable
    sigma_sup: float
    sigma_inv_sup: float
    b_sup: float
    k_sup: float
    grad_k_sup: float = 0.0
    dsigma: Optional[Callable] = None
    ddrift: Optional[Callable] = None
    dpotential: Optional[Callable] = None
    # set for constant-coefficient models; unlocks the Gaussian value oracle
    sigma_const: Optional[np.ndarray] = None
    b_const: Optional[np.ndarray] = None
    k_const: Optional[float] = None
    name: str = "custom"

    def __post_init__(self):
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if self.x0.shape != (self.dim,):
            raise ValueError(f"x0 must have shape ({self.dim},)")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")

    @property
    def has_gradients(self):
        return self.dsigma is not None and self.ddrift is not None

    @property
    def is_constant(self):
        return self.sigma_const is not None and self.b_const is not None


@dataclass
class TerminalFunction:
    """Scalar payoff of the terminal state, with declared exponential growth.

    The declared bound is |g(x)| <= growth_const * exp(growth_const * |x|**growth_power)
    with growth_power in [0, 2).  ``form``/``threshold``/``power`` identify the
    closed-form family used by the Gaussian value oracle; arbitrary payoffs use
    form="custom" and are handled by quadrature or Monte Carlo backends.
    """

    g: Callable
    growth_const: float
    growth_power: float
    tag: str = "custom"  # lipschitz | hoelder | indicator | custom
    hoelder_exponent: Optional[float] = None
    form: str = "custom"  # linear | indicator | call | power | sqrt-pos | custom
    threshold: float = 0.0
    power: Optional[float] = None
    name: str = "custom"

    def __post_init__(self):
        if not 0.0 <= self.growth_power < 2.0:
            raise ValueError("growth_power must lie in [0, 2)")
        if self.growth_const < 0:
            raise ValueError("growth_const must be nonnegative")

    def __call__(self, x):
        return self.g(np.atleast_2d(np.asarray(x, dtype=float)))


@dataclass
class ValidationReport:
    n_probe: int
    box_lo: np.ndarray
    box_hi: np.ndarray
    max_sigma: float
    max_sigma_inv: float
    max_drift: float
    max_potential: float
    max_terminal_ratio: float
    violations: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.violations


def _hs_norm(mats):
    return np.sqrt(np.sum(mats * mats, axis=(-2, -1)))


def validate_model(model, terminal, n_probe, seed, box=None):
    """Probe coefficients and payoff at random (t, x) points; flag bound breaches.

    The default probe box is [x0 - 5 sqrt(T), x0 + 5 sqrt(T)]^d x [0, T], which
    covers the effective support of a diffusion with bounded coefficients.
    A non-finite coefficient value is a hard failure (CoefficientError naming
    the probe point); a mere bound violation is recorded in the report.
    """
    if n_probe < 1:
        raise ValueError("n_probe must be >= 1")
    T, d = model.horizon, model.dim
    if box is None:
        half = 5.0 * np.sqrt(T)
        lo, hi = model.x0 - half, model.x0 + half
    else:
        lo = np.broadcast_to(np.asarray(box[0], dtype=float), (d,)).copy()
        hi = np.broadcast_to(np.asarray(box[1], dtype=float), (d,)).copy()
    rng = _rng.probe_stream(seed)
    ts = rng.uniform(0.0, T, size=n_probe)
    xs = rng.uniform(lo, hi, size=(n_probe, d))

    max_sigma = max_inv = max_b = max_k = max_ratio = 0.0
    violations = []

    def _check_finite(name, values, i):
        if not np.all(np.isfinite(values)):
            raise CoefficientError(
                f"non-finite {name} at probe t={ts[i]:.6g}, x={xs[i]}")

    for i in range(n_probe):
        x = xs[i: i + 1]
        t = float(ts[i])
        sig = np.asarray(model.sigma(t, x), dtype=float)
        _check_finite("sigma", sig, i)
        b = np.asarray(model.drift(t, x), dtype=float)
        _check_finite("drift", b, i)
        k = np.asarray(model.potential(t, x), dtype=float)
        _check_finite("potential", k, i)
        gx = np.asarray(terminal.g(x), dtype=float)
        _check_finite("terminal", gx, i)

        s_norm = float(_hs_norm(sig)[0])
        try:
            inv_norm = float(_hs_norm(np.linalg.inv(sig[0]))[()])
        except np.linalg.LinAlgError:
            inv_norm = np.inf
        b_norm = float(np.linalg.norm(b[0]))
        k_abs = float(abs(k[0]))
        ratio = float(np.abs(gx[0]) * np.exp(
            -terminal.growth_const * np.linalg.norm(x[0]) ** terminal.growth_power))

        max_sigma = max(max_sigma, s_norm)
        max_inv = max(max_inv, inv_norm)
        max_b = max(max_b, b_norm)
        max_k = max(max_k, k_abs)
        max_ratio = max(max_ratio, ratio)

        point = (t, xs[i].copy())
        if s_norm > model.sigma_sup:
            violations.append(("sigma", point, s_norm, model.sigma_sup))
        if inv_norm > model.sigma_inv_sup:
            violations.append(("sigma_inv", point, inv_norm, model.sigma_inv_sup))
        if b_norm > model.b_sup:
            violations.append(("drift", point, b_norm, model.b_sup))
        if k_abs > model.k_sup:
            violations.append(("potential", point, k_abs, model.k_sup))
        if ratio > terminal.growth_const:
            violations.append(("terminal_growth", point, ratio, terminal.growth_const))

    return ValidationReport(
        n_probe=n_probe, box_lo=lo, box_hi=hi,
        max_sigma=max_sigma, max_sigma_inv=max_inv, max_drift=max_b,
        max_potential=max_k, max_terminal_ratio=max_ratio,
        violations=violations)


# ---------------------------------------------------------------------------
# catalog
# ---------------------------------------------------------------------------

def _const_sigma(mat):
    def sigma(t, x):
        return np.broadcast_to(mat, (x.shape[0],) + mat.shape).copy()
    return sigma


def _const_vec(vec):
    def f(t, x):
        return np.broadcast_to(vec, (x.shape[0],) + vec.shape).copy()
    return f


def _const_scalar(c):
    def f(t, x):
        return np.full(x.shape[0], c)
    return f


def _zeros_like_mat(d, rank):
    def f(t, x):
        return np.zeros((x.shape[0],) + (d,) * rank)
    return f


def make_model(name, dim=1, horizon=1.0, x0=0.0, eps=0.5, rate=0.1, beta=1.0):
    """Build a catalog model by name: bm | bm-rate | bm-drifted | bounded-sine."""
    d = int(dim)
    x0v = np.broadcast_to(np.atleast_1d(np.asarray(x0, dtype=float)), (d,)).copy()
    eye = np.eye(d)
    zero_vec = np.zeros(d)
    sqrt_d = float(np.sqrt(d))

    if name == "bm":
        return DiffusionModel(
            dim=d, horizon=horizon, x0=x0v,
            sigma=_const_sigma(eye), drift=_const_vec(zero_vec),
            potential=_const_scalar(0.0),
            sigma_sup=sqrt_d, sigma_inv_sup=sqrt_d, b_sup=0.0, k_sup=0.0,
            dsigma=_zeros_like_mat(d, 3), ddrift=_zeros_like_mat(d, 2),
            dpotential=_zeros_like_mat(d, 1),
            sigma_const=eye, b_const=zero_vec, k_const=0.0, name="bm")
    if name == "bm-rate":
        return DiffusionModel(
            dim=d, horizon=horizon, x0=x0v,
            sigma=_const_sigma(eye), drift=_const_vec(zero_vec),
            potential=_const_scalar(rate),
            sigma_sup=sqrt_d, sigma_inv_sup=sqrt_d, b_sup=0.0, k_sup=abs(rate),
            dsigma=_zeros_like_mat(d, 3), ddrift=_zeros_like_mat(d, 2),
            dpotential=_zeros_like_mat(d, 1),
            sigma_const=eye, b_const=zero_vec, k_const=float(rate), name="bm-rate")
    if name == "bm-drifted":
        bvec = np.full(d, float(beta))
        return DiffusionModel(
            dim=d, horizon=horizon, x0=x0v,
            sigma=_const_sigma(eye), drift=_const_vec(bvec),
            potential=_const_scalar(0.0),
            sigma_sup=sqrt_d, sigma_inv_sup=sqrt_d,
            b_sup=float(np.linalg.norm(bvec)), k_sup=0.0,
            dsigma=_zeros_like_mat(d, 3), ddrift=_zeros_like_mat(d, 2),
            dpotential=_zeros_like_mat(d, 1),
            sigma_const=eye, b_const=bvec, k_const=0.0, name="bm-drifted")
    if name == "bounded-sine":
        if not 0.0 < eps < 1.0:
            raise ValueError("bounded-sine requires eps in (0, 1)")

        def sigma(t, x):
            out = np.zeros((x.shape[0], d, d))
            diag = 1.0 + eps * np.sin(x)
            idx = np.arange(d)
            out[:, idx, idx] = diag
            return out

        def dsigma(t, x):
            out = np.zeros((x.shape[0], d, d, d))
            dd = eps * np.cos(x)
            idx = np.arange(d)
            out[:, idx, idx, idx] = dd
            return out

        return DiffusionModel(
            dim=d, horizon=horizon, x0=x0v,
            sigma=sigma, drift=_const_vec(zero_vec),
            potential=_const_scalar(0.0),
            sigma_sup=sqrt_d * (1.0 + eps), sigma_inv_sup=sqrt_d / (1.0 - eps),
            b_sup=0.0, k_sup=0.0,
            dsigma=dsigma, ddrift=_zeros_like_mat(d, 2),
            dpotential=_zeros_like_mat(d, 1),
            name="bounded-sine")
    raise KeyError(f"unknown model name {name!r}")


def make_terminal(name, threshold=0.0, power=0.5):
    """Build a catalog payoff: linear | indicator | power | call | sqrt-pos.

    All payoffs act on the first state coordinate.  The indicator is closed at
    its threshold: g(x) = 1 exactly when x_1 == threshold.
    """
    K = float(threshold)
    if name == "linear":
        return TerminalFunction(
            g=lambda x: x[:, 0].copy(), growth_const=1.0, growth_power=1.0,
            tag="lipschitz", form="linear", name="linear")
    if name == "indicator":
        return TerminalFunction(
            g=lambda x: (x[:, 0] >= K).astype(float),
            growth_const=1.0, growth_power=0.0,
            tag="indicator", form="indicator", threshold=K, name="indicator")
    if name == "power":
        a = float(power)
        if not 0.0 < a < 1.0:
            raise ValueError("power payoff needs exponent in (0, 1)")
        return TerminalFunction(
            g=lambda x: np.abs(x[:, 0] - K) ** a,
            growth_const=1.0 + abs(K), growth_power=1.0,
            tag="hoelder", hoelder_exponent=a,
            form="power", threshold=K, power=a, name="power")
    if name == "call":
        return TerminalFunction(
            g=lambda x: np.maximum(x[:, 0] - K, 0.0),
            growth_const=1.0 + abs(K), growth_power=1.0,
            tag="lipschitz", form="call", threshold=K, name="call")
    if name == "sqrt-pos":
        return TerminalFunction(
            g=lambda x: np.sqrt(np.maximum(x[:, 0], 0.0)),
            growth_const=1.0, growth_power=1.0,
            tag="hoelder", hoelder_exponent=0.5, form="sqrt-pos", name="sqrt-pos")
    raise KeyError(f"unknown terminal function {name!r}")


MODEL_NAMES = ("bm", "bm-rate", "bm-drifted", "bounded-sine")
TERMINAL_NAMES = ("linear", "indicator", "power", "call", "sqrt-pos")


def builtin_catalog():
    """All built-in (model, payoff) pairs, named "model+payoff"."""
    entries = []
    for mname in MODEL_NAMES:
        for tname in TERMINAL_NAMES:
            entries.append((f"{mname}+{tname}", make_model(mname), make_terminal(tname)))
    return entries
