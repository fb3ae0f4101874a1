"""Estimate the smoothness index theta from norm curves and verify that the
residual, gradient, and hessian routes agree.

A curve behaving like (T-t)^s near T maps to theta by curve kind:
residual theta = 2s, gradient theta = 1 + 2s, hessian theta = 2 + 2s.
The fit is weighted least squares of log value against log(T-t), excluding
the far-from-T transient (largest 20 percent of T-t) and points drowned in
noise (value within 2 SE of zero).

A truncation ladder is classified divergent when three consecutive
eps-halvings each grow the functional by more than 2 percent; that rule
separates log-type divergence from Monte Carlo noise at desk budgets.
"""

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .functionals import (NormCurve, PhiLadder, curve_time_grid,
                          gradient_curve, hessian_curve, phi_q,
                          residual_curve)
from .valuation import make_oracle

_THETA_FROM_SLOPE = {
    "residual": lambda s: 2.0 * s,
    "residual_m": lambda s: 2.0 * s,
    "gradient": lambda s: 1.0 + 2.0 * s,
    "hessian": lambda s: 2.0 + 2.0 * s,
}

GROWTH_TOL = 0.02
GROWTH_RUN = 3


@dataclass
class ThetaFit:
    theta: float
    theta_se: float
    slope: float
    slope_se: float
    n_used: int
    tau_window: tuple
    chi2_reduced: float
    flag: str = "ok"  # ok | inconclusive | out-of-range

    def to_dict(self):
        return {"theta": self.theta, "theta_se": self.theta_se,
                "slope": self.slope, "slope_se": self.slope_se,
                "n_used": self.n_used, "tau_window": list(self.tau_window),
                "chi2_reduced": self.chi2_reduced, "flag": self.flag}


def estimate_theta(curve, min_points=10):
    """Weighted log-log regression of the curve against T - t, mapped to theta."""
    taus = curve.taus
    vals = np.asarray(curve.values, dtype=float)
    ses = np.asarray(curve.ses, dtype=float)

    cut = np.quantile(taus, 0.8)
    usable = (taus <= cut) & (vals > 0) & (vals > 2.0 * ses)
    if int(usable.sum()) < min_points:
        return ThetaFit(theta=np.nan, theta_se=np.nan, slope=np.nan,
                        slope_se=np.nan, n_used=int(usable.sum()),
                        tau_window=(np.nan, np.nan), chi2_reduced=np.nan,
                        flag="inconclusive")
    taus_u, vals_u, ses_u = taus[usable], vals[usable], ses[usable]
    x = np.log(taus_u)
    y = np.log(vals_u)
    sig = np.where(ses_u > 0, ses_u / vals_u, np.nan)
    if np.all(np.isnan(sig)):
        w = np.ones_like(x)
        known_var = False
    else:
        floor = np.nanmin(sig[sig > 0]) if np.any(sig > 0) else 1.0
        sig = np.where(np.isnan(sig) | (sig <= 0), floor, sig)
        w = 1.0 / sig ** 2
        known_var = True

    W = np.sum(w)
    xbar = np.sum(w * x) / W
    ybar = np.sum(w * y) / W
    sxx = np.sum(w * (x - xbar) ** 2)
    slope = np.sum(w * (x - xbar) * (y - ybar)) / sxx
    resid = y - ybar - slope * (x - xbar)
    dof = max(len(x) - 2, 1)
    chi2red = float(np.sum(w * resid ** 2) / dof)
    if known_var:
        slope_var = (1.0 / sxx) * max(1.0, chi2red)
    else:
        slope_var = np.sum(resid ** 2) / dof / np.sum((x - xbar) ** 2)
    slope_se = math.sqrt(slope_var)

    theta = _THETA_FROM_SLOPE[curve.kind](slope)
    fit = ThetaFit(theta=float(theta), theta_se=2.0 * slope_se,
                   slope=float(slope), slope_se=float(slope_se),
                   n_used=int(len(x)),
                   tau_window=(float(taus_u.min()), float(taus_u.max())),
                   chi2_reduced=chi2red)
    if not 0.0 < theta <= 1.25:
        fit.flag = "out-of-range"
    return fit


def classify_ladder(ladder, growth_tol=GROWTH_TOL, run=GROWTH_RUN):
    """'divergent' when `run` consecutive eps-halvings each grow by more than
    growth_tol; otherwise 'bounded'."""
    ratios = ladder.growth_ratios()
    count = 0
    for r in ratios:
        count = count + 1 if r > 1.0 + growth_tol else 0
        if count >= run:
            return "divergent"
    return "bounded"


@dataclass
class Budgets:
    n_outer: int = 2000
    n_inner: int = 500
    n_points: int = 40
    inner_steps: int = 16
    n_oracle_outer: Optional[int] = None  # outer paths for oracle curves

    @property
    def oracle_outer(self):
        return self.n_oracle_outer or self.n_outer


@dataclass
class SmoothnessReport:
    theta_probe: float
    p: float
    q: float
    fits: dict                 # kind -> ThetaFit
    ladders: dict              # kind -> PhiLadder
    ladder_classes: dict       # kind -> bounded | divergent
    ratio_table: dict          # "kind/kind" -> list of rung ratios
    ratio_drift_se: float
    verdicts: dict             # "kind|kind" -> consistent | inconsistent | inconclusive
    verdict: str
    curves: dict = field(default_factory=dict)

    def to_json(self):
        payload = {
            "theta_probe": self.theta_probe, "p": self.p,
            "q": None if self.q == np.inf else self.q,
            "fits": {k: f.to_dict() for k, f in self.fits.items()},
            "ladders": {k: {"eps": list(l.eps_values), "values": list(l.ladder)}
                        for k, l in self.ladders.items()},
            "ladder_classes": self.ladder_classes,
            "ratio_table": {k: list(v) for k, v in self.ratio_table.items()},
            "ratio_drift_se": self.ratio_drift_se,
            "verdicts": self.verdicts,
            "verdict": self.verdict,
        }
        return json.dumps(payload, indent=2)

    def to_text(self):
        lines = [f"theta probe {self.theta_probe}  p={self.p}  q={self.q}"]
        for k, f in self.fits.items():
            lines.append(f"  {k:10s} theta = {f.theta:8.4f} +- {f.theta_se:.4f}"
                         f"  [{f.flag}]  ladder {self.ladder_classes[k]}")
        for pair, v in self.verdicts.items():
            lines.append(f"  {pair}: {v}")
        lines.append(f"verdict: {self.verdict}")
        return "\n".join(lines)


_EXPONENTS = {"residual": lambda th: -th / 2.0,
              "residual_m": lambda th: -th / 2.0,
              "gradient": lambda th: (1.0 - th) / 2.0,
              "hessian": lambda th: (2.0 - th) / 2.0}


def equivalence_ladders(curves, theta, q, n_rungs=4):
    """Phi ladders of the theorem's three weighted quantities at probe theta."""
    return {kind: phi_q(c, q, _EXPONENTS[kind](theta), n_rungs=n_rungs)
            for kind, c in curves.items()}


def _pair_verdict(fit_a, fit_b, class_a, class_b, tol=0.1):
    if fit_a.flag == "inconclusive" or fit_b.flag == "inconclusive":
        return "inconclusive"
    joint = math.hypot(fit_a.theta_se, fit_b.theta_se)
    diff = abs(fit_a.theta - fit_b.theta)
    agree = diff <= max(tol, 3.0 * joint)
    if agree and class_a == class_b:
        return "consistent"
    strong = diff > max(tol, 5.0 * joint)
    if strong or (class_a != class_b and agree):
        return "inconsistent"
    return "inconsistent" if class_a != class_b else "inconclusive"


def verify_equivalence(model, terminal, drift, p, q, theta, budgets, seed,
                       oracle=None, t_grid=None):
    """Compute all three curves, their theta estimates and truncation ladders
    at the probe theta, and judge consistency.

    Consistent: the three theta estimates agree pairwise within
    max(0.1, 3 joint SE) and the three ladders share one classification.
    """
    if not 0.0 < theta < 1.0:
        raise ValueError("theta probe must lie in (0, 1)")
    if not (q == np.inf or 2.0 <= q < np.inf):
        raise ValueError("q must lie in [2, inf]")
    T = model.horizon
    if t_grid is None:
        t_grid = curve_time_grid(T, budgets.n_points)
    if oracle is None:
        oracle = make_oracle(model, terminal)

    curves = {
        "residual": residual_curve(model, terminal, drift, p, t_grid,
                                   budgets.n_outer, budgets.n_inner, seed,
                                   inner_steps=budgets.inner_steps),
        "gradient": gradient_curve(model, terminal, drift, oracle, p, t_grid,
                                   budgets.oracle_outer, seed),
        "hessian": hessian_curve(model, terminal, drift, oracle, p, t_grid,
                                 budgets.oracle_outer, seed),
    }
    fits = {k: estimate_theta(c) for k, c in curves.items()}
    ladders = equivalence_ladders(curves, theta, q)
    classes = {k: classify_ladder(l) for k, l in ladders.items()}

    ratio_table = {}
    kinds = list(curves)
    for i in range(len(kinds)):
        for j in range(i + 1, len(kinds)):
            a, b = kinds[i], kinds[j]
            ratio_table[f"{a}/{b}"] = list(ladders[a].ladder / ladders[b].ladder)
    # noise scale for ratio drift: relative SEs at the near-T end of each curve
    rel_ses = []
    for c in curves.values():
        tail = np.argsort(c.taus)[:4]
        good = c.values[tail] > 0
        if np.any(good):
            rel_ses.append(np.mean(c.ses[tail][good] / c.values[tail][good]))
    drift_se = float(np.sqrt(np.sum(np.square(rel_ses)))) if rel_ses else np.nan

    verdicts = {}
    for pair in ratio_table:
        a, b = pair.split("/")
        verdicts[f"{a}|{b}"] = _pair_verdict(fits[a], fits[b], classes[a], classes[b])
    if all(v == "consistent" for v in verdicts.values()):
        overall = "consistent"
    elif any(v == "inconsistent" for v in verdicts.values()):
        overall = "inconsistent"
    else:
        overall = "inconclusive"

    return SmoothnessReport(theta_probe=float(theta), p=float(p), q=float(q),
                            fits=fits, ladders=ladders, ladder_classes=classes,
                            ratio_table=ratio_table, ratio_drift_se=drift_se,
                            verdicts=verdicts, verdict=overall, curves=curves)


# ---------------------------------------------------------------------------
# interpolation-inequality checker on synthetic or measured curves
# ---------------------------------------------------------------------------

@dataclass
class InterpolationReport:
    hypotheses_ok: bool
    violations: list          # (hypothesis, t, lhs, rhs)
    phi_values: dict          # k -> A + Phi_q((T-t)^{(k-theta)/2} d^k)
    bracket_constant: float
    tail_exponent: float      # fitted decay of d1 used for the tail integral

    def to_json(self):
        return json.dumps({
            "hypotheses_ok": self.hypotheses_ok,
            "violations": [[h, t, l, r] for h, t, l, r in self.violations],
            "phi_values": self.phi_values,
            "bracket_constant": self.bracket_constant,
            "tail_exponent": self.tail_exponent,
        }, indent=2)


def _tail_power_fit(taus, vals):
    """Fit vals ~ C * tau^e on the three smallest taus (power-law tail)."""
    idx = np.argsort(taus)[:3]
    x, y = np.log(taus[idx]), np.log(np.maximum(vals[idx], 1e-300))
    e, logc = np.polyfit(x, y, 1)
    return float(np.exp(logc)), float(e)


def interpolation_check(d0, d1, d2, theta, q, A, D, n_rungs=4):
    """Verify the two-sided interpolation hypotheses on three curves and, when
    they hold, the multiplicative bracket tying the weighted functionals.

    Hypotheses, for every grid t (tau = T - t):
        (lower-k)  (1/D) tau^(k/2) d^k(t) <= d^0(t),     k = 1, 2
        (upper)    d^0(t) <= D (int_t^T d^1(s)^2 ds)^(1/2)
        (chain)    d^1(t) <= A + D (int_0^t d^2(u)^2 du)^(1/2)

    The tail of int_t^T d1^2 beyond the last grid point is extrapolated from a
    power-law fit of d1; a non-integrable fitted tail makes the upper
    hypothesis hold vacuously (the true integral is infinite).
    A hypothesis violation is a reported outcome, not an error.
    """
    if not (d0.times.shape == d1.times.shape == d2.times.shape) or \
            not np.allclose(d0.times, d1.times) or not np.allclose(d0.times, d2.times):
        raise ValueError("curves must share one grid")
    T = d0.horizon
    order = np.argsort(d0.times)
    t = d0.times[order]
    tau = T - t
    v0 = np.asarray(d0.values, dtype=float)[order]
    v1 = np.asarray(d1.values, dtype=float)[order]
    v2 = np.asarray(d2.values, dtype=float)[order]

    violations = []
    for k, vk in ((1, v1), (2, v2)):
        lhs = tau ** (k / 2.0) * vk / D
        bad = lhs > v0 * (1.0 + 1e-9)
        for i in np.where(bad)[0]:
            violations.append((f"lower-{k}", float(t[i]), float(lhs[i]), float(v0[i])))

    # upper: tail integral of d1^2 from each t to T
    c_fit, e_fit = _tail_power_fit(tau, v1)
    sq1 = v1 ** 2
    inner = np.concatenate([
        np.cumsum((0.5 * (sq1[1:] + sq1[:-1]) * np.diff(t))[::-1])[::-1], [0.0]])
    if 2.0 * e_fit + 1.0 > 0:
        tail = c_fit ** 2 * tau[-1] ** (2.0 * e_fit + 1.0) / (2.0 * e_fit + 1.0)
    else:
        tail = np.inf
    rhs_upper = D * np.sqrt(inner + tail)
    bad = v0 > rhs_upper * (1.0 + 1e-9)
    for i in np.where(bad)[0]:
        violations.append(("upper", float(t[i]), float(v0[i]), float(rhs_upper[i])))

    # chain: forward integral of d2^2 from the first grid point to t
    sq2 = v2 ** 2
    fwd = np.concatenate([[0.0],
                          np.cumsum(0.5 * (sq2[1:] + sq2[:-1]) * np.diff(t))])
    rhs_chain = A + D * np.sqrt(fwd)
    bad = v1 > rhs_chain * (1.0 + 1e-9)
    for i in np.where(bad)[0]:
        violations.append(("chain", float(t[i]), float(v1[i]), float(rhs_chain[i])))

    phi_values = {}
    for k, cur in ((0, d0), (1, d1), (2, d2)):
        lad = phi_q(cur, q, (k - theta) / 2.0, n_rungs=n_rungs)
        phi_values[k] = A + lad.value
    vals = np.array(list(phi_values.values()))
    bracket = float(vals.max() / vals.min()) if np.all(vals > 0) else np.inf

    return InterpolationReport(hypotheses_ok=not violations,
                               violations=violations,
                               phi_values={str(k): float(v) for k, v in phi_values.items()},
                               bracket_constant=bracket,
                               tail_exponent=e_fit)


@dataclass
class ThetaOneReport:
    gradient_ladder: PhiLadder
    hessian_ladder: PhiLadder
    gradient_class: str
    hessian_class: str
    note: str

    def to_json(self):
        return json.dumps({
            "gradient_ladder": list(self.gradient_ladder.ladder),
            "hessian_ladder": list(self.hessian_ladder.ladder),
            "gradient_class": self.gradient_class,
            "hessian_class": self.hessian_class,
            "note": self.note}, indent=2)


def theta_one_diagnostic(model, terminal, budgets, seed, p=2.0, oracle=None,
                         t_grid=None):
    """Qualitative report for the boundary index theta = 1 with the sup
    functional: ladders of G_p and of (T-t)^(1/2) H_p.

    The one-sided behavior (hessian route bounded while the gradient route
    grows) is reported, not judged; it is expected for payoffs such as
    sqrt(x ^ 0).
    """
    T = model.horizon
    if t_grid is None:
        t_grid = curve_time_grid(T, budgets.n_points)
    if oracle is None:
        oracle = make_oracle(model, terminal)
    g_curve = gradient_curve(model, terminal, None, oracle, p, t_grid,
                             budgets.oracle_outer, seed)
    h_curve = hessian_curve(model, terminal, None, oracle, p, t_grid,
                            budgets.oracle_outer, seed)
    g_lad = phi_q(g_curve, np.inf, 0.0)
    h_lad = phi_q(h_curve, np.inf, 0.5)
    g_cls = classify_ladder(g_lad)
    h_cls = classify_ladder(h_lad)
    note = (f"gradient sup-ladder {g_cls}, hessian sqrt-weighted sup-ladder "
            f"{h_cls}; qualitative only, no pass/fail at theta = 1")
    return ThetaOneReport(gradient_ladder=g_lad, hessian_ladder=h_lad,
                          gradient_class=g_cls, hessian_class=h_cls, note=note)
