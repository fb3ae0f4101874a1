"""Batch experiment runner: one strict JSON config in, reproducible artifacts out.

Every run writes into out_dir/<hash>/ where <hash> is a digest of the config,
so distinct configs never share a directory and a rerun regenerates the same
data bytes.  A manifest records the config, seed, package version, and wall
time.  Exit codes: 0 ok, 2 config error, 3 numerical failure, 4 inconclusive
equivalence verdict.
"""

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .model import (CoefficientError, make_model, make_terminal, validate_model)
from .simulate import SimulationError, TimeGridSpec, euler_maruyama
from .measure import (bmo_norm_estimate, constant_drift, muckenhoupt_check,
                      reverse_hoelder_check, stochastic_exponential)
from .valuation import make_oracle
from .functionals import (NormCurve, curve_time_grid, gradient_curve,
                          hessian_curve, residual_curve, residual_m_curve)
from .smoothness import (Budgets, estimate_theta, interpolation_check,
                         verify_equivalence)
from .gridopt import rate_study

_COMMANDS = ("validate", "curves", "theta", "equivalence", "muckenhoupt",
             "grids", "interp-check")

_NUM = {"type": "number"}
_POSINT = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["command", "seed", "out_dir"],
    "properties": {
        "command": {"enum": list(_COMMANDS)},
        "seed": {"type": "integer", "minimum": 0},
        "out_dir": {"type": "string"},
        "n_workers": _POSINT,
        "model": {
            "type": "object", "additionalProperties": False,
            "required": ["name"],
            "properties": {
                "name": {"enum": ["bm", "bm-rate", "bm-drifted", "bounded-sine"]},
                "dim": _POSINT, "horizon": {"type": "number", "exclusiveMinimum": 0},
                "x0": {"anyOf": [_NUM, {"type": "array", "items": _NUM}]},
                "eps": _NUM, "rate": _NUM, "beta": _NUM,
            },
        },
        "terminal": {
            "type": "object", "additionalProperties": False,
            "required": ["name"],
            "properties": {
                "name": {"enum": ["linear", "indicator", "power", "call",
                                   "sqrt-pos"]},
                "threshold": _NUM, "power": _NUM,
            },
        },
        "drift": {
            "anyOf": [
                {"type": "null"},
                {"type": "object", "additionalProperties": False,
                 "required": ["gamma"], "properties": {"gamma": _NUM}},
            ],
        },
        "p": {"type": "number", "minimum": 2},
        "q": {"anyOf": [{"const": "inf"}, {"type": "number", "minimum": 2}]},
        "theta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "curve_grid": {
            "type": "object", "additionalProperties": False,
            "properties": {"n_points": _POSINT, "span_frac": _NUM,
                           "eps_frac": _NUM},
        },
        "budgets": {
            "type": "object", "additionalProperties": False,
            "properties": {"n_outer": _POSINT, "n_inner": _POSINT,
                           "inner_steps": _POSINT, "n_oracle_outer": _POSINT},
        },
        "validate": {
            "type": "object", "additionalProperties": False,
            "properties": {"n_probe": _POSINT},
        },
        "muckenhoupt": {
            "type": "object", "additionalProperties": False,
            "properties": {"alpha": {"type": "number", "exclusiveMinimum": 1},
                           "beta_rh": {"type": "number", "exclusiveMinimum": 1},
                           "check_times": {"type": "array", "items": _NUM,
                                           "minItems": 1},
                           "n_inner": _POSINT, "max_outer": _POSINT},
        },
        "grids": {
            "type": "object", "additionalProperties": False,
            "properties": {"n_ladder": {"type": "array", "items": _POSINT,
                                        "minItems": 2},
                           "n_paths": _POSINT},
        },
        "interp": {
            "type": "object", "additionalProperties": False,
            "properties": {"d0_exp": _NUM, "d1_exp": _NUM, "d2_exp": _NUM,
                           "A": _NUM, "D": {"type": "number", "minimum": 1},
                           "n_points": _POSINT,
                           "q": {"anyOf": [{"const": "inf"},
                                           {"type": "number", "minimum": 2}]}},
        },
    },
}

_REQUIRED_SECTIONS = {
    "validate": ("model", "terminal"),
    "curves": ("model", "terminal", "p"),
    "theta": ("model", "terminal", "p"),
    "equivalence": ("model", "terminal", "p", "q", "theta"),
    "muckenhoupt": ("model", "drift"),
    "grids": ("model", "terminal", "theta"),
    "interp-check": ("interp", "theta"),
}


class ConfigError(ValueError):
    pass


def load_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    import jsonschema
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config field {exc.json_path}: {exc.message}") from exc
    for section in _REQUIRED_SECTIONS[cfg["command"]]:
        if cfg.get(section) is None and section != "drift":
            raise ConfigError(f"config field $.{section}: required for "
                              f"command {cfg['command']!r}")
        if section == "drift" and "drift" not in cfg:
            raise ConfigError(f"config field $.drift: required for "
                              f"command {cfg['command']!r}")
    return cfg


def config_hash(cfg):
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def _build_model(cfg):
    spec = dict(cfg["model"])
    return make_model(spec.pop("name"), **spec)


def _build_terminal(cfg):
    spec = dict(cfg["terminal"])
    return make_terminal(spec.pop("name"), **spec)


def _build_drift(cfg, dim):
    spec = cfg.get("drift")
    if spec is None:
        return None
    return constant_drift(spec["gamma"], dim=dim)


def _budgets(cfg):
    b = cfg.get("budgets", {})
    g = cfg.get("curve_grid", {})
    return Budgets(n_outer=b.get("n_outer", 2000),
                   n_inner=b.get("n_inner", 500),
                   n_points=g.get("n_points", 40),
                   inner_steps=b.get("inner_steps", 16),
                   n_oracle_outer=b.get("n_oracle_outer"))


def _t_grid(cfg, horizon):
    g = cfg.get("curve_grid", {})
    return curve_time_grid(horizon, n_points=g.get("n_points", 40),
                           span_frac=g.get("span_frac", 0.9),
                           eps_frac=g.get("eps_frac", 1e-3))


def _q_value(raw):
    return np.inf if raw == "inf" else float(raw)


def _json_dump(obj, path):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_curves(curves, out):
    names = []
    for kind, curve in curves.items():
        name = f"curve_{kind}.csv"
        with open(out / name, "w", newline="\n") as fh:
            curve.write_csv(fh)
        names.append(name)
    return names


def _cmd_validate(cfg, out):
    model = _build_model(cfg)
    terminal = _build_terminal(cfg)
    n_probe = cfg.get("validate", {}).get("n_probe", 1000)
    rep = validate_model(model, terminal, n_probe, cfg["seed"])
    payload = {
        "passed": rep.passed, "n_probe": rep.n_probe,
        "box_lo": list(rep.box_lo), "box_hi": list(rep.box_hi),
        "max_sigma": rep.max_sigma, "max_sigma_inv": rep.max_sigma_inv,
        "max_drift": rep.max_drift, "max_potential": rep.max_potential,
        "max_terminal_ratio": rep.max_terminal_ratio,
        "violations": [{"quantity": q, "t": t, "x": list(x),
                        "observed": obs, "declared": dec}
                       for q, (t, x), obs, dec in rep.violations],
    }
    _json_dump(payload, out / "validation.json")
    return ["validation.json"], 0


def _compute_curves(cfg):
    model = _build_model(cfg)
    terminal = _build_terminal(cfg)
    drift = _build_drift(cfg, model.dim)
    budgets = _budgets(cfg)
    p = float(cfg["p"])
    t_grid = _t_grid(cfg, model.horizon)
    oracle = make_oracle(model, terminal)
    seed = cfg["seed"]
    curves = {
        "residual": residual_curve(model, terminal, drift, p, t_grid,
                                   budgets.n_outer, budgets.n_inner, seed,
                                   inner_steps=budgets.inner_steps),
        "gradient": gradient_curve(model, terminal, drift, oracle, p, t_grid,
                                   budgets.oracle_outer, seed),
        "hessian": hessian_curve(model, terminal, drift, oracle, p, t_grid,
                                 budgets.oracle_outer, seed),
    }
    if model.k_sup > 0.0:
        curves["residual_m"] = residual_m_curve(
            model, terminal, drift, p, t_grid, budgets.n_outer,
            budgets.n_inner, seed, inner_steps=budgets.inner_steps)
    return curves


def _cmd_curves(cfg, out):
    return _write_curves(_compute_curves(cfg), out), 0


def _cmd_theta(cfg, out):
    curves = _compute_curves(cfg)
    names = _write_curves(curves, out)
    fits = {kind: estimate_theta(c).to_dict() for kind, c in curves.items()}
    _json_dump(fits, out / "theta.json")
    return names + ["theta.json"], 0


def _cmd_equivalence(cfg, out):
    model = _build_model(cfg)
    terminal = _build_terminal(cfg)
    drift = _build_drift(cfg, model.dim)
    report = verify_equivalence(model, terminal, drift, float(cfg["p"]),
                                _q_value(cfg["q"]), float(cfg["theta"]),
                                _budgets(cfg), cfg["seed"],
                                t_grid=_t_grid(cfg, model.horizon))
    names = _write_curves(report.curves, out)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.txt").write_text(report.to_text() + "\n")
    status = 4 if report.verdict == "inconclusive" else 0
    return names + ["report.json", "report.txt"], status


def _cmd_muckenhoupt(cfg, out):
    model = _build_model(cfg)
    drift = _build_drift(cfg, model.dim)
    if drift is None:
        raise ConfigError("config field $.drift: must not be null for muckenhoupt")
    mk = cfg.get("muckenhoupt", {})
    alpha = mk.get("alpha", 2.0)
    beta_rh = mk.get("beta_rh", 2.0)
    T = model.horizon
    check_times = mk.get("check_times", list(np.round(
        np.linspace(0.2, 0.8, 4) * T, 12)))
    n_inner = mk.get("n_inner", 2000)
    max_outer = mk.get("max_outer", 64)
    budgets = _budgets(cfg)

    base = TimeGridSpec(kind="geometric", n_steps=32, eps=1e-3 * T).times(T)
    grid = np.union1d(base, np.asarray(check_times, dtype=float))
    paths = euler_maruyama(model, grid, budgets.n_outer, cfg["seed"],
                           n_workers=cfg.get("n_workers", 1))
    weights = stochastic_exponential(paths, drift)
    rep_a = muckenhoupt_check(model, weights, alpha, check_times, n_inner,
                              max_outer=max_outer)
    rep_rh = reverse_hoelder_check(model, weights, beta_rh, check_times,
                                   n_inner, max_outer=max_outer)
    bmo = bmo_norm_estimate(model, paths, drift, check_times, n_inner,
                            max_outer=max_outer)
    (out / "muckenhoupt.json").write_text(rep_a.to_json() + "\n")
    (out / "reverse_hoelder.json").write_text(rep_rh.to_json() + "\n")
    _json_dump({"bmo_sq_estimate": bmo,
                "bound_gamma_sup_sq_T": drift.gamma_sup ** 2 * T,
                "weight_terminal_mean": weights.terminal_mean,
                "weight_terminal_mean_se": weights.terminal_mean_se},
               out / "bmo.json")
    return ["muckenhoupt.json", "reverse_hoelder.json", "bmo.json"], 0


def _cmd_grids(cfg, out):
    model = _build_model(cfg)
    terminal = _build_terminal(cfg)
    drift = _build_drift(cfg, model.dim)
    gr = cfg.get("grids", {})
    study = rate_study(model, terminal, float(cfg["theta"]),
                       gr.get("n_ladder", [8, 16, 32, 64, 128, 256]),
                       gr.get("n_paths", 100000), cfg["seed"], drift=drift)
    with open(out / "rate_study.csv", "w", newline="\n") as fh:
        study.write_csv(fh)
    (out / "rate_summary.json").write_text(study.to_json() + "\n")
    return ["rate_study.csv", "rate_summary.json"], 0


def _cmd_interp(cfg, out):
    spec = cfg["interp"]
    theta = float(cfg["theta"])
    q = _q_value(spec.get("q", "inf"))
    n_points = spec.get("n_points", 200)
    A, D = float(spec.get("A", 1.0)), float(spec.get("D", 2.0))
    T = 1.0
    taus = np.geomspace(T, 1e-4 * T, n_points)
    times = T - taus

    def synth(kind, exp_):
        return NormCurve(kind=kind, p=2.0, measure="synthetic", times=times,
                         values=taus ** exp_, ses=np.zeros(n_points), horizon=T)

    report = interpolation_check(
        synth("residual", float(spec.get("d0_exp", 0.5))),
        synth("gradient", float(spec.get("d1_exp", 0.0))),
        synth("hessian", float(spec.get("d2_exp", -0.5))),
        theta, q, A, D)
    (out / "interp.json").write_text(report.to_json() + "\n")
    return ["interp.json"], 0


_RUNNERS = {
    "validate": _cmd_validate,
    "curves": _cmd_curves,
    "theta": _cmd_theta,
    "equivalence": _cmd_equivalence,
    "muckenhoupt": _cmd_muckenhoupt,
    "grids": _cmd_grids,
    "interp-check": _cmd_interp,
}


def run(config_path):
    """Execute one experiment config; returns the process exit status."""
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    digest = config_hash(cfg)
    out = Path(cfg["out_dir"]) / digest
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    try:
        artifacts, status = _RUNNERS[cfg["command"]](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SimulationError, CoefficientError, FloatingPointError,
            np.linalg.LinAlgError, ValueError, KeyError, RuntimeError) as exc:
        print(f"{cfg['command']}: numerical failure: "
              f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    manifest = {
        "config": cfg,
        "config_hash": digest,
        "seed": cfg["seed"],
        "version": __version__,
        "command": cfg["command"],
        "artifacts": artifacts,
        "wall_time_s": time.time() - t0,
    }
    _json_dump(manifest, out / "manifest.json")
    print(str(out))
    return status


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="fracsmooth",
        description="fractional-smoothness experiments from JSON configs")
    sub = parser.add_subparsers(dest="verb", required=True)
    runp = sub.add_parser("run", help="execute a config file")
    runp.add_argument("config", help="path to the experiment config (JSON)")
    args = parser.parse_args(argv)
    return run(args.config)


if __name__ == "__main__":
    sys.exit(main())
