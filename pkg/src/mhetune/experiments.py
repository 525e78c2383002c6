"""Packaged studies behind the shipped config files.

Each study simulates its own data with a built-in system, runs the
fitting pipeline, and writes plain CSV tables into an output directory;
plotting is left to external tools. `run_experiment` is the single entry
the CLI dispatches to.
"""

from __future__ import annotations

import os
from typing import List

import numpy as np
import jsonschema

from .arrival import default_arrival
from .errors import ConfigError
from .models import builtin_model
from .pem import IdentifyOptions, identify, mc_expected_objective
from .sim import SimConfig, simulate


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def _write_csv(path: str, header: List[str], rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _validate(params: dict, schema: dict, name: str) -> dict:
    try:
        jsonschema.validate(params, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(
            f"{name} params violation at {where}: {exc.message}") from None
    merged = {k: v.get("default") for k, v in schema["properties"].items()}
    merged.update(params)
    return merged


# ---------------------------------------------------------------------------
# Scalar-LTI consistency sweep: estimate spread vs dataset size, with and
# without the tuned arrival term.

_LTI_SCHEMA = {
    "type": "object",
    "properties": {
        "theta_star": {"type": "number", "default": 0.8},
        "theta0": {"type": "number", "default": 0.5},
        "m": {"type": "integer", "minimum": 2, "default": 3},
        "stride": {"type": "integer", "minimum": 1, "default": 1},
        "n_values": {"type": "array", "items": {"type": "integer", "minimum": 1},
                     "minItems": 1,
                     "default": [100, 1000, 10000, 100000, 1000000]},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0},
                  "minItems": 1, "default": list(range(10))},
        "modes": {"type": "array", "items": {"enum": ["constant", "none"]},
                  "minItems": 1, "default": ["constant", "none"]},
        "sigma_scale": {"type": "number", "exclusiveMinimum": 0, "default": 100.0},
        "seed": {"type": "integer", "minimum": 0, "default": 0},
    },
    "additionalProperties": False,
}


def lti_consistency(params: dict, output_dir: str, workers: int = 1
                    ) -> List[str]:
    p = _validate(params, _LTI_SCHEMA, "lti_consistency")
    model = builtin_model("lti_scalar")
    rows = []
    for mode in p["modes"]:
        for n_windows in p["n_values"]:
            for s in p["seeds"]:
                seed = p["seed"] + s
                traj = simulate(SimConfig(
                    system="lti_scalar", theta_star=[p["theta_star"]],
                    length=n_windows + p["m"], seed=seed))
                eta0 = default_arrival(model.n, mode=mode,
                                       sigma_scale=p["sigma_scale"])
                opts = IdentifyOptions(m=p["m"], stride=p["stride"],
                                       workers=workers)
                res = identify([traj], model, [p["theta0"]], eta0, opts)
                rows.append((mode, n_windows, seed, res.theta_hat[0],
                             res.objective, res.iterations,
                             int(res.converged)))
    _write_csv(os.path.join(output_dir, "lti_consistency.csv"),
               ["mode", "n_windows", "seed", "theta_hat", "v_n",
                "iterations", "converged"], rows)

    summary = []
    for mode in p["modes"]:
        for n_windows in p["n_values"]:
            vals = np.array([r[3] for r in rows
                             if r[0] == mode and r[1] == n_windows])
            std = vals.std(ddof=1) if vals.size > 1 else 0.0
            summary.append((mode, n_windows, vals.mean(), std,
                            vals.min(), vals.max(), vals.max() - vals.min()))
    _write_csv(os.path.join(output_dir, "lti_consistency_summary.csv"),
               ["mode", "n_windows", "mean", "std", "min", "max", "spread"],
               summary)
    return ["lti_consistency.csv", "lti_consistency_summary.csv"]


# ---------------------------------------------------------------------------
# Lorenz recovery: repeated fits from a biased initial guess.

_LORENZ_SCHEMA = {
    "type": "object",
    "properties": {
        "theta_star": {"type": "array", "items": {"type": "number"},
                       "minItems": 2, "maxItems": 2, "default": [10.0, 30.0]},
        "theta0": {"type": "array", "items": {"type": "number"},
                   "minItems": 2, "maxItems": 2, "default": [15.0, 25.0]},
        "n_traj": {"type": "integer", "minimum": 1, "default": 50},
        "T": {"type": "number", "exclusiveMinimum": 0, "default": 3.5},
        "m": {"type": "integer", "minimum": 2, "default": 10},
        "stride": {"type": "integer", "minimum": 1, "default": 25},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0},
                  "minItems": 1, "default": list(range(10))},
        "sigma_scale": {"type": "number", "exclusiveMinimum": 0, "default": 100.0},
        "seed": {"type": "integer", "minimum": 0, "default": 0},
    },
    "additionalProperties": False,
}


def lorenz_recovery(params: dict, output_dir: str, workers: int = 1
                    ) -> List[str]:
    p = _validate(params, _LORENZ_SCHEMA, "lorenz_recovery")
    model = builtin_model("lorenz")
    star = np.asarray(p["theta_star"], dtype=float)
    rows = []
    for s in p["seeds"]:
        seed = p["seed"] + s
        trajs = simulate(SimConfig(system="lorenz", theta_star=star,
                                   T=p["T"], seed=seed, n_traj=p["n_traj"]))
        eta0 = default_arrival(model.n, sigma_scale=p["sigma_scale"])
        opts = IdentifyOptions(m=p["m"], stride=p["stride"], workers=workers)
        res = identify(trajs, model, p["theta0"], eta0, opts)
        rel = np.abs(res.theta_hat - star) / np.abs(star)
        rows.append((seed, res.theta_hat[0], res.theta_hat[1],
                     rel[0], rel[1], res.objective, res.iterations,
                     int(res.converged), res.wall_time))
    _write_csv(os.path.join(output_dir, "lorenz_recovery.csv"),
               ["seed", "theta_hat_0", "theta_hat_1", "rel_err_0",
                "rel_err_1", "v_n", "iterations", "converged", "wall_time"],
               rows)
    return ["lorenz_recovery.csv"]


# ---------------------------------------------------------------------------
# Expected-objective curve on a parameter grid (scalar LTI only).

_MC_SCHEMA = {
    "type": "object",
    "properties": {
        "theta_star": {"type": "number", "default": 0.8},
        "grid_lo": {"type": "number", "default": 0.70},
        "grid_hi": {"type": "number", "default": 0.90},
        "grid_step": {"type": "number", "exclusiveMinimum": 0, "default": 0.02},
        "n_mc": {"type": "integer", "minimum": 1, "default": 200},
        "n_windows": {"type": "integer", "minimum": 1, "default": 1000},
        "m": {"type": "integer", "minimum": 2, "default": 3},
        "seed": {"type": "integer", "minimum": 0, "default": 0},
    },
    "additionalProperties": False,
}


def mc_curve(params: dict, output_dir: str, workers: int = 1) -> List[str]:
    p = _validate(params, _MC_SCHEMA, "mc_curve")
    if p["grid_hi"] < p["grid_lo"]:
        raise ConfigError("grid_hi must be >= grid_lo")
    grid = np.round(np.arange(p["grid_lo"], p["grid_hi"] + p["grid_step"] / 2,
                              p["grid_step"]), 12)
    model = builtin_model("lti_scalar")
    opts = IdentifyOptions(m=p["m"], workers=workers)
    curve = mc_expected_objective(model, p["theta_star"], grid, p["n_mc"],
                                  opts, n_windows=p["n_windows"],
                                  seed=p["seed"])
    _write_csv(os.path.join(output_dir, "mc_curve.csv"),
               ["theta", "v_mean", "v_se"],
               list(zip(curve.theta_grid, curve.v_mean, curve.v_se)))
    sample_rows = [[curve.theta_grid[g]] + list(curve.v_samples[g])
                   for g in range(curve.theta_grid.size)]
    _write_csv(os.path.join(output_dir, "mc_curve_samples.csv"),
               ["theta"] + [f"rep_{j}" for j in range(p["n_mc"])],
               sample_rows)
    return ["mc_curve.csv", "mc_curve_samples.csv"]


# ---------------------------------------------------------------------------

_EXPERIMENTS = {
    "lti_consistency": lti_consistency,
    "lorenz_recovery": lorenz_recovery,
    "mc_curve": mc_curve,
}


def run_experiment(name: str, params: dict, output_dir: str,
                   workers: int = 1) -> List[str]:
    """Run a named study; returns the files written under output_dir."""
    if name not in _EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r} "
                          f"(known: {sorted(_EXPERIMENTS)})")
    return _EXPERIMENTS[name](params, output_dir, workers=workers)
