"""Command-line entry point: JSON-configured simulate / identify / eval /
check / experiment runs.

One config file per run; ``--seed`` and ``--workers`` override the
corresponding config fields so a manifest can be swept without editing.
Every output lands under the config's ``output_dir``. Exit codes are a
stable contract: 0 success, 1 numeric failure, 2 config or validation
error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import jsonschema

from .arrival import ArrivalParams, default_arrival
from .data import load_dataset, load_manifest, save_manifest, save_trajectory_csv
from .errors import ConfigError, ModelContractError, NumericFailure
from .mhe import MheOptions
from .models import ParametricModel, builtin_model, check_jacobians
from .pem import (IdentifyOptions, as_window_batch, evaluate_objective,
                  identify, save_eps_csv, save_result_json, save_trace_csv)
from .sim import SYSTEMS, SimConfig, simulate

# ---------------------------------------------------------------------------
# Config schemas (jsonschema; unknown keys are rejected everywhere)

_DIST_SCHEMA = {
    "type": "object",
    "oneOf": [
        {"properties": {"kind": {"const": "gaussian"},
                        "sigma": {"type": "number", "exclusiveMinimum": 0}},
         "required": ["kind", "sigma"], "additionalProperties": False},
        {"properties": {"kind": {"const": "uniform"},
                        "low": {"type": "number"},
                        "high": {"type": "number"}},
         "required": ["kind", "low", "high"], "additionalProperties": False},
        {"properties": {"kind": {"const": "none"}},
         "required": ["kind"], "additionalProperties": False},
    ],
}

_SIM_SCHEMA = {
    "type": "object",
    "properties": {
        "system": {"enum": sorted(SYSTEMS)},
        "theta_star": {"type": "array", "items": {"type": "number"},
                       "minItems": 1},
        "length": {"type": "integer", "minimum": 2},
        "T": {"type": "number", "exclusiveMinimum": 0},
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "n_traj": {"type": "integer", "minimum": 1},
        "process_noise": _DIST_SCHEMA,
        "measurement_noise": _DIST_SCHEMA,
        "x0": {"oneOf": [{"type": "array", "items": {"type": "number"}},
                         _DIST_SCHEMA]},
    },
    "required": ["system", "theta_star"],
    "additionalProperties": False,
}

_MODEL_SCHEMA = {
    "type": "object",
    "properties": {
        "name": {"type": "string"},
        "options": {"type": "object"},
    },
    "required": ["name"],
    "additionalProperties": False,
}

_DATASET_SCHEMA = {
    "type": "object",
    "oneOf": [
        {"properties": {"manifest": {"type": "string"}},
         "required": ["manifest"], "additionalProperties": False},
        {"properties": {"sim": _SIM_SCHEMA},
         "required": ["sim"], "additionalProperties": False},
    ],
}

_SOLVER_SCHEMA = {
    "type": "object",
    "properties": {
        "max_outer": {"type": "integer", "minimum": 1},
        "gtol": {"type": "number", "exclusiveMinimum": 0},
        "ftol": {"type": "number", "minimum": 0},
        "lm_lambda0": {"type": "number", "exclusiveMinimum": 0},
        "lm_lambda_max": {"type": "number", "exclusiveMinimum": 0},
        "penalty_rho": {"type": "number", "exclusiveMinimum": 0},
        "mhe_tol": {"type": "number", "exclusiveMinimum": 0},
        "mhe_max_iter": {"type": "integer", "minimum": 1},
        "fd_step": {"type": "number", "exclusiveMinimum": 0},
        "hessian": {"enum": ["exact", "gauss_newton"]},
        "warm_start": {"type": "boolean"},
        "optimize_theta": {"type": "boolean"},
        "optimize_eta": {"type": "boolean"},
        "exclude_limit": {"type": "number", "minimum": 0, "maximum": 1},
        "n_chunks": {"type": "integer", "minimum": 1},
    },
    "additionalProperties": False,
}

_ETA_SCHEMA = {
    "type": "object",
    "properties": {
        "s_bar": {"type": "array", "items": {"type": "number"}},
        "l_free": {"type": "array", "items": {"type": "number"}},
        "sigma_scale": {"type": "number", "exclusiveMinimum": 0},
    },
    "additionalProperties": False,
}

_IDENTIFY_SCHEMA = {
    "type": "object",
    "properties": {
        "output_dir": {"type": "string"},
        "model": _MODEL_SCHEMA,
        "dataset": _DATASET_SCHEMA,
        "m": {"type": "integer", "minimum": 2},
        "stride": {"type": "integer", "minimum": 1},
        "arrival_mode": {"enum": ["constant", "none"]},
        "theta0": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "eta0": _ETA_SCHEMA,
        "solver": _SOLVER_SCHEMA,
        "workers": {"type": "integer", "minimum": 1},
    },
    "required": ["output_dir", "model", "dataset", "theta0"],
    "additionalProperties": False,
}

_EVAL_SCHEMA = {
    "type": "object",
    "properties": {
        "output_dir": {"type": "string"},
        "model": _MODEL_SCHEMA,
        "dataset": _DATASET_SCHEMA,
        "m": {"type": "integer", "minimum": 2},
        "stride": {"type": "integer", "minimum": 1},
        "arrival_mode": {"enum": ["constant", "none"]},
        "theta": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "eta": _ETA_SCHEMA,
        "solver": _SOLVER_SCHEMA,
        "workers": {"type": "integer", "minimum": 1},
    },
    "required": ["output_dir", "model", "dataset", "theta"],
    "additionalProperties": False,
}

_SIMULATE_SCHEMA = {
    "type": "object",
    "properties": {
        "output_dir": {"type": "string"},
        "sim": _SIM_SCHEMA,
        "m": {"type": "integer", "minimum": 2},
        "stride": {"type": "integer", "minimum": 1},
    },
    "required": ["output_dir", "sim"],
    "additionalProperties": False,
}

_CHECK_SCHEMA = {
    "type": "object",
    "properties": {
        "output_dir": {"type": "string"},
        "model": _MODEL_SCHEMA,
        "theta": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "n_samples": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "step": {"type": "number", "exclusiveMinimum": 0},
        "threshold": {"type": "number", "exclusiveMinimum": 0},
        "x_scale": {"type": "number", "exclusiveMinimum": 0},
        "u_scale": {"type": "number", "exclusiveMinimum": 0},
    },
    "required": ["output_dir", "model", "theta"],
    "additionalProperties": False,
}

_EXPERIMENT_SCHEMA = {
    "type": "object",
    "properties": {
        "output_dir": {"type": "string"},
        "experiment": {"enum": ["lti_consistency", "lorenz_recovery",
                                "mc_curve"]},
        "params": {"type": "object"},
        "workers": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
    },
    "required": ["output_dir", "experiment"],
    "additionalProperties": False,
}

_SCHEMAS = {
    "simulate": _SIMULATE_SCHEMA,
    "identify": _IDENTIFY_SCHEMA,
    "eval": _EVAL_SCHEMA,
    "check": _CHECK_SCHEMA,
    "experiment": _EXPERIMENT_SCHEMA,
}


# ---------------------------------------------------------------------------
# Config plumbing


def load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return doc


def validate_config(cfg: dict, command: str):
    """Schema-check a config before any computation."""
    try:
        jsonschema.validate(cfg, _SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(
            f"config schema violation at {where}: {exc.message}") from None


def _build_model(cfg: dict) -> ParametricModel:
    name = cfg["model"]["name"]
    options = cfg["model"].get("options", {})
    try:
        return builtin_model(name, **options)
    except TypeError as exc:
        raise ConfigError(f"bad options for model {name!r}: {exc}") from None


def _sim_config(sim: dict, seed_override=None) -> SimConfig:
    sim = dict(sim)
    if seed_override is not None:
        sim["seed"] = seed_override
    return SimConfig(**sim)


def _load_trajectories(cfg: dict, seed_override=None):
    """Dataset from a manifest or an inline simulation; plus (m, stride)."""
    ds = cfg["dataset"]
    if "manifest" in ds:
        trajs = load_dataset(ds["manifest"])
        doc = load_manifest(ds["manifest"])
        m = cfg.get("m", doc.get("m"))
        stride = cfg.get("stride", doc.get("stride") or 1)
    else:
        trajs = simulate(_sim_config(ds["sim"], seed_override))
        if not isinstance(trajs, list):
            trajs = [trajs]
        m = cfg.get("m")
        stride = cfg.get("stride", 1)
    if m is None:
        raise ConfigError("horizon m missing: set it in the config or the manifest")
    # reject short trajectories up front so nothing is solved on exit 2
    for i, traj in enumerate(trajs):
        if len(traj.y) < m + 1:
            raise ConfigError(
                f"trajectory {i} has {len(traj.y)} samples; horizon m={int(m)} "
                f"needs at least {int(m) + 1}")
    return trajs, int(m), int(stride)


def _build_arrival(cfg: dict, n: int, key: str) -> ArrivalParams:
    mode = cfg.get("arrival_mode", "constant")
    spec = cfg.get(key, {})
    eta = default_arrival(n, mode=mode,
                          sigma_scale=spec.get("sigma_scale", 100.0))
    s_bar = np.asarray(spec.get("s_bar", eta.s_bar), dtype=float)
    l_free = np.asarray(spec.get("l_free", eta.l_free), dtype=float)
    return ArrivalParams(s_bar=s_bar, l_free=l_free, mode=mode)


def _build_options(cfg: dict, m: int, stride: int, workers_override=None
                   ) -> IdentifyOptions:
    sol = dict(cfg.get("solver", {}))
    mhe_kwargs = {}
    if "mhe_tol" in sol:
        mhe_kwargs["tol"] = sol.pop("mhe_tol")
    if "mhe_max_iter" in sol:
        mhe_kwargs["max_iter"] = sol.pop("mhe_max_iter")
    workers = cfg.get("workers", 1)
    if workers_override is not None:
        workers = workers_override
    return IdentifyOptions(m=m, stride=stride, workers=int(workers),
                           mhe=MheOptions(**mhe_kwargs), **sol)


def _outdir(cfg: dict) -> str:
    path = cfg["output_dir"]
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# Subcommands


def cmd_simulate(cfg: dict, seed_override=None) -> int:
    out = _outdir(cfg)
    config = _sim_config(cfg["sim"], seed_override)
    trajs = simulate(config)
    if not isinstance(trajs, list):
        trajs = [trajs]
    width = max(3, len(str(len(trajs) - 1)))
    files = []
    for i, traj in enumerate(trajs):
        name = f"traj_{i:0{width}d}.csv"
        save_trajectory_csv(traj, os.path.join(out, name))
        files.append(name)
    save_manifest(os.path.join(out, "manifest.json"), files,
                  m=cfg.get("m"), stride=cfg.get("stride", 1), dt=config.dt,
                  metadata={"system": config.system,
                            "theta_star": config.theta_star.tolist(),
                            "seed": int(config.seed)})
    print(f"wrote {len(files)} trajectories and manifest.json to {out}")
    return 0


def cmd_identify(cfg: dict, seed_override=None, workers_override=None) -> int:
    out = _outdir(cfg)
    model = _build_model(cfg)
    trajs, m, stride = _load_trajectories(cfg, seed_override)
    eta0 = _build_arrival(cfg, model.n, "eta0")
    opts = _build_options(cfg, m, stride, workers_override)
    result = identify(trajs, model, cfg["theta0"], eta0, opts)
    save_result_json(os.path.join(out, "result.json"), result)
    save_trace_csv(os.path.join(out, "trace.csv"), result.trace)
    theta = ", ".join(f"{v:.6g}" for v in result.theta_hat)
    print(f"theta_hat = [{theta}]  V_N = {result.objective:.6g}  "
          f"converged = {result.converged}  iterations = {result.iterations}")
    return 0


def cmd_eval(cfg: dict, seed_override=None, workers_override=None) -> int:
    out = _outdir(cfg)
    model = _build_model(cfg)
    trajs, m, stride = _load_trajectories(cfg, seed_override)
    eta = _build_arrival(cfg, model.n, "eta")
    opts = _build_options(cfg, m, stride, workers_override)
    batch = as_window_batch(trajs, m, stride)
    v_n, eps = evaluate_objective(batch, model, cfg["theta"], eta, opts)
    doc = {"v_n": v_n, "n_windows": batch.n_windows, "m": m, "stride": stride}
    with open(os.path.join(out, "eval.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    save_eps_csv(os.path.join(out, "eps.csv"), eps, origins=batch.origins)
    print(f"V_N = {v_n:.12g} over {batch.n_windows} windows")
    return 0


def cmd_check(cfg: dict, seed_override=None) -> int:
    out = _outdir(cfg)
    model = _build_model(cfg)
    theta = np.asarray(cfg["theta"], dtype=float)
    if theta.shape != (model.n_theta,):
        raise ConfigError(f"theta must have {model.n_theta} entries")
    seed = cfg.get("seed", 0) if seed_override is None else seed_override
    rng = np.random.default_rng(seed)
    x_scale = cfg.get("x_scale", 2.0)
    u_scale = cfg.get("u_scale", 1.0)
    samples = [(rng.uniform(-x_scale, x_scale, model.n),
                rng.uniform(-u_scale, u_scale, model.q), theta)
               for _ in range(cfg.get("n_samples", 20))]
    report = check_jacobians(model, samples, step=cfg.get("step", 1e-6),
                             threshold=cfg.get("threshold", 1e-5))
    doc = {"max_errors": report.max_errors, "threshold": report.threshold,
           "passed": report.passed}
    with open(os.path.join(out, "jacobian_report.json"), "w",
              encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(report)
    if not report.passed:
        raise NumericFailure("jacobian check failed; see jacobian_report.json")
    return 0


def cmd_experiment(cfg: dict, seed_override=None, workers_override=None) -> int:
    from . import experiments
    out = _outdir(cfg)
    workers = cfg.get("workers", 1)
    if workers_override is not None:
        workers = workers_override
    params = dict(cfg.get("params", {}))
    if seed_override is not None:
        params["seed"] = seed_override
    files = experiments.run_experiment(cfg["experiment"], params, out,
                                       workers=int(workers))
    for name in files:
        print(f"wrote {os.path.join(out, name)}")
    return 0


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mhetune",
        description="Estimator-aware system identification: simulate data, "
                    "fit model and arrival-cost parameters, evaluate fits.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [
        ("simulate", "generate trajectories and a dataset manifest"),
        ("identify", "fit parameters to a dataset"),
        ("eval", "evaluate the objective at fixed parameters"),
        ("check", "finite-difference check of a model's Jacobians"),
        ("experiment", "run a packaged study and emit its tables"),
    ]:
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's seed")
        if name not in ("simulate", "check"):
            p.add_argument("--workers", type=int, default=None,
                           help="override the config's worker count")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        validate_config(cfg, args.command)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.seed)
        if args.command == "identify":
            return cmd_identify(cfg, args.seed, args.workers)
        if args.command == "eval":
            return cmd_eval(cfg, args.seed, args.workers)
        if args.command == "check":
            return cmd_check(cfg, args.seed)
        return cmd_experiment(cfg, args.seed, args.workers)
    except (ConfigError, ModelContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
