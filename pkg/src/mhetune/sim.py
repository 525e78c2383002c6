"""Seeded trajectory generators for the built-in benchmark systems.

Reproducibility contract: a trajectory is a pure function of the config,
seed included. Each trajectory draws from its own PCG64 substream obtained
by spawning the config seed, so trajectories are independent and the k-th
trajectory does not depend on how many come before it. Draw order within a
trajectory: initial state (when random), then the process-noise array,
then the measurement-noise array.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np

from .data import Trajectory
from .errors import ConfigError, NumericFailure
from .models import lorenz_field, oscillator_field

SYSTEMS = ("lti_scalar", "lorenz", "oscillator")

# (state dim, output dim, default dt, default noise / x0 specs)
_SYSTEM_DEFAULTS = {
    "lti_scalar": dict(
        n=1, p=1, dt=1.0,
        process={"kind": "gaussian", "sigma": 1.0},
        measurement={"kind": "gaussian", "sigma": 1.0},
        x0=[0.0],
    ),
    "lorenz": dict(
        n=3, p=2, dt=0.02,
        process={"kind": "uniform", "low": -0.25, "high": 0.25},
        measurement={"kind": "uniform", "low": -1.0, "high": 1.0},
        x0={"kind": "uniform", "low": -10.0, "high": 10.0},
    ),
    "oscillator": dict(
        n=2, p=1, dt=0.1,
        process={"kind": "none"},
        measurement={"kind": "none"},
        x0=[1.0, 0.0],
    ),
}


def sample(dist: dict, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw from a distribution spec {kind: gaussian|uniform|none, ...}."""
    if not isinstance(dist, dict) or "kind" not in dist:
        raise ConfigError(f"distribution spec must be a dict with 'kind', got {dist!r}")
    kind = dist["kind"]
    if kind == "gaussian":
        sigma = float(dist.get("sigma", 1.0))
        if sigma < 0:
            raise ConfigError("gaussian sigma must be >= 0")
        return sigma * rng.standard_normal(size)
    if kind == "uniform":
        low = float(dist.get("low", -1.0))
        high = float(dist.get("high", 1.0))
        if low >= high:
            raise ConfigError(f"uniform bounds need low < high, got [{low}, {high}]")
        return rng.uniform(low, high, size)
    if kind == "none":
        return np.zeros(() if size is None else size)
    raise ConfigError(f"unknown distribution kind {kind!r}")


def rk4_step(field, x, theta, dt: float) -> np.ndarray:
    """One classical Runge-Kutta-4 step of dx/dt = field(x, theta)."""
    if dt <= 0:
        raise ConfigError("dt must be positive")
    x = np.asarray(x, dtype=float)
    k1 = field(x, theta)
    k2 = field(x + 0.5 * dt * k1, theta)
    k3 = field(x + 0.5 * dt * k2, theta)
    k4 = field(x + dt * k3, theta)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NumericFailure(f"integration produced non-finite state at x={x}")
    return out


@dataclass
class SimConfig:
    """What to simulate: system, true parameters, length, seed, noise.

    Exactly one of length (steps) or T (seconds, length = round(T/dt))
    must be given. Noise specs are distribution dicts applied i.i.d. per
    channel; x0 is either a fixed vector or a uniform-box spec dict.
    """

    system: str
    theta_star: np.ndarray
    length: Optional[int] = None
    T: Optional[float] = None
    dt: Optional[float] = None
    seed: int = 0
    n_traj: int = 1
    process_noise: Optional[dict] = None
    measurement_noise: Optional[dict] = None
    x0: Union[list, dict, None] = None

    def __post_init__(self):
        if self.system not in SYSTEMS:
            raise ConfigError(f"unknown system {self.system!r} (known: {SYSTEMS})")
        defaults = _SYSTEM_DEFAULTS[self.system]
        self.theta_star = np.asarray(self.theta_star, dtype=float).reshape(-1)
        if self.dt is None:
            self.dt = defaults["dt"]
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if (self.length is None) == (self.T is None):
            raise ConfigError("give exactly one of length (steps) or T (seconds)")
        if self.length is None:
            self.length = int(round(self.T / self.dt))
        if self.length < 2:
            raise ConfigError("trajectory length must be >= 2")
        if self.n_traj < 1:
            raise ConfigError("n_traj must be >= 1")
        if self.process_noise is None:
            self.process_noise = dict(defaults["process"])
        if self.measurement_noise is None:
            self.measurement_noise = dict(defaults["measurement"])
        if self.x0 is None:
            self.x0 = defaults["x0"]
            if isinstance(self.x0, list):
                self.x0 = list(self.x0)

    @property
    def n(self) -> int:
        return _SYSTEM_DEFAULTS[self.system]["n"]

    @property
    def p(self) -> int:
        return _SYSTEM_DEFAULTS[self.system]["p"]


def _draw_x0(config: SimConfig, rng: np.random.Generator) -> np.ndarray:
    if isinstance(config.x0, dict):
        return np.asarray(sample(config.x0, rng, size=config.n), dtype=float)
    x0 = np.asarray(config.x0, dtype=float).reshape(-1)
    if x0.shape != (config.n,):
        raise ConfigError(f"x0 must have {config.n} entries, got {x0.shape}")
    return x0


def _step_map(config: SimConfig):
    theta = config.theta_star
    if config.system == "lti_scalar":
        if theta.shape != (1,):
            raise ConfigError("lti_scalar takes a single parameter")
        return lambda x: theta * x, lambda x: x.copy()
    if config.system == "lorenz":
        if theta.shape != (2,):
            raise ConfigError("lorenz takes two parameters")
        return (lambda x: rk4_step(lorenz_field, x, theta, config.dt),
                lambda x: x[:2].copy())
    if theta.shape != (1,):
        raise ConfigError("oscillator takes a single parameter")
    return (lambda x: rk4_step(oscillator_field, x, theta, config.dt),
            lambda x: x[:1].copy())


def _simulate_one(config: SimConfig, rng: np.random.Generator) -> Trajectory:
    step, out = _step_map(config)
    T_len = config.length
    n, p = config.n, config.p
    x0 = _draw_x0(config, rng)
    w = np.asarray(sample(config.process_noise, rng, size=(T_len - 1, n)))
    v = np.asarray(sample(config.measurement_noise, rng, size=(T_len, p)))
    x = np.empty((T_len, n))
    x[0] = x0
    for k in range(T_len - 1):
        x[k + 1] = step(x[k]) + w[k]
    y = np.empty((T_len, p))
    for k in range(T_len):
        y[k] = out(x[k]) + v[k]
    if not np.all(np.isfinite(y)):
        raise NumericFailure("simulation diverged to non-finite outputs")
    return Trajectory(u=np.zeros((T_len, 0)), y=y, t0=0, dt=config.dt)


def simulate(config: SimConfig) -> Union[Trajectory, List[Trajectory]]:
    """Generate the configured trajectories, one PRNG substream per trajectory."""
    children = np.random.SeedSequence(config.seed).spawn(config.n_traj)
    trajs = [_simulate_one(config, np.random.default_rng(child))
             for child in children]
    return trajs[0] if config.n_traj == 1 else trajs
