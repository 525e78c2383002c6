"""Parametric state-space models.

A model describes discrete-time dynamics x+ = f(x, u, theta) + w and an
output map y = g(x, theta) + v, together with the noise covariances
Q(theta), R(theta) and analytic Jacobians of f and g. Continuous-time
dynamics are wrapped by classical RK4 steps, one sampling interval per
discrete step (sub-stepping configurable).

Model callables are pure functions. Built-in models broadcast over a
leading sample axis (``batched=True``): x may be (n,) or (N, n), Jacobians
come back as (n, n) or (N, n, n) accordingly. User models that only handle
single points set ``batched=False`` and are looped over transparently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ModelContractError, NumericFailure


@dataclass
class ParametricModel:
    """Dynamics/output maps with dimensions, noise weights and Jacobians.

    f:            (x, u, theta) -> next state, shape (..., n)
    g:            (x, theta)    -> output, shape (..., p)
    Q, R:         theta -> positive-definite covariance (n, n) / (p, p)
    jac_f_x:      (x, u, theta) -> (..., n, n)
    jac_f_theta:  (x, u, theta) -> (..., n, n_theta)
    jac_g_x:      (x, theta)    -> (..., p, n)
    jac_g_theta:  (x, theta)    -> (..., p, n_theta)
    h_P:          optional theta -> (n_c,), feasible iff all entries <= 0
    theta_bounds: optional (lo, hi) box bounds on theta
    """

    n: int
    q: int
    p: int
    n_theta: int
    f: Callable
    g: Callable
    Q: Callable
    R: Callable
    jac_f_x: Callable
    jac_f_theta: Callable
    jac_g_x: Callable
    jac_g_theta: Callable
    h_P: Optional[Callable] = None
    theta_bounds: Optional[tuple] = None
    batched: bool = False
    name: str = ""
    options: dict = field(default_factory=dict)


def _require(cond, msg):
    if not cond:
        raise ModelContractError(msg)


def _as_vector(v, dim, label):
    v = np.asarray(v, dtype=float)
    _require(v.shape == (dim,), f"{label} must have shape ({dim},), got {v.shape}")
    _require(np.all(np.isfinite(v)), f"{label} contains non-finite values")
    return v


def eval_dynamics(model: ParametricModel, x, u, theta) -> np.ndarray:
    """Evaluate the noise-free dynamics f(x, u, theta) for a single point."""
    x = _as_vector(x, model.n, "x")
    u = _as_vector(u, model.q, "u")
    theta = _as_vector(theta, model.n_theta, "theta")
    out = np.asarray(model.f(x, u, theta), dtype=float).reshape(model.n)
    if not np.all(np.isfinite(out)):
        raise NumericFailure("dynamics returned non-finite values")
    return out


def eval_output(model: ParametricModel, x, theta) -> np.ndarray:
    """Evaluate the noise-free output map g(x, theta) for a single point."""
    x = _as_vector(x, model.n, "x")
    theta = _as_vector(theta, model.n_theta, "theta")
    out = np.asarray(model.g(x, theta), dtype=float).reshape(model.p)
    if not np.all(np.isfinite(out)):
        raise NumericFailure("output map returned non-finite values")
    return out


# Batch adapters used by the estimator core. X is (N, n), U is (N, q);
# non-batched models are looped over sample by sample.

def batch_dynamics(model, X, U, theta):
    if model.batched:
        return np.asarray(model.f(X, U, theta), dtype=float)
    return np.stack([model.f(X[i], U[i], theta) for i in range(X.shape[0])])


def batch_output(model, X, theta):
    if model.batched:
        return np.asarray(model.g(X, theta), dtype=float)
    return np.stack([model.g(X[i], theta) for i in range(X.shape[0])])


def batch_jac_f_x(model, X, U, theta):
    if model.batched:
        return np.asarray(model.jac_f_x(X, U, theta), dtype=float)
    return np.stack([model.jac_f_x(X[i], U[i], theta) for i in range(X.shape[0])])


def batch_jac_g_x(model, X, theta):
    if model.batched:
        return np.asarray(model.jac_g_x(X, theta), dtype=float)
    return np.stack([model.jac_g_x(X[i], theta) for i in range(X.shape[0])])


def batch_jac_g_theta(model, X, theta):
    if model.batched:
        return np.asarray(model.jac_g_theta(X, theta), dtype=float)
    return np.stack([model.jac_g_theta(X[i], theta) for i in range(X.shape[0])])


# ---------------------------------------------------------------------------
# Jacobian checking


@dataclass
class JacobianReport:
    """Worst-case relative error of each supplied Jacobian vs central FD."""

    max_errors: dict
    threshold: float
    passed: bool

    def __str__(self):
        lines = [f"jacobian check (threshold {self.threshold:g}):"]
        for name, err in self.max_errors.items():
            flag = "ok" if err <= self.threshold else "FAIL"
            lines.append(f"  {name:12s} max rel error {err:.3e}  {flag}")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def _central_diff(fun, v, step):
    """Central differences of fun w.r.t. the vector v, columns per entry."""
    v = np.asarray(v, dtype=float)
    cols = []
    for j in range(v.size):
        h = step * max(1.0, abs(v[j]))
        vp = v.copy()
        vm = v.copy()
        vp[j] += h
        vm[j] -= h
        fp = np.asarray(fun(vp), dtype=float)
        fm = np.asarray(fun(vm), dtype=float)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NumericFailure(f"non-finite evaluation while differencing at {v}")
        cols.append((fp - fm) / (2.0 * h))
    if not cols:
        return np.zeros(np.asarray(fun(v)).shape + (0,))
    return np.stack(cols, axis=-1)


def _rel_error(fd, analytic):
    scale = max(1.0, float(np.max(np.abs(analytic))) if analytic.size else 1.0)
    if fd.size == 0:
        return 0.0
    return float(np.max(np.abs(fd - analytic))) / scale


def check_jacobians(model: ParametricModel, samples, step: float = 1e-6,
                    threshold: float = 1e-5) -> JacobianReport:
    """Compare the model's analytic Jacobians against central differences.

    samples: iterable of (x, u, theta) points; step must be positive.
    """
    if step <= 0:
        raise ModelContractError("step must be positive")
    worst = {"jac_f_x": 0.0, "jac_f_theta": 0.0, "jac_g_x": 0.0, "jac_g_theta": 0.0}
    for x, u, theta in samples:
        x = _as_vector(x, model.n, "x")
        u = _as_vector(u, model.q, "u")
        theta = _as_vector(theta, model.n_theta, "theta")
        pairs = [
            ("jac_f_x", lambda v: model.f(v, u, theta), x,
             model.jac_f_x(x, u, theta)),
            ("jac_f_theta", lambda v: model.f(x, u, v), theta,
             model.jac_f_theta(x, u, theta)),
            ("jac_g_x", lambda v: model.g(v, theta), x,
             model.jac_g_x(x, theta)),
            ("jac_g_theta", lambda v: model.g(x, v), theta,
             model.jac_g_theta(x, theta)),
        ]
        for name, fun, at, analytic in pairs:
            fd = _central_diff(fun, at, step)
            analytic = np.asarray(analytic, dtype=float).reshape(fd.shape)
            worst[name] = max(worst[name], _rel_error(fd, analytic))
    passed = all(err <= threshold for err in worst.values())
    return JacobianReport(max_errors=worst, threshold=threshold, passed=passed)


# ---------------------------------------------------------------------------
# RK4 wrapping of continuous-time fields


def _rk4_map(field, jac_x, jac_theta, n, n_theta, dt, substeps):
    """Build the discrete step of a continuous field and its Jacobians.

    One classical RK4 step per sub-interval dt/substeps; Jacobians follow
    from the chain rule through the four stages.
    """
    h = dt / substeps
    eye = np.eye(n)

    def step(x, theta):
        k1 = field(x, theta)
        k2 = field(x + 0.5 * h * k1, theta)
        k3 = field(x + 0.5 * h * k2, theta)
        k4 = field(x + h * k3, theta)
        return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def step_jacobians(x, theta):
        k1 = field(x, theta)
        x2 = x + 0.5 * h * k1
        k2 = field(x2, theta)
        x3 = x + 0.5 * h * k2
        k3 = field(x3, theta)
        x4 = x + h * k3

        J1 = jac_x(x, theta)
        T1 = jac_theta(x, theta)
        J2 = jac_x(x2, theta) @ (eye + 0.5 * h * J1)
        T2 = jac_theta(x2, theta) + jac_x(x2, theta) @ (0.5 * h * T1)
        J3 = jac_x(x3, theta) @ (eye + 0.5 * h * J2)
        T3 = jac_theta(x3, theta) + jac_x(x3, theta) @ (0.5 * h * T2)
        J4 = jac_x(x4, theta) @ (eye + h * J3)
        T4 = jac_theta(x4, theta) + jac_x(x4, theta) @ (h * T3)

        A = eye + (h / 6.0) * (J1 + 2.0 * J2 + 2.0 * J3 + J4)
        T = (h / 6.0) * (T1 + 2.0 * T2 + 2.0 * T3 + T4)
        return A, T

    def f(x, u, theta):
        out = x
        for _ in range(substeps):
            out = step(out, theta)
        return out

    def jac_f_x(x, u, theta):
        A_total = np.broadcast_to(eye, x.shape + (n,)).copy()
        cur = x
        for _ in range(substeps):
            A, _ = step_jacobians(cur, theta)
            A_total = A @ A_total
            cur = step(cur, theta)
        return A_total

    def jac_f_theta(x, u, theta):
        T_total = np.zeros(x.shape + (n_theta,))
        cur = x
        for _ in range(substeps):
            A, T = step_jacobians(cur, theta)
            T_total = A @ T_total + T
            cur = step(cur, theta)
        return T_total

    return f, jac_f_x, jac_f_theta


# ---------------------------------------------------------------------------
# Built-in models


def _const_matrix_map(M):
    M = np.asarray(M, dtype=float)
    return lambda theta: M


def make_lti_scalar() -> ParametricModel:
    """x+ = theta*x + w, y = x + v, unit noise covariances."""

    def f(x, u, theta):
        return theta[0] * x

    def g(x, theta):
        return x.copy()

    def jac_f_x(x, u, theta):
        return np.broadcast_to(theta[0], x.shape[:-1] + (1, 1)).copy()

    def jac_f_theta(x, u, theta):
        return x[..., None]

    def jac_g_x(x, theta):
        return np.broadcast_to(1.0, x.shape[:-1] + (1, 1)).copy()

    def jac_g_theta(x, theta):
        return np.zeros(x.shape[:-1] + (1, 1))

    return ParametricModel(
        n=1, q=0, p=1, n_theta=1,
        f=f, g=g,
        Q=_const_matrix_map([[1.0]]), R=_const_matrix_map([[1.0]]),
        jac_f_x=jac_f_x, jac_f_theta=jac_f_theta,
        jac_g_x=jac_g_x, jac_g_theta=jac_g_theta,
        batched=True, name="lti_scalar",
    )


def lorenz_field(x, theta):
    """Lorenz vector field with free rate parameters (theta1, theta2).

    dx1 = theta1*(x2 - x1); dx2 = x1*(theta2 - x3) - x2; dx3 = x1*x2 - 2*x3.
    """
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    return np.stack([
        theta[0] * (x2 - x1),
        x1 * (theta[1] - x3) - x2,
        x1 * x2 - 2.0 * x3,
    ], axis=-1)


def lorenz_field_jac_x(x, theta):
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    zeros = np.zeros_like(x1)
    ones = np.ones_like(x1)
    row1 = np.stack([-theta[0] * ones, theta[0] * ones, zeros], axis=-1)
    row2 = np.stack([theta[1] - x3, -ones, -x1], axis=-1)
    row3 = np.stack([x2, x1, -2.0 * ones], axis=-1)
    return np.stack([row1, row2, row3], axis=-2)


def lorenz_field_jac_theta(x, theta):
    x1, x2 = x[..., 0], x[..., 1]
    zeros = np.zeros_like(x1)
    row1 = np.stack([x[..., 1] - x[..., 0], zeros], axis=-1)
    row2 = np.stack([zeros, x1], axis=-1)
    row3 = np.stack([zeros, zeros], axis=-1)
    return np.stack([row1, row2, row3], axis=-2)


# Default MHE weights for the Lorenz model: variances of U(-1,1) and
# U(-1/4,1/4) noise, i.e. R = (1/3) I2 and Q = (1/48) I3.
LORENZ_DEFAULT_Q = 1.0 / 48.0
LORENZ_DEFAULT_R = 1.0 / 3.0


def make_lorenz(dt: float = 0.02, substeps: int = 1,
                q_diag: float = LORENZ_DEFAULT_Q,
                r_diag: float = LORENZ_DEFAULT_R) -> ParametricModel:
    """Lorenz system discretized by RK4; outputs are the first two states."""
    if dt < 0 or substeps < 1:
        raise ModelContractError("dt must be >= 0 and substeps >= 1")
    if dt == 0:
        f = lambda x, u, theta: x.copy()
        jac_f_x = lambda x, u, theta: np.broadcast_to(
            np.eye(3), x.shape[:-1] + (3, 3)).copy()
        jac_f_theta = lambda x, u, theta: np.zeros(x.shape[:-1] + (3, 2))
    else:
        f, jac_f_x, jac_f_theta = _rk4_map(
            lorenz_field, lorenz_field_jac_x, lorenz_field_jac_theta,
            n=3, n_theta=2, dt=dt, substeps=substeps)

    def g(x, theta):
        return x[..., :2].copy()

    def jac_g_x(x, theta):
        out = np.zeros(x.shape[:-1] + (2, 3))
        out[..., 0, 0] = 1.0
        out[..., 1, 1] = 1.0
        return out

    def jac_g_theta(x, theta):
        return np.zeros(x.shape[:-1] + (2, 2))

    return ParametricModel(
        n=3, q=0, p=2, n_theta=2,
        f=f, g=g,
        Q=_const_matrix_map(q_diag * np.eye(3)),
        R=_const_matrix_map(r_diag * np.eye(2)),
        jac_f_x=jac_f_x, jac_f_theta=jac_f_theta,
        jac_g_x=jac_g_x, jac_g_theta=jac_g_theta,
        batched=True, name="lorenz",
        options={"dt": dt, "substeps": substeps,
                 "q_diag": q_diag, "r_diag": r_diag},
    )


def oscillator_field(x, theta):
    """Harmonic oscillator xdd = -omega^2 x, state (position, velocity)."""
    return np.stack([x[..., 1], -(theta[0] ** 2) * x[..., 0]], axis=-1)


def oscillator_field_jac_x(x, theta):
    zeros = np.zeros_like(x[..., 0])
    ones = np.ones_like(x[..., 0])
    row1 = np.stack([zeros, ones], axis=-1)
    row2 = np.stack([-(theta[0] ** 2) * ones, zeros], axis=-1)
    return np.stack([row1, row2], axis=-2)


def oscillator_field_jac_theta(x, theta):
    zeros = np.zeros_like(x[..., 0])
    return np.stack([
        np.stack([zeros], axis=-1),
        np.stack([-2.0 * theta[0] * x[..., 0]], axis=-1),
    ], axis=-2)


def make_oscillator(dt: float = 0.1, substeps: int = 1,
                    q_diag: float = 1e-2, r_diag: float = 1e-2) -> ParametricModel:
    """Harmonic oscillator demo model, position measured, theta = omega."""
    f, jac_f_x, jac_f_theta = _rk4_map(
        oscillator_field, oscillator_field_jac_x, oscillator_field_jac_theta,
        n=2, n_theta=1, dt=dt, substeps=substeps)

    def g(x, theta):
        return x[..., :1].copy()

    def jac_g_x(x, theta):
        out = np.zeros(x.shape[:-1] + (1, 2))
        out[..., 0, 0] = 1.0
        return out

    def jac_g_theta(x, theta):
        return np.zeros(x.shape[:-1] + (1, 1))

    return ParametricModel(
        n=2, q=0, p=1, n_theta=1,
        f=f, g=g,
        Q=_const_matrix_map(q_diag * np.eye(2)),
        R=_const_matrix_map(r_diag * np.eye(1)),
        jac_f_x=jac_f_x, jac_f_theta=jac_f_theta,
        jac_g_x=jac_g_x, jac_g_theta=jac_g_theta,
        batched=True, name="oscillator",
        options={"dt": dt, "substeps": substeps},
    )


MODEL_REGISTRY = {
    "lti_scalar": make_lti_scalar,
    "lorenz": make_lorenz,
    "oscillator": make_oscillator,
}


def register_model(name: str, factory: Callable):
    """Register a model factory for lookup by name (CLI use)."""
    MODEL_REGISTRY[name] = factory


def builtin_model(name: str, **options) -> ParametricModel:
    """Construct a registered model by name."""
    try:
        factory = MODEL_REGISTRY[name]
    except KeyError:
        known = ", ".join(sorted(MODEL_REGISTRY))
        raise ModelContractError(f"unknown model '{name}' (known: {known})") from None
    return factory(**options)
