"""Outer optimizer: fit (theta, eta) by minimizing prediction errors.

The objective is the mean squared one-step prediction error over all
windows. Each outer iteration solves every window's estimation problem
(warm-started from the previous iterate), assembles the stacked residual
vector and its Jacobian from the per-window sensitivities, and takes
Levenberg-Marquardt steps with Marquardt diagonal scaling. Box bounds on
theta are enforced by projection; general constraints h_P(theta) <= 0
enter as quadratic penalty residuals sqrt(rho) * max(0, h).

Windows whose inner solve fails to converge, or whose sensitivity system
stays singular, are excluded from that iteration's residual assembly and
counted; more than exclude_limit of them aborts the evaluation.

Determinism: for fixed inputs and options the entire iteration history is
reproducible bit-for-bit and independent of the worker count (see
parallel). The reported objective is recomputed by one cold-start pass at
the final iterate so it equals what evaluate_objective returns at
(theta_hat, eta_hat) exactly.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from typing import List, Optional, Union

import numpy as np

from .arrival import (ArrivalParams, default_arrival, eta_to_weight,
                      l_free_size, n_eta)
from .data import Trajectory, Window, WindowBatch, extract_windows
from .errors import (ConfigError, EvaluationError, NumericFailure,
                     WeightFactorizationError)
from .mhe import MheOptions
from .models import ParametricModel
from .parallel import DEFAULT_CHUNKS, WindowWorkpool
from .sensitivity import (DEFAULT_FD_STEP, DEFAULT_HESSIAN, pack_params,
                          unpack_params)
from .sim import SimConfig, simulate

_LM_DECAY = 0.1
_LM_GROWTH = 10.0


@dataclass
class IdentifyOptions:
    """Knobs for evaluate_objective / identify / mc_expected_objective."""

    m: Optional[int] = None          # horizon, needed when data is trajectories
    stride: int = 1
    max_outer: int = 100
    gtol: float = 1e-6               # infinity norm of the objective gradient
    ftol: float = 1e-10              # relative decrease per accepted step
    lm_lambda0: float = 1e-3
    lm_lambda_max: float = 1e10
    max_step: float = 10.0           # per-coordinate step cap, relative to
                                     # max(1, |coordinate|)
    penalty_rho: float = 1e6
    workers: int = 1
    n_chunks: int = DEFAULT_CHUNKS   # fixed chunk grid; do not tie to workers
    mhe: MheOptions = field(default_factory=MheOptions)
    fd_step: float = DEFAULT_FD_STEP
    hessian: str = DEFAULT_HESSIAN
    warm_start: bool = True
    optimize_theta: bool = True
    optimize_eta: bool = True
    exclude_limit: float = 0.10


@dataclass
class TraceRow:
    iteration: int
    v_n: float
    step_norm: float
    damping: float
    accepted: bool


@dataclass
class WindowDiagnostics:
    eps_norm: np.ndarray   # (N,)
    kkt_norm: np.ndarray   # (N,)
    excluded: np.ndarray   # (N,) bool


@dataclass
class IdentificationResult:
    theta_hat: np.ndarray
    eta_hat: ArrivalParams
    objective: float
    trace: List[TraceRow]
    window_diagnostics: WindowDiagnostics
    converged: bool
    iterations: int
    wall_time: float
    history: List[np.ndarray] = field(default_factory=list)  # packed iterate
                                     # after the start and each accepted step


def as_window_batch(data, m: Optional[int] = None, stride: int = 1
                    ) -> WindowBatch:
    """Coerce trajectories / windows / a batch into a WindowBatch."""
    if isinstance(data, WindowBatch):
        return data
    if isinstance(data, Trajectory):
        data = [data]
    if isinstance(data, (list, tuple)) and data:
        if isinstance(data[0], Window):
            return WindowBatch.from_windows(list(data))
        if isinstance(data[0], Trajectory):
            if m is None:
                raise ConfigError("windowing a trajectory dataset needs m")
            windows = extract_windows(list(data), m, stride)
            if not windows:
                raise ConfigError(
                    f"dataset too short: no windows of horizon m={m} fit")
            return WindowBatch.from_windows(windows)
    raise ConfigError("data must be trajectories, windows, or a WindowBatch")


def _check_exclusions(excluded: np.ndarray, limit: float):
    n_bad = int(np.count_nonzero(excluded))
    if n_bad and n_bad > limit * excluded.size:
        raise EvaluationError(
            f"{n_bad} of {excluded.size} windows failed "
            f"(limit {limit:.0%}); aborting evaluation")


def _included_mean(eps: np.ndarray, included: np.ndarray) -> float:
    return float(np.mean(np.sum(eps[included] ** 2, axis=1)))


def evaluate_objective(data, model: ParametricModel, theta, eta: ArrivalParams,
                       opts: Optional[IdentifyOptions] = None):
    """Mean squared prediction error and the per-window errors (N, p).

    Windows are solved cold-start in fixed index order; the mean runs over
    windows whose solve converged (failures beyond exclude_limit abort).
    """
    opts = opts or IdentifyOptions()
    batch = as_window_batch(data, opts.m, opts.stride)
    with WindowWorkpool(model, batch, opts.workers, opts.n_chunks) as pool:
        eps, _, _, _, _, conv = pool.solve(theta, eta, opts.mhe)
    _check_exclusions(~conv, opts.exclude_limit)
    return _included_mean(eps, conv), eps


# ---------------------------------------------------------------------------
# Constraint handling


# Margin between the largest admissible arrival weight and the weight at
# which the window solver stops being certifiable (see _lfree_bounds).
_WEIGHT_MARGIN = 0.01


def _lfree_bounds(n: int, tol: float):
    """Box on the arrival-factor entries that keeps window solves honest.

    The stationarity residual of a solved window cannot drop below about
    weight * machine epsilon, so once the arrival weight passes tol / eps
    the solver can no longer certify convergence and windows drop out of
    the mean erratically; left unbounded, the outer loop drifts into that
    regime and starts harvesting the dropouts (excluded windows leave the
    objective). The box caps the weight two orders below the collision
    point. Log-diagonal entries are bounded directly, plain off-diagonal
    entries at the exponential of the same cap, so every representable
    factor keeps Sigma^{-1} of certifiable size.
    """
    log_cap = 0.5 * np.log(_WEIGHT_MARGIN * tol / np.finfo(float).eps)
    size = l_free_size(n)
    lo = np.empty(size)
    k = 0
    for i in range(n):
        for j in range(i + 1):
            lo[k] = -(log_cap if i == j else np.exp(log_cap))
            k += 1
    return lo, -lo


def _packed_bounds(model: ParametricModel, n_par: int, n_lfree: int,
                   tol: float):
    lo = np.full(n_par, -np.inf)
    hi = np.full(n_par, np.inf)
    if model.theta_bounds is not None:
        blo, bhi = model.theta_bounds
        lo[:model.n_theta] = np.asarray(blo, dtype=float)
        hi[:model.n_theta] = np.asarray(bhi, dtype=float)
    if n_lfree:
        flo, fhi = _lfree_bounds(model.n, tol)
        lo[n_par - n_lfree:] = flo
        hi[n_par - n_lfree:] = fhi
    return lo, hi


def _penalty_residuals(model, theta, rho, fd_step):
    """sqrt(rho)*max(0, h) and its Jacobian w.r.t. theta (central FD)."""
    h = np.asarray(model.h_P(theta), dtype=float).reshape(-1)
    r = np.sqrt(rho) * np.maximum(0.0, h)
    J = np.zeros((r.size, theta.size))
    for j in range(theta.size):
        step = fd_step * max(1.0, abs(theta[j]))
        tp, tm = theta.copy(), theta.copy()
        tp[j] += step
        tm[j] -= step
        rp = np.sqrt(rho) * np.maximum(0.0, np.asarray(model.h_P(tp)).reshape(-1))
        rm = np.sqrt(rho) * np.maximum(0.0, np.asarray(model.h_P(tm)).reshape(-1))
        J[:, j] = (rp - rm) / (2.0 * step)
    return r, J


def _projected_gradient(grad, p, lo, hi):
    """Zero out gradient components blocked by an active box bound."""
    out = grad.copy()
    at_lo = (p <= lo) & (grad > 0)
    at_hi = (p >= hi) & (grad < 0)
    out[at_lo | at_hi] = 0.0
    return out


def _boxed_step(A, g_half, d_lo, d_hi):
    """Solve A d = -g_half subject to d_lo <= d <= d_hi, coordinatewise.

    Active-set sweep: solve unconstrained, pin every coordinate that lands
    outside its box to the violated edge, re-solve the remaining coordinates
    with the pinned displacements held fixed, repeat. A nearly flat direction
    that is boxed (an arrival weight at its certifiability cap, a step at the
    trust cap) would otherwise dominate the raw step, and rescaling the whole
    vector to fit would crush the informative components to nothing.
    """
    n = g_half.size
    d = np.zeros(n)
    active = np.zeros(n, dtype=bool)
    for _ in range(n):
        f = ~active
        if not f.any():
            break
        rhs = -g_half[f] - A[np.ix_(f, active)] @ d[active]
        d[f] = np.linalg.solve(A[np.ix_(f, f)], rhs)
        viol = ((d < d_lo) | (d > d_hi)) & f
        if not viol.any():
            break
        d[viol] = np.clip(d[viol], d_lo[viol], d_hi[viol])
        active |= viol
    return np.clip(d, d_lo, d_hi)


# ---------------------------------------------------------------------------
# identify


def identify(data, model: ParametricModel, theta0, eta0: Optional[ArrivalParams]
             = None, opts: Optional[IdentifyOptions] = None
             ) -> IdentificationResult:
    """Fit (theta, eta) to the windowed data by Levenberg-Marquardt."""
    t_start = time.perf_counter()
    opts = opts or IdentifyOptions()
    batch = as_window_batch(data, opts.m, opts.stride)
    theta0 = np.asarray(theta0, dtype=float).reshape(-1)
    if theta0.shape != (model.n_theta,):
        raise ConfigError(
            f"theta0 must have shape ({model.n_theta},), got {theta0.shape}")
    if not np.all(np.isfinite(theta0)):
        raise ConfigError("theta0 contains non-finite values")
    if eta0 is None:
        eta0 = default_arrival(model.n)

    n_th = model.n_theta
    n_et = n_eta(model.n, eta0.mode)
    n_par = n_th + n_et
    free = np.zeros(n_par, dtype=bool)
    if opts.optimize_theta:
        free[:n_th] = True
    if opts.optimize_eta:
        free[n_th:] = True
    n_lfree = l_free_size(model.n) if eta0.mode == "constant" else 0
    lo, hi = _packed_bounds(model, n_par, n_lfree, opts.mhe.tol)

    p = np.clip(pack_params(theta0, eta0), lo, hi)
    theta, eta = unpack_params(p, n_th, model.n, eta0.mode)
    has_penalty = model.h_P is not None and opts.penalty_rho > 0

    def merit_of(v_n, th):
        if not has_penalty:
            return v_n
        h = np.asarray(model.h_P(th), dtype=float).reshape(-1)
        return v_n + opts.penalty_rho * float(np.sum(np.maximum(0.0, h) ** 2))

    pool = WindowWorkpool(model, batch, opts.workers, opts.n_chunks)
    try:
        eps, X, _, kkt, _, conv = pool.solve(theta, eta, opts.mhe)
        _check_exclusions(~conv, opts.exclude_limit)
        v_n = _included_mean(eps, conv)
        merit = merit_of(v_n, theta)

        lam = opts.lm_lambda0
        trace = [TraceRow(0, v_n, 0.0, lam, True)]
        history = [p.copy()]
        converged = False
        iterations = 0

        for it in range(1, opts.max_outer + 1):
            iterations = it
            if not np.any(free):
                converged = True
                iterations = 0
                break

            J_all, sens_ok, _ = pool.jacobians(theta, eta, X,
                                               opts.fd_step, opts.hessian)
            included = conv & sens_ok
            _check_exclusions(~included, opts.exclude_limit)
            n_incl = int(np.count_nonzero(included))
            scale = 1.0 / np.sqrt(n_incl)
            r = eps[included].reshape(-1) * scale
            J = J_all[included].reshape(-1, n_par)[:, free] * scale
            if has_penalty:
                r_pen, J_pen_th = _penalty_residuals(model, theta,
                                                     opts.penalty_rho,
                                                     opts.fd_step)
                J_pen = np.zeros((r_pen.size, n_par))
                J_pen[:, :n_th] = J_pen_th
                r = np.concatenate([r, r_pen])
                J = np.vstack([J, J_pen[:, free]])

            g_half = J.T @ r
            grad = 2.0 * _projected_gradient(g_half, p[free], lo[free], hi[free])
            if np.max(np.abs(grad)) <= opts.gtol:
                converged = True
                iterations = it - 1
                break

            JtJ = J.T @ J
            diag = np.diag(JtJ).copy()
            diag = np.maximum(diag, 1e-12 * max(1.0, float(diag.max())))

            # relative trust cap: coordinates that live on a large scale
            # (an arrival mean chasing a weak-weight ridge) may move
            # proportionally, small ones stay throttled
            cap = opts.max_step * np.maximum(1.0, np.abs(p[free]))
            d_lo = np.maximum(lo[free] - p[free], -cap)
            d_hi = np.minimum(hi[free] - p[free], cap)
            accepted = False
            stalled = False
            rel_decrease = np.inf
            while True:
                try:
                    d = _boxed_step(JtJ + lam * np.diag(diag), g_half,
                                    d_lo, d_hi)
                except np.linalg.LinAlgError:
                    d = None
                trial_ok = d is not None and bool(np.all(np.isfinite(d)))
                v_c = np.nan
                step_norm = np.nan
                if trial_ok:
                    predicted = -(2.0 * float(d @ g_half)
                                  + float(d @ (JtJ @ d)))
                    if predicted <= opts.ftol * max(1.0, abs(merit)):
                        # the damped model cannot propose a meaningful
                        # decrease any more, and raising the damping only
                        # shrinks it further: the iterate sits at the
                        # resolution of the window solves
                        stalled = True
                        break
                    p_c = p.copy()
                    p_c[free] += d
                    p_c = np.clip(p_c, lo, hi)
                    step_norm = float(np.linalg.norm(p_c - p))
                    theta_c, eta_c = unpack_params(p_c, n_th, model.n, eta0.mode)
                    try:
                        eps_c, X_c, _, kkt_c, _, conv_c = pool.solve(
                            theta_c, eta_c, opts.mhe,
                            x_init=X if opts.warm_start else None)
                        _check_exclusions(~conv_c, opts.exclude_limit)
                        v_c = _included_mean(eps_c, conv_c)
                        merit_c = merit_of(v_c, theta_c)
                        trial_ok = np.isfinite(merit_c)
                    except (EvaluationError, WeightFactorizationError,
                            NumericFailure):
                        trial_ok = False
                if trial_ok and merit_c < merit:
                    trace.append(TraceRow(it, v_c, step_norm, lam, True))
                    rel_decrease = (merit - merit_c) / max(merit, 1e-300)
                    p, theta, eta = p_c, theta_c, eta_c
                    eps, X, kkt, conv = eps_c, X_c, kkt_c, conv_c
                    v_n, merit = v_c, merit_c
                    history.append(p.copy())
                    lam = max(lam * _LM_DECAY, 1e-12)
                    accepted = True
                    break
                trace.append(TraceRow(it, v_c, step_norm, lam, False))
                lam *= _LM_GROWTH
                if lam > opts.lm_lambda_max:
                    break
            if stalled:
                converged = True
                iterations = it - 1
                break
            if not accepted:
                converged = False
                break
            if rel_decrease <= opts.ftol:
                converged = True
                break

        # cold re-evaluation: the reported objective is exactly what
        # evaluate_objective returns at (theta_hat, eta_hat)
        try:
            eps, _, _, kkt, _, conv = pool.solve(theta, eta, opts.mhe)
            _check_exclusions(~conv, opts.exclude_limit)
        except EvaluationError:
            # an iterate can be fine under warm starts yet sit where cold
            # rollouts fail en masse; back off to the newest iterate the
            # cold protocol accepts so the reported objective keeps meaning
            converged = False
            history.pop()
            while history:
                p = history.pop()
                theta, eta = unpack_params(p, n_th, model.n, eta0.mode)
                try:
                    eps, _, _, kkt, _, conv = pool.solve(theta, eta, opts.mhe)
                    _check_exclusions(~conv, opts.exclude_limit)
                    history.append(p)
                    break
                except EvaluationError:
                    continue
            else:
                raise
        v_n = _included_mean(eps, conv)
    finally:
        pool.close()

    diagnostics = WindowDiagnostics(
        eps_norm=np.linalg.norm(eps, axis=1),
        kkt_norm=kkt,
        excluded=~conv,
    )
    return IdentificationResult(
        theta_hat=theta.copy(), eta_hat=eta, objective=v_n, trace=trace,
        window_diagnostics=diagnostics, converged=converged,
        iterations=iterations, wall_time=time.perf_counter() - t_start,
        history=history)


# ---------------------------------------------------------------------------
# Monte-Carlo expected objective


@dataclass
class McCurve:
    theta_grid: np.ndarray    # (G,)
    v_mean: np.ndarray        # (G,) mean over realizations of min_eta V_N
    v_se: np.ndarray          # (G,) Monte-Carlo standard error of the mean
    v_samples: np.ndarray     # (G, n_mc) per-realization minima
    argmin_theta: float


def mc_expected_objective(model: ParametricModel, theta_star: float,
                          theta_grid, n_mc: int,
                          opts: Optional[IdentifyOptions] = None, *,
                          n_windows: int = 1000, seed: int = 0) -> McCurve:
    """Average over realizations of the eta-minimized V_N, on a theta grid.

    Datasets are generated once per realization at theta_star and reused
    for every grid value (common random numbers), so curve differences
    across the grid are paired and the argmin comparison is sharp.
    """
    if model.name != "lti_scalar":
        raise ConfigError("the expected-objective curve is defined for the "
                          "scalar LTI built-in model")
    opts = opts or IdentifyOptions()
    m = opts.m if opts.m is not None else 3
    theta_grid = np.asarray(theta_grid, dtype=float).reshape(-1)
    if theta_grid.size < 1 or n_mc < 1:
        raise ConfigError("need a nonempty grid and n_mc >= 1")
    frozen = replace(opts, m=m, optimize_theta=False)

    seeds = np.random.SeedSequence(seed).generate_state(n_mc, dtype=np.uint64)
    batches = []
    for j in range(n_mc):
        traj = simulate(SimConfig(system="lti_scalar", theta_star=[theta_star],
                                  length=n_windows + m, seed=int(seeds[j])))
        batches.append(as_window_batch([traj], m=m, stride=opts.stride))

    v_samples = np.empty((theta_grid.size, n_mc))
    for gi, th in enumerate(theta_grid):
        for j in range(n_mc):
            res = identify(batches[j], model, [th], opts=frozen)
            v_samples[gi, j] = res.objective
    v_mean = v_samples.mean(axis=1)
    if n_mc > 1:
        v_se = v_samples.std(axis=1, ddof=1) / np.sqrt(n_mc)
    else:
        v_se = np.zeros(theta_grid.size)
    argmin_theta = float(theta_grid[int(np.argmin(v_mean))])
    return McCurve(theta_grid=theta_grid, v_mean=v_mean, v_se=v_se,
                   v_samples=v_samples, argmin_theta=argmin_theta)


# ---------------------------------------------------------------------------
# Serialization


def result_to_dict(result: IdentificationResult) -> dict:
    eta = result.eta_hat
    eta_doc = {
        "s_bar": eta.s_bar.tolist(),
        "L": eta_to_weight(eta).tolist() if eta.mode == "constant" else None,
        "mode": eta.mode,
    }
    return {
        "theta_hat": result.theta_hat.tolist(),
        "eta_hat": eta_doc,
        "objective": result.objective,
        "converged": bool(result.converged),
        "iterations": int(result.iterations),
        "wall_time": result.wall_time,
    }


def save_result_json(path: str, result: IdentificationResult):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(result_to_dict(result), fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_trace_csv(path: str, trace: List[TraceRow]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("iter,V_N,step_norm,damping,accepted\n")
        for row in trace:
            fh.write(f"{row.iteration},{row.v_n:.17g},{row.step_norm:.17g},"
                     f"{row.damping:.17g},{int(row.accepted)}\n")


def save_eps_csv(path: str, eps: np.ndarray, origins=None):
    """Per-window prediction errors: window index, provenance, components."""
    p = eps.shape[1]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        cols = ["window", "traj", "offset"] + [f"eps_{j}" for j in range(p)]
        fh.write(",".join(cols) + "\n")
        for i in range(eps.shape[0]):
            traj, off = origins[i] if origins else (0, i)
            vals = ",".join(f"{v:.17g}" for v in eps[i])
            fh.write(f"{i},{traj},{off},{vals}\n")
