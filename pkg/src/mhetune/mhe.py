"""Horizon estimator: cost, stationarity residual, and structured solver.

For one window with horizon m the decision variable is the state
trajectory x0..xm. The cost is a sum of squared weighted residuals:

    arrival      L^T (x0 - s_bar)                       (mode "constant")
    process      W_Q (x_{k+1} - f(x_k, u_k; theta)),    k = 0..m-1
    measurement  W_R (z_k - g(x_{k+1}; theta)),         k = 0..m-2

with W_Q, W_R the inverse Cholesky factors of Q(theta), R(theta) and
L L^T = Sigma^{-1}. The last state carries no measurement; its output is
the one-step prediction compared against the held-out target.

The solver is damped Gauss-Newton: the first attempt each iteration is the
undamped step, with Levenberg regularization brought in only after a
factorization failure or a cost increase. Normal equations are
block-tridiagonal and solved by a block Cholesky recursion, so one step
costs O(m n^3).

Everything operates on window batches in lock step (struct-of-arrays,
one vectorized model call per sweep). Each window keeps its own damping
state and activity flag, and its iterate sequence is independent of which
other windows share the batch, which is what makes results independent of
how windows are chunked across workers.
"""

from __future__ import annotations

import functools
import time
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from .arrival import ArrivalParams, eta_to_weight
from .data import Window, WindowBatch
from .errors import ModelContractError, NumericFailure, WeightFactorizationError
from .models import (ParametricModel, batch_dynamics, batch_jac_f_x,
                     batch_jac_g_x, batch_output)

_DAMPING_DECAY = 0.1
_DAMPING_GROWTH = 10.0


@dataclass
class MheOptions:
    tol: float = 1e-8
    max_iter: int = 50
    damping_init: float = 1e-4
    damping_max: float = 1e10


@dataclass
class MheSolution:
    """Estimated trajectory and solver diagnostics for one window."""

    x_hat: np.ndarray      # (m+1, n)
    cost: float
    kkt_norm: float        # infinity norm of the cost gradient wrt x_hat
    iterations: int
    converged: bool


@dataclass
class MheBatchSolution:
    """Per-window arrays of the quantities in MheSolution."""

    X: np.ndarray            # (N, m+1, n)
    cost: np.ndarray         # (N,)
    kkt_norm: np.ndarray     # (N,)
    iterations: np.ndarray   # (N,) int
    converged: np.ndarray    # (N,) bool

    def solution(self, i: int) -> MheSolution:
        return MheSolution(x_hat=self.X[i], cost=float(self.cost[i]),
                           kkt_norm=float(self.kkt_norm[i]),
                           iterations=int(self.iterations[i]),
                           converged=bool(self.converged[i]))


# ---------------------------------------------------------------------------
# Weights


def _chol_lower(M, what, theta):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ModelContractError(f"{what} must be square, got {M.shape}")
    scale = max(1.0, float(np.max(np.abs(M))))
    if np.max(np.abs(M - M.T)) > 1e-12 * scale:
        raise ModelContractError(f"{what} is not symmetric")
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise WeightFactorizationError(
            f"{what} is not positive definite at theta={np.asarray(theta)}"
        ) from None


def factor_weights(model: ParametricModel, theta, eta: ArrivalParams):
    """Inverse Cholesky factors of Q, R plus the arrival factor (or None)."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.shape != (model.n_theta,):
        raise ModelContractError(
            f"theta must have shape ({model.n_theta},), got {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise ModelContractError("theta contains non-finite values")
    W_Q = np.linalg.inv(_chol_lower(model.Q(theta), "Q(theta)", theta))
    W_R = np.linalg.inv(_chol_lower(model.R(theta), "R(theta)", theta))
    if eta.mode == "none":
        return W_Q, W_R, None, np.asarray(eta.s_bar, dtype=float)
    if eta.n != model.n:
        raise ModelContractError(
            f"arrival dimension {eta.n} does not match state dimension {model.n}")
    return W_Q, W_R, eta_to_weight(eta), np.asarray(eta.s_bar, dtype=float)


# ---------------------------------------------------------------------------
# Batched residuals, cost, gradient, normal-equation blocks


def _quiet(fn):
    """Silence floating-point signals: non-finite values are data here
    (a blown-up window reports NaN and fails gracefully, never raises)."""
    @functools.wraps(fn)
    def wrapped(*args, **kwargs):
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            return fn(*args, **kwargs)
    return wrapped


@_quiet
def _eval_cost_batch(model, batch, X, theta, W_Q, W_R, L_sig, s_bar):
    """Cost of every window at trajectories X, shape (N,). NaN on blow-up."""
    N, mp1, n = X.shape
    m = mp1 - 1
    flat = X[:, :m, :].reshape(N * m, n)
    uflat = batch.U.reshape(N * m, model.q)
    F = batch_dynamics(model, flat, uflat, theta).reshape(N, m, n)
    r_proc = np.matmul(X[:, 1:, :] - F, W_Q.T)
    cost = np.sum(r_proc ** 2, axis=(1, 2))
    if m > 1:
        inner = X[:, 1:m, :].reshape(N * (m - 1), n)
        Gv = batch_output(model, inner, theta).reshape(N, m - 1, model.p)
        r_meas = np.matmul(batch.Z - Gv, W_R.T)
        cost = cost + np.sum(r_meas ** 2, axis=(1, 2))
    if L_sig is not None:
        r_arr = np.matmul(X[:, 0, :] - s_bar, L_sig)
        cost = cost + np.sum(r_arr ** 2, axis=1)
    return cost


@_quiet
def _eval_grad_batch(model, batch, X, theta, W_Q, W_R, L_sig, s_bar,
                     with_blocks: bool):
    """Cost, half-gradient, and optionally Gauss-Newton blocks.

    Returns (cost (N,), gbar (N, m+1, n), D (N, m+1, n, n), O (N, m, n, n))
    where the true gradient is 2*gbar and the Gauss-Newton Hessian is
    2*(blocks): D holds diagonal blocks, O[k] the (k+1, k) sub-diagonal.
    """
    N, mp1, n = X.shape
    m = mp1 - 1
    p = model.p

    flat = X[:, :m, :].reshape(N * m, n)
    uflat = batch.U.reshape(N * m, model.q)
    F = batch_dynamics(model, flat, uflat, theta).reshape(N, m, n)
    A = batch_jac_f_x(model, flat, uflat, theta).reshape(N, m, n, n)
    r_proc = np.matmul(X[:, 1:, :] - F, W_Q.T)
    WqA = np.matmul(W_Q, A)

    cost = np.sum(r_proc ** 2, axis=(1, 2))
    gbar = np.zeros((N, mp1, n))
    gbar[:, 1:, :] += np.matmul(r_proc, W_Q)
    gbar[:, :m, :] -= np.matmul(r_proc[:, :, None, :], WqA)[:, :, 0, :]

    if m > 1:
        inner = X[:, 1:m, :].reshape(N * (m - 1), n)
        Gv = batch_output(model, inner, theta).reshape(N, m - 1, p)
        Gx = batch_jac_g_x(model, inner, theta).reshape(N, m - 1, p, n)
        r_meas = np.matmul(batch.Z - Gv, W_R.T)
        WrG = np.matmul(W_R, Gx)
        cost = cost + np.sum(r_meas ** 2, axis=(1, 2))
        gbar[:, 1:m, :] -= np.matmul(r_meas[:, :, None, :], WrG)[:, :, 0, :]
    else:
        WrG = None

    if L_sig is not None:
        r_arr = np.matmul(X[:, 0, :] - s_bar, L_sig)
        cost = cost + np.sum(r_arr ** 2, axis=1)
        gbar[:, 0, :] += np.matmul(r_arr, L_sig.T)

    if not with_blocks:
        return cost, gbar, None, None

    Qi = W_Q.T @ W_Q
    D = np.zeros((N, mp1, n, n))
    D[:, 1:, :, :] = Qi
    D[:, :m, :, :] += np.matmul(np.swapaxes(WqA, -1, -2), WqA)
    if WrG is not None:
        D[:, 1:m, :, :] += np.matmul(np.swapaxes(WrG, -1, -2), WrG)
    if L_sig is not None:
        D[:, 0, :, :] += L_sig @ L_sig.T
    O = -np.matmul(Qi, A)
    return cost, gbar, D, O


# ---------------------------------------------------------------------------
# Batched block-tridiagonal Cholesky
#
# All routines are NaN-tolerant: a window whose system is not positive
# definite gets NaN entries instead of an exception, so one bad window
# never aborts the batch. Failure is detected from the factor diagonal.


def _chol_batch(Ab):
    """Lower Cholesky of a stack (N, n, n); NaN entries where indefinite."""
    N, n, _ = Ab.shape
    Lf = np.zeros_like(Ab)
    with np.errstate(invalid="ignore", divide="ignore"):
        for i in range(n):
            for j in range(i + 1):
                s = Ab[:, i, j] - np.einsum(
                    "nk,nk->n", Lf[:, i, :j], Lf[:, j, :j])
                if i == j:
                    Lf[:, i, i] = np.where(s > 0, np.sqrt(np.abs(s)), np.nan)
                else:
                    Lf[:, i, j] = s / Lf[:, j, j]
    return Lf


def _solve_lower_batch(Lf, B):
    """Solve Lf Y = B for stacks Lf (N, n, n) lower, B (N, n, k)."""
    n = Lf.shape[1]
    Y = np.zeros_like(B)
    for i in range(n):
        acc = B[:, i, :].copy()
        for j in range(i):
            acc -= Lf[:, i, j][:, None] * Y[:, j, :]
        Y[:, i, :] = acc / Lf[:, i, i][:, None]
    return Y


def _solve_upper_batch(Lf, B):
    """Solve Lf^T Y = B (upper-triangular system from a lower factor)."""
    n = Lf.shape[1]
    Y = np.zeros_like(B)
    for i in range(n - 1, -1, -1):
        acc = B[:, i, :].copy()
        for j in range(i + 1, n):
            acc -= Lf[:, j, i][:, None] * Y[:, j, :]
        Y[:, i, :] = acc / Lf[:, i, i][:, None]
    return Y


def _block_factor_batch(D, O):
    """Block Cholesky of the stacked block-tridiagonal systems.

    D: (N, m+1, n, n) diagonal blocks, O: (N, m, n, n) sub-diagonal blocks.
    Returns (C, E, ok) with C the diagonal Cholesky blocks, E the
    sub-diagonal factor blocks, ok a boolean success mask per window.
    """
    N, mp1, n, _ = D.shape
    C = np.zeros_like(D)
    E = np.zeros_like(O)
    C[:, 0] = _chol_batch(D[:, 0])
    for k in range(mp1 - 1):
        # E_k C_k^T = O_k  =>  C_k E_k^T = O_k^T
        Ekt = _solve_lower_batch(C[:, k], np.swapaxes(O[:, k], -1, -2))
        E[:, k] = np.swapaxes(Ekt, -1, -2)
        S = D[:, k + 1] - np.matmul(E[:, k], np.swapaxes(E[:, k], -1, -2))
        C[:, k + 1] = _chol_batch(S)
    diag = np.einsum("nkii->nki", C)
    with np.errstate(invalid="ignore"):
        ok = np.all(np.isfinite(diag), axis=(1, 2)) & np.all(diag > 0, axis=(1, 2))
    return C, E, ok


def _block_solve_batch(C, E, rhs):
    """Solve the factored systems; rhs (N, m+1, n) or (N, m+1, n, k)."""
    single = rhs.ndim == 3
    if single:
        rhs = rhs[..., None]
    N, mp1 = C.shape[0], C.shape[1]
    y = np.zeros_like(rhs)
    y[:, 0] = _solve_lower_batch(C[:, 0], rhs[:, 0])
    for k in range(1, mp1):
        b = rhs[:, k] - np.matmul(E[:, k - 1], y[:, k - 1])
        y[:, k] = _solve_lower_batch(C[:, k], b)
    x = np.zeros_like(rhs)
    x[:, mp1 - 1] = _solve_upper_batch(C[:, mp1 - 1], y[:, mp1 - 1])
    for k in range(mp1 - 2, -1, -1):
        b = y[:, k] - np.matmul(np.swapaxes(E[:, k], -1, -2), x[:, k + 1])
        x[:, k] = _solve_upper_batch(C[:, k], b)
    return x[..., 0] if single else x


def block_tridiag_solve(diag_blocks, offdiag_blocks, rhs) -> np.ndarray:
    """Solve one symmetric positive-definite block-tridiagonal system.

    diag_blocks: (m+1, n, n); offdiag_blocks: (m, n, n) sub-diagonal blocks
    (row k+1, column k); rhs: (m+1, n) or flat ((m+1)*n,). The solution is
    returned in the shape rhs came in.
    """
    D = np.asarray(diag_blocks, dtype=float)[None]
    O = np.asarray(offdiag_blocks, dtype=float)[None]
    rhs = np.asarray(rhs, dtype=float)
    flat = rhs.ndim == 1
    mp1, n = D.shape[1], D.shape[2]
    r = rhs.reshape(1, mp1, n)
    C, E, ok = _block_factor_batch(D, O)
    if not ok[0]:
        raise NumericFailure("block-tridiagonal system is not positive definite")
    x = _block_solve_batch(C, E, r)[0]
    return x.reshape(-1) if flat else x


# ---------------------------------------------------------------------------
# Cost / stationarity on a single window


def _single_batch(window: Window) -> WindowBatch:
    return WindowBatch.from_windows([window])


def _check_x_hat(window, model, x_hat):
    x_hat = np.asarray(x_hat, dtype=float)
    want = (window.m + 1, model.n)
    if x_hat.shape != want:
        raise ModelContractError(f"x_hat must have shape {want}, got {x_hat.shape}")
    return x_hat


def mhe_cost(model: ParametricModel, window: Window, x_hat, theta,
             eta: ArrivalParams) -> float:
    """Arrival + process + measurement cost of a candidate trajectory."""
    x_hat = _check_x_hat(window, model, x_hat)
    W_Q, W_R, L_sig, s_bar = factor_weights(model, theta, eta)
    theta = np.asarray(theta, dtype=float).reshape(-1)
    cost = _eval_cost_batch(model, _single_batch(window), x_hat[None],
                            theta, W_Q, W_R, L_sig, s_bar)
    return float(cost[0])


def mhe_stationarity(model: ParametricModel, window: Window, x_hat, theta,
                     eta: ArrivalParams) -> np.ndarray:
    """Exact gradient of mhe_cost w.r.t. the stacked trajectory, flat."""
    x_hat = _check_x_hat(window, model, x_hat)
    W_Q, W_R, L_sig, s_bar = factor_weights(model, theta, eta)
    theta = np.asarray(theta, dtype=float).reshape(-1)
    _, gbar, _, _ = _eval_grad_batch(model, _single_batch(window), x_hat[None],
                                     theta, W_Q, W_R, L_sig, s_bar,
                                     with_blocks=False)
    return 2.0 * gbar[0].reshape(-1)


# ---------------------------------------------------------------------------
# Solver


@_quiet
def rollout_init(model: ParametricModel, batch: WindowBatch, theta,
                 s_bar) -> np.ndarray:
    """Noise-free rollout from x0 = s_bar for every window."""
    N, m = batch.n_windows, batch.m
    X = np.empty((N, m + 1, model.n))
    X[:, 0, :] = s_bar
    for k in range(m):
        X[:, k + 1, :] = batch_dynamics(model, X[:, k, :], batch.U[:, k, :], theta)
    return X


def _grad_stats(gbar):
    return 2.0 * np.max(np.abs(gbar), axis=(1, 2))


@_quiet
def mhe_solve_batch(model: ParametricModel, batch: WindowBatch, theta,
                    eta: ArrivalParams, opts: Optional[MheOptions] = None,
                    x_init: Optional[np.ndarray] = None) -> MheBatchSolution:
    """Solve every window of the batch in lock step.

    Per-window trajectories depend only on that window's data and starting
    point, never on batch composition, so any partition of a window set
    yields identical results window-by-window.
    """
    opts = opts or MheOptions()
    theta = np.asarray(theta, dtype=float).reshape(-1)
    W_Q, W_R, L_sig, s_bar = factor_weights(model, theta, eta)
    if batch.p != model.p or batch.U.shape[2] != model.q:
        raise ModelContractError(
            f"batch dims (p={batch.p}, q={batch.U.shape[2]}) do not match "
            f"model (p={model.p}, q={model.q})")

    N, m = batch.n_windows, batch.m
    n = model.n
    X = np.array(x_init, dtype=float) if x_init is not None else \
        rollout_init(model, batch, theta, s_bar)
    if X.shape != (N, m + 1, n):
        raise ModelContractError(
            f"x_init must have shape {(N, m + 1, n)}, got {X.shape}")

    cost = np.full(N, np.nan)
    kkt = np.full(N, np.inf)
    iterations = np.zeros(N, dtype=int)
    converged = np.zeros(N, dtype=bool)
    active = np.ones(N, dtype=bool)
    mu = np.zeros(N)

    for sweep in range(opts.max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        sub = batch.subset(idx)
        c, gbar, D, O = _eval_grad_batch(model, sub, X[idx], theta,
                                         W_Q, W_R, L_sig, s_bar,
                                         with_blocks=True)
        cost[idx] = c
        g_norm = _grad_stats(gbar)
        kkt[idx] = g_norm

        done = g_norm <= opts.tol
        if np.any(done):
            conv_idx = idx[done]
            converged[conv_idx] = True
            active[conv_idx] = False
            keep = ~done
            idx, sub = idx[keep], sub.subset(np.flatnonzero(keep))
            c, gbar, D, O = c[keep], gbar[keep], D[keep], O[keep]
        if idx.size == 0 or sweep == opts.max_iter:
            active[idx] = False
            break

        # one damped Gauss-Newton step per still-active window
        diag_idx = np.arange(n)
        pending = np.ones(idx.size, dtype=bool)
        while np.any(pending):
            pidx = np.flatnonzero(pending)   # positions within idx
            gsel = idx[pidx]                 # global window ids
            Dp = D[pidx].copy()
            Dp[:, :, diag_idx, diag_idx] += mu[gsel][:, None, None]
            C, E, ok = _block_factor_batch(Dp, O[pidx])
            accepted = np.zeros(pidx.size, dtype=bool)
            ok_pos = np.flatnonzero(ok)
            if ok_pos.size:
                sel = pidx[ok_pos]
                step = _block_solve_batch(C[ok_pos], E[ok_pos], -gbar[sel])
                Xc = X[idx[sel]] + step
                cc = _eval_cost_batch(model, sub.subset(sel), Xc, theta,
                                      W_Q, W_R, L_sig, s_bar)
                # near a minimiser the true decrease drops below the
                # floating-point resolution of the cost itself; a strict
                # comparison would then reject full Gauss-Newton steps that
                # still shrink the gradient, so ties within roundoff pass
                slack = 4.0 * np.finfo(float).eps * np.maximum(1.0, np.abs(c[sel]))
                with np.errstate(invalid="ignore"):
                    good = np.isfinite(cc) & (cc <= c[sel] + slack)
                acc = sel[good]              # positions within idx
                gacc = idx[acc]
                X[gacc] = Xc[good]
                cost[gacc] = cc[good]
                mu[gacc] = np.where(mu[gacc] * _DAMPING_DECAY < 1e-15,
                                    0.0, mu[gacc] * _DAMPING_DECAY)
                pending[acc] = False
                accepted[ok_pos[good]] = True
            # failed factorization or rejected step: raise damping
            bad = pidx[~accepted]
            gbad = idx[bad]
            mu[gbad] = np.where(mu[gbad] == 0.0, opts.damping_init,
                                mu[gbad] * _DAMPING_GROWTH)
            dead = mu[gbad] > opts.damping_max
            if np.any(dead):
                active[gbad[dead]] = False
                converged[gbad[dead]] = False
                pending[bad[dead]] = False
        iterations[idx] += 1

    return MheBatchSolution(X=X, cost=cost, kkt_norm=kkt,
                            iterations=iterations, converged=converged)


def mhe_solve(model: ParametricModel, window: Window, theta,
              eta: ArrivalParams, opts: Optional[MheOptions] = None,
              x_init: Optional[np.ndarray] = None) -> MheSolution:
    """Solve one window (see mhe_solve_batch)."""
    init = None if x_init is None else np.asarray(x_init, dtype=float)[None]
    out = mhe_solve_batch(model, _single_batch(window), theta, eta,
                          opts=opts, x_init=init)
    return out.solution(0)


@_quiet
def predict_batch(model: ParametricModel, batch: WindowBatch, theta,
                  eta: ArrivalParams, opts: Optional[MheOptions] = None,
                  x_init: Optional[np.ndarray] = None
                  ) -> Tuple[np.ndarray, np.ndarray, MheBatchSolution]:
    """One-step predictions y_hat = g(x_m) and errors eps for every window."""
    sol = mhe_solve_batch(model, batch, theta, eta, opts=opts, x_init=x_init)
    theta = np.asarray(theta, dtype=float).reshape(-1)
    Y_hat = batch_output(model, sol.X[:, -1, :], theta)
    Eps = batch.Y - Y_hat
    return Y_hat, Eps, sol


def predict(model: ParametricModel, window: Window, theta,
            eta: ArrivalParams, opts: Optional[MheOptions] = None,
            x_init: Optional[np.ndarray] = None
            ) -> Tuple[np.ndarray, np.ndarray, MheSolution]:
    """One-step prediction for a single window."""
    init = None if x_init is None else np.asarray(x_init, dtype=float)[None]
    Y_hat, Eps, sol = predict_batch(model, _single_batch(window), theta, eta,
                                    opts=opts, x_init=init)
    return Y_hat[0], Eps[0], sol.solution(0)


def time_solve(model: ParametricModel, window: Window, theta,
               eta: ArrivalParams, opts: Optional[MheOptions] = None) -> float:
    """Wall time of one cold-start solve (complexity measurements)."""
    t0 = time.perf_counter()
    mhe_solve(model, window, theta, eta, opts=opts)
    return time.perf_counter() - t0
