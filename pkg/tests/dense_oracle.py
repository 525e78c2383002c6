"""Independent dense reference implementations used only by tests.

Everything here is built from scratch on purpose: windows are assembled
as explicit stacked least-squares systems and solved with dense linear
algebra, with no code shared with the package under test. Linear models
only, which is exactly where a closed-form answer exists.

Window layout: u has m rows, z has m-1 rows (outputs of the interior
states x_1..x_{m-1}), and the decision vector stacks xi = (x_0, .., x_m).
"""

import numpy as np


def stack_linear_window(A, B, C, W_Q, W_R, L, s_bar, u, z):
    """All residuals of one linear-model window written as M @ xi + c.

    Rows: arrival L^T (x_0 - s_bar) when L is not None, then process
    W_Q (x_{k+1} - A x_k - B u_k) for k = 0..m-1, then measurement
    W_R (z_{k-1} - C x_k) for k = 1..m-1.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    W_Q = np.atleast_2d(np.asarray(W_Q, dtype=float))
    W_R = np.atleast_2d(np.asarray(W_R, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    z = np.atleast_2d(np.asarray(z, dtype=float))
    s_bar = np.asarray(s_bar, dtype=float).reshape(-1)
    n = A.shape[0]
    p = C.shape[0]
    m = u.shape[0]
    nxi = (m + 1) * n

    blocks = []
    offsets = []
    if L is not None:
        L = np.atleast_2d(np.asarray(L, dtype=float))
        Ma = np.zeros((n, nxi))
        Ma[:, :n] = L.T
        blocks.append(Ma)
        offsets.append(-L.T @ s_bar)
    for k in range(m):
        Mp = np.zeros((n, nxi))
        Mp[:, (k + 1) * n:(k + 2) * n] = W_Q
        Mp[:, k * n:(k + 1) * n] = -W_Q @ A
        blocks.append(Mp)
        offsets.append(-W_Q @ B @ u[k])
    for k in range(1, m):
        Mm = np.zeros((p, nxi))
        Mm[:, k * n:(k + 1) * n] = -W_R @ C
        blocks.append(Mm)
        offsets.append(W_R @ z[k - 1])
    return np.vstack(blocks), np.concatenate(offsets)


def solve_linear_window(A, B, C, W_Q, W_R, L, s_bar, u, z):
    """Exact minimizer of the window cost, stacked as (m+1)*n entries."""
    M, c = stack_linear_window(A, B, C, W_Q, W_R, L, s_bar, u, z)
    H = M.T @ M
    b = -(M.T @ c)
    return np.linalg.solve(H, b)


def window_cost(A, B, C, W_Q, W_R, L, s_bar, u, z, xi):
    M, c = stack_linear_window(A, B, C, W_Q, W_R, L, s_bar, u, z)
    r = M @ np.asarray(xi, dtype=float).reshape(-1) + c
    return float(r @ r)


def window_gradient(A, B, C, W_Q, W_R, L, s_bar, u, z, xi):
    """Gradient of the window cost at an arbitrary xi."""
    M, c = stack_linear_window(A, B, C, W_Q, W_R, L, s_bar, u, z)
    xi = np.asarray(xi, dtype=float).reshape(-1)
    return 2.0 * M.T @ (M @ xi + c)


def scalar_lti_tridiagonal(theta, lam, s_bar, z, m):
    """Hand-written normal equations for the scalar model x' = theta x.

    Unit process and measurement weights; lam is the arrival weight.
    Cost: lam (x0-s)^2 + sum (x_{k+1}-theta x_k)^2 + sum (z_k - x_k)^2.
    Assembled coefficient by coefficient, independent of the stacked form.
    """
    z = np.asarray(z, dtype=float).reshape(-1)
    assert z.size == m - 1
    H = np.zeros((m + 1, m + 1))
    b = np.zeros(m + 1)
    H[0, 0] = lam + theta ** 2
    b[0] = lam * s_bar
    for k in range(1, m):
        H[k, k] = 2.0 + theta ** 2   # process in + out, one measurement
        b[k] = z[k - 1]
    H[m, m] = 1.0
    for k in range(m):
        H[k, k + 1] = -theta
        H[k + 1, k] = -theta
    return np.linalg.solve(H, b)


def rk4_reference(field, x, theta, dt):
    """Plain textbook RK4 step, written independently of the package."""
    x = np.asarray(x, dtype=float)
    k1 = np.asarray(field(x, theta), dtype=float)
    k2 = np.asarray(field(x + dt * k1 / 2.0, theta), dtype=float)
    k3 = np.asarray(field(x + dt * k2 / 2.0, theta), dtype=float)
    k4 = np.asarray(field(x + dt * k3, theta), dtype=float)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
