"""Shared test utilities: a 3-state linear model and window generators."""

import numpy as np

from mhetune.data import Window
from mhetune.models import ParametricModel

# Stable 3-state system with two inputs and two outputs. A enters as
# A0 + theta * A1 so parameter sensitivities have something to bite on.
A0 = np.array([
    [0.70, 0.10, 0.00],
    [-0.20, 0.60, 0.15],
    [0.05, -0.10, 0.50],
])
A1 = np.array([
    [0.10, 0.00, 0.05],
    [0.00, 0.20, 0.00],
    [0.00, 0.05, 0.10],
])
B3 = np.array([
    [1.0, 0.0],
    [0.5, -0.3],
    [0.0, 0.8],
])
C3 = np.array([
    [1.0, 0.0, 0.2],
    [0.0, 1.0, -0.1],
])
Q3 = np.array([
    [0.5, 0.1, 0.0],
    [0.1, 0.4, 0.05],
    [0.0, 0.05, 0.3],
])
R3 = np.array([
    [0.2, 0.02],
    [0.02, 0.25],
])


def lti3_matrix(theta):
    return A0 + float(theta[0]) * A1


def make_lti3() -> ParametricModel:
    return ParametricModel(
        n=3, q=2, p=2, n_theta=1,
        f=lambda x, u, th: lti3_matrix(th) @ x + B3 @ u,
        g=lambda x, th: C3 @ x,
        Q=lambda th: Q3,
        R=lambda th: R3,
        jac_f_x=lambda x, u, th: lti3_matrix(th),
        jac_f_theta=lambda x, u, th: (A1 @ x).reshape(3, 1),
        jac_g_x=lambda x, th: C3,
        jac_g_theta=lambda x, th: np.zeros((2, 1)),
        name="lti3",
    )


def random_window(rng, m, n_u, p, u_scale=1.0, z_scale=1.0):
    """One window of synthetic data (not from any simulation)."""
    u = u_scale * rng.standard_normal((m, n_u))
    z = z_scale * rng.standard_normal((m - 1, p))
    y = z_scale * rng.standard_normal(p)
    return Window(u_win=u, z=z, y_target=y, origin=(0, 0))


def random_scalar_windows(n_windows, m, seed):
    """Scalar-model windows plus matching random (theta, lam, s_bar)."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_windows):
        w = random_window(rng, m, 0, 1)
        theta = rng.uniform(0.3, 1.2)
        lam = np.exp(rng.uniform(-2.0, 2.0))
        s_bar = rng.normal()
        out.append((w, theta, lam, s_bar))
    return out


def random_lti3_windows(n_windows, m, seed):
    """3-state windows plus matching (theta, l_free, s_bar) draws."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_windows):
        w = random_window(rng, m, 2, 2)
        theta = rng.uniform(0.0, 0.6, size=1)
        l_free = rng.uniform(-1.0, 1.0, size=6)
        s_bar = rng.normal(size=3)
        out.append((w, theta, l_free, s_bar))
    return out
