"""Arrival-cost parameterization for the horizon estimator.

The arrival term ||x0 - s_bar||^2 weighted by the inverse of a covariance
Sigma is parameterized through a lower-triangular factor L with
Sigma^{-1} = L L^T. Diagonal entries of L are stored as logarithms, so
every finite parameter vector maps to a strictly positive-definite weight
and the outer optimizer never needs a feasibility projection for it.

Layout of the free vector ``l_free`` (row-major lower triangle, n = 2):

    (log L00, L10, log L11)

``mode`` selects between a constant arrival cost ("constant") and omitting
the term entirely ("none", the filter-like degenerate case).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

MODES = ("constant", "none")


def l_free_size(n: int) -> int:
    return n * (n + 1) // 2


def n_eta(n: int, mode: str = "constant") -> int:
    """Length of the optimizer vector for the arrival parameters."""
    if mode == "none":
        return 0
    return n + l_free_size(n)


@dataclass
class ArrivalParams:
    """Prior mean s_bar and free factor entries l_free (see module doc)."""

    s_bar: np.ndarray
    l_free: np.ndarray
    mode: str = "constant"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"arrival mode must be one of {MODES}, got {self.mode!r}")
        self.s_bar = np.asarray(self.s_bar, dtype=float)
        self.l_free = np.asarray(self.l_free, dtype=float)
        if self.s_bar.ndim != 1:
            raise ConfigError("s_bar must be a vector")
        n = self.s_bar.size
        if self.l_free.shape != (l_free_size(n),):
            raise ConfigError(
                f"l_free must have shape ({l_free_size(n)},) for n={n}, "
                f"got {self.l_free.shape}")
        if not (np.all(np.isfinite(self.s_bar)) and np.all(np.isfinite(self.l_free))):
            raise ConfigError("arrival parameters contain non-finite values")

    @property
    def n(self) -> int:
        return self.s_bar.size


def eta_to_weight(arrival: ArrivalParams) -> np.ndarray:
    """Lower-triangular L with Sigma^{-1} = L L^T (positive diagonal)."""
    if arrival.mode == "none":
        raise ConfigError("arrival mode 'none' has no weight factor")
    n = arrival.n
    L = np.zeros((n, n))
    k = 0
    for i in range(n):
        for j in range(i + 1):
            if i == j:
                L[i, j] = np.exp(arrival.l_free[k])
            else:
                L[i, j] = arrival.l_free[k]
            k += 1
    return L


def l_free_from_factor(L: np.ndarray) -> np.ndarray:
    """Inverse of eta_to_weight: free entries from a lower factor."""
    L = np.asarray(L, dtype=float)
    n = L.shape[0]
    if L.shape != (n, n):
        raise ConfigError("factor must be square")
    if np.any(np.diag(L) <= 0):
        raise ConfigError("factor diagonal must be strictly positive")
    if np.any(np.abs(np.triu(L, 1)) > 0):
        raise ConfigError("factor must be lower triangular")
    out = np.empty(l_free_size(n))
    k = 0
    for i in range(n):
        for j in range(i + 1):
            out[k] = np.log(L[i, i]) if i == j else L[i, j]
            k += 1
    return out


def pack_eta(s_bar, L) -> np.ndarray:
    """Flatten (s_bar, L) into the optimizer vector, log-encoding diag(L)."""
    s_bar = np.atleast_1d(np.asarray(s_bar, dtype=float))
    L = np.atleast_2d(np.asarray(L, dtype=float))
    if L.shape != (s_bar.size, s_bar.size):
        raise ConfigError(f"factor shape {L.shape} does not match s_bar ({s_bar.size},)")
    return np.concatenate([s_bar, l_free_from_factor(L)])


def flatten_arrival(arrival: ArrivalParams) -> np.ndarray:
    """Optimizer vector of an ArrivalParams (empty in mode 'none')."""
    if arrival.mode == "none":
        return np.zeros(0)
    return np.concatenate([arrival.s_bar, arrival.l_free])


def unpack_eta(v: np.ndarray, n: int = None, mode: str = "constant") -> ArrivalParams:
    """Rebuild ArrivalParams from an optimizer vector of length n_eta(n).

    n may be omitted in mode 'constant'; it is then recovered from the
    vector length (n_eta is strictly increasing in n).
    """
    v = np.asarray(v, dtype=float).reshape(-1)
    if mode == "none":
        if v.size != 0:
            raise ConfigError("mode 'none' takes an empty arrival vector")
        if n is None:
            raise ConfigError("mode 'none' needs an explicit state dimension")
        return ArrivalParams(s_bar=np.zeros(n), l_free=np.zeros(l_free_size(n)),
                             mode="none")
    if n is None:
        # invert size = n + n(n+1)/2 = (n^2 + 3n)/2
        disc = 9.0 + 8.0 * v.size
        n = int(round((np.sqrt(disc) - 3.0) / 2.0))
    if v.shape != (n_eta(n),):
        raise ConfigError(f"arrival vector must have shape ({n_eta(n)},), got {v.shape}")
    return ArrivalParams(s_bar=v[:n], l_free=v[n:], mode=mode)


def default_arrival(n: int, mode: str = "constant",
                    sigma_scale: float = 100.0) -> ArrivalParams:
    """Zero prior mean with Sigma = sigma_scale * I (weakly informative)."""
    if sigma_scale <= 0:
        raise ConfigError("sigma_scale must be positive")
    L = np.eye(n) / np.sqrt(sigma_scale)
    return ArrivalParams(s_bar=np.zeros(n), l_free=l_free_from_factor(L), mode=mode)
