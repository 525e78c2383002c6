"""Deterministic parallel evaluation of window chunks.

Windows are partitioned into a fixed grid of contiguous chunks whose
boundaries depend only on the window count, never on the worker count.
Per-window solver trajectories are independent of which windows share a
batch (see mhe), so every chunk produces identical bytes no matter which
worker runs it, and the parent reassembles chunk results in index order.
Together these make any reduction over windows bit-identical for 1 or any
number of workers.

Workers are forked processes: the parent stashes (model, batch) in a
module global right before creating the pool, and the fork snapshot hands
it to every worker without pickling (models may hold arbitrary callables).
Only small per-call arrays travel through task arguments and results. On
platforms without fork the pool silently degrades to serial evaluation.
"""

from __future__ import annotations

import multiprocessing as mp
from typing import Optional

import numpy as np

from .arrival import ArrivalParams
from .data import WindowBatch
from .mhe import MheOptions, predict_batch
from .sensitivity import prediction_jacobian_batch

DEFAULT_CHUNKS = 16

_CTX = None  # (model, batch) inherited by forked workers


def chunk_ranges(n: int, n_chunks: int):
    """Contiguous [lo, hi) ranges covering n items, at most n_chunks of them."""
    n_chunks = max(1, min(n_chunks, n))
    size = -(-n // n_chunks)
    return [(lo, min(lo + size, n)) for lo in range(0, n, size)]


def _solve_chunk(model, batch, lo, hi, theta, eta, opts, x_init):
    sub = batch.slice(lo, hi)
    _, eps, sol = predict_batch(model, sub, theta, eta, opts=opts,
                                x_init=x_init)
    return eps, sol.X, sol.cost, sol.kkt_norm, sol.iterations, sol.converged


def _jacobian_chunk(model, batch, lo, hi, theta, eta, X, fd_step, hessian):
    sub = batch.slice(lo, hi)
    return prediction_jacobian_batch(model, sub, X, theta, eta,
                                     fd_step=fd_step, hessian=hessian)


def _solve_chunk_remote(args):
    model, batch = _CTX
    return _solve_chunk(model, batch, *args)


def _jacobian_chunk_remote(args):
    model, batch = _CTX
    return _jacobian_chunk(model, batch, *args)


class WindowWorkpool:
    """Chunked (optionally multi-process) solves and Jacobians for one batch."""

    def __init__(self, model, batch: WindowBatch, workers: int = 1,
                 n_chunks: int = DEFAULT_CHUNKS):
        self.model = model
        self.batch = batch
        self.workers = max(1, int(workers))
        self.ranges = chunk_ranges(batch.n_windows, n_chunks)
        self._pool = None
        if self.workers > 1:
            try:
                ctx = mp.get_context("fork")
            except ValueError:
                self.workers = 1
            else:
                global _CTX
                _CTX = (model, batch)
                # fork snapshots _CTX into every worker right here
                self._pool = ctx.Pool(processes=self.workers)

    def close(self):
        if self._pool is not None:
            self._pool.close()
            self._pool.join()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _run(self, local_fn, remote_fn, args_list):
        if self._pool is not None:
            return self._pool.map(remote_fn, args_list, chunksize=1)
        return [local_fn(self.model, self.batch, *a) for a in args_list]

    def solve(self, theta, eta: ArrivalParams, opts: Optional[MheOptions] = None,
              x_init: Optional[np.ndarray] = None):
        """Solve all windows; returns (eps, X, cost, kkt, iterations, converged)."""
        args = [(lo, hi, theta, eta, opts,
                 None if x_init is None else x_init[lo:hi])
                for lo, hi in self.ranges]
        parts = self._run(_solve_chunk, _solve_chunk_remote, args)
        return tuple(np.concatenate([p[i] for p in parts]) for i in range(6))

    def jacobians(self, theta, eta: ArrivalParams, X: np.ndarray,
                  fd_step: float, hessian: str):
        """Prediction Jacobians at solved trajectories X; (J, ok, kkt)."""
        args = [(lo, hi, theta, eta, X[lo:hi], fd_step, hessian)
                for lo, hi in self.ranges]
        parts = self._run(_jacobian_chunk, _jacobian_chunk_remote, args)
        return tuple(np.concatenate([p[i] for p in parts]) for i in range(3))
