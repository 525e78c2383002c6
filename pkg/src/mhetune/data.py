"""Trajectories, windows, and their serialization.

A trajectory holds sampled inputs u_k and outputs y_k, with the convention
that u_k is applied during the step from x_k to x_{k+1} (so u_k precedes
y_{k+1}). A window of horizon m starting at offset t carries the m inputs
u_{t..t+m-1}, the m-1 in-window outputs y_{t+1..t+m-1} used by the
estimator, and the output y_{t+m} held out as the one-step prediction
target.

CSV schema (one file per trajectory): header ``t,u_0..u_{q-1},y_0..y_{p-1}``,
one row per sample, values at 17 significant digits. A dataset manifest is
a JSON file listing member CSV paths plus the windowing parameters.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import List, Sequence, Union

import numpy as np

from .errors import ConfigError


@dataclass
class Trajectory:
    """One sampled trajectory. u may have zero columns for autonomous systems."""

    u: np.ndarray
    y: np.ndarray
    t0: int = 0
    dt: float = 1.0

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.y.ndim != 2 or self.y.shape[1] < 1:
            raise ConfigError("y must be (T_len, p) with p >= 1")
        if self.u.ndim != 2:
            raise ConfigError("u must be (T_len, q); use q=0 columns when absent")
        if self.u.shape[0] != self.y.shape[0]:
            raise ConfigError(
                f"u and y lengths differ: {self.u.shape[0]} vs {self.y.shape[0]}")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.y))):
            raise ConfigError("trajectory contains non-finite values")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")

    @property
    def length(self) -> int:
        return self.y.shape[0]

    @property
    def q(self) -> int:
        return self.u.shape[1]

    @property
    def p(self) -> int:
        return self.y.shape[1]


@dataclass
class Window:
    """Horizon-m slice: inputs, in-window outputs, and prediction target."""

    u_win: np.ndarray      # (m, q) inputs u_{t..t+m-1}
    z: np.ndarray          # (m-1, p) outputs y_{t+1..t+m-1}
    y_target: np.ndarray   # (p,) the held-out output y_{t+m}
    origin: tuple = (0, 0)  # (trajectory index, offset t)

    def __post_init__(self):
        self.u_win = np.asarray(self.u_win, dtype=float)
        self.z = np.asarray(self.z, dtype=float)
        self.y_target = np.asarray(self.y_target, dtype=float)
        if self.z.shape[0] != self.u_win.shape[0] - 1:
            raise ConfigError("window must hold exactly m-1 in-window outputs")

    @property
    def m(self) -> int:
        return self.u_win.shape[0]


@dataclass
class WindowBatch:
    """Struct-of-arrays view of same-horizon windows for vectorized solves."""

    U: np.ndarray        # (N, m, q)
    Z: np.ndarray        # (N, m-1, p)
    Y: np.ndarray        # (N, p) prediction targets
    origins: list = field(default_factory=list)

    @classmethod
    def from_windows(cls, windows: Sequence[Window]) -> "WindowBatch":
        if not windows:
            raise ConfigError("cannot batch an empty window list")
        m = windows[0].m
        if any(w.m != m for w in windows):
            raise ConfigError("all windows in a batch must share the horizon m")
        return cls(
            U=np.stack([w.u_win for w in windows]),
            Z=np.stack([w.z for w in windows]),
            Y=np.stack([w.y_target for w in windows]),
            origins=[w.origin for w in windows],
        )

    @property
    def n_windows(self) -> int:
        return self.U.shape[0]

    @property
    def m(self) -> int:
        return self.U.shape[1]

    @property
    def p(self) -> int:
        return self.Y.shape[1]

    def subset(self, idx) -> "WindowBatch":
        idx = np.asarray(idx)
        return WindowBatch(U=self.U[idx], Z=self.Z[idx], Y=self.Y[idx],
                           origins=[self.origins[i] for i in idx])

    def slice(self, lo: int, hi: int) -> "WindowBatch":
        """Contiguous sub-batch sharing memory with the parent arrays."""
        return WindowBatch(U=self.U[lo:hi], Z=self.Z[lo:hi], Y=self.Y[lo:hi],
                           origins=self.origins[lo:hi])

    def window(self, i: int) -> Window:
        return Window(u_win=self.U[i], z=self.Z[i], y_target=self.Y[i],
                      origin=self.origins[i])


def extract_windows(trajs: Union[Trajectory, List[Trajectory]], m: int,
                    stride: int = 1) -> List[Window]:
    """Slice windows at offsets 0, stride, 2*stride, ... per trajectory.

    A single trajectory of length T_len yields a window at every offset t
    with t + m <= T_len - 1, i.e. T_len - m windows at stride 1; windows
    never span trajectory boundaries. Deterministic order: trajectory
    order, then offset order.
    """
    if isinstance(trajs, Trajectory):
        trajs = [trajs]
    if m < 2:
        raise ConfigError("horizon m must be >= 2 (estimation data plus target)")
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    out = []
    for ti, traj in enumerate(trajs):
        last = traj.length - 1 - m
        for t in range(0, last + 1, stride):
            out.append(Window(
                u_win=traj.u[t:t + m],
                z=traj.y[t + 1:t + m],
                y_target=traj.y[t + m],
                origin=(ti, t),
            ))
    return out


# ---------------------------------------------------------------------------
# CSV serialization


def _format_value(v: float) -> str:
    return f"{v:.17g}"


def save_trajectory_csv(traj: Trajectory, path: str):
    """Write one trajectory in the t,u_*,y_* schema at 17 significant digits."""
    header = ["t"] + [f"u_{j}" for j in range(traj.q)] + \
        [f"y_{j}" for j in range(traj.p)]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for k in range(traj.length):
            row = [_format_value(float(traj.t0 + k))]
            row += [_format_value(v) for v in traj.u[k]]
            row += [_format_value(v) for v in traj.y[k]]
            fh.write(",".join(row) + "\n")


def _parse_header(cols: List[str], path: str):
    if not cols or cols[0] != "t":
        raise ConfigError(f"{path}:1: header must start with 't', got {cols[:1]}")
    q = 0
    i = 1
    while i < len(cols) and cols[i] == f"u_{q}":
        q += 1
        i += 1
    p = 0
    while i < len(cols) and cols[i] == f"y_{p}":
        p += 1
        i += 1
    if i != len(cols) or p < 1:
        raise ConfigError(
            f"{path}:1: header must be t,u_0..u_{{q-1}},y_0..y_{{p-1}}, "
            f"got {','.join(cols)}")
    return q, p


def load_trajectory_csv(path: str, dt: float = 1.0) -> Trajectory:
    """Read a trajectory CSV; parse failures report the offending line."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ConfigError(f"{path}: empty file")
    q, p = _parse_header(lines[0].split(","), path)
    n_cols = 1 + q + p
    t_vals, u_rows, y_rows = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != n_cols:
            raise ConfigError(
                f"{path}:{lineno}: expected {n_cols} fields, got {len(parts)}")
        try:
            vals = [float(s) for s in parts]
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
        if not all(np.isfinite(v) for v in vals):
            raise ConfigError(f"{path}:{lineno}: non-finite value")
        t_vals.append(vals[0])
        u_rows.append(vals[1:1 + q])
        y_rows.append(vals[1 + q:])
    if not t_vals:
        raise ConfigError(f"{path}: no data rows")
    t0 = int(round(t_vals[0]))
    for k, tv in enumerate(t_vals):
        if abs(tv - (t0 + k)) > 1e-9:
            raise ConfigError(
                f"{path}:{k + 2}: sample index {tv} breaks the consecutive "
                f"numbering starting at {t0}")
    u = np.asarray(u_rows, dtype=float).reshape(len(t_vals), q)
    y = np.asarray(y_rows, dtype=float).reshape(len(t_vals), p)
    return Trajectory(u=u, y=y, t0=t0, dt=dt)


# ---------------------------------------------------------------------------
# Dataset manifest


def save_manifest(path: str, csv_files: List[str], m: int = None,
                  stride: int = 1, dt: float = 1.0, metadata: dict = None):
    """Write a dataset manifest; csv_files are stored relative to it."""
    doc = {
        "trajectories": list(csv_files),
        "m": m,
        "stride": stride,
        "dt": dt,
        "metadata": metadata or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict) or "trajectories" not in doc:
        raise ConfigError(f"{path}: manifest must be an object with 'trajectories'")
    return doc


def load_dataset(manifest_path: str) -> List[Trajectory]:
    """Load every trajectory listed in a manifest (paths relative to it)."""
    doc = load_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    dt = float(doc.get("dt") or 1.0)
    out = []
    for rel in doc["trajectories"]:
        out.append(load_trajectory_csv(os.path.join(base, rel), dt=dt))
    return out
