"""Ground-truth trajectories and dataset preparation.

Emulators return series aligned so that ``Y[t]`` is the state at time
``t`` and ``U[t]`` is held constant over ``[t, t + 1)``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable

import numpy as np

__all__ = [
    "SimulationDivergence", "CSTRParams", "TwoTankParams", "TrajectoryDataset", "Normalizer",
    "WindowBatch", "rk4_integrate", "cstr_rhs", "simulate_cstr", "twotank_rhs",
    "simulate_twotank", "random_step_input", "make_cstr_dataset", "make_twotank_dataset",
    "make_linear_dataset", "load_aero", "save_dataset", "load_dataset", "split_dataset", "make_windows",
    "split_and_window", "series_checksum", "AERO_INPUTS", "AERO_OUTPUTS", "AERO_DT",
]

AERO_INPUTS = 10
AERO_OUTPUTS = 5
AERO_DT = 0.02


class SimulationDivergence(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"simulation produced non-finite state at step {step}")
        self.step = step


def rk4_integrate(f: Callable, x0, u_series, dt: float, steps: int | None = None,
                  substeps: int = 1, post: Callable | None = None) -> np.ndarray:
    """Classical fixed-step Runge-Kutta integration of ``dx/dt = f(x, u)``.

    ``u_series[k]`` is held over ``[k*dt, (k+1)*dt)``, split into
    ``substeps`` RK4 steps.  ``post`` (e.g. a clip) is applied after every
    substep.  Returns the (steps + 1) x n state series including ``x0``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    u_series = np.asarray(u_series, dtype=float)
    if u_series.ndim == 1:
        u_series = u_series[:, None]
    if steps is None:
        steps = len(u_series)
    if steps > len(u_series):
        raise ValueError(f"{steps} steps requested but only {len(u_series)} inputs")
    h = dt / substeps
    out = np.empty((steps + 1, x.size))
    out[0] = x
    for k in range(steps):
        u = u_series[k]
        for _ in range(substeps):
            k1 = f(x, u)
            k2 = f(x + 0.5 * h * k1, u)
            k3 = f(x + 0.5 * h * k2, u)
            k4 = f(x + h * k3, u)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if post is not None:
                x = post(x)
        if not np.isfinite(x).all():
            raise SimulationDivergence(k + 1)
        out[k + 1] = x
    return out


# ---------------------------------------------------------------------------
# CSTR


@dataclass(frozen=True)
class CSTRParams:
    """Exothermic CSTR constants (minutes, litres, kelvin, mol/L)."""

    k0: float = 7.2e10       # 1/min
    E: float = 72747.5       # J/mol, E/R = 8750 K
    R: float = 8.314         # J/(mol K)
    q: float = 100.0         # L/min
    V: float = 100.0         # L
    H: float = 5.0e4         # J/mol, heat released (-dH)
    rho: float = 1000.0      # g/L
    cp: float = 0.239        # J/(g K)
    UA: float = 5.0e4        # J/(min K)
    Tf: float = 350.0        # K
    Caf: float = 1.0         # mol/L

    def __post_init__(self):
        if any(v < 0 for v in asdict(self).values()) or self.R <= 0 or self.V <= 0:
            raise ValueError("CSTR parameters must be positive")


def cstr_rhs(p: CSTRParams) -> Callable:
    EoR = p.E / p.R
    qV = p.q / p.V
    heat = p.H / (p.rho * p.cp)
    cool = p.UA / (p.V * p.rho * p.cp)

    def f(x, u):
        ca, temp = x[0], x[1]
        r = p.k0 * np.exp(-EoR / temp) * ca
        return np.array([qV * (p.Caf - ca) - r,
                         qV * (p.Tf - temp) + heat * r + cool * (u[0] - temp)])

    return f


def simulate_cstr(params: CSTRParams, u_series, x0=(0.87725, 324.475), dt: float = 0.1,
                  substeps: int = 10) -> np.ndarray:
    """Concentration and reactor temperature under coolant temperature ``u``.

    Returns a T x 2 series with ``Y[0] = x0`` and T = len(u_series).
    """
    u_series = np.asarray(u_series, dtype=float)
    if len(u_series) == 0:
        raise ValueError("empty input series")
    xs = rk4_integrate(cstr_rhs(params), x0, u_series, dt, steps=len(u_series) - 1,
                       substeps=substeps)
    return xs


# ---------------------------------------------------------------------------
# Two Tank


@dataclass(frozen=True)
class TwoTankParams:
    c1: float = 0.08   # inflow coefficient
    c2: float = 0.04   # outflow coefficient

    def __post_init__(self):
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("c1 and c2 must be positive")


def twotank_rhs(p: TwoTankParams) -> Callable:
    def f(x, u):
        h1 = np.sqrt(max(x[0], 0.0))
        h2 = np.sqrt(max(x[1], 0.0))
        valve, pump = u[0], u[1]
        d1 = (1.0 - valve) * p.c1 * pump - p.c2 * h1 if x[0] <= 1.0 else 0.0
        d2 = p.c1 * valve * pump + p.c2 * h1 - p.c2 * h2 if x[1] <= 1.0 else 0.0
        return np.array([d1, d2])

    return f


def _clip_unit(x):
    return np.clip(x, 0.0, 1.0)


def simulate_twotank(params: TwoTankParams, u_series, x0=(0.0, 0.0), dt: float = 1.0,
                     substeps: int = 4) -> np.ndarray:
    """Tank levels under (valve, pump) inputs in [0, 1]; levels stay in [0, 1]."""
    u_series = np.asarray(u_series, dtype=float)
    if len(u_series) == 0:
        raise ValueError("empty input series")
    if u_series.ndim != 2 or u_series.shape[1] != 2:
        raise ValueError(f"two tank inputs must be T x 2, got {u_series.shape}")
    if np.any(u_series < 0) or np.any(u_series > 1):
        raise ValueError("two tank inputs must lie in [0, 1]")
    x0 = np.asarray(x0, dtype=float)
    if np.any(x0 < 0):
        raise ValueError("tank levels must be nonnegative")
    if np.any(x0 > 1):
        raise ValueError("tank levels must not exceed 1")
    return rk4_integrate(twotank_rhs(params), x0, u_series, dt, steps=len(u_series) - 1,
                         substeps=substeps, post=_clip_unit)


# ---------------------------------------------------------------------------
# excitation


def random_step_input(seed: int, T: int, channels: int = 1, hold_range=(20, 100),
                      level_range=(0.0, 1.0), binary: list[bool] | None = None) -> np.ndarray:
    """Piecewise-constant random steps, independent per channel.

    Hold durations are uniform integers in ``hold_range`` (inclusive) and
    levels uniform in ``level_range``, which may be one (lo, hi) pair or one
    per channel.  Channels flagged in ``binary`` switch between lo and hi.
    """
    lo_h, hi_h = int(hold_range[0]), int(hold_range[1])
    if lo_h < 1 or hi_h < lo_h:
        raise ValueError("hold_range must be positive and ordered")
    levels = np.asarray(level_range, dtype=float)
    if levels.ndim == 1:
        levels = np.tile(levels, (channels, 1))
    if levels.shape != (channels, 2):
        raise ValueError(f"level_range must be (lo, hi) or {channels} such pairs")
    binary = binary or [False] * channels
    rng = np.random.default_rng(seed)
    out = np.empty((T, channels))
    for c in range(channels):
        lo, hi = levels[c]
        t = 0
        while t < T:
            hold = int(rng.integers(lo_h, hi_h + 1))
            if binary[c]:
                level = hi if rng.random() < 0.5 else lo
            else:
                level = rng.uniform(lo, hi)
            out[t:t + hold, c] = level
            t += hold
    return out


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Normalizer:
    """Per-channel min-max scaling to [0, 1]."""

    u_min: np.ndarray
    u_max: np.ndarray
    y_min: np.ndarray
    y_max: np.ndarray

    @classmethod
    def fit(cls, U: np.ndarray, Y: np.ndarray) -> "Normalizer":
        return cls(U.min(axis=0), U.max(axis=0), Y.min(axis=0), Y.max(axis=0))

    @staticmethod
    def _scale(a, lo, hi):
        span = np.where(hi > lo, hi - lo, 1.0)
        return (a - lo) / span

    @staticmethod
    def _unscale(a, lo, hi):
        span = np.where(hi > lo, hi - lo, 1.0)
        return a * span + lo

    def apply(self, U, Y):
        return self._scale(U, self.u_min, self.u_max), self._scale(Y, self.y_min, self.y_max)

    def invert_y(self, Y):
        return self._unscale(Y, self.y_min, self.y_max)

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(**{k: np.asarray(v, dtype=float) for k, v in d.items()})


@dataclass
class TrajectoryDataset:
    U: np.ndarray
    Y: np.ndarray
    dt: float = 1.0
    name: str = ""
    normalizer: Normalizer | None = None
    offset: int = 0  # index of U[0] in the source series

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=float)
        self.Y = np.asarray(self.Y, dtype=float)
        if self.U.ndim == 1:
            self.U = self.U[:, None]
        if self.Y.ndim == 1:
            self.Y = self.Y[:, None]
        if len(self.U) != len(self.Y):
            raise ValueError(f"U has {len(self.U)} samples, Y has {len(self.Y)}")

    def __len__(self):
        return len(self.Y)

    @property
    def nu(self) -> int:
        return self.U.shape[1]

    @property
    def ny(self) -> int:
        return self.Y.shape[1]


@dataclass
class WindowBatch:
    """Windows ``(y_hist, u_future, y_future)`` cut from one split.

    ``starts[i]`` is the split index of the first future sample of window i,
    i.e. the sample whose output ``y_future[i, 0]`` is.
    """

    y_histories: np.ndarray   # n x N_p x ny
    u_futures: np.ndarray     # n x N x nu
    y_futures: np.ndarray     # n x N x ny
    starts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    offset: int = 0

    def __len__(self):
        return len(self.y_futures)

    def subset(self, idx) -> "WindowBatch":
        return WindowBatch(self.y_histories[idx], self.u_futures[idx], self.y_futures[idx],
                           self.starts[idx], self.offset)


def make_windows(split: TrajectoryDataset, N: int, n_p: int, stride: int = 1) -> WindowBatch:
    """All windows of an N-step horizon with n_p lookback inside ``split``.

    Window with first prediction index s uses outputs ``Y[s-n_p:s]`` as
    history, inputs ``U[s-1:s-1+N]`` and targets ``Y[s:s+N]``.
    """
    if N < 1 or n_p < 1 or stride < 1:
        raise ValueError("N, n_p and stride must be >= 1")
    T = len(split)
    if N + n_p > T:
        raise ValueError(f"horizon N={N} plus lookback n_p={n_p} exceeds split length {T}")
    starts = np.arange(n_p, T - N + 1, stride)
    hist = np.stack([split.Y[s - n_p:s] for s in starts])
    uf = np.stack([split.U[s - 1:s - 1 + N] for s in starts])
    yf = np.stack([split.Y[s:s + N] for s in starts])
    return WindowBatch(hist, uf, yf, starts, split.offset)


def split_dataset(dataset: TrajectoryDataset, normalize: bool = True):
    """Contiguous thirds (train, dev, test), scaled with train-split statistics."""
    T = len(dataset)
    a, b = T // 3, 2 * T // 3
    parts = [(0, a), (a, b), (b, T)]
    U, Y = dataset.U, dataset.Y
    norm = Normalizer.fit(U[:a], Y[:a]) if normalize else None
    if norm is not None:
        U, Y = norm.apply(U, Y)
    return tuple(
        TrajectoryDataset(U[s:e], Y[s:e], dataset.dt, f"{dataset.name}[{name}]", norm, s)
        for (s, e), name in zip(parts, ("train", "dev", "test")))


def split_and_window(dataset: TrajectoryDataset, N: int, n_p: int, delta: int = 1,
                     normalize: bool = True):
    """Window each contiguous third; returns (train, dev, test) WindowBatches."""
    if len(dataset) < 3 * (N + n_p):
        raise ValueError(f"dataset of {len(dataset)} samples too short for N={N}, n_p={n_p}")
    return tuple(make_windows(s, N, n_p, delta) for s in split_dataset(dataset, normalize))


def make_cstr_dataset(seed: int = 0, T: int = 10_000, dt: float = 0.1,
                      params: CSTRParams = CSTRParams(), level_range=(295.0, 305.0),
                      hold_range=(20, 100)) -> TrajectoryDataset:
    U = random_step_input(seed, T, 1, hold_range, level_range)
    Y = simulate_cstr(params, U, dt=dt)
    return TrajectoryDataset(U, Y, dt, "cstr")


def make_twotank_dataset(seed: int = 0, T: int = 10_000, dt: float = 1.0,
                         params: TwoTankParams = TwoTankParams(), hold_range=(20, 100),
                         binary_valve: bool = True) -> TrajectoryDataset:
    """Random pump levels with a valve that is either fully open or fully closed."""
    U = random_step_input(seed, T, 2, hold_range, [(0.0, 1.0), (0.0, 1.0)],
                          binary=[binary_valve, False])
    Y = simulate_twotank(params, U, dt=dt)
    return TrajectoryDataset(U, Y, dt, "twotank")


def make_linear_dataset(seed: int = 0, T: int = 3000, nx: int = 2, nu: int = 1,
                        spectral_radius: float = 0.9, hold_range=(5, 30)):
    """Data from a random stable linear SSM with invertible output map.

    Returns ``(dataset, (A, B, C))``; A has the requested spectral radius.
    """
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((nx, nx))
    A *= spectral_radius / np.max(np.abs(np.linalg.eigvals(A)))
    B = rng.standard_normal((nx, nu))
    C = np.eye(nx) + 0.3 * rng.standard_normal((nx, nx))
    U = random_step_input(seed + 1, T, nu, hold_range, (-1.0, 1.0))
    x = np.zeros(nx)
    X = np.empty((T, nx))
    for t in range(T):
        X[t] = x
        x = A @ x + B @ U[t]
    return TrajectoryDataset(U, X @ C.T, 1.0, "linear"), (A, B, C)


def load_aero(path) -> TrajectoryDataset:
    """Read the aerodynamic body data: 10 input then 5 output columns per row.

    Delimiters may be commas, semicolons or whitespace; lines starting with
    ``#`` are ignored.
    """
    rows = []
    ncols = AERO_INPUTS + AERO_OUTPUTS
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.replace(",", " ").replace(";", " ").split()
            if len(fields) != ncols:
                raise ValueError(f"{path}:{lineno}: expected {ncols} columns, got {len(fields)}")
            try:
                rows.append([float(v) for v in fields])
            except ValueError as err:
                raise ValueError(f"{path}:{lineno}: {err}") from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    data = np.asarray(rows)
    return TrajectoryDataset(data[:, :AERO_INPUTS], data[:, AERO_INPUTS:], AERO_DT, "aero")


def save_dataset(dataset: TrajectoryDataset, path, header: bool = True) -> None:
    """Write a delimited text file (inputs then outputs) readable by :func:`load_dataset`."""
    path = Path(path)
    data = np.hstack([dataset.U, dataset.Y])
    with open(path, "w") as fh:
        if header:
            fh.write(f"# name={dataset.name} dt={dataset.dt!r} nu={dataset.nu} ny={dataset.ny}\n")
        for row in data:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    if dataset.normalizer is not None:
        path.with_suffix(".norm.json").write_text(json.dumps(dataset.normalizer.to_dict()))


def load_dataset(path) -> TrajectoryDataset:
    """Load a file written by :func:`save_dataset` (the header carries nu/ny/dt)."""
    meta = {}
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    if "=" in tok:
                        k, v = tok.split("=", 1)
                        meta[k] = v
                continue
            rows.append([float(v) for v in line.replace(",", " ").split()])
    if "nu" not in meta:
        if len(rows[0]) == AERO_INPUTS + AERO_OUTPUTS:
            return load_aero(path)
        raise ValueError(f"{path}: missing '# nu=.. ny=..' header")
    data = np.asarray(rows)
    nu, ny = int(meta["nu"]), int(meta["ny"])
    if data.shape[1] != nu + ny:
        raise ValueError(f"{path}: expected {nu + ny} columns, got {data.shape[1]}")
    return TrajectoryDataset(data[:, :nu], data[:, nu:], float(meta.get("dt", 1.0)), meta.get("name", ""))


def series_checksum(a: np.ndarray) -> str:
    """SHA-256 of the little-endian float64 bytes of ``a``."""
    return hashlib.sha256(np.ascontiguousarray(a, dtype="<f8").tobytes()).hexdigest()
