"""ECG forward model: tanh upstroke from activation times and lead projections."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# memory cap for the (vertices x samples) block evaluated at once
_BLOCK_ELEMS = 4_000_000


@dataclass(frozen=True)
class TemporalGrid:
    """Uniform samples t0, t0 + dt, ..., t0 + n_steps * dt (ms)."""

    t0: float = 0.0
    dt: float = 0.5
    n_steps: int = 200

    def __post_init__(self):
        if self.dt <= 0 or self.n_steps < 1:
            raise ValueError("grid needs dt > 0 and at least one step")

    @property
    def t_end(self) -> float:
        return self.t0 + self.n_steps * self.dt

    @property
    def duration(self) -> float:
        return self.n_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    @property
    def n_samples(self) -> int:
        return self.n_steps + 1

    @classmethod
    def covering(cls, t_end: float, dt: float = 0.5, t0: float = 0.0) -> "TemporalGrid":
        """Smallest grid from t0 whose last sample is at or after t_end."""
        n = max(1, int(math.ceil((t_end - t0) / dt - 1e-9)))
        return cls(t0, dt, n)

    def same_as(self, other: "TemporalGrid") -> bool:
        return (self.n_steps == other.n_steps and abs(self.t0 - other.t0) < 1e-9
                and abs(self.dt - other.dt) < 1e-12)


@dataclass(frozen=True)
class WaveformParams:
    v0: float = -85.0   # resting potential (mV)
    v1: float = 30.0    # plateau potential (mV)
    eps: float = 1.0    # upstroke width (ms)

    def __post_init__(self):
        if not self.v1 > self.v0:
            raise ValueError("plateau potential must exceed the resting potential")
        if not self.eps > 0:
            raise ValueError("upstroke width must be positive")


@dataclass
class ECGTrace:
    leads: list
    values: np.ndarray  # (L, n_samples) in mV
    grid: TemporalGrid

    def __post_init__(self):
        self.leads = list(self.leads)
        self.values = np.asarray(self.values, dtype=float).reshape(len(self.leads), -1)
        if self.values.shape[1] != self.grid.n_samples:
            raise ValueError("trace length does not match its temporal grid")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("trace contains non-finite values")

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_ms", *self.leads])
            for k, t in enumerate(self.grid.times):
                w.writerow([repr(float(t)), *(repr(float(v)) for v in self.values[:, k])])

    @classmethod
    def from_csv(cls, path) -> "ECGTrace":
        with Path(path).open() as fh:
            header = next(csv.reader(fh))
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        t = data[:, 0]
        if len(t) < 2:
            raise ValueError(f"{path}: need at least two samples")
        dt = float(np.round(t[1] - t[0], 12))
        grid = TemporalGrid(float(t[0]), dt, len(t) - 1)
        if np.abs(grid.times - t).max() > 1e-6:
            raise ValueError(f"{path}: samples are not uniformly spaced")
        return cls(header[1:], data[:, 1:].T.copy(), grid)

    def reorder(self, leads) -> "ECGTrace":
        idx = [self.leads.index(name) for name in leads]
        return ECGTrace(list(leads), self.values[idx], self.grid)


def _upstroke(tau, t, params: WaveformParams):
    """tanh(2 (t - tau) / eps), broadcasting tau (n, 1) against t (T,)."""
    with np.errstate(invalid="ignore"):
        x = 2.0 * (t - tau) / params.eps
    return np.tanh(np.where(np.isnan(x), -np.inf, x))


def transmembrane(tau, t, params: WaveformParams = WaveformParams()) -> np.ndarray:
    """V_m per vertex at time(s) t; shape (n,) for scalar t else (n, len(t)).

    Unreached vertices (tau = inf) stay at rest.
    """
    tau = np.asarray(tau, dtype=float)
    t_arr = np.asarray(t, dtype=float)
    if t_arr.ndim == 0:
        u = _upstroke(tau, t_arr, params)
    else:
        u = _upstroke(tau[:, None], t_arr[None, :], params)
    return params.v0 + 0.5 * (params.v1 - params.v0) * (u + 1.0)


def _blocks(n_vertices: int, n_samples: int):
    step = max(1, _BLOCK_ELEMS // max(n_vertices, 1))
    for k0 in range(0, n_samples, step):
        yield k0, min(n_samples, k0 + step)


def _lead_matrix(leadset, n_vertices: int) -> tuple[np.ndarray, list]:
    B = getattr(leadset, "B", leadset)
    names = getattr(leadset, "names", None)
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if B.shape[1] != n_vertices:
        raise ValueError(f"lead vectors have {B.shape[1]} entries, mesh has {n_vertices} vertices")
    if names is None:
        names = [f"lead{i}" for i in range(len(B))]
    return B, list(names)


def ecg_from_activation(tau, leadset, grid: TemporalGrid,
                        params: WaveformParams = WaveformParams()) -> ECGTrace:
    """V_l(t_k) = B_l . V_m(t_k).

    ``leadset`` is a LeadSet or a bare (L, n) array of lead vectors.
    """
    tau = np.asarray(tau, dtype=float)
    B, names = _lead_matrix(leadset, len(tau))
    t = grid.times
    out = np.empty((len(B), len(t)))
    for k0, k1 in _blocks(len(tau), len(t)):
        out[:, k0:k1] = B @ transmembrane(tau, t[k0:k1], params)
    return ECGTrace(names, out, grid)


def _check_pair(a: ECGTrace, b: ECGTrace) -> None:
    if not a.grid.same_as(b.grid):
        raise ValueError("traces live on different temporal grids")
    if list(a.leads) != list(b.leads):
        raise ValueError("traces have different lead sets")


def loss(simulated: ECGTrace, target: ECGTrace) -> float:
    """Least-squares mismatch 1/(L |T|) sum_l sum_k (V - V_hat)^2 in mV^2."""
    _check_pair(simulated, target)
    r = simulated.values - target.values
    return float((r * r).sum() / (len(r) * simulated.grid.duration))


def loss_gradient_wrt_tau(simulated: ECGTrace, target: ECGTrace, tau, leadset,
                          grid: TemporalGrid | None = None,
                          params: WaveformParams = WaveformParams()) -> np.ndarray:
    """d loss / d tau_j for every vertex (zero at unreached vertices)."""
    _check_pair(simulated, target)
    grid = grid or simulated.grid
    tau = np.asarray(tau, dtype=float)
    B, _ = _lead_matrix(leadset, len(tau))
    R = simulated.values - target.values
    scale = 2.0 / (len(R) * grid.duration)
    t = grid.times
    g = np.zeros(len(tau))
    amp = (params.v1 - params.v0) / params.eps  # |dV_m/dtau| = amp * sech^2
    for k0, k1 in _blocks(len(tau), len(t)):
        u = _upstroke(tau[:, None], t[None, k0:k1], params)
        dV = -amp * (1.0 - u * u)
        g += ((B.T @ R[:, k0:k1]) * dV).sum(axis=1)
    return scale * g
