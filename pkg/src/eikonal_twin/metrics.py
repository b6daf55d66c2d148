"""Distances between ECGs, BSPMs and activation maps, plus ensemble statistics."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .ecg import ECGTrace


def _trapezoid_weights(n_samples: int, dt: float) -> np.ndarray:
    w = np.full(n_samples, dt)
    w[0] = w[-1] = 0.5 * dt
    return w


def _check_traces(a: ECGTrace, b: ECGTrace) -> None:
    if not a.grid.same_as(b.grid):
        raise ValueError("traces live on different temporal grids")
    if list(a.leads) != list(b.leads):
        raise ValueError("traces have different lead sets")


def dist_ecg(a: ECGTrace, b: ECGTrace) -> float:
    """Space-time RMS difference (mV) over leads, trapezoid rule in time."""
    _check_traces(a, b)
    w = _trapezoid_weights(a.grid.n_samples, a.grid.dt)
    r = a.values - b.values
    return float(np.sqrt(((r * r) @ w).sum() / (len(r) * a.grid.duration)))


def ecg_norm(trace: ECGTrace) -> float:
    """RMS amplitude of a trace, i.e. its distance to the zero trace."""
    return dist_ecg(trace, ECGTrace(trace.leads, np.zeros_like(trace.values), trace.grid))


def relative_dist_ecg(sim: ECGTrace, target: ECGTrace) -> float:
    """dist_ecg(sim, target) as a fraction of the target's RMS amplitude."""
    ref = ecg_norm(target)
    if ref == 0:
        raise ValueError("target trace is identically zero")
    return dist_ecg(sim, target) / ref


def dist_bspm(phi_a, phi_b, area_weights, dt: float) -> float:
    """Space-time RMS difference of two skin potential series (vertices x samples).

    ``area_weights`` are lumped surface areas per skin vertex (summing to
    the skin area).
    """
    phi_a = np.asarray(phi_a, dtype=float)
    phi_b = np.asarray(phi_b, dtype=float)
    if phi_a.shape != phi_b.shape:
        raise ValueError("BSPM series have different shapes")
    area = np.asarray(area_weights, dtype=float)
    if len(area) != phi_a.shape[0]:
        raise ValueError("one area weight per skin vertex expected")
    wt = _trapezoid_weights(phi_a.shape[1], dt)
    r = phi_a - phi_b
    total = area @ (r * r) @ wt
    return float(np.sqrt(total / (area.sum() * wt.sum())))


def dist_lat(tau_a, tau_b, volumes) -> float:
    """Volume-weighted RMS difference (ms) of two activation maps."""
    tau_a = np.asarray(tau_a, dtype=float)
    tau_b = np.asarray(tau_b, dtype=float)
    vol = np.asarray(volumes, dtype=float)
    if tau_a.shape != tau_b.shape or tau_a.shape != vol.shape:
        raise ValueError("activation maps and volumes must share the mesh")
    d = tau_a - tau_b
    return float(np.sqrt((vol * d * d).sum() / vol.sum()))


def pearson(a, b) -> float:
    """Product-moment correlation of all lead samples pooled together."""
    x = np.asarray(getattr(a, "values", a), dtype=float).ravel()
    y = np.asarray(getattr(b, "values", b), dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError("inputs differ in size")
    x = x - x.mean()
    y = y - y.mean()
    sx, sy = np.sqrt(x @ x), np.sqrt(y @ y)
    if sx == 0 or sy == 0:
        raise ValueError("correlation undefined for a zero-variance input")
    return float(np.clip((x @ y) / (sx * sy), -1.0, 1.0))


def pairwise(items, dist) -> np.ndarray:
    """Symmetric matrix of ``dist(items[i], items[j])``."""
    n = len(items)
    D = np.zeros((n, n))
    for i, j in itertools.combinations(range(n), 2):
        D[i, j] = D[j, i] = dist(items[i], items[j])
    return D


def extreme_pairs(D) -> tuple[tuple[int, int, float], tuple[int, int, float]]:
    """(max pair, min pair) over the strict upper triangle as (i, j, value)."""
    D = np.asarray(D)
    iu = np.triu_indices(len(D), 1)
    if len(iu[0]) == 0:
        raise ValueError("need at least two items")
    vals = D[iu]
    a, b = int(np.argmax(vals)), int(np.argmin(vals))
    return ((int(iu[0][a]), int(iu[1][a]), float(vals[a])),
            (int(iu[0][b]), int(iu[1][b]), float(vals[b])))


@dataclass
class EnsembleStats:
    tau_mu: np.ndarray
    tau_sigma: np.ndarray
    tau_sigma_bar: float
    V_mu: np.ndarray
    V_sigma: np.ndarray
    representative: int
    max_pair_lat: tuple
    max_pair_ecg: tuple | None


def ensemble_stats(taus, volumes, traces=None) -> EnsembleStats:
    """Pointwise mean and population deviation of LAT maps (and ECGs).

    ``taus`` is a sequence of per-vertex maps on one mesh; ``traces`` an
    optional matching sequence of ECGTrace.
    """
    T = np.asarray([np.asarray(t, dtype=float) for t in taus])
    if T.ndim != 2 or len(T) < 2:
        raise ValueError("need at least two activation maps on a common mesh")
    vol = np.asarray(volumes, dtype=float)
    if T.shape[1] != len(vol):
        raise ValueError("activation maps and volumes disagree in size")
    mu = T.mean(axis=0)
    sigma = np.sqrt(np.maximum(((T - mu) ** 2).mean(axis=0), 0.0))
    sbar = float((vol * sigma).sum() / vol.sum())
    d_mu = [dist_lat(t, mu, vol) for t in T]
    rep = int(np.argmin(d_mu))
    max_lat = extreme_pairs(pairwise(list(T), lambda a, b: dist_lat(a, b, vol)))[0]
    V_mu = V_sigma = None
    max_ecg = None
    if traces is not None:
        if len(traces) != len(T):
            raise ValueError("one trace per activation map expected")
        for tr in traces[1:]:
            _check_traces(traces[0], tr)
        V = np.asarray([tr.values for tr in traces])
        V_mu = V.mean(axis=0)
        V_sigma = np.sqrt(((V - V_mu) ** 2).mean(axis=0))
        max_ecg = extreme_pairs(pairwise(list(traces), dist_ecg))[0]
    return EnsembleStats(mu, sigma, sbar, V_mu, V_sigma, rep, max_lat, max_ecg)
