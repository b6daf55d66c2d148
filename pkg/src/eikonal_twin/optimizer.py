"""Projected ADAM fitting of PMJ sets to a target ECG, plus multi-start drivers."""
from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import multiprocessing as mp
import numpy as np

from .adjoint import AdjointTape, region_of_influence, roi_concentration, write_roi_csv
from .ecg import ECGTrace, WaveformParams, ecg_from_activation, loss, loss_gradient_wrt_tau
from .eikonal import ActivationMap, EikonalSolver, PMJSet, read_activation_csv
from .feasible import MODES, FeasibleRegion
from .metrics import dist_ecg, dist_lat, relative_dist_ecg
from .mesh import GeometryError
from .torso import LeadSet

_LOGGER = logging.getLogger(__name__)


INACTIVE_POLICIES = ("freeze", "adam", "reset")


@dataclass
class OptimizerConfig:
    iterations: int = 400
    lr: float = 0.75
    lr_time: float | None = None   # separate step size for timings; None shares ``lr``
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    n_pmj: int = 300
    constraint: str = "band"
    tolerance: float = 1e-4       # eikonal fixed-point tolerance (ms)
    early_stop: float | None = None  # stop once relative dist_ecg falls below this
    inactive: str = "freeze"      # freeze | adam | reset: handling of deactivated PMJs

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.lr > 0 or (self.lr_time is not None and not self.lr_time > 0):
            raise ValueError("learning rates must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("ADAM betas must lie in [0, 1)")
        if self.n_pmj < 1:
            raise ValueError("n_pmj must be >= 1")
        if self.constraint not in MODES:
            raise ValueError(f"constraint must be one of {MODES}")
        if self.inactive not in INACTIVE_POLICIES:
            raise ValueError(f"inactive must be one of {INACTIVE_POLICIES}")

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    """ADAM on an (N, 4) array of [x, y, z, t] rows with per-entry moments."""

    def __init__(self, shape, lr_pos, lr_time, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.k = 0
        self.lr = np.array([lr_pos, lr_pos, lr_pos, lr_time], dtype=float)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, grad, frozen=None) -> np.ndarray:
        """Return the update to subtract; rows in ``frozen`` get no update."""
        self.k += 1
        b1, b2 = self.beta1, self.beta2
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        mhat = self.m / (1 - b1 ** self.k)
        vhat = self.v / (1 - b2 ** self.k)
        upd = self.lr * mhat / (np.sqrt(vhat) + self.eps)
        if frozen is not None:
            upd[frozen] = 0.0
        return upd


@dataclass
class Evaluation:
    loss: float
    trace: ECGTrace
    amap: ActivationMap
    tape: AdjointTape | None = None
    grad: np.ndarray | None = None   # (N, 4): d loss / d [x, y, z, t]


@dataclass
class FitProblem:
    """Everything the loss depends on besides the PMJ set."""

    solver: EikonalSolver
    region: FeasibleRegion
    leads: LeadSet
    target: ECGTrace
    waveform: WaveformParams = field(default_factory=WaveformParams)
    tolerance: float = 1e-4

    def __post_init__(self):
        if self.leads.B is None:
            raise ValueError("lead set has no lead vectors")
        if self.leads.B.shape[1] != self.solver.mesh.n_vertices:
            raise ValueError("lead vectors and eikonal mesh disagree on the vertex count")
        if self.region.mesh is not self.solver.mesh and \
                self.region.mesh.fingerprint != self.solver.mesh.fingerprint:
            raise ValueError("feasible region lives on a different mesh")
        missing = set(self.leads.names) - set(self.target.leads)
        if missing:
            raise ValueError(f"target lacks leads {sorted(missing)}")
        self.target = self.target.reorder(self.leads.names)

    @property
    def grid(self):
        return self.target.grid

    def simulate(self, pmjs: PMJSet) -> tuple[ActivationMap, ECGTrace]:
        amap = self.solver.solve(pmjs, self.tolerance)
        return amap, ecg_from_activation(amap.tau, self.leads, self.grid, self.waveform)

    def evaluate(self, pmjs: PMJSet, gradient: bool = True) -> Evaluation:
        amap, trace = self.simulate(pmjs)
        L = loss(trace, self.target)
        ev = Evaluation(L, trace, amap)
        if gradient:
            c = loss_gradient_wrt_tau(trace, self.target, amap.tau, self.leads, self.grid,
                                      self.waveform)
            tape = AdjointTape.from_solution(self.solver.mesh, pmjs, amap)
            gt, gx, _ = tape.pullback(c)
            ev.tape = tape
            ev.grad = np.column_stack([gx, gt])
        return ev


@dataclass
class RunRecord:
    seed: int
    config: dict
    loss_history: list
    seconds: list
    pmjs: PMJSet | None = None
    tau: np.ndarray | None = None
    activator: np.ndarray | None = None
    trace: ECGTrace | None = None
    roi: np.ndarray | None = None
    active: np.ndarray | None = None
    best_iteration: int = -1
    skipped: list = field(default_factory=list)
    status: str = "ok"
    meta: dict = field(default_factory=dict)

    @property
    def best_loss(self) -> float:
        return float(self.loss_history[self.best_iteration]) if self.best_iteration >= 0 else np.inf

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    # ---------------------------------------------------------------- files
    def save(self, out_dir, extra_meta: dict | None = None) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        skipped = set(self.skipped)
        with (out / "loss.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss_mV2", "skipped"])
            for k, L in enumerate(self.loss_history):
                w.writerow([k, repr(float(L)), int(k in skipped)])
        if self.pmjs is not None:
            self.pmjs.to_csv(out / "pmj_final.csv")
            write_roi_csv(out / "roi.csv", self.pmjs, self.roi, self.active)
        if self.tau is not None:
            with (out / "tau_final.csv").open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["vertex_id", "tau_ms", "activator"])
                for v, (t, a) in enumerate(zip(self.tau, self.activator)):
                    w.writerow([v, repr(float(t)), int(a)])
        if self.trace is not None:
            self.trace.to_csv(out / "ecg_final.csv")
        meta = dict(self.meta)
        meta.update(extra_meta or {})
        meta.update(seed=self.seed, config=self.config, best_iteration=self.best_iteration,
                    skipped=list(self.skipped), status=self.status,
                    seconds_per_iteration=[float(s) for s in self.seconds])
        (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return out

    @classmethod
    def load(cls, run_dir) -> "RunRecord":
        d = Path(run_dir)
        meta = json.loads((d / "meta.json").read_text())
        hist = np.loadtxt(d / "loss.csv", delimiter=",", skiprows=1, ndmin=2)
        rec = cls(int(meta["seed"]), meta.get("config", {}), list(hist[:, 1]),
                  list(meta.get("seconds_per_iteration", [])),
                  best_iteration=int(meta.get("best_iteration", -1)),
                  skipped=list(meta.get("skipped", [])), status=meta.get("status", "ok"),
                  meta=meta)
        if (d / "pmj_final.csv").exists():
            rec.pmjs = PMJSet.from_csv(d / "pmj_final.csv")
            roi = np.loadtxt(d / "roi.csv", delimiter=",", skiprows=1, ndmin=2)
            rec.roi, rec.active = roi[:, 5].copy(), roi[:, 6].astype(bool)
        if (d / "tau_final.csv").exists():
            rec.tau, rec.activator = read_activation_csv(d / "tau_final.csv")
        if (d / "ecg_final.csv").exists():
            rec.trace = ECGTrace.from_csv(d / "ecg_final.csv")
        return rec


def _front_time(mesh, tau, points) -> np.ndarray:
    """Linear interpolation of ``tau`` at ``points`` (nearest vertex outside the mesh)."""
    tets, bary = mesh.locate_points(points)
    out = np.empty(len(points))
    inside = tets >= 0
    out[inside] = np.einsum("ij,ij->i", tau[mesh.tets[tets[inside]]], bary[inside])
    if (~inside).any():
        d2 = ((mesh.vertices[None] - points[~inside][:, None]) ** 2).sum(-1)
        out[~inside] = tau[np.argmin(d2, axis=1)]
    return out


def _project(region: FeasibleRegion, positions, timings) -> PMJSet:
    pos = region.project_points(positions)
    return PMJSet(pos, np.maximum(timings, 0.0))


def optimize(problem: FitProblem, config: OptimizerConfig, init: PMJSet | None = None,
             callback=None) -> RunRecord:
    """Projected ADAM on PMJ positions and timings; returns the best iterate.

    ``loss_history[k]`` is the loss of iterate ``k`` for k = 0..iterations.
    """
    region = problem.region
    grid = problem.grid
    if init is None:
        init = region.sample_initial(config.n_pmj, (grid.t0, grid.t_end), config.seed)
    pmjs = _project(region, init.positions, init.timings)
    lr_t = config.lr if config.lr_time is None else config.lr_time
    adam = Adam((pmjs.count, 4), config.lr, lr_t, config.beta1, config.beta2, config.eps)
    rec = RunRecord(config.seed, config.to_dict(), [], [])
    best = None
    for k in range(config.iterations + 1):
        t_start = time.perf_counter()
        last = k == config.iterations
        try:
            ev = problem.evaluate(pmjs, gradient=not last)
        except (GeometryError, FloatingPointError, np.linalg.LinAlgError) as exc:
            rec.status = f"failed at iteration {k}: {exc}"
            _LOGGER.error("run seed %d: %s", config.seed, rec.status)
            break
        rec.loss_history.append(ev.loss)
        if best is None or ev.loss < best[1]:
            best = (k, ev.loss, pmjs.copy(), ev)
        if callback is not None:
            callback(k, pmjs, ev)
        if config.early_stop is not None:
            if relative_dist_ecg(ev.trace, problem.target) < config.early_stop:
                rec.seconds.append(time.perf_counter() - t_start)
                break
        if last:
            rec.seconds.append(time.perf_counter() - t_start)
            break
        g = ev.grad
        if not np.all(np.isfinite(g)):
            rec.skipped.append(k)
            _LOGGER.warning("run seed %d: non-finite gradient at iteration %d, step skipped",
                            config.seed, k)
            rec.seconds.append(time.perf_counter() - t_start)
            continue
        off = ~ev.amap.pmj_active
        upd = adam.step(g, off if config.inactive != "adam" else None)
        t_new = pmjs.timings - upd[:, 3]
        if config.inactive == "reset" and off.any():
            # park deactivated PMJs on the arriving front so they can re-enter
            t_new[off] = _front_time(problem.solver.mesh, ev.amap.tau, pmjs.positions[off])
            adam.m[off] = 0.0
        pmjs = _project(region, pmjs.positions - upd[:, :3], t_new)
        rec.seconds.append(time.perf_counter() - t_start)
    if best is not None:
        _finish(problem, rec, best)
    return rec


def _finish(problem: FitProblem, rec: RunRecord, best) -> None:
    k, _, pmjs, ev = best
    if ev.tape is None:
        ev.tape = AdjointTape.from_solution(problem.solver.mesh, pmjs, ev.amap)
    roi, active = region_of_influence(ev.tape, problem.solver.mesh)
    pmjs.active = active
    rec.best_iteration = k
    rec.pmjs = pmjs
    rec.tau = ev.amap.tau
    rec.activator = ev.amap.activator
    rec.trace = ev.trace
    rec.roi = roi
    rec.active = active
    rec.meta.update(
        dist_ecg_mV=dist_ecg(ev.trace, problem.target),
        rel_dist_ecg=relative_dist_ecg(ev.trace, problem.target),
        roi95_count=roi_concentration(roi),
        active_fraction=float(active.mean()),
    )


# ----------------------------------------------------------------- ensembles

_WORKER_PROBLEM: FitProblem | None = None


def _set_worker_problem(problem: FitProblem) -> None:
    global _WORKER_PROBLEM
    _WORKER_PROBLEM = problem


def _run_one(problem: FitProblem, config: OptimizerConfig) -> RunRecord:
    try:
        return optimize(problem, config)
    except Exception as exc:  # one failed run must not sink the ensemble
        _LOGGER.exception("run seed %d failed", config.seed)
        return RunRecord(config.seed, config.to_dict(), [], [], status=f"failed: {exc}")


def _worker(config: OptimizerConfig) -> RunRecord:
    return _run_one(_WORKER_PROBLEM, config)


def ensemble_seeds(base_seed: int, count: int) -> list:
    return [int(base_seed) + i for i in range(count)]


def run_ensemble(problem: FitProblem, config: OptimizerConfig, count: int, seeds=None,
                 jobs: int = 1) -> list:
    """Independent multi-start runs, returned in seed order.

    Each run depends only on its own seed, so the records are identical for
    any ``jobs``.
    """
    seeds = list(seeds) if seeds is not None else ensemble_seeds(config.seed, count)
    if len(seeds) != count:
        raise ValueError("need one seed per run")
    configs = [replace(config, seed=s) for s in seeds]
    if jobs <= 1 or count == 1:
        return [_run_one(problem, c) for c in configs]
    ctx = mp.get_context("fork")
    with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx, initializer=_set_worker_problem,
                             initargs=(problem,)) as pool:
        return list(pool.map(_worker, configs))


def summarize_runs(records, target: ECGTrace, volumes=None, tau_gt=None) -> dict:
    ok = [r for r in records if r.ok and r.trace is not None]
    out = {"runs": len(records), "failed": len(records) - len(ok)}
    if not ok:
        return out
    d = np.array([dist_ecg(r.trace, target) for r in ok])
    rel = np.array([relative_dist_ecg(r.trace, target) for r in ok])
    out.update(dist_ecg_median=float(np.median(d)), rel_dist_ecg_median=float(np.median(rel)),
               active_fraction=float(np.mean([r.active.mean() for r in ok])),
               roi95_count=float(np.mean([roi_concentration(r.roi) for r in ok])),
               roi95_share=float(np.mean([roi_concentration(r.roi) / len(r.roi) for r in ok])))
    if tau_gt is not None and volumes is not None:
        out["dist_lat_median"] = float(np.median([dist_lat(r.tau, tau_gt, volumes) for r in ok]))
    return out


def sweep_pmj_count(problem: FitProblem, config: OptimizerConfig, n_values, repeats: int = 3,
                    jobs: int = 1, volumes=None, tau_gt=None) -> tuple[list, dict]:
    """Fit ``repeats`` runs for every PMJ count; returns (summary rows, records per N)."""
    rows, runs = [], {}
    for n in n_values:
        if n < 1:
            raise ValueError("PMJ counts must be >= 1")
        cfg = replace(config, n_pmj=int(n))
        recs = run_ensemble(problem, cfg, repeats, jobs=jobs)
        runs[int(n)] = recs
        row = {"n_pmj": int(n)}
        row.update(summarize_runs(recs, problem.target, volumes, tau_gt))
        rows.append(row)
        _LOGGER.info("sweep N=%d: %s", n, row)
    return rows, runs
