from __future__ import annotations

import numpy as np
import pytest

from eikonal_twin.ecg import TemporalGrid, WaveformParams, ecg_from_activation
from eikonal_twin.eikonal import EikonalSolver, PMJSet
from eikonal_twin.feasible import build_region
from eikonal_twin.optimizer import (Adam, FitProblem, OptimizerConfig, RunRecord, ensemble_seeds,
                                    optimize, run_ensemble, summarize_runs, sweep_pmj_count)


@pytest.fixture(scope="module")
def setup(tiny_anatomy, tiny_leads):
    a = tiny_anatomy
    g = a.geometry
    solver = EikonalSolver(a.heart, a.velocity())
    region = build_region(a.heart, "band", 2.5, 0.1, g.params.rv_inferior_sector_deg, g)
    hidden = region.sample_initial(6, (0.0, 15.0), 999)
    tau = solver.solve(hidden, 1e-4).tau
    grid = TemporalGrid.covering(float(tau.max()) + 10.0, 0.5)
    target = ecg_from_activation(tau, tiny_leads["ecg12"], grid)
    return solver, region, tiny_leads["ecg12"], target


def problem(setup, target=None, waveform=None):
    solver, region, leads, tgt = setup
    kw = {} if waveform is None else {"waveform": waveform}
    return FitProblem(solver, region, leads, tgt if target is None else target, **kw)


# ------------------------------------------------------------ config

def test_config_defaults_and_validation():
    c = OptimizerConfig()
    assert (c.iterations, c.lr, c.beta1, c.beta2, c.eps, c.n_pmj) == (400, 0.75, 0.9, 0.999, 1e-8, 300)
    for bad in ({"iterations": 0}, {"lr": 0.0}, {"n_pmj": 0}, {"constraint": "x"}, {"inactive": "x"}):
        with pytest.raises(ValueError):
            OptimizerConfig(**bad)


def test_adam_first_step_is_signed_lr():
    a = Adam((2, 4), 0.5, 0.25)
    g = np.array([[1.0, -2.0, 3.0, 4.0], [0.0, 1e-3, -5.0, -1.0]])
    u = a.step(g)
    expect = np.sign(g) * np.array([0.5, 0.5, 0.5, 0.25])
    expect[1, 0] = 0.0
    assert np.allclose(u, expect, rtol=1e-4)


def test_adam_frozen_rows_untouched():
    a = Adam((2, 4), 0.5, 0.5)
    u = a.step(np.ones((2, 4)), np.array([False, True]))
    assert np.all(u[1] == 0) and np.all(u[0] != 0)


def test_problem_rejects_mismatched_inputs(setup, tiny_leads):
    solver, region, leads, target = setup
    with pytest.raises(ValueError):
        FitProblem(solver, region, leads, target.reorder(target.leads[:3]))


# ------------------------------------------------------------ optimize

def test_self_target_is_fixed_point(setup):
    solver, region, leads, _ = setup
    init = region.sample_initial(8, (0.0, 10.0), 4)
    tau = solver.solve(init, 1e-4).tau
    grid = TemporalGrid.covering(float(tau.max()) + 10.0, 0.5)
    target = ecg_from_activation(tau, leads, grid)
    rec = optimize(problem(setup, target), OptimizerConfig(iterations=5, n_pmj=8), init)
    assert max(rec.loss_history) < 1e-12
    assert np.abs(rec.pmjs.positions - init.positions).max() < 1e-6
    assert np.abs(rec.pmjs.timings - init.timings).max() < 1e-6


def test_iterates_feasible_and_history_length(setup):
    seen = []
    cfg = OptimizerConfig(iterations=12, n_pmj=15, seed=3)
    p = problem(setup)
    rec = optimize(p, cfg, callback=lambda k, pm, ev: seen.append(pm.copy()))
    assert len(rec.loss_history) == cfg.iterations + 1 == len(seen)
    for pm in seen:
        assert p.region.contains(pm.positions).all()
        assert np.all(pm.timings >= 0)


def test_best_iterate_returned_and_consistent(setup):
    p = problem(setup)
    rec = optimize(p, OptimizerConfig(iterations=15, n_pmj=15, seed=5))
    assert rec.best_loss == min(rec.loss_history)
    assert rec.loss_history[rec.best_iteration] == rec.best_loss
    ev = p.evaluate(rec.pmjs, gradient=False)
    assert ev.loss == rec.best_loss
    assert np.array_equal(ev.trace.values, rec.trace.values)
    assert np.array_equal(ev.amap.tau, rec.tau)
    running = np.minimum.accumulate(rec.loss_history)
    assert np.all(np.diff(running) <= 0)
    assert rec.best_loss < rec.loss_history[0]


def test_optimize_deterministic(setup):
    p = problem(setup)
    cfg = OptimizerConfig(iterations=6, n_pmj=10, seed=11)
    a, b = optimize(p, cfg), optimize(p, cfg)
    assert a.loss_history == b.loss_history
    assert np.array_equal(a.pmjs.positions, b.pmjs.positions)


def test_small_step_single_pmj_descent(setup):
    """Smoothed waveform, one PMJ, lr 0.01: the loss falls at each of the first 20 steps."""
    solver, region, leads, _ = setup
    wf = WaveformParams(eps=4.0)
    truth = region.sample_initial(1, (2.0, 2.0), 21)
    tau = solver.solve(truth, 1e-4).tau
    grid = TemporalGrid.covering(float(tau.max()) + 10.0, 0.5)
    target = ecg_from_activation(tau, leads, grid, wf)
    start = PMJSet(truth.positions, truth.timings + 3.0)
    rec = optimize(problem(setup, target, wf), OptimizerConfig(iterations=20, lr=0.01, n_pmj=1),
                   start)
    assert np.all(np.diff(rec.loss_history) < 0)


@pytest.mark.parametrize("policy", ["adam", "reset"])
def test_inactive_policies_keep_feasibility(setup, policy):
    p = problem(setup)
    seen = []
    optimize(p, OptimizerConfig(iterations=6, n_pmj=20, seed=2, inactive=policy),
             callback=lambda k, pm, ev: seen.append(pm.copy()))
    for pm in seen:
        assert p.region.contains(pm.positions).all() and np.all(pm.timings >= 0)


def test_early_stop(setup):
    solver, region, leads, _ = setup
    init = region.sample_initial(5, (0.0, 10.0), 6)
    tau = solver.solve(init, 1e-4).tau
    target = ecg_from_activation(tau, leads, TemporalGrid.covering(float(tau.max()) + 10.0, 0.5))
    rec = optimize(problem(setup, target), OptimizerConfig(iterations=50, n_pmj=5, early_stop=0.01),
                   init)
    assert len(rec.loss_history) == 1


# ------------------------------------------------------------ records

def test_run_record_roundtrip(tmp_path, setup):
    rec = optimize(problem(setup), OptimizerConfig(iterations=3, n_pmj=6, seed=8))
    out = rec.save(tmp_path / "run", {"note": "x"})
    for f in ("loss.csv", "pmj_final.csv", "tau_final.csv", "ecg_final.csv", "roi.csv", "meta.json"):
        assert (out / f).exists()
    back = RunRecord.load(out)
    assert back.loss_history == rec.loss_history
    assert back.best_iteration == rec.best_iteration and back.seed == 8
    assert np.array_equal(back.pmjs.positions, rec.pmjs.positions)
    assert np.array_equal(back.tau, rec.tau) and np.array_equal(back.trace.values, rec.trace.values)
    assert np.array_equal(back.roi, rec.roi) and np.array_equal(back.active, rec.active)
    assert back.meta["note"] == "x"


def test_roi_report_partitions_volume(setup):
    p = problem(setup)
    rec = optimize(p, OptimizerConfig(iterations=2, n_pmj=12, seed=1))
    assert rec.roi.sum() == pytest.approx(p.solver.mesh.total_volume, rel=1e-9)
    assert np.array_equal(rec.active, rec.roi > 0)


# ------------------------------------------------------------ ensembles

def test_ensemble_seeds():
    assert ensemble_seeds(10, 3) == [10, 11, 12]


def test_ensemble_independent_of_worker_count(setup):
    p = problem(setup)
    cfg = OptimizerConfig(iterations=3, n_pmj=8, seed=40)
    a = run_ensemble(p, cfg, 3, jobs=1)
    b = run_ensemble(p, cfg, 3, jobs=2)
    assert [r.seed for r in a] == [40, 41, 42]
    for x, y in zip(a, b):
        assert x.loss_history == y.loss_history
        assert np.array_equal(x.pmjs.positions, y.pmjs.positions)
    assert a[0].loss_history != a[1].loss_history


def test_ensemble_survives_failed_run(setup, monkeypatch):
    import eikonal_twin.optimizer as opt
    p = problem(setup)
    real = opt.optimize

    def flaky(problem, config, *a, **k):
        if config.seed == 1:
            raise RuntimeError("boom")
        return real(problem, config, *a, **k)

    monkeypatch.setattr(opt, "optimize", flaky)
    recs = run_ensemble(p, OptimizerConfig(iterations=2, n_pmj=4, seed=0), 3)
    assert [r.ok for r in recs] == [True, False, True]
    s = summarize_runs(recs, p.target)
    assert s["runs"] == 3 and s["failed"] == 1


def test_sweep_rows(setup):
    p = problem(setup)
    rows, runs = sweep_pmj_count(p, OptimizerConfig(iterations=2, seed=0), [1, 3], repeats=2)
    assert [r["n_pmj"] for r in rows] == [1, 3]
    assert all(len(v) == 2 for v in runs.values())
    assert all(0 < r["active_fraction"] <= 1 for r in rows)
    with pytest.raises(ValueError):
        sweep_pmj_count(p, OptimizerConfig(iterations=1), [0])
