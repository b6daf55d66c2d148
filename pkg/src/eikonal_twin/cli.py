"""Command-line entry point: ``eikonal-twin <command> --config FILE``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .adjoint import StaleTapeError
from .anatomy import build_anatomy, mean_edge_length
from .config import ConfigError, load_config
from .ecg import ECGTrace, TemporalGrid, ecg_from_activation, transmembrane
from .eikonal import read_activation_csv
from .mesh import GeometryError
from .metrics import (dist_bspm, dist_ecg, dist_lat, ensemble_stats, pearson,
                      relative_dist_ecg)
from .optimizer import RunRecord, optimize, run_ensemble, summarize_runs
from .plots import box_plot, line_plot
from .torso import (SolverError, TorsoModel, compute_lead_vectors_many, make_leadset,
                    write_bspm_csv)
from .workspace import (Workspace, anatomy_params, build_problem, load_anatomy, load_leadset,
                        load_target, meta_block, optimizer_config, region_from, save_anatomy,
                        solver_from, waveform_from)

_LOGGER = logging.getLogger("eikonal_twin")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _write_json(path: Path, data: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=str) + "\n")


def _torso_model(cfg, anatomy) -> TorsoModel:
    return TorsoModel(anatomy.torso, anatomy.heart_vertices, anatomy.frames,
                      tol=float(cfg["leads"]["cg_tol"]))


# ------------------------------------------------------------------ genmesh

def cmd_genmesh(args, cfg, ws: Workspace) -> int:
    params = anatomy_params(cfg)
    try:
        params.validate()
    except GeometryError as exc:
        raise ConfigError(f"invalid anatomy parameters: {exc}") from None
    anatomy = build_anatomy(params)
    save_anatomy(ws, anatomy, params)
    info = {
        "torso_vertices": anatomy.torso.n_vertices, "torso_tets": anatomy.torso.n_tets,
        "heart_vertices": anatomy.heart.n_vertices, "heart_tets": anatomy.heart.n_tets,
        "heart_edge_mm": mean_edge_length(anatomy.heart),
        "heart_volume_mm3": anatomy.heart.total_volume,
    }
    _write_json(ws.mesh_dir / "meta.json", meta_block(cfg, **info))
    print(json.dumps(info, sort_keys=True))
    return EXIT_OK


# -------------------------------------------------------------------- leads

def cmd_leads(args, cfg, ws: Workspace) -> int:
    anatomy = load_anatomy(ws)
    model = _torso_model(cfg, anatomy)
    sets = [make_leadset(anatomy.torso, lay) for lay in cfg["leads"]["layouts"]]
    compute_lead_vectors_many(model, sets, cfg["leads"]["method"])
    ws.leads_dir.mkdir(parents=True, exist_ok=True)
    for ls in sets:
        ls.save(ws.leads_path(ls.layout))
        print(f"{ls.layout}: {ls.n_leads} leads from {len(ls.electrode_names)} electrodes")
    _write_json(ws.leads_dir / "meta.json", meta_block(cfg, layouts=cfg["leads"]["layouts"]))
    return EXIT_OK


# ----------------------------------------------------------------------- gt

def cmd_gt(args, cfg, ws: Workspace) -> int:
    t = cfg["target"]
    anatomy = load_anatomy(ws, with_torso=t["bspm_every_ms"] > 0)
    region = region_from(cfg, anatomy, "band")
    hidden = region.sample_initial(int(t["hidden_pmjs"]), t["timing_range_ms"], int(t["seed"]))
    solver = solver_from(cfg, anatomy, float(t["cv_perturbation_pct"]))
    amap = solver.solve(hidden, float(cfg["eikonal"]["tolerance"]), int(cfg["eikonal"]["max_iters"]))
    if not np.all(np.isfinite(amap.tau)):
        raise SolverError("ground-truth activation does not reach every heart vertex")
    if not amap.converged:
        raise SolverError("ground-truth eikonal solve did not converge")
    hidden.active = amap.pmj_active
    grid = TemporalGrid.covering(float(amap.tau.max()) + float(t["guard_ms"]), float(t["dt_ms"]))
    wf = waveform_from(cfg)
    ws.hidden_dir.mkdir(parents=True, exist_ok=True)
    hidden.to_csv(ws.hidden_dir / "pmj_gt.csv")
    amap.to_csv(ws.hidden_dir / "tau_gt.csv")
    rng = np.random.default_rng(np.random.SeedSequence([int(t["seed"]), 1]))
    for layout in cfg["leads"]["layouts"]:
        leads = load_leadset(ws, layout, anatomy.heart.n_vertices)
        trace = ecg_from_activation(amap.tau, leads, grid, wf)
        if t["noise_mV"] > 0:
            trace = ECGTrace(trace.leads, trace.values + rng.normal(0.0, t["noise_mV"], trace.values.shape),
                             grid)
        trace.to_csv(ws.target_path(layout))
    n_snap = 0
    if t["bspm_every_ms"] > 0:
        model = _torso_model(cfg, anatomy)
        stride = max(1, int(round(t["bspm_every_ms"] / grid.dt)))
        bdir = ws.gt_dir / "bspm"
        bdir.mkdir(parents=True, exist_ok=True)
        for k in range(0, grid.n_samples, stride):
            tk = float(grid.times[k])
            phi = model.bspm(transmembrane(amap.tau, tk, wf), method="cg")[:, 0]
            write_bspm_csv(bdir / f"phi_t{tk:08.3f}.csv", phi, model.skin_vertices)
            n_snap += 1
    info = {"grid": {"t0": grid.t0, "dt": grid.dt, "n_steps": grid.n_steps},
            "max_tau_ms": float(amap.tau.max()), "active_hidden": int(amap.pmj_active.sum()),
            "bspm_snapshots": n_snap}
    _write_json(ws.gt_dir / "meta.json", meta_block(cfg, **info))
    print(json.dumps(info, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------- fit

def _cell_name(mode: str, layout: str, n: int) -> str:
    return f"{mode}_{layout}_N{n}"


def _save_run(rec: RunRecord, run_dir: Path, cfg: dict, cell: dict) -> None:
    rec.save(run_dir, meta_block(cfg, run_seed=rec.seed, cell=cell))


def _mode(args, cfg) -> str:
    if getattr(args, "restricted", False):
        return "band"
    if getattr(args, "unrestricted", False):
        return "unrestricted"
    return cfg["constraint"]["mode"]


def cmd_fit(args, cfg, ws: Workspace) -> int:
    mode = _mode(args, cfg)
    layout = args.layout or cfg["leads"]["fit_layout"]
    problem = build_problem(cfg, ws, layout=layout, mode=mode)
    oc = optimizer_config(cfg, mode=mode, n_pmj=args.n)
    init = None
    if args.self_target:
        grid = problem.grid
        init = problem.region.project(problem.region.sample_initial(oc.n_pmj, (grid.t0, grid.t_end),
                                                                    oc.seed))
        _, trace = problem.simulate(init)
        problem.target = trace
    rec = optimize(problem, oc, init)
    cell = {"mode": mode, "layout": layout, "n_pmj": oc.n_pmj, "self_target": bool(args.self_target)}
    name = _cell_name(mode, layout, oc.n_pmj) + ("_self" if args.self_target else "")
    run_dir = ws.runs_dir / f"fit_{name}" / f"run_{oc.seed:04d}"
    _save_run(rec, run_dir, cfg, cell)
    if args.self_target:
        problem.target.to_csv(run_dir / "target_self.csv")
    print(json.dumps({"run": str(run_dir), "status": rec.status, "best_loss": rec.best_loss,
                      "rel_dist_ecg": rec.meta.get("rel_dist_ecg")}, sort_keys=True))
    return EXIT_OK if rec.ok else EXIT_NUMERIC


def cmd_ensemble(args, cfg, ws: Workspace) -> int:
    mode = _mode(args, cfg)
    layout = args.layout or cfg["leads"]["fit_layout"]
    count = int(args.count or cfg["ensemble"]["count"])
    problem = build_problem(cfg, ws, layout=layout, mode=mode)
    oc = optimizer_config(cfg, mode=mode, n_pmj=args.n)
    recs = run_ensemble(problem, oc, count, jobs=args.jobs)
    cell = {"mode": mode, "layout": layout, "n_pmj": oc.n_pmj}
    cdir = ws.runs_dir / _cell_name(mode, layout, oc.n_pmj)
    for rec in recs:
        _save_run(rec, cdir / f"run_{rec.seed:04d}", cfg, cell)
    _write_json(cdir / "cell.json", cell)
    failed = [r.seed for r in recs if not r.ok]
    print(json.dumps({"cell": str(cdir), "runs": count, "failed": failed}, sort_keys=True))
    return EXIT_OK if not failed else EXIT_NUMERIC


def _write_rows(path: Path, rows: list, columns: list) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in columns])


SWEEP_COLUMNS = ["n_pmj", "runs", "failed", "dist_ecg_median", "rel_dist_ecg_median",
                 "active_fraction", "roi95_count", "roi95_share"]


def cmd_sweep(args, cfg, ws: Workspace) -> int:
    n_values = [int(x) for x in args.n_values.split(",")] if args.n_values else \
        [int(x) for x in cfg["sweep"]["n_values"]]
    if any(n < 1 for n in n_values):
        raise ConfigError("--n values must be >= 1")
    repeats = int(args.repeats or cfg["sweep"]["repeats"])
    mode = _mode(args, cfg)
    layout = args.layout or cfg["leads"]["fit_layout"]
    problem = build_problem(cfg, ws, layout=layout, mode=mode)
    rows, failed = [], []
    for n in n_values:
        oc = optimizer_config(cfg, mode=mode, n_pmj=n)
        recs = run_ensemble(problem, oc, repeats, jobs=args.jobs)
        cell = {"mode": mode, "layout": layout, "n_pmj": n}
        for rec in recs:
            _save_run(rec, ws.sweep_dir / f"N{n}" / f"run_{rec.seed:04d}", cfg, cell)
        _write_json(ws.sweep_dir / f"N{n}" / "cell.json", cell)
        row = {"n_pmj": n}
        row.update(summarize_runs(recs, problem.target))
        rows.append(row)
        failed += [(n, r.seed) for r in recs if not r.ok]
    _write_rows(ws.sweep_dir / "summary.csv", rows, SWEEP_COLUMNS)
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    return EXIT_OK if not failed else EXIT_NUMERIC


# ------------------------------------------------------------------- report

REPORT_COLUMNS = ["cell", "constraint", "leads", "n_pmj", "runs", "dist_ecg", "rel_dist_ecg",
                  "dist_lat", "dist_bspm", "tau_sigma_bar", "pearson"]


def _cells(ws: Workspace) -> list:
    out = []
    for base in (ws.runs_dir, ws.sweep_dir):
        if base.exists():
            out += sorted(p for p in base.iterdir() if p.is_dir() and any(p.glob("run_*")))
    return out


def _load_cell(cdir: Path):
    recs = [RunRecord.load(d) for d in sorted(cdir.glob("run_*"))]
    cell_file = cdir / "cell.json"
    if cell_file.exists():
        cell = json.loads(cell_file.read_text())
    else:
        cell = recs[0].meta.get("cell", {})
    return cell, recs


def _read_snapshots(ws: Workspace):
    files = sorted((ws.gt_dir / "bspm").glob("phi_t*.csv"))
    if not files:
        raise ConfigError("no BSPM snapshots under gt/bspm; set target.bspm_every_ms > 0 and rerun gt")
    times = np.array([float(f.stem[5:]) for f in files])
    data = [np.loadtxt(f, delimiter=",", skiprows=1, ndmin=2) for f in files]
    verts = data[0][:, 0].astype(np.int64)
    phi = np.column_stack([d[:, 1] for d in data])
    return times, verts, phi


def cmd_report(args, cfg, ws: Workspace) -> int:
    cells = _cells(ws)
    if not cells:
        raise ConfigError(f"no run directories found under {ws.runs_dir} or {ws.sweep_dir}")
    anatomy = load_anatomy(ws, with_torso=bool(args.bspm))
    vol = anatomy.heart.lumped_volumes
    tau_gt = read_activation_csv(ws.require(ws.hidden_dir / "tau_gt.csv", "eikonal-twin gt"))[0] \
        if args.score_vs_gt else None
    bspm = None
    if args.bspm:
        times, verts, phi_gt = _read_snapshots(ws)
        model = _torso_model(cfg, anatomy)
        if not np.array_equal(verts, model.skin_vertices):
            raise GeometryError("BSPM snapshots do not match the torso skin")
        bspm = (times, model, phi_gt, model.c[model.skin_vertices])
    wf = waveform_from(cfg)
    rows, pairs, lat_groups = [], [], {}
    ws.report_dir.mkdir(parents=True, exist_ok=True)
    for cdir in cells:
        cell, recs = _load_cell(cdir)
        ok = [r for r in recs if r.ok and r.trace is not None]
        name = cdir.name if cdir.parent == ws.runs_dir else f"sweep_{cdir.name}"
        row = {"cell": name, "constraint": cell.get("mode"), "leads": cell.get("layout"),
               "n_pmj": cell.get("n_pmj"), "runs": len(ok)}
        if not ok:
            rows.append(row)
            continue
        if cell.get("self_target"):
            target = ECGTrace.from_csv(sorted(cdir.glob("run_*"))[0] / "target_self.csv")
        else:
            target = load_target(ws, cell.get("layout"))
        target = target.reorder(ok[0].trace.leads)
        row["dist_ecg"] = float(np.mean([dist_ecg(r.trace, target) for r in ok]))
        row["rel_dist_ecg"] = float(np.mean([relative_dist_ecg(r.trace, target) for r in ok]))
        row["pearson"] = float(np.mean([pearson(r.trace, target) for r in ok]))
        if len(ok) >= 2:
            st = ensemble_stats([r.tau for r in ok], vol, [r.trace for r in ok])
            row["tau_sigma_bar"] = st.tau_sigma_bar
            i, j, v = st.max_pair_lat
            pairs.append({"cell": name, "pair": "max_dist_lat", "run_i": ok[i].seed,
                          "run_j": ok[j].seed, "value": v})
            i, j, v = st.max_pair_ecg
            pairs.append({"cell": name, "pair": "max_dist_ecg", "run_i": ok[i].seed,
                          "run_j": ok[j].seed, "value": v})
            pairs.append({"cell": name, "pair": "representative", "run_i": ok[st.representative].seed,
                          "run_j": "", "value": ""})
        if tau_gt is not None:
            d = [dist_lat(r.tau, tau_gt, vol) for r in ok]
            row["dist_lat"] = float(np.mean(d))
            lat_groups[name] = d
        if bspm is not None:
            times, model, phi_gt, area = bspm
            dt = float(times[1] - times[0]) if len(times) > 1 else 1.0
            dphi = []
            for r in ok:
                vm = transmembrane(r.tau, times, wf)
                dphi.append(dist_bspm(model.bspm(vm, method="direct"), phi_gt, area, dt))
            row["dist_bspm"] = float(np.mean(dphi))
        rows.append(row)
        line_plot(ws.report_dir / f"loss_{name}.svg",
                  {f"seed {r.seed}": (np.arange(len(r.loss_history)), r.loss_history) for r in ok},
                  f"loss: {name}", "iteration", "loss (mV^2)", log_y=True)
    _write_rows(ws.report_dir / "metrics.csv", rows, REPORT_COLUMNS)
    _write_rows(ws.report_dir / "pairs.csv", pairs, ["cell", "pair", "run_i", "run_j", "value"])
    if lat_groups:
        box_plot(ws.report_dir / "dist_lat.svg", lat_groups, "dist_LAT to ground truth", "ms")
    sweep_rows = [r for r in rows if r["cell"].startswith("sweep_") and "dist_ecg" in r]
    if sweep_rows:
        sweep_rows.sort(key=lambda r: r["n_pmj"])
        line_plot(ws.report_dir / "sweep.svg",
                  {"mean dist_ECG": ([r["n_pmj"] for r in sweep_rows],
                                     [r["dist_ecg"] for r in sweep_rows])},
                  "PMJ-count sweep", "N", "dist_ECG (mV)")
    for r in rows:
        print(json.dumps(r, sort_keys=True, default=str))
    return EXIT_OK


# --------------------------------------------------------------------- main

COMMANDS = {"genmesh": cmd_genmesh, "gt": cmd_gt, "leads": cmd_leads, "fit": cmd_fit,
            "ensemble": cmd_ensemble, "sweep": cmd_sweep, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eikonal-twin", description=__doc__)
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="YAML experiment config")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--jobs", type=int, default=1, help="worker processes for ensembles")
    ap.add_argument("--out", help="output directory (overrides config 'output')")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    g = ap.add_mutually_exclusive_group()
    g.add_argument("--restricted", action="store_true", help="fit inside the subendocardial band")
    g.add_argument("--unrestricted", action="store_true", help="fit anywhere in the myocardium")
    ap.add_argument("--layout", help="lead layout to fit (default leads.fit_layout)")
    ap.add_argument("--count", type=int, help="ensemble size")
    ap.add_argument("--n", type=int, help="PMJ count (fit/ensemble)")
    ap.add_argument("--n-values", dest="n_values", help="comma-separated PMJ counts for sweep")
    ap.add_argument("--repeats", type=int, help="runs per PMJ count in a sweep")
    ap.add_argument("--self-target", action="store_true",
                    help="fit: use the initial PMJ set's own ECG as the target")
    ap.add_argument("--score-vs-gt", action="store_true",
                    help="report: read the hidden ground truth and score activation maps")
    ap.add_argument("--bspm", action="store_true", help="report: compute BSPM residuals")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        over = {}
        if args.seed is not None:
            over["seed"] = args.seed
        if args.out:
            over["output"] = args.out
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        if args.n is not None and args.n < 1:
            raise ConfigError("--n must be >= 1")
        if args.count is not None and args.count < 1:
            raise ConfigError("--count must be >= 1")
        cfg = load_config(args.config, over)
        if args.layout and args.layout not in cfg["leads"]["layouts"]:
            raise ConfigError(f"--layout {args.layout} is not among leads.layouts")
        ws = Workspace(cfg["output"])
        return COMMANDS[args.command](args, cfg, ws)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, GeometryError, StaleTapeError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
