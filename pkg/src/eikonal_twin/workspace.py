"""On-disk layout shared by the CLI commands and the objects built from it.

::

    <out>/mesh/      torso.mesh, heart.mesh (with fibres), heart_vertices.txt, anatomy.json
    <out>/leads/     leads_<layout>.txt
    <out>/gt/        target_<layout>.csv, bspm/phi_t<ms>.csv, meta.json
    <out>/gt/hidden/ pmj_gt.csv, tau_gt.csv   (read only when scoring against GT)
    <out>/runs/<cell>/run_<seed>/   RunRecord directories
    <out>/sweep/     N<n>/run_<seed>/, summary.csv
    <out>/report/    metrics.csv, pairs.csv, *.svg
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import __version__
from .anatomy import Anatomy, AnatomyParams, HeartGeometry
from .config import ConfigError, config_hash
from .ecg import ECGTrace, WaveformParams
from .eikonal import EikonalSolver
from .feasible import FeasibleRegion, build_region
from .mesh import GeometryError, VelocityField, read_mesh, write_mesh
from .optimizer import FitProblem, OptimizerConfig
from .torso import LeadSet


class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    @property
    def mesh_dir(self) -> Path:
        return self.root / "mesh"

    @property
    def leads_dir(self) -> Path:
        return self.root / "leads"

    @property
    def gt_dir(self) -> Path:
        return self.root / "gt"

    @property
    def hidden_dir(self) -> Path:
        return self.gt_dir / "hidden"

    @property
    def runs_dir(self) -> Path:
        return self.root / "runs"

    @property
    def sweep_dir(self) -> Path:
        return self.root / "sweep"

    @property
    def report_dir(self) -> Path:
        return self.root / "report"

    def leads_path(self, layout: str) -> Path:
        return self.leads_dir / f"leads_{layout}.txt"

    def target_path(self, layout: str) -> Path:
        return self.gt_dir / f"target_{layout}.csv"

    def require(self, path: Path, hint: str) -> Path:
        if not path.exists():
            raise ConfigError(f"{path} is missing; run `{hint}` first")
        return path


# ----------------------------------------------------------------- anatomy

def anatomy_params(cfg: dict) -> AnatomyParams:
    m = cfg["mesh"]
    try:
        base = AnatomyParams.from_dict(m.get("anatomy") or {})
    except TypeError as exc:
        raise ConfigError(f"bad mesh.anatomy entry: {exc}") from None
    over = {k: m[k] for k in ("h_ventricle", "h_torso") if m.get(k) is not None}
    return base.scaled(float(m["scale"]), **over)


def save_anatomy(ws: Workspace, anatomy: Anatomy, params: AnatomyParams) -> None:
    d = ws.mesh_dir
    d.mkdir(parents=True, exist_ok=True)
    write_mesh(d / "torso.mesh", anatomy.torso)
    write_mesh(d / "heart.mesh", anatomy.heart, VelocityField(anatomy.frames, np.ones(3)))
    np.savetxt(d / "heart_vertices.txt", anatomy.heart_vertices, fmt="%d")
    (d / "anatomy.json").write_text(json.dumps(params.to_dict(), indent=2, sort_keys=True) + "\n")


def load_anatomy(ws: Workspace, with_torso: bool = True) -> Anatomy:
    d = ws.mesh_dir
    ws.require(d / "heart.mesh", "eikonal-twin genmesh")
    params = AnatomyParams.from_dict(json.loads((d / "anatomy.json").read_text()))
    heart, frames = read_mesh(d / "heart.mesh")
    if frames is None:
        raise GeometryError("heart.mesh has no fibre section")
    hv = np.loadtxt(d / "heart_vertices.txt", dtype=np.int64, ndmin=1)
    torso = None
    if with_torso:
        torso, _ = read_mesh(d / "torso.mesh")
        if np.abs(torso.vertices[hv] - heart.vertices).max() > 1e-9:
            raise GeometryError("heart and torso meshes are inconsistent")
    return Anatomy(torso, heart, hv, frames, HeartGeometry(params))


def velocity_from(cfg: dict, anatomy: Anatomy, perturb_pct: float = 0.0) -> VelocityField:
    v = cfg["velocity"]
    vel = anatomy.velocity(v["v_f"], v["v_s"], v["v_n"])
    return vel.scaled(1.0 + perturb_pct / 100.0) if perturb_pct else vel


def region_from(cfg: dict, anatomy: Anatomy, mode: str | None = None) -> FeasibleRegion:
    c = cfg["constraint"]
    rv = c["rv_inferior_mask"]
    if rv == "auto":
        rv = anatomy.geometry.params.rv_inferior_sector_deg if anatomy.geometry.params.rv else None
    return build_region(anatomy.heart, mode or c["mode"], c["d_pmj_mm"], c["basal_cutoff"], rv,
                        anatomy.geometry)


def waveform_from(cfg: dict) -> WaveformParams:
    w = cfg["waveform"]
    return WaveformParams(float(w["v0"]), float(w["v1"]), float(w["eps"]))


def solver_from(cfg: dict, anatomy: Anatomy, perturb_pct: float = 0.0) -> EikonalSolver:
    e = cfg["eikonal"]
    return EikonalSolver(anatomy.heart, velocity_from(cfg, anatomy, perturb_pct), e["method"],
                         int(e["fista_iters"]))


def optimizer_config(cfg: dict, seed: int | None = None, n_pmj: int | None = None,
                     mode: str | None = None) -> OptimizerConfig:
    o = cfg["optimizer"]
    return OptimizerConfig(
        iterations=int(o["iterations"]), lr=float(o["lr"]),
        lr_time=None if o["lr_time"] is None else float(o["lr_time"]),
        beta1=float(o["beta1"]), beta2=float(o["beta2"]), eps=float(o["eps"]),
        seed=int(cfg["seed"] if seed is None else seed),
        n_pmj=int(o["n_pmj"] if n_pmj is None else n_pmj),
        constraint=mode or cfg["constraint"]["mode"],
        tolerance=float(cfg["eikonal"]["tolerance"]),
        early_stop=None if o["early_stop"] is None else float(o["early_stop"]),
        inactive=str(o["inactive"]))


def load_leadset(ws: Workspace, layout: str, n_heart: int) -> LeadSet:
    ls = LeadSet.load(ws.require(ws.leads_path(layout), "eikonal-twin leads"))
    if ls.B is None or ls.B.shape[1] != n_heart:
        raise GeometryError(f"lead set {layout} does not match the heart mesh")
    return ls


def load_target(ws: Workspace, layout: str) -> ECGTrace:
    return ECGTrace.from_csv(ws.require(ws.target_path(layout), "eikonal-twin gt"))


def build_problem(cfg: dict, ws: Workspace, anatomy: Anatomy | None = None,
                  layout: str | None = None, mode: str | None = None,
                  solver: EikonalSolver | None = None) -> FitProblem:
    anatomy = anatomy or load_anatomy(ws, with_torso=False)
    layout = layout or cfg["leads"]["fit_layout"]
    leads = load_leadset(ws, layout, anatomy.heart.n_vertices)
    target = load_target(ws, layout)
    solver = solver or solver_from(cfg, anatomy)
    return FitProblem(solver, region_from(cfg, anatomy, mode), leads, target, waveform_from(cfg),
                      float(cfg["eikonal"]["tolerance"]))


def meta_block(cfg: dict, **extra) -> dict:
    out = {"config_hash": config_hash(cfg), "code_version": __version__, "seed": cfg["seed"]}
    out.update(extra)
    return out
