"""Experiment configuration: YAML file with sections mesh, leads, constraint,
optimizer, target (plus waveform, velocity, ensemble, sweep)."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

from .torso import VEST_GRIDS


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""


DEFAULTS = {
    "seed": None,
    "output": "run",
    "mesh": {
        "scale": 1.0,            # multiplies every anatomy length
        "h_ventricle": None,     # mm after scaling; None keeps the scaled default
        "h_torso": None,
        "anatomy": {},           # raw AnatomyParams overrides
    },
    "velocity": {"v_f": 0.61, "v_s": 0.225, "v_n": 0.225},
    "eikonal": {"tolerance": 1e-4, "max_iters": 5000, "method": "exact", "fista_iters": 10},
    "waveform": {"v0": -85.0, "v1": 30.0, "eps": 1.0},
    "leads": {"layouts": ["ecg12"], "fit_layout": "ecg12", "method": "cg", "cg_tol": 1e-10},
    "constraint": {"mode": "band", "d_pmj_mm": 2.5, "basal_cutoff": 0.1,
                   "rv_inferior_mask": "auto"},   # "auto": sector from the anatomy
    "optimizer": {"iterations": 400, "lr": 0.75, "lr_time": None, "beta1": 0.9,
                  "beta2": 0.999, "eps": 1e-8, "n_pmj": 300, "early_stop": None,
                  "inactive": "freeze"},
    "target": {"hidden_pmjs": 20, "timing_range_ms": [0.0, 20.0], "seed": 12345,
               "cv_perturbation_pct": 0.0, "noise_mV": 0.0, "dt_ms": 0.5, "guard_ms": 10.0,
               "bspm_every_ms": 5.0},
    "ensemble": {"count": 20},
    "sweep": {"n_values": [1, 10, 50, 100, 300], "repeats": 3},
}

LAYOUTS = ("limb4", "ecg12") + tuple(f"vest{n}" for n in sorted(VEST_GRIDS))


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and k != "anatomy":
            if not isinstance(v, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = v
    return out


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def validate(cfg: dict) -> dict:
    _require(cfg["seed"] is not None, "a seed is mandatory: set 'seed' in the config or pass --seed")
    _require(isinstance(cfg["seed"], int) and cfg["seed"] >= 0, "'seed' must be a non-negative integer")
    m = cfg["mesh"]
    _require(m["scale"] > 0, "mesh.scale must be positive")
    for k in ("h_ventricle", "h_torso"):
        _require(m[k] is None or m[k] > 0, f"mesh.{k} must be positive")
    for k, v in cfg["velocity"].items():
        _require(v > 0, f"velocity.{k} must be positive")
    L = cfg["leads"]
    _require(isinstance(L["layouts"], list) and L["layouts"], "leads.layouts must be a non-empty list")
    for lay in L["layouts"]:
        _require(lay in LAYOUTS, f"unknown lead layout {lay!r}; choose from {list(LAYOUTS)}")
    _require(L["fit_layout"] in L["layouts"], "leads.fit_layout must be one of leads.layouts")
    _require(L["method"] in ("cg", "direct"), "leads.method must be 'cg' or 'direct'")
    c = cfg["constraint"]
    _require(c["mode"] in ("band", "unrestricted"), "constraint.mode must be 'band' or 'unrestricted'")
    _require(c["d_pmj_mm"] > 0, "constraint.d_pmj_mm must be positive")
    _require(0 <= c["basal_cutoff"] < 1, "constraint.basal_cutoff must lie in [0, 1)")
    rv = c["rv_inferior_mask"]
    _require(rv is None or rv == "auto" or (isinstance(rv, list) and len(rv) == 2),
             "constraint.rv_inferior_mask must be null, 'auto' or [lo_deg, hi_deg]")
    o = cfg["optimizer"]
    _require(int(o["iterations"]) >= 1, "optimizer.iterations must be >= 1")
    _require(o["lr"] > 0, "optimizer.lr must be positive")
    _require(int(o["n_pmj"]) >= 1, "optimizer.n_pmj must be >= 1")
    _require(o["inactive"] in ("freeze", "adam", "reset"),
             "optimizer.inactive must be 'freeze', 'adam' or 'reset'")
    t = cfg["target"]
    _require(int(t["hidden_pmjs"]) >= 1, "target.hidden_pmjs must be >= 1")
    lo, hi = t["timing_range_ms"]
    _require(0 <= lo <= hi, "target.timing_range_ms must satisfy 0 <= lo <= hi")
    _require(t["dt_ms"] > 0, "target.dt_ms must be positive")
    _require(t["noise_mV"] >= 0, "target.noise_mV must be >= 0")
    _require(t["cv_perturbation_pct"] > -100, "target.cv_perturbation_pct must exceed -100")
    _require(t["bspm_every_ms"] >= 0, "target.bspm_every_ms must be >= 0")
    _require(int(cfg["ensemble"]["count"]) >= 1, "ensemble.count must be >= 1")
    sw = cfg["sweep"]
    _require(all(int(n) >= 1 for n in sw["n_values"]), "sweep.n_values must all be >= 1")
    _require(int(sw["repeats"]) >= 1, "sweep.repeats must be >= 1")
    return cfg


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the YAML file, then command-line overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{p} must contain a mapping at the top level")
        cfg = _merge(cfg, raw)
    if overrides:
        cfg = _merge(cfg, overrides)
    try:
        return validate(cfg)
    except (TypeError, KeyError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"malformed config value: {exc}") from None


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()
