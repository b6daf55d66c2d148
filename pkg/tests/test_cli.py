from __future__ import annotations

import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from eikonal_twin.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main
from eikonal_twin.config import ConfigError, DEFAULTS, config_hash, load_config

TINY_CFG = {
    "seed": 7,
    "mesh": {"scale": 0.4, "h_ventricle": 3.0, "h_torso": 8.0},
    "leads": {"layouts": ["limb4", "ecg12"], "fit_layout": "ecg12"},
    "optimizer": {"iterations": 3, "n_pmj": 6},
    "target": {"hidden_pmjs": 5, "bspm_every_ms": 10.0},
    "ensemble": {"count": 2},
    "sweep": {"n_values": [1, 4], "repeats": 2},
}


def write_cfg(path: Path, cfg: dict) -> Path:
    path.write_text(yaml.safe_dump(cfg))
    return path


def run(cfg_path, out, *extra):
    return main([*extra[:1], "--config", str(cfg_path), "--out", str(out), *extra[1:]])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(base / "tiny.yaml", TINY_CFG)
    out = base / "ws"
    codes = {}
    for cmd in ("genmesh", "leads", "gt"):
        codes[cmd] = run(cfg, out, cmd)
    codes["fit_self"] = run(cfg, out, "fit", "--self-target")
    codes["ensemble"] = run(cfg, out, "ensemble", "--restricted")
    codes["sweep"] = run(cfg, out, "sweep")
    codes["report"] = run(cfg, out, "report", "--score-vs-gt", "--bspm")
    return cfg, out, codes


def csv_files(root: Path, sub: str) -> dict:
    return {p.relative_to(root): p.read_bytes() for p in sorted((root / sub).rglob("*.csv"))}


# ------------------------------------------------------------ config

def test_seed_is_mandatory(tmp_path):
    cfg = dict(TINY_CFG)
    cfg.pop("seed")
    with pytest.raises(ConfigError, match="seed"):
        load_config(write_cfg(tmp_path / "c.yaml", cfg))
    assert load_config(write_cfg(tmp_path / "c.yaml", cfg), {"seed": 3})["seed"] == 3


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match="optimizer.learning_rate"):
        load_config(write_cfg(tmp_path / "c.yaml", {"seed": 1, "optimizer": {"learning_rate": 1}}))


@pytest.mark.parametrize("section,key,value", [
    ("optimizer", "iterations", 0), ("optimizer", "lr", -1.0), ("constraint", "mode", "box"),
    ("leads", "layouts", ["vest48"]), ("constraint", "d_pmj_mm", 0.0), ("target", "dt_ms", 0.0),
    ("optimizer", "inactive", "drop"), ("sweep", "n_values", [0]),
])
def test_invalid_values_rejected(tmp_path, section, key, value):
    with pytest.raises(ConfigError):
        load_config(write_cfg(tmp_path / "c.yaml", {"seed": 1, section: {key: value}}))


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(tmp_path / "nope.yaml")


def test_defaults_and_hash():
    cfg = load_config(None, {"seed": 0})
    assert cfg["optimizer"]["iterations"] == 400 and cfg["optimizer"]["lr"] == 0.75
    assert cfg["ensemble"]["count"] == 20 and cfg["constraint"]["d_pmj_mm"] == 2.5
    assert config_hash(cfg) == config_hash(load_config(None, {"seed": 0}))
    assert config_hash(cfg) != config_hash(load_config(None, {"seed": 1}))
    assert DEFAULTS["seed"] is None


# ------------------------------------------------------------ pipeline

def test_pipeline_exit_codes(pipeline):
    _, _, codes = pipeline
    assert codes == {k: EXIT_OK for k in codes}


def test_genmesh_outputs(pipeline):
    _, out, _ = pipeline
    meta = json.loads((out / "mesh" / "meta.json").read_text())
    assert meta["heart_vertices"] > 0 and meta["torso_vertices"] > meta["heart_vertices"]
    assert "config_hash" in meta and meta["seed"] == 7


def test_hidden_pmjs_kept_apart(pipeline):
    _, out, _ = pipeline
    assert (out / "gt" / "hidden" / "pmj_gt.csv").exists()
    assert not list((out / "gt").glob("pmj*.csv"))
    assert len(list((out / "gt" / "bspm").glob("phi_t*.csv"))) >= 2


def test_self_target_fit_reaches_zero_loss(pipeline):
    _, out, _ = pipeline
    runs = list((out / "runs").glob("fit_*_self/run_*"))
    assert len(runs) == 1
    loss = np.loadtxt(runs[0] / "loss.csv", delimiter=",", skiprows=1, ndmin=2)[:, 1]
    assert loss.max() < 1e-8


def test_ensemble_and_sweep_layout(pipeline):
    _, out, _ = pipeline
    cell = out / "runs" / "band_ecg12_N6"
    assert len(list(cell.glob("run_*"))) == 2
    for run_dir in cell.glob("run_*"):
        for f in ("loss.csv", "pmj_final.csv", "tau_final.csv", "ecg_final.csv", "roi.csv", "meta.json"):
            assert (run_dir / f).exists()
    summary = (out / "sweep" / "summary.csv").read_text().splitlines()
    assert summary[0].startswith("n_pmj,") and len(summary) == 3


def test_report_outputs(pipeline):
    _, out, _ = pipeline
    rows = (out / "report" / "metrics.csv").read_text().splitlines()
    head = rows[0].split(",")
    assert head[:4] == ["cell", "constraint", "leads", "n_pmj"]
    ens = [r for r in rows if r.startswith("band_ecg12_N6,")][0].split(",")
    rec = dict(zip(head, ens))
    assert float(rec["dist_lat"]) > 0 and float(rec["dist_bspm"]) > 0
    assert float(rec["tau_sigma_bar"]) >= 0
    assert (out / "report" / "pairs.csv").exists()
    assert list((out / "report").glob("*.svg"))


def test_rerun_is_bit_identical(pipeline, tmp_path):
    cfg, out, _ = pipeline
    other = tmp_path / "ws2"
    shutil.copytree(out / "mesh", other / "mesh")
    shutil.copytree(out / "leads", other / "leads")
    assert run(cfg, other, "gt") == EXIT_OK
    assert run(cfg, other, "ensemble", "--restricted", "--jobs", "2") == EXIT_OK
    assert csv_files(out, "gt") == csv_files(other, "gt")
    assert csv_files(out, "runs/band_ecg12_N6") == csv_files(other, "runs/band_ecg12_N6")


# ------------------------------------------------------------ failures

def test_config_error_exit_code(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.yaml", {"mesh": {"scale": 0.4}})
    assert main(["genmesh", "--config", str(cfg), "--out", str(tmp_path / "w")]) == EXIT_CONFIG
    assert "seed" in capsys.readouterr().err


def test_degenerate_anatomy_is_config_error(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", {"seed": 1, "mesh": {"anatomy": {"lv_outer": [0, 24, 42]}}})
    assert main(["genmesh", "--config", str(cfg), "--out", str(tmp_path / "w")]) == EXIT_CONFIG


def test_missing_prerequisite_is_config_error(tmp_path, pipeline):
    cfg, _, _ = pipeline
    assert run(cfg, tmp_path / "empty", "fit") == EXIT_CONFIG
    assert run(cfg, tmp_path / "empty", "fit", "--layout", "vest64") == EXIT_CONFIG


def test_inconsistent_meshes_are_numeric_failure(tmp_path, pipeline):
    cfg, out, _ = pipeline
    bad = tmp_path / "bad"
    shutil.copytree(out / "mesh", bad / "mesh")
    hv = np.loadtxt(bad / "mesh" / "heart_vertices.txt", dtype=np.int64)
    np.savetxt(bad / "mesh" / "heart_vertices.txt", hv[::-1], fmt="%d")
    assert run(cfg, bad, "leads") == EXIT_NUMERIC


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "eikonal_twin.cli", "--help"], capture_output=True,
                       text=True, check=False)
    assert r.returncode == 0 and "genmesh" in r.stdout
