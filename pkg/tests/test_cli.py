"""CLI tests: config parsing, exit codes, and small end-to-end runs."""

import os
import subprocess
import sys

import numpy as np
import pytest

from ambiflow import cli, data, flow, ndcore as nd, trainer
from ambiflow.errors import ConfigError


def test_coercion():
    assert cli._coerce("3") == 3
    assert cli._coerce("3.5") == 3.5
    assert cli._coerce("true") is True
    assert cli._coerce("False") is False
    assert cli._coerce("ortho") == "ortho"


def test_config_file_parsing(tmp_path):
    base = tmp_path / "base.cfg"
    base.write_text("seed = 7\nn_samples = 10  # short run\n")
    top = tmp_path / "top.cfg"
    top.write_text(f"include = base.cfg\nocclusion_rate = 0.5\nseed = 9\n")
    cfg = cli.parse_config_file(str(top))
    assert cfg == {"seed": 9, "n_samples": 10, "occlusion_rate": 0.5}


def test_config_include_cycle(tmp_path):
    a = tmp_path / "a.cfg"
    b = tmp_path / "b.cfg"
    a.write_text("include = b.cfg\n")
    b.write_text("include = a.cfg\n")
    with pytest.raises(ConfigError):
        cli.parse_config_file(str(a))


def test_config_bad_line(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("just a line without equals\n")
    with pytest.raises(ConfigError):
        cli.parse_config_file(str(p))


def test_unknown_key_rejected(tmp_path):
    rc = cli.entry(["gen", "--out", str(tmp_path / "d.afds"),
                    "--set", "n_sample=10"])
    assert rc == 2


def test_missing_file_is_io_error(tmp_path):
    rc = cli.entry(["train", "--data", str(tmp_path / "missing.afds"),
                    "--out", str(tmp_path / "run")])
    assert rc == 3


def test_corrupt_dataset_is_io_error(tmp_path):
    path = tmp_path / "d.afds"
    rc = cli.entry(["gen", "--out", str(path), "--set", "n_samples=4"])
    assert rc == 0
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    rc = cli.entry(["sample", "--model", "x", "--data", str(path),
                    "--out", str(tmp_path / "h.afhy")])
    assert rc == 3


def test_nan_model_is_numeric_error(tmp_path):
    model, disc = trainer.build_models()
    model.randomize_weights(nd.rng_from(0, "w"), scale=0.3)
    model.blocks[0].w1a.data[0, 0] = np.nan
    mpath = tmp_path / "m.afnf"
    flow.save_model(model, str(mpath), disc=disc)
    dpath = tmp_path / "d.afds"
    assert cli.entry(["gen", "--out", str(dpath), "--set", "n_samples=3"]) == 0
    rc = cli.entry(["sample", "--model", str(mpath), "--data", str(dpath),
                    "--out", str(tmp_path / "h.afhy"), "--set", "count=2"])
    assert rc == 4


def test_gen_writes_effectively_deterministic_bytes(tmp_path):
    a, b = tmp_path / "a.afds", tmp_path / "b.afds"
    for p in (a, b):
        assert cli.entry(["gen", "--out", str(p), "--set", "n_samples=6",
                          "--set", "seed=5"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_full_small_pipeline(tmp_path):
    d = str(tmp_path)
    cfg = tmp_path / "t.cfg"
    cfg.write_text("epochs = 1\nbatch_size = 10\nn_hyp = 4\nk_best = 2\n")
    assert cli.entry(["gen", "--out", f"{d}/ds.afds", "--set", "n_samples=20",
                      "--heatmaps", f"{d}/hm.afhm", "--heatmap-count", "1"]) == 0
    assert cli.entry(["train", "--data", f"{d}/ds.afds", "--out", f"{d}/run",
                      "--config", str(cfg), "--quiet"]) == 0
    assert os.path.exists(f"{d}/run/model.afnf")
    assert os.path.exists(f"{d}/run/history.csv")
    assert os.path.exists(f"{d}/run/effective.cfg")
    eff = open(f"{d}/run/effective.cfg").read()
    assert "epochs = 1" in eff and "lam_hm = 750.0" in eff
    assert cli.entry(["sample", "--model", f"{d}/run/model.afnf",
                      "--data", f"{d}/ds.afds", "--out", f"{d}/h.afhy",
                      "--set", "count=8", "--set", "limit=10"]) == 0
    hyps, z0_first = data.read_hypotheses(f"{d}/h.afhy")
    assert hyps.shape == (10, 9, 48)
    assert z0_first
    assert cli.entry(["eval", "--hyps", f"{d}/h.afhy", "--data", f"{d}/ds.afds",
                      "--out", f"{d}/ev"]) == 0
    header = open(f"{d}/ev/eval.csv").readline().strip().split(",")
    for col in ("best_mpjpe", "z0_mpjpe", "hyp_reproj_med_px", "z0_reproj_px"):
        assert col in header
    assert os.path.exists(f"{d}/ev/spread.csv")
    assert os.path.exists(f"{d}/ev/summary.txt")
    assert cli.entry(["fit-heatmaps", "--heatmaps", f"{d}/hm.afhm",
                      "--out", f"{d}/fits.csv"]) == 0
    assert cli.entry(["plot", "--history", f"{d}/run/history.csv",
                      "--hyps", f"{d}/h.afhy", "--data", f"{d}/ds.afds",
                      "--out", f"{d}/plots"]) == 0
    for stem in ("loss_curves", "error_vs_m", "spread_bars"):
        assert os.path.exists(f"{d}/plots/{stem}.svg")
        assert os.path.exists(f"{d}/plots/{stem}.csv")


def test_plot_requires_inputs(tmp_path):
    assert cli.entry(["plot", "--out", str(tmp_path)]) == 2


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "ambiflow.cli", "--help"],
                         capture_output=True, text=True)
    assert out.returncode == 0
    for sub in ("gen", "train", "sample", "eval", "fit-heatmaps", "plot"):
        assert sub in out.stdout
