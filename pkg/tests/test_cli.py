"""Command line workflow: config handling and subcommand round trips."""

import json
import os

import numpy as np
import pytest

from onix4d import cli, fileio


def write_json(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


TINY_MODEL_CFG = {"enc_channels": [4, 6], "gen_width": 16, "n_view_blocks": 2,
                  "n_post_blocks": 1, "freq_xyz": 2, "freq_t": 1,
                  "disc_channels": [8, 8], "patch": 8}


def simulate_tiny(tmp_path, name="ds", seal=True, seed=7):
    cfg = write_json(tmp_path / f"sim_{name}.json", {
        "experiments": {"n_experiments": 2, "n_timestamps": 2, "seed": seed},
        "acquisition": {"width": 16, "height": 16, "pitch": 0.125,
                        "samples_per_ray": 24},
        "seal_azimuths": seal,
    })
    out = str(tmp_path / name)
    assert cli.main(["simulate", "--config", cfg, "--out", out]) == 0
    return out


def train_tiny(tmp_path, dataset, name="run", epochs=2):
    cfg = write_json(tmp_path / f"train_{name}.json", {
        "dataset": dataset,
        "model": TINY_MODEL_CFG,
        "train": {"epochs": epochs, "batch_size": 2, "warmup_epochs": 5,
                  "n_samples": 4, "patch": 8, "seed": 11, "lr": 1e-3},
    })
    out = str(tmp_path / name)
    assert cli.main(["train", "--config", cfg, "--out", out]) == 0
    return out


# ---------------------------------------------------------------------------
# config machinery
# ---------------------------------------------------------------------------

def test_merge_config_nested_and_rejection():
    defaults = {"a": 1, "b": {"c": 2, "d": 3}}
    merged = cli.merge_config(defaults, {"b": {"c": 9}})
    assert merged == {"a": 1, "b": {"c": 9, "d": 3}}
    assert defaults["b"]["c"] == 2                      # defaults untouched
    with pytest.raises(ValueError, match="unknown config key 'z'"):
        cli.merge_config(defaults, {"z": 0})
    with pytest.raises(ValueError, match="'b.e'"):
        cli.merge_config(defaults, {"b": {"e": 0}})
    with pytest.raises(ValueError, match="known: c, d"):
        cli.merge_config(defaults, {"b": {"e": 0}})


def test_unknown_config_key_exits_nonzero(tmp_path):
    cfg = write_json(tmp_path / "bad.json", {"not_a_key": 1})
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 1


def test_missing_config_file_exits_nonzero(tmp_path):
    assert cli.main(["simulate", "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "o")]) == 1


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def test_gradcheck_passes_and_prints(capsys):
    assert cli.main(["gradcheck", "--out", "unused"]) == 0
    out = capsys.readouterr().out
    assert "[PASS]" in out and "[FAIL]" not in out
    assert "gradcheck:" in out


# ---------------------------------------------------------------------------
# simulate / train / render / evaluate workflow
# ---------------------------------------------------------------------------

def test_full_workflow(tmp_path):
    ds = simulate_tiny(tmp_path)
    assert os.path.exists(os.path.join(ds, "manifest.json"))
    assert os.path.exists(os.path.join(ds, "resolved_config.json"))
    manifest = fileio.load_manifest(ds)
    assert len(manifest["experiments"]) == 2

    run = train_tiny(tmp_path, ds)
    for f in ("model.ckpt", "model_config.json", "train_log.jsonl",
              "train_summary.json", "resolved_config.json"):
        assert os.path.exists(os.path.join(run, f)), f

    render_cfg = write_json(tmp_path / "render.json", {
        "dataset": ds, "run": run, "experiment": 1, "grid": 8, "t_indices": [0]})
    rout = str(tmp_path / "render_out")
    assert cli.main(["render", "--config", render_cfg, "--out", rout]) == 0
    vol = fileio.read_xvol(os.path.join(rout, "vol_e01_t000.xvol"))
    assert vol.shape == (8, 8, 8)
    assert np.all(vol >= 0)
    assert os.path.exists(os.path.join(rout, "frame_side_t000.pgm"))
    assert os.path.exists(os.path.join(rout, "frame_top_t000.pgm"))

    eval_cfg = write_json(tmp_path / "eval.json", {
        "dataset": ds, "run": run, "grid": 12,
        "experiments": [0], "t_indices": [0]})
    eout = str(tmp_path / "eval_out")
    assert cli.main(["evaluate", "--config", eval_cfg, "--out", eout]) == 0
    report = json.loads(open(os.path.join(eout, "report.json")).read())
    assert len(report["records"]) == 1
    assert report["summary"]["mse"] is not None
    csv = open(os.path.join(eout, "metrics.csv")).read().splitlines()
    assert csv[0].startswith("experiment,")
    assert len(csv) == 2


def test_render_rejects_bad_experiment_and_angle_mismatch(tmp_path):
    ds = simulate_tiny(tmp_path)
    run = train_tiny(tmp_path, ds)
    cfg = write_json(tmp_path / "r1.json", {"dataset": ds, "run": run,
                                            "experiment": 5, "grid": 8})
    assert cli.main(["render", "--config", cfg, "--out", str(tmp_path / "x")]) == 1
    # tamper with the run's recorded angles
    mc_path = os.path.join(run, "model_config.json")
    payload = json.loads(open(mc_path).read())
    payload["dataset"]["rel_angles_deg"] = [0.0, 30.0]
    open(mc_path, "w").write(json.dumps(payload))
    cfg = write_json(tmp_path / "r2.json", {"dataset": ds, "run": run,
                                            "experiment": 0, "grid": 8})
    assert cli.main(["render", "--config", cfg, "--out", str(tmp_path / "y")]) == 1


def test_evaluate_requires_sealed_dataset(tmp_path):
    ds = simulate_tiny(tmp_path, name="open", seal=False)
    run = train_tiny(tmp_path, ds, name="run_open")
    cfg = write_json(tmp_path / "e.json", {"dataset": ds, "run": run, "grid": 12})
    assert cli.main(["evaluate", "--config", cfg, "--out", str(tmp_path / "eo")]) == 1


# ---------------------------------------------------------------------------
# sart
# ---------------------------------------------------------------------------

def test_sart_requires_unsealed_dataset(tmp_path):
    sealed = simulate_tiny(tmp_path, name="sealed")
    cfg = write_json(tmp_path / "s1.json", {"dataset": sealed, "grid": 16,
                                            "iterations": 2})
    assert cli.main(["sart", "--config", cfg, "--out", str(tmp_path / "so1")]) == 1


def test_sart_runs_on_unsealed_dataset(tmp_path):
    ds = simulate_tiny(tmp_path, name="open2", seal=False)
    cfg = write_json(tmp_path / "s2.json", {"dataset": ds, "grid": 16,
                                            "iterations": 3, "experiment": 1,
                                            "t_index": 1})
    out = str(tmp_path / "so2")
    assert cli.main(["sart", "--config", cfg, "--out", out]) == 0
    vol = fileio.read_xvol(os.path.join(out, "sart_e01_t001.xvol"))
    assert vol.shape == (16, 16, 16)
    summary = json.loads(open(os.path.join(out, "sart_summary.json")).read())
    assert summary["views"] == 2
    assert summary["consistency"] < 0.5


# ---------------------------------------------------------------------------
# seed override and determinism through the CLI
# ---------------------------------------------------------------------------

def test_simulate_seed_flag_overrides_config(tmp_path):
    a = simulate_tiny(tmp_path, name="a", seed=7)
    cfg = write_json(tmp_path / "sim_b.json", {
        "experiments": {"n_experiments": 2, "n_timestamps": 2, "seed": 999},
        "acquisition": {"width": 16, "height": 16, "pitch": 0.125,
                        "samples_per_ray": 24},
    })
    b = str(tmp_path / "b")
    assert cli.main(["simulate", "--config", cfg, "--seed", "7", "--out", b]) == 0
    ma = fileio.load_manifest(a)
    mb = fileio.load_manifest(b)
    assert ma["seed"] == mb["seed"] == 7
    for ea, eb in zip(ma["experiments"], mb["experiments"]):
        ba = open(os.path.join(a, ea["files"]["absorbance"]), "rb").read()
        bb = open(os.path.join(b, eb["files"]["absorbance"]), "rb").read()
        assert ba == bb
