"""Command line interface.

Subcommands: ``simulate`` (render an experiment set to disk), ``train``
(fit the implicit model on a dataset), ``render`` (write reconstructed
volumes and movie frames), ``evaluate`` (score a run against the sealed
ground truth), ``sart`` (algebraic baseline on a dense-view dataset),
and ``gradcheck`` (finite-difference audit of the autodiff layer).

Shared flags: ``--config`` (JSON, validated strictly: unknown keys are
rejected), ``--seed``, ``--threads`` (caps BLAS/OpenMP pools; set before
numpy loads), ``--out``.  The ``ONIX4D_LOG`` environment variable picks
the log level.  Every run writes its fully resolved configuration next
to its outputs.

Only ``evaluate`` reads the sealed section of a dataset manifest; the
baseline needs absolute angles and therefore only accepts datasets that
were simulated unsealed.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys

log = logging.getLogger("onix4d")


def _set_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _setup_logging() -> None:
    level = os.environ.get("ONIX4D_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def merge_config(defaults: dict, override: dict, path: str = "") -> dict:
    """Recursive merge that rejects keys absent from the defaults."""
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            known = ", ".join(sorted(defaults.keys()))
            raise ValueError(f"unknown config key {where!r} (known: {known})")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            out[key] = merge_config(defaults[key], value, where)
        else:
            out[key] = value
    return out


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _write_resolved(out_dir: str, config: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved_config.json"), "w", encoding="utf-8") as f:
        json.dump(config, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# defaults
# ---------------------------------------------------------------------------

def _simulate_defaults() -> dict:
    import dataclasses

    from . import phantom, physics

    return {
        "scenario": {"type": "droplets", **dataclasses.asdict(phantom.DropletScenario())},
        "experiments": {k: v for k, v in dataclasses.asdict(phantom.ExperimentSet()).items()},
        "acquisition": dataclasses.asdict(physics.AcquisitionSpec())
        | {"noise": dataclasses.asdict(physics.NoiseModel())},
        "seal_azimuths": True,
    }


def _train_defaults() -> dict:
    import dataclasses

    from . import model, training

    return {
        "dataset": "",
        "model": dataclasses.asdict(model.ModelConfig()),
        "train": dataclasses.asdict(training.TrainConfig()),
    }


def _render_defaults() -> dict:
    return {"dataset": "", "run": "", "experiment": 0, "grid": 32,
            "t_indices": None, "write_volumes": True, "write_frames": True}


def _evaluate_defaults() -> dict:
    return {"dataset": "", "run": "", "grid": 32, "experiments": None,
            "t_indices": None, "fsc": True}


def _sart_defaults() -> dict:
    return {"dataset": "", "experiment": 0, "t_index": 0, "grid": 64,
            "iterations": 20, "relaxation": 0.5, "nonneg": True,
            "samples_per_ray": None, "channel": "absorbance"}


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------

def _scenario_from_config(cfg: dict):
    from . import phantom

    cfg = dict(cfg)
    kind = cfg.pop("type")
    name = {"droplets": "DropletScenario", "melt": "MeltScenario"}.get(kind)
    if name is None:
        raise ValueError(f"unknown scenario type {kind!r}")
    return phantom.scenario_from_dict(name, cfg)


def cmd_simulate(config: dict, seed: int | None, out_dir: str) -> int:
    from . import phantom, physics

    if seed is not None:
        config["experiments"]["seed"] = seed
    scenario = _scenario_from_config(config["scenario"])
    exp_cfg = dict(config["experiments"])
    if exp_cfg.get("azimuths_deg") is not None:
        exp_cfg["azimuths_deg"] = tuple(exp_cfg["azimuths_deg"])
    exp_cfg["rel_angles_deg"] = tuple(exp_cfg["rel_angles_deg"])
    expset = phantom.ExperimentSet(**exp_cfg)
    acq_cfg = dict(config["acquisition"])
    acq_cfg["noise"] = physics.NoiseModel(**acq_cfg["noise"])
    acq_cfg["bounds"] = tuple(tuple(b) for b in acq_cfg["bounds"])
    spec = physics.AcquisitionSpec(**acq_cfg)
    _write_resolved(out_dir, config)
    manifest = physics.simulate_dataset(scenario, expset, spec, out_dir,
                                        seal=config["seal_azimuths"])
    log.info("simulated %d experiments x %d timestamps x %d views into %s",
             expset.n_experiments, expset.n_timestamps, expset.n_views, out_dir)
    log.info("channel norms: absorbance %.4g, phase %.4g",
             manifest["channel_norm"]["absorbance"], manifest["channel_norm"]["phase"])
    return 0


def cmd_train(config: dict, seed: int | None, out_dir: str) -> int:
    from . import model, training

    if not config["dataset"]:
        raise ValueError("train config needs a 'dataset' path")
    if seed is not None:
        config["train"]["seed"] = seed
    _write_resolved(out_dir, config)
    tcfg_d = dict(config["train"])
    tcfg_d["scale_range"] = tuple(tcfg_d["scale_range"])
    tcfg = training.TrainConfig(**tcfg_d)
    mcfg = model.config_from_dict(config["model"])
    _, summary = training.train(config["dataset"], tcfg, mcfg, out_dir=out_dir)
    log.info("training finished: %d epochs, %d discriminator updates, %.1f s",
             summary["epochs_run"], summary["d_updates"], summary["wall_time_s"])
    return 0


def _load_run(run_dir: str, seed: int = 0):
    from . import model

    cfg_path = os.path.join(run_dir, "model_config.json")
    ckpt_path = os.path.join(run_dir, "model.ckpt")
    recon = model.load_reconstructor(cfg_path, ckpt_path, seed=seed)
    with open(cfg_path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    return recon, payload


def cmd_render(config: dict, seed: int | None, out_dir: str) -> int:
    import numpy as np

    from . import fileio, training

    if not config["dataset"] or not config["run"]:
        raise ValueError("render config needs 'dataset' and 'run' paths")
    recon, payload = _load_run(config["run"])
    data = training.load_training_dataset(config["dataset"])
    if tuple(payload["dataset"]["rel_angles_deg"]) != tuple(data.rel_angles_deg):
        raise ValueError("run was trained with different relative view angles")
    e = config["experiment"]
    if not (0 <= e < data.n_experiments):
        raise ValueError(f"experiment {e} out of range (dataset has {data.n_experiments})")
    t_indices = config["t_indices"] or list(range(data.n_timestamps))
    _write_resolved(out_dir, config)
    det = data.detector
    for ti in t_indices:
        vol = recon.volume(data.images[e, ti], data.rel_angles_deg,
                           float(data.timeline[ti]), config["grid"], det["pitch"])
        delta = vol[..., 0]
        if config["write_volumes"]:
            fileio.write_xvol(os.path.join(out_dir, f"vol_e{e:02d}_t{ti:03d}.xvol"),
                              delta.astype(np.float32))
        if config["write_frames"]:
            side = delta.sum(axis=0)        # view along +x: (y, z)
            top = delta.sum(axis=2)         # view along -z: (x, y)
            fileio.write_pgm(os.path.join(out_dir, f"frame_side_t{ti:03d}.pgm"),
                             side.T[::-1])
            fileio.write_pgm(os.path.join(out_dir, f"frame_top_t{ti:03d}.pgm"),
                             top.T[::-1])
    log.info("rendered %d timestamps of experiment %d into %s", len(t_indices), e, out_dir)
    return 0


def cmd_evaluate(config: dict, seed: int | None, out_dir: str) -> int:
    from . import training

    if not config["dataset"] or not config["run"]:
        raise ValueError("evaluate config needs 'dataset' and 'run' paths")
    recon, _ = _load_run(config["run"])
    _write_resolved(out_dir, config)
    report = training.evaluate_model(config["dataset"], recon, grid_n=config["grid"],
                                     experiments=config["experiments"],
                                     t_indices=config["t_indices"],
                                     compute_fsc=config["fsc"])
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    keys = list(report["records"][0].keys()) if report["records"] else []
    with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as f:
        f.write(",".join(keys) + "\n")
        for rec in report["records"]:
            f.write(",".join(str(rec[k]) for k in keys) + "\n")
    log.info("evaluation summary: %s", json.dumps(report["summary"]))
    return 0


def cmd_sart(config: dict, seed: int | None, out_dir: str) -> int:
    import numpy as np

    from . import baselines, fileio, training

    if not config["dataset"]:
        raise ValueError("sart config needs a 'dataset' path")
    data = training.load_training_dataset(config["dataset"])
    e, ti = config["experiment"], config["t_index"]
    exp = data.manifest["experiments"][e]
    if "azimuth_deg" not in exp:
        raise ValueError("baseline reconstruction needs known absolute angles; "
                         "simulate the dataset with seal_azimuths=false")
    angles = [exp["azimuth_deg"] + rel for rel in exp["rel_angles_deg"]]
    acq = data.acq_spec()
    channel = config["channel"]
    idx = {"absorbance": 0, "phase": 1}[channel]
    norm = data.norms[idx]
    coeff = acq.absorbance_coeff if channel == "absorbance" else acq.phase_coeff
    meas = data.images[e, ti, :, idx].astype(np.float64) * norm / coeff
    cfg = baselines.SartConfig(iterations=config["iterations"],
                               relaxation=config["relaxation"],
                               nonneg=config["nonneg"],
                               samples_per_ray=config["samples_per_ray"])
    _write_resolved(out_dir, config)
    vol = baselines.sart_reconstruct(meas, angles, config["grid"], cfg,
                                     pitch=data.detector["pitch"])
    consistency = baselines.projection_consistency(vol, meas, angles,
                                                   pitch=data.detector["pitch"])
    fileio.write_xvol(os.path.join(out_dir, f"sart_e{e:02d}_t{ti:03d}.xvol"),
                      vol.astype(np.float32))
    with open(os.path.join(out_dir, "sart_summary.json"), "w", encoding="utf-8") as f:
        json.dump({"experiment": e, "t_index": ti, "views": len(angles),
                   "iterations": cfg.iterations, "consistency": consistency},
                  f, indent=2, sort_keys=True)
        f.write("\n")
    log.info("sart: %d views, consistency %.4g", len(angles), consistency)
    return 0


def cmd_gradcheck(config: dict, seed: int | None, out_dir: str) -> int:
    import numpy as np

    from . import autodiff as ad

    rng = np.random.default_rng(0 if seed is None else seed)
    f64 = np.float64

    def t(shape, scale=1.0):
        return ad.Tensor(rng.normal(0, scale, size=shape).astype(f64))

    checks = [
        ("add/mul/neg", lambda a, b: ad.tensor_sum(ad.mul(ad.add(a, b), ad.negate(b))),
         [t((5, 3)), t((5, 3))]),
        ("exp/log", lambda a: ad.tensor_sum(ad.log(ad.exp(a))), [t((7,))]),
        ("sigmoid", lambda a: ad.tensor_sum(ad.sigmoid(a)), [t((9,), 2.0)]),
        ("softplus", lambda a: ad.tensor_sum(ad.softplus(a)), [t((9,), 2.0)]),
        ("leaky_relu", lambda a: ad.tensor_sum(ad.leaky_relu(a, 0.2)), [t((9,), 2.0)]),
        ("linear", lambda x, w, b: ad.tensor_sum(ad.linear(x, w, b)),
         [t((4, 3)), t((3, 2)), t((2,))]),
        ("conv2d", lambda x, w, b: ad.tensor_sum(ad.conv2d(x, w, b, stride=2, padding=1)),
         [t((2, 3, 6, 6)), t((4, 3, 3, 3)), t((4,))]),
        ("avg_pool2", lambda x: ad.tensor_sum(ad.avg_pool2(x)), [t((1, 2, 4, 4))]),
        ("mean axis", lambda x: ad.tensor_sum(ad.tensor_mean(x, axis=1)), [t((3, 4, 2))]),
        ("concat/transpose", lambda a, b: ad.tensor_sum(
            ad.transpose(ad.concat([a, b], axis=1), (1, 0))), [t((3, 2)), t((3, 4))]),
        ("bilinear_sample", lambda m: ad.tensor_sum(ad.bilinear_sample(
            m, np.array([0, 0, 1, 1]), np.array([[0.3, 0.7], [2.5, 1.1], [-0.4, 0.2], [3.2, 2.9]]))),
         [t((2, 3, 4, 4))]),
    ]
    failures = 0
    for name, fn, tensors in checks:
        err = ad.check_gradients(fn, tensors, h=1e-5)
        ok = err < 1e-6
        print(f"[{'PASS' if ok else 'FAIL'}] {name:24s} max rel err {err:.3e}")
        failures += 0 if ok else 1
    print(f"gradcheck: {len(checks) - failures}/{len(checks)} passed")
    return 0 if failures == 0 else 1


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "simulate": (cmd_simulate, _simulate_defaults),
    "train": (cmd_train, _train_defaults),
    "render": (cmd_render, _render_defaults),
    "evaluate": (cmd_evaluate, _evaluate_defaults),
    "sart": (cmd_sart, _sart_defaults),
    "gradcheck": (cmd_gradcheck, lambda: {}),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="onix4d",
        description="Sparse-view 4D X-ray reconstruction toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config; unknown keys are rejected")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=None,
                       help="cap numerical thread pools")
        p.add_argument("--out", default=None, help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        _set_threads(args.threads)
    _setup_logging()
    handler, defaults = _COMMANDS[args.command]
    try:
        config = merge_config(defaults(), _load_config(args.config))
        out_dir = args.out or os.path.join("onix4d_out", args.command)
        return handler(config, args.seed, out_dir)
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
