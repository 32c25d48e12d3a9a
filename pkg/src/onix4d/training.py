"""Adversarial training of the implicit model on projection patches.

Each iteration draws a mini-batch of (experiment, timestamp) items.  For
every item the model renders the available views on a randomly placed
32x32 patch grid (continuous position and stride, always inside the
detector) and the losses compare rendered and recorded patches:

* warmup phase: plain MSE between rendered and recorded patches;
* adversarial phase: the same MSE anchor on the recorded views (weight
  ``post_warmup_mse``) plus a non-saturating generator loss on patches
  rendered at uniformly random azimuths in [0, 180) degrees.  The patch
  discriminator judges those novel-view renders against recorded
  patches, so the adversarial signal constrains view directions the
  acquisition never measured -- the part of the volume that recorded-view
  consistency alone leaves undetermined.

The phase schedule is either ``two-phase`` (MSE for the first
``warmup_epochs`` epochs, adversarial afterwards) or ``random-dice``
(after warmup, each iteration is adversarial with probability
``dice_gan_prob``, MSE otherwise).  Generator and encoder gradients are
accumulated item by item, so memory stays bounded by a single item's
graph.  Every random choice comes from named, seeded streams; training
twice with one thread and the same seed produces identical checkpoints.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import fileio
from . import geometry as geo
from . import metrics as met
from . import phantom
from . import physics
from .model import ModelConfig, Reconstructor, discriminate

# rendered (delta, beta) sums -> (absorbance, phase) image channels
CHANNEL_MATRIX = np.array([[0.0, 1.0], [1.0, 0.0]])


def _stream(seed: int, label: str) -> np.random.Generator:
    import zlib

    return np.random.default_rng((seed, zlib.crc32(label.encode("utf-8"))))


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatchSpec:
    """A square sampling grid in continuous pixel coordinates."""

    x0: float
    y0: float
    stride: float
    size: int = 32

    def pixel_coords(self) -> np.ndarray:
        """(size^2, 2) grid positions, row-major with y varying slowest."""
        idx = np.arange(self.size)
        xs = self.x0 + self.stride * idx
        ys = self.y0 + self.stride * idx
        gx, gy = np.meshgrid(xs, ys, indexing="xy")
        return np.stack([gx, gy], axis=-1).reshape(-1, 2)


def sample_patch(rng: np.random.Generator, width: int, height: int,
                 scale_range=(0.3, 1.0), size: int = 32) -> PatchSpec:
    """Draw a patch with continuous scale and position, fully inside the
    detector (patch extent never crosses the image border)."""
    lo, hi = scale_range
    if not (0 < lo <= hi <= 1.0):
        raise ValueError(f"scale_range must satisfy 0 < lo <= hi <= 1, got {scale_range}")
    if size < 2 or size > min(width, height):
        raise ValueError(f"patch size {size} does not fit a {width}x{height} image")
    max_stride = (min(width, height) - 1) / (size - 1)
    stride = max_stride * rng.uniform(lo, hi)
    extent = stride * (size - 1)
    # rounding can push a full-scale extent a hair past the border
    x0 = rng.uniform(0.0, max(0.0, (width - 1) - extent))
    y0 = rng.uniform(0.0, max(0.0, (height - 1) - extent))
    return PatchSpec(x0, y0, stride, size)


def bilinear_image(image: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Numpy twin of the autodiff bilinear map sampler: (C, H, W) image at
    (P, 2) pixel positions -> (P, C), zero outside."""
    c, h, w = image.shape
    x, y = xy[:, 0], xy[:, 1]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx, fy = x - x0, y - y0
    out = np.zeros((xy.shape[0], c))
    flat = image.reshape(c, -1)
    for dy in (0, 1):
        for dx in (0, 1):
            cx, cy = x0 + dx, y0 + dy
            wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            valid = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
            lin = np.clip(cy, 0, h - 1) * w + np.clip(cx, 0, w - 1)
            out += flat[:, lin].T * (wgt * valid)[:, None]
    return out


def extract_patch(image: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """(C, H, W) image -> (C, size, size) patch at the spec's grid."""
    vals = bilinear_image(image, spec.pixel_coords())
    return vals.reshape(spec.size, spec.size, image.shape[0]).transpose(2, 0, 1)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse_loss(pred: ad.Tensor, target: np.ndarray) -> ad.Tensor:
    if pred.data.shape != target.shape:
        raise ad.ShapeError(f"mse: {pred.data.shape} vs {target.shape}")
    diff = ad.add(pred, ad.Tensor(-target.astype(pred.dtype)))
    return ad.tensor_mean(ad.mul(diff, diff))


def generator_gan_loss(d_fake: ad.Tensor, eps: float = 1e-7):
    """Non-saturating generator loss -E[log D(fake)]; returns (loss, clamps)."""
    clamped, n = ad.clamp(d_fake, eps, 1.0 - eps)
    return ad.negate(ad.tensor_mean(ad.log(clamped))), n


def discriminator_gan_loss(d_real: ad.Tensor, d_fake: ad.Tensor, eps: float = 1e-7):
    """-E[log D(real)] - E[log(1 - D(fake))]; returns (loss, clamps)."""
    cr, n1 = ad.clamp(d_real, eps, 1.0 - eps)
    cf, n2 = ad.clamp(ad.add(ad.negate(d_fake), ad.Tensor(np.asarray(1.0, dtype=d_fake.dtype))),
                      eps, 1.0 - eps)
    loss = ad.negate(ad.add(ad.tensor_mean(ad.log(cr)), ad.tensor_mean(ad.log(cf))))
    return loss, n1 + n2


# ---------------------------------------------------------------------------
# configuration and schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-4
    lr_decay: float = 0.1
    lr_decay_every: int = 100
    warmup_epochs: int = 5
    mode: str = "two-phase"          # or "random-dice"
    dice_gan_prob: float = 0.5
    post_warmup_mse: float = 10.0    # recorded-view MSE weight during adversarial phase
    novel_views: int = 1             # random-azimuth renders per item fed to the discriminator
    lambda_time_reg: float = 0.0
    time_reg_points: int = 128
    n_samples: int = 12
    sample_mode: str = "stratified"
    scale_range: tuple = (0.3, 1.0)
    patch: int = 32
    seed: int = 0
    early_stop_mse: float | None = None   # stop when epoch-mean patch MSE dips below
    early_stop_min_epochs: int = 0
    checkpoint_every: int = 0             # epochs; 0 = only at the end

    def __post_init__(self):
        if self.mode not in ("two-phase", "random-dice"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.warmup_epochs < 0:
            raise ValueError("epochs and batch size must be positive, warmup non-negative")
        if not (0.0 <= self.dice_gan_prob <= 1.0):
            raise ValueError("dice_gan_prob must lie in [0, 1]")
        if self.lr <= 0 or not (0 < self.lr_decay <= 1) or self.lr_decay_every < 1:
            raise ValueError("learning-rate schedule parameters out of range")
        if self.novel_views < 0:
            raise ValueError("novel_views must be non-negative")
        if self.sample_mode not in ("uniform", "stratified"):
            raise ValueError(f"unknown sample mode {self.sample_mode!r}")


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Step decay: multiply by lr_decay after every lr_decay_every epochs."""
    return cfg.lr * cfg.lr_decay ** ((epoch - 1) // cfg.lr_decay_every)


def iteration_phase(cfg: TrainConfig, epoch: int, dice_rng: np.random.Generator) -> str:
    """The per-iteration loss choice the trainer consults (``mse``/``gan``).

    Warmup epochs are always MSE and never touch the discriminator; the
    dice stream is consumed only when a dice decision is actually made,
    so replaying this function reproduces a training run's schedule.
    """
    if epoch <= cfg.warmup_epochs:
        return "mse"
    if cfg.mode == "random-dice":
        return "gan" if dice_rng.uniform() < cfg.dice_gan_prob else "mse"
    return "gan"


# ---------------------------------------------------------------------------
# dataset access
# ---------------------------------------------------------------------------

@dataclass
class LoadedDataset:
    manifest: dict
    images: np.ndarray        # (E, T, V, 2, H, W), channels (A, Phi) / channel_norm
    rel_angles_deg: tuple
    timeline: np.ndarray
    norms: tuple              # (absorbance, phase)

    @property
    def n_experiments(self) -> int:
        return self.images.shape[0]

    @property
    def n_timestamps(self) -> int:
        return self.images.shape[1]

    @property
    def detector(self) -> dict:
        return self.manifest["detector"]

    def acq_spec(self) -> physics.AcquisitionSpec:
        a = self.manifest["acquisition"]
        d = self.manifest["detector"]
        return physics.AcquisitionSpec(energy_kev=a["energy_kev"], unit_m=a["unit_m"],
                                       width=d["width"], height=d["height"],
                                       pitch=d["pitch"],
                                       samples_per_ray=a["samples_per_ray"])


def load_training_dataset(dataset_dir: str) -> LoadedDataset:
    """Load the training view of a dataset: normalized projection stacks
    and relative view angles only (the manifest arrives unsealed)."""
    manifest = fileio.load_manifest(dataset_dir)
    det = manifest["detector"]
    norms = (manifest["channel_norm"]["absorbance"], manifest["channel_norm"]["phase"])
    rel = None
    stacks = []
    for exp in manifest["experiments"]:
        angles = tuple(exp["rel_angles_deg"])
        if rel is None:
            rel = angles
        elif angles != rel:
            raise fileio.OnixIOError("relative view angles differ across experiments")
        a, ch_a = fileio.read_xmpj(os.path.join(dataset_dir, exp["files"]["absorbance"]))
        p, ch_p = fileio.read_xmpj(os.path.join(dataset_dir, exp["files"]["phase"]))
        if ch_a != "absorbance" or ch_p != "phase":
            raise fileio.OnixIOError("channel tags do not match manifest roles")
        stacks.append(np.stack([a / norms[0], p / norms[1]], axis=2))
    images = np.stack(stacks, axis=0).astype(np.float32)
    if images.shape[-2:] != (det["height"], det["width"]):
        raise fileio.OnixIOError("stack raster does not match manifest detector")
    timeline = np.asarray(manifest["timeline"]["values"], dtype=np.float64)
    return LoadedDataset(manifest, images, rel, timeline, norms)


def output_scale(data: LoadedDataset) -> tuple:
    """Physical (delta, beta) per unit generator output, chosen so the
    model's plain ray sums reproduce the normalized image channels."""
    acq = data.acq_spec()
    return (data.norms[1] / acq.phase_coeff, data.norms[0] / acq.absorbance_coeff)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _render_views_at(fn, angles, spec_patch: PatchSpec, n_samples: int,
                     sample_mode: str, ray_rng, det: dict):
    """Render the patch grid at the given azimuths through a field closure.

    All views' sample points go through a single field evaluation; returns
    rendered patches (V, C, s, s) with the graph attached.
    """
    coords = spec_patch.pixel_coords()
    pts_v = []
    ds_v = []
    for rel in angles:
        pose = geo.ViewPose(rel, det["width"], det["height"], det["pitch"])
        rays = geo.detector_rays(pose, coords[:, 0], coords[:, 1])
        pts, ds = geo.sample_along_rays(rays, n_samples, sample_mode, ray_rng)
        pts_v.append(pts)
        ds_v.append(ds)
    pred = physics.integrate_rays(fn, np.concatenate(pts_v), np.concatenate(ds_v),
                                  CHANNEL_MATRIX)
    s = spec_patch.size
    return ad.transpose(ad.reshape(pred, (len(angles), s, s, 2)), (0, 3, 1, 2))


def _render_item_views(recon: Reconstructor, images_vt: np.ndarray, rel_angles,
                       t: float, spec_patch: PatchSpec, n_samples: int,
                       sample_mode: str, ray_rng, det: dict):
    """Render every recorded view of one item on the patch grid.

    Returns (rendered patches (V, C, s, s) with the graph attached, real
    patches (V, C, s, s), pyramids, field_fn).
    """
    pyramids = recon.encode_views(images_vt)
    fn = recon.field_fn(pyramids, rel_angles, t, det["width"], det["height"], det["pitch"])
    fake = _render_views_at(fn, rel_angles, spec_patch, n_samples,
                            sample_mode, ray_rng, det)
    reals = np.stack([extract_patch(images_vt[vi], spec_patch)
                      for vi in range(len(rel_angles))])
    return fake, reals, pyramids, fn


def train(dataset_dir: str, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
          out_dir: str | None = None):
    """Train a reconstructor on a dataset directory.

    Returns (reconstructor, summary dict).  ``out_dir`` receives the
    checkpoint (``model.ckpt``), the model config (``model_config.json``)
    and a JSONL training log (``train_log.jsonl``).
    """
    data = load_training_dataset(dataset_dir)
    det = data.detector
    mcfg = replace(model_cfg or ModelConfig(), out_scale=output_scale(data))
    recon = Reconstructor(mcfg, seed=cfg.seed)

    opt_enc = ad.Adam(recon.enc, cfg.lr)
    opt_gen = ad.Adam(recon.gen, cfg.lr)
    opt_disc = ad.Adam(recon.disc, cfg.lr)

    item_rng = _stream(cfg.seed, "items")
    patch_rng = _stream(cfg.seed, "patches")
    ray_rng = _stream(cfg.seed, "rays")
    dice_rng = _stream(cfg.seed, "dice")
    reg_rng = _stream(cfg.seed, "time-reg")
    novel_rng = _stream(cfg.seed, "novel-views")

    n_items = data.n_experiments * data.n_timestamps
    iters_per_epoch = max(1, math.ceil(n_items / cfg.batch_size))
    log_f = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_f = open(os.path.join(out_dir, "train_log.jsonl"), "w", encoding="utf-8")

    d_updates = 0
    skipped = 0
    t_start = time.time()
    history = []
    stopped_early = False
    epochs_run = 0

    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at_epoch(cfg, epoch)
        opt_enc.lr = opt_gen.lr = opt_disc.lr = lr
        epoch_mse = []
        for it in range(iters_per_epoch):
            phase = iteration_phase(cfg, epoch, dice_rng)
            recon.enc.zero_grad()
            recon.gen.zero_grad()
            fake_stash = []
            real_stash = []
            iter_mse = []
            iter_g = []
            clamped = 0
            for _ in range(cfg.batch_size):
                e = int(item_rng.integers(data.n_experiments))
                ti = int(item_rng.integers(data.n_timestamps))
                spec_patch = sample_patch(patch_rng, det["width"], det["height"],
                                          cfg.scale_range, cfg.patch)
                fake, reals, pyramids, fn = _render_item_views(
                    recon, data.images[e, ti], data.rel_angles_deg,
                    float(data.timeline[ti]), spec_patch,
                    cfg.n_samples, cfg.sample_mode, ray_rng, det)

                mse_t = mse_loss(ad.reshape(fake, (-1,)), reals.reshape(-1))
                iter_mse.append(float(mse_t.data))

                if phase == "mse":
                    loss = mse_t
                else:
                    if cfg.novel_views > 0:
                        novel = novel_rng.uniform(0.0, 180.0, size=cfg.novel_views)
                        gan_fake = _render_views_at(fn, novel, spec_patch,
                                                    cfg.n_samples, cfg.sample_mode,
                                                    ray_rng, det)
                    else:
                        gan_fake = fake
                    d_fake = discriminate(recon.disc, gan_fake, mcfg)
                    g_loss, n_cl = generator_gan_loss(d_fake)
                    clamped += n_cl
                    iter_g.append(float(g_loss.data))
                    loss = g_loss
                    if cfg.post_warmup_mse > 0:
                        loss = ad.add(loss, ad.mul(mse_t, ad.Tensor(
                            np.asarray(cfg.post_warmup_mse, dtype=mse_t.dtype))))
                    fake_stash.append(gan_fake.data)
                    real_stash.append(reals)

                if cfg.lambda_time_reg > 0 and data.n_timestamps > 1:
                    tj = ti + 1 if ti + 1 < data.n_timestamps else ti - 1
                    pts = reg_rng.uniform(-1.0, 1.0, size=(cfg.time_reg_points, 3))
                    pyr2 = recon.encode_views(data.images[e, tj])
                    fn2 = recon.field_fn(pyr2, data.rel_angles_deg,
                                         float(data.timeline[tj]),
                                         det["width"], det["height"], det["pitch"])
                    dv = ad.add(fn(pts), ad.negate(fn2(pts)))
                    reg = ad.tensor_mean(ad.mul(dv, dv))
                    loss = ad.add(loss, ad.mul(reg, ad.Tensor(
                        np.asarray(cfg.lambda_time_reg, dtype=reg.dtype))))

                loss = ad.mul(loss, ad.Tensor(np.asarray(1.0 / cfg.batch_size, dtype=loss.dtype)))
                if not np.isfinite(loss.data):
                    skipped += 1
                    continue
                ad.backward(loss)

            if phase == "gan" and fake_stash:
                recon.disc.zero_grad()
                fake_batch = np.concatenate(fake_stash, axis=0)
                real_batch = np.concatenate(real_stash, axis=0).astype(recon.disc.dtype.type)
                d_real = discriminate(recon.disc, ad.Tensor(real_batch), mcfg)
                d_fake = discriminate(recon.disc, ad.Tensor(fake_batch), mcfg)
                d_loss, n_cl = discriminator_gan_loss(d_real, d_fake)
                clamped += n_cl
                if np.isfinite(d_loss.data):
                    ad.backward(d_loss)
                    opt_disc.step()
                    d_updates += 1
                else:
                    skipped += 1
                d_loss_val = float(d_loss.data)
            else:
                d_loss_val = None

            opt_gen.step()
            opt_enc.step()

            mean_mse = float(np.mean(iter_mse)) if iter_mse else float("nan")
            epoch_mse.append(mean_mse)
            if log_f is not None:
                rec = {"epoch": epoch, "iter": it, "phase": phase, "lr": lr,
                       "mse": mean_mse,
                       "g_loss": float(np.mean(iter_g)) if iter_g else None,
                       "d_loss": d_loss_val, "d_updates": d_updates,
                       "clamped": clamped, "skipped": skipped}
                log_f.write(json.dumps(rec) + "\n")

        epochs_run = epoch
        history.append({"epoch": epoch, "mse": float(np.mean(epoch_mse)), "lr": lr})
        if log_f is not None:
            log_f.flush()
        if out_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            fileio.save_checkpoint(os.path.join(out_dir, "model.ckpt"), recon.state_dict())
        if (cfg.early_stop_mse is not None
                and epoch > max(cfg.warmup_epochs, cfg.early_stop_min_epochs)
                and float(np.mean(epoch_mse)) < cfg.early_stop_mse):
            stopped_early = True
            break

    if log_f is not None:
        log_f.close()
    summary = {"epochs_run": epochs_run, "iters_per_epoch": iters_per_epoch,
               "d_updates": d_updates, "skipped": skipped,
               "adam_skipped": opt_enc.skipped + opt_gen.skipped + opt_disc.skipped,
               "stopped_early": stopped_early,
               "wall_time_s": time.time() - t_start, "history": history}
    if out_dir is not None:
        fileio.save_checkpoint(os.path.join(out_dir, "model.ckpt"), recon.state_dict())
        recon.save_config(os.path.join(out_dir, "model_config.json"), extra={
            "dataset": {"rel_angles_deg": list(data.rel_angles_deg),
                        "detector": det,
                        "channel_norm": {"absorbance": data.norms[0], "phase": data.norms[1]},
                        "timeline": data.manifest["timeline"]},
            "train": dataclasses.asdict(cfg),
            "summary": {k: v for k, v in summary.items() if k != "history"},
        })
        with open(os.path.join(out_dir, "train_summary.json"), "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
            f.write("\n")
    return recon, summary


# ---------------------------------------------------------------------------
# evaluation against sealed ground truth
# ---------------------------------------------------------------------------

def ground_truth_volume(scenario, azimuth_deg: float, t: float, n: int,
                        bounds=geo.DEFAULT_BOUNDS) -> np.ndarray:
    """Voxelize the true occupancy in the reconstruction frame.

    The model reconstructs in its first view's frame; a point x there
    corresponds to the world point R_z(azimuth) x, so the true field is
    sampled at rotated grid centers.
    """
    pts = geo.grid_centers(n, bounds).reshape(-1, 3)
    world = geo.rotate_z(pts, azimuth_deg)
    vals = scenario.field(t)(world)[:, 0] / scenario.material.delta0
    return vals.reshape(n, n, n)


def evaluate_model(dataset_dir: str, recon: Reconstructor, grid_n: int = 32,
                   experiments=None, t_indices=None, compute_fsc: bool = True) -> dict:
    """Compare reconstructed volumes against the sealed ground truth.

    This is the only training-adjacent code path that opens the sealed
    manifest section (absolute azimuths and per-experiment parameters).
    All metrics are computed on occupancy-normalized delta volumes; the
    unseen-view check projects both volumes along z (the top view, which
    no side-on acquisition ever records).
    """
    manifest = fileio.load_manifest(dataset_dir, include_eval=True)
    if "eval_only" not in manifest:
        raise fileio.OnixIOError("dataset has no sealed evaluation section")
    data = load_training_dataset(dataset_dir)
    det = data.detector
    sealed = manifest["eval_only"]
    experiments = range(data.n_experiments) if experiments is None else experiments
    t_indices = range(data.n_timestamps) if t_indices is None else t_indices

    records = []
    for e in experiments:
        scn = phantom.scenario_from_dict(manifest["scenario_type"], sealed["scenarios"][e])
        phi1 = sealed["azimuths_deg"][e]
        for ti in t_indices:
            t = float(data.timeline[ti])
            vol = recon.volume(data.images[e, ti], data.rel_angles_deg, t,
                               grid_n, det["pitch"])
            pred = vol[..., 0] / scn.material.delta0
            gt = ground_truth_volume(scn, phi1, t, grid_n)
            rec = {"experiment": int(e), "t_index": int(ti), "t": t,
                   "mse": met.mse(pred, gt),
                   "dssim": met.dssim_slices(pred, gt, data_range=1.0),
                   "top_dssim": met.dssim(pred.sum(axis=2), gt.sum(axis=2),
                                          data_range=float(gt.sum(axis=2).max()) or 1.0)}
            if compute_fsc:
                res = met.resolution_half_bit(met.fsc(pred, gt))
                rec["fsc_resolution_voxels"] = res.resolution_voxels
                rec["fsc_at_limit"] = res.at_limit
            records.append(rec)

    def agg(key):
        vals = [r[key] for r in records if r.get(key) is not None]
        return float(np.mean(vals)) if vals else None

    summary = {"mse": agg("mse"), "dssim": agg("dssim"), "top_dssim": agg("top_dssim")}
    if compute_fsc:
        summary["fsc_resolution_voxels"] = agg("fsc_resolution_voxels")
    return {"records": records, "summary": summary, "grid_n": grid_n}
