"""Pixel-aligned implicit reconstruction model.

The model turns the views recorded at one timestamp into a continuous
(delta, beta) field.  A small residual conv encoder produces a feature
pyramid per view; a query point is projected into each view, features
are sampled bilinearly at its pixel footprint, and a generator MLP first
processes each view branch with shared weights, averages the branches,
and finishes with further residual blocks and a softplus head so both
outputs stay non-negative.  A strided conv classifier (a patch
discriminator) scores 32x32 projection patches for adversarial training.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry as geo


@dataclass(frozen=True)
class ModelConfig:
    image_channels: int = 2
    enc_channels: tuple = (16, 32, 64)
    gen_width: int = 64
    n_view_blocks: int = 3
    n_post_blocks: int = 2
    freq_xyz: int = 6
    freq_t: int = 2
    use_time: bool = True
    disc_channels: tuple = (32, 64)
    patch: int = 32
    leaky_slope: float = 0.2
    head_bias: float = -3.5         # softplus pre-activation shift: start near empty
    out_scale: tuple = (1.0, 1.0)   # generator units -> physical (delta, beta)

    def __post_init__(self):
        if len(self.enc_channels) < 1:
            raise ValueError("encoder needs at least one stage")
        if self.n_view_blocks < 1 or self.n_post_blocks < 0:
            raise ValueError("generator needs at least one per-view block")

    @property
    def feature_dim(self) -> int:
        return sum(self.enc_channels)

    @property
    def coord_dim(self) -> int:
        d = 3 + 6 * self.freq_xyz
        if self.use_time:
            d += 1 + 2 * self.freq_t
        return d


def fourier_embed(points: np.ndarray, t: float | None, cfg: ModelConfig,
                  dtype=np.float32) -> np.ndarray:
    """Positional encoding of xyz (and optionally time) as a constant."""
    p = np.asarray(points, dtype=np.float64)
    parts = [p]
    for j in range(cfg.freq_xyz):
        w = (2.0 ** j) * np.pi
        parts.append(np.sin(w * p))
        parts.append(np.cos(w * p))
    if cfg.use_time:
        if t is None:
            raise ValueError("model is time-conditioned but no t given")
        tc = np.full((p.shape[0], 1), float(t))
        parts.append(tc)
        for j in range(cfg.freq_t):
            w = (2.0 ** j) * np.pi
            parts.append(np.sin(w * tc))
            parts.append(np.cos(w * tc))
    return np.concatenate(parts, axis=1).astype(dtype)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def encode(store: ad.ParamStore, images: ad.Tensor, cfg: ModelConfig) -> list:
    """Residual conv pyramid over (M, C, H, W) images.

    Level i has 2^i-times coarser resolution and cfg.enc_channels[i]
    channels; level 0 keeps full resolution.
    """
    x = images
    feats = []
    c_in = cfg.image_channels
    for i, c_out in enumerate(cfg.enc_channels):
        stride = 1 if i == 0 else 2
        wa = store.param(f"enc.s{i}.a.w", (c_out, c_in, 3, 3))
        ba = store.param(f"enc.s{i}.a.b", (c_out,), init="zeros")
        a = ad.leaky_relu(ad.conv2d(x, wa, ba, stride=stride, padding=1), cfg.leaky_slope)
        wb = store.param(f"enc.s{i}.b.w", (c_out, c_out, 3, 3))
        bb = store.param(f"enc.s{i}.b.b", (c_out,), init="zeros")
        b = ad.conv2d(a, wb, bb, stride=1, padding=1)
        x = ad.leaky_relu(ad.add(a, b), cfg.leaky_slope)
        feats.append(x)
        c_in = c_out
    return feats


def pixel_features(pyramids: list, map_idx: np.ndarray, xy_full: np.ndarray) -> ad.Tensor:
    """Bilinear lookups at full-resolution pixel coords across all levels.

    Coarser levels are addressed by aligning pixel centers: a full-res
    position x maps to (x + 0.5)/stride - 0.5 at stride 2^level.
    """
    out = []
    base_h = pyramids[0].data.shape[2]
    for level, maps in enumerate(pyramids):
        stride = base_h // maps.data.shape[2]
        xy = (xy_full + 0.5) / stride - 0.5
        out.append(ad.bilinear_sample(maps, map_idx, xy.astype(maps.dtype)))
    return ad.concat(out, axis=1) if len(out) > 1 else out[0]


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

def _res_block(store: ad.ParamStore, x: ad.Tensor, name: str, width: int,
               slope: float) -> ad.Tensor:
    w1 = store.param(f"{name}.fc1.w", (width, width))
    b1 = store.param(f"{name}.fc1.b", (width,), init="zeros")
    w2 = store.param(f"{name}.fc2.w", (width, width))
    b2 = store.param(f"{name}.fc2.b", (width,), init="zeros")
    h = ad.linear(ad.leaky_relu(x, slope), w1, b1)
    h = ad.linear(ad.leaky_relu(h, slope), w2, b2)
    return ad.add(x, h)


def generate(store: ad.ParamStore, feats: ad.Tensor, coords_emb: np.ndarray,
             n_views: int, cfg: ModelConfig) -> ad.Tensor:
    """Map stacked per-view features to non-negative (delta, beta) units.

    ``feats`` is (V*N, F) stacked view-major; the same coordinate
    embedding (N, D) conditions every view branch.  The first
    ``n_view_blocks`` residual blocks share weights across branches (they
    are literally one set of parameters applied to all branches), then
    branches are averaged and refined.
    """
    n = coords_emb.shape[0]
    if feats.data.shape[0] != n_views * n:
        raise ad.ShapeError(f"feats rows {feats.data.shape[0]} != views {n_views} x points {n}")
    emb = np.tile(coords_emb, (n_views, 1)).astype(feats.dtype)
    x = ad.concat([ad.Tensor(emb), feats], axis=1)
    d_in = x.data.shape[1]
    w_in = store.param("gen.in.w", (d_in, cfg.gen_width))
    b_in = store.param("gen.in.b", (cfg.gen_width,), init="zeros")
    x = ad.linear(x, w_in, b_in)
    for i in range(cfg.n_view_blocks):
        x = _res_block(store, x, f"gen.view{i}", cfg.gen_width, cfg.leaky_slope)
    x = ad.reshape(x, (n_views, n, cfg.gen_width))
    x = ad.tensor_mean(x, axis=0)
    for i in range(cfg.n_post_blocks):
        x = _res_block(store, x, f"gen.post{i}", cfg.gen_width, cfg.leaky_slope)
    w_out = store.param("gen.head.w", (cfg.gen_width, 2))
    b_out = store.param("gen.head.b", (2,), init="zeros")
    pre = ad.linear(ad.leaky_relu(x, cfg.leaky_slope), w_out, b_out)
    if cfg.head_bias:
        # sparse scenes: bias the head so the initial field is almost empty
        # instead of wasting early epochs descending to the background level
        pre = ad.add(pre, ad.Tensor(np.asarray(cfg.head_bias, dtype=pre.dtype)))
    return ad.softplus(pre)


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------

def discriminate(store: ad.ParamStore, patches: ad.Tensor, cfg: ModelConfig) -> ad.Tensor:
    """Patch classifier: (B, C, 32, 32) -> sigmoid score map (B, 1, h, w)."""
    x = patches
    c_in = cfg.image_channels
    for i, c_out in enumerate(cfg.disc_channels):
        w = store.param(f"disc.c{i}.w", (c_out, c_in, 4, 4))
        b = store.param(f"disc.c{i}.b", (c_out,), init="zeros")
        x = ad.leaky_relu(ad.conv2d(x, w, b, stride=2, padding=1), cfg.leaky_slope)
        c_in = c_out
    w = store.param("disc.out.w", (1, c_in, 3, 3))
    b = store.param("disc.out.b", (1,), init="zeros")
    return ad.sigmoid(ad.conv2d(x, w, b, stride=1, padding=1))


# ---------------------------------------------------------------------------
# full reconstructor
# ---------------------------------------------------------------------------

class Reconstructor:
    """Bundles the three parameter stores and the conditioned field.

    The reconstruction frame is the frame of the first view: poses passed
    here are the *relative* view angles (first one 0), and the recovered
    field lives in that frame regardless of the unknown absolute
    orientation of the acquisition.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.enc = ad.ParamStore(seed, dtype)
        self.gen = ad.ParamStore(seed, dtype)
        self.disc = ad.ParamStore(seed, dtype)

    def stores(self) -> dict:
        return {"enc": self.enc, "gen": self.gen, "disc": self.disc}

    def encode_views(self, images: np.ndarray) -> list:
        """images: (V, C, H, W) normalized projections (numpy)."""
        return encode(self.enc, ad.Tensor(images.astype(self.enc.dtype.type)), self.cfg)

    def field_fn(self, pyramids: list, rel_angles_deg, t: float,
                 width: int, height: int, pitch: float):
        """Differentiable field in generator units: pts (N, 3) -> Tensor (N, 2)."""
        poses = [geo.ViewPose(a, width, height, pitch) for a in rel_angles_deg]
        n_views = len(poses)

        def fn(points: np.ndarray) -> ad.Tensor:
            xy_all = np.concatenate([geo.project_to_pixels(points, p)[0] for p in poses], axis=0)
            idx = np.repeat(np.arange(n_views), points.shape[0])
            feats = pixel_features(pyramids, idx, xy_all)
            emb = fourier_embed(points, t, self.cfg, dtype=feats.dtype)
            return generate(self.gen, feats, emb, n_views, self.cfg)

        return fn

    def volume(self, images: np.ndarray, rel_angles_deg, t: float, n: int,
               pitch: float, bounds=geo.DEFAULT_BOUNDS, chunk: int = 16384) -> np.ndarray:
        """Query the field on an n^3 grid; returns physical (n, n, n, 2)."""
        v, _, h, w = images.shape
        pyramids = self.encode_views(images)
        fn = self.field_fn(pyramids, rel_angles_deg, t, w, h, pitch)
        pts = geo.grid_centers(n, bounds).reshape(-1, 3)
        out = np.empty((pts.shape[0], 2), dtype=np.float64)
        for lo in range(0, pts.shape[0], chunk):
            hi = min(lo + chunk, pts.shape[0])
            out[lo:hi] = fn(pts[lo:hi]).data
        scale = np.asarray(self.cfg.out_scale, dtype=np.float64)
        return (out * scale).reshape(n, n, n, 2)

    # -- persistence ---------------------------------------------------

    def state_dict(self) -> dict:
        state = {}
        for prefix, store in self.stores().items():
            for name, tensor in store.params.items():
                state[f"{prefix}/{name}"] = tensor.data
        return state

    def load_state_dict(self, state: dict) -> None:
        for prefix, store in self.stores().items():
            sub = {k.split("/", 1)[1]: v for k, v in state.items()
                   if k.startswith(prefix + "/")}
            store.load_state_dict(sub)

    def save_config(self, path: str, extra: dict | None = None) -> None:
        payload = {"model": dataclasses.asdict(self.cfg)}
        if extra:
            payload.update(extra)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    for key in ("enc_channels", "disc_channels", "out_scale"):
        if key in d:
            d[key] = tuple(d[key])
    return ModelConfig(**d)


def load_reconstructor(config_path: str, checkpoint_path: str,
                       seed: int = 0) -> Reconstructor:
    from . import fileio

    with open(config_path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    recon = Reconstructor(config_from_dict(payload["model"]), seed=seed)
    recon.load_state_dict(fileio.load_checkpoint(checkpoint_path))
    return recon
