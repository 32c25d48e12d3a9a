"""Iterative algebraic reconstruction (SART) as a dense-view baseline.

The forward projector uses the same parallel-beam geometry and midpoint
quadrature as the physics simulator: rays are clipped to the volume box
and sampled at equal steps, and the volume is read by trilinear
interpolation.  Because every view axis lies in the x-y plane and the
detector rows coincide with the volume's z layers (square detector,
matched pitch), each ray stays inside one z layer; the projector then
factorizes into a per-angle 2-d weight matrix applied to every layer at
once, which is what makes a 180-view reconstruction affordable without
changing the math.

SART sweeps one view at a time: the residual of each ray is divided by
its chord weight (the row sum of the weight matrix), back-distributed
with the transposed weights, normalized per voxel, scaled by a
relaxation factor, and optionally clamped non-negative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo


@dataclass(frozen=True)
class SartConfig:
    iterations: int = 20
    relaxation: float = 0.5
    nonneg: bool = True
    samples_per_ray: int | None = None   # default: 2 * grid size

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("need at least one iteration")
        if not (0 < self.relaxation <= 2.0):
            raise ValueError("relaxation must lie in (0, 2]")


def _clip_2d(origins: np.ndarray, direction: np.ndarray, lo: float, hi: float):
    """Slab clip of parallel 2-d rays against the square [lo, hi]^2."""
    t0 = np.full(origins.shape[0], -np.inf)
    t1 = np.full(origins.shape[0], np.inf)
    miss = np.zeros(origins.shape[0], dtype=bool)
    for k in range(2):
        if abs(direction[k]) > 1e-12:
            ta = (lo - origins[:, k]) / direction[k]
            tb = (hi - origins[:, k]) / direction[k]
            t0 = np.maximum(t0, np.minimum(ta, tb))
            t1 = np.minimum(t1, np.maximum(ta, tb))
        else:
            miss |= (origins[:, k] < lo) | (origins[:, k] > hi)
    miss |= t1 <= t0
    return np.where(miss, 0.0, t0), np.where(miss, 0.0, t1)


def projection_matrix(angle_deg: float, n: int, width: int, pitch: float,
                      bounds=geo.DEFAULT_BOUNDS, samples: int | None = None) -> np.ndarray:
    """Per-angle ray weights: (width, n*n) mapping an x-y layer (flattened
    [ix * n + iy]) to detector columns.  Row sums approximate ray chord
    lengths; trilinear support fades over the outermost half-cell, so the
    approximation tightens as the grid is refined."""
    lo, hi = bounds[0]
    if bounds[1] != bounds[0]:
        raise ValueError("factorized projector needs a square x-y box")
    if samples is None:
        samples = 2 * n
    a = np.deg2rad(angle_deg)
    axis = np.array([np.cos(a), np.sin(a)])
    u_dir = np.array([-np.sin(a), np.cos(a)])
    u = (np.arange(width) - (width - 1) / 2.0) * pitch
    origins = u[:, None] * u_dir[None, :]
    t0, t1 = _clip_2d(origins, axis, lo, hi)
    ds = (t1 - t0) / samples
    t = t0[:, None] + (np.arange(samples)[None, :] + 0.5) * ds[:, None]
    pts = origins[:, None, :] + t[..., None] * axis[None, None, :]
    h = (hi - lo) / n
    g = (pts - lo) / h - 0.5
    i0 = np.floor(g).astype(np.int64)
    f = g - i0
    rows = np.repeat(np.arange(width), samples)
    p = np.zeros((width, n * n))
    wds = np.repeat(ds, samples)
    for corner in range(4):
        off = np.array([(corner >> 1) & 1, corner & 1])
        idx = i0 + off
        w = np.prod(np.where(off, f, 1.0 - f), axis=2)
        valid = np.all((idx >= 0) & (idx < n), axis=2)
        cells = np.clip(idx[..., 0], 0, n - 1) * n + np.clip(idx[..., 1], 0, n - 1)
        np.add.at(p, (rows, cells.ravel()), (w * valid).ravel() * wds)
    return p


def _check_matched(volume_n: int, height: int, pitch: float, bounds) -> None:
    lo, hi = bounds[2]
    if height != volume_n or abs(pitch * volume_n - (hi - lo)) > 1e-9 * (hi - lo):
        raise ValueError("detector rows must align with volume z layers "
                         f"(height {height} vs grid {volume_n}, pitch {pitch})")


def forward_project(volume: np.ndarray, angles_deg, width: int | None = None,
                    pitch: float | None = None, bounds=geo.DEFAULT_BOUNDS,
                    samples: int | None = None) -> np.ndarray:
    """Line integrals of a volume for each azimuth; returns (V, H, W).

    H equals the volume's z dimension (one detector row per layer); the
    values are plain integrals of the voxel field along the rays.
    """
    vol = np.asarray(volume, dtype=np.float64)
    n = vol.shape[0]
    if vol.shape != (n, n, n):
        raise ValueError(f"volume must be cubic, got {vol.shape}")
    if width is None:
        width = n
    if pitch is None:
        pitch = (bounds[0][1] - bounds[0][0]) / n
    _check_matched(n, n, pitch, bounds)
    v2 = vol.reshape(n * n, n)
    out = np.empty((len(angles_deg), n, width))
    for vi, ang in enumerate(angles_deg):
        p = projection_matrix(float(ang), n, width, pitch, bounds, samples)
        proj = p @ v2                      # (W, nz)
        out[vi] = proj[:, ::-1].T          # detector row 0 is the top (+z)
    return out


def sart_reconstruct(projections: np.ndarray, angles_deg, grid_n: int,
                     cfg: SartConfig = SartConfig(), pitch: float | None = None,
                     bounds=geo.DEFAULT_BOUNDS, callback=None) -> np.ndarray:
    """SART reconstruction of (V, H, W) line-integral projections.

    ``angles_deg`` are the absolute view azimuths (the baseline assumes a
    completely known geometry, unlike the learned reconstruction).
    """
    meas = np.asarray(projections, dtype=np.float64)
    if meas.ndim != 3 or len(angles_deg) != meas.shape[0]:
        raise ValueError("projections must be (V, H, W) matching the angle list")
    n = grid_n
    _, height, width = meas.shape
    if pitch is None:
        pitch = (bounds[0][1] - bounds[0][0]) / n
    _check_matched(n, height, pitch, bounds)

    vol = np.zeros((n, n, n))
    eps = 1e-12
    for it in range(cfg.iterations):
        for vi, ang in enumerate(angles_deg):
            p = projection_matrix(float(ang), n, width, pitch, bounds, cfg.samples_per_ray)
            row_sum = p.sum(axis=1)                    # chord length per ray
            col_sum = p.sum(axis=0)                    # voxel weight per layer cell
            v2 = vol.reshape(n * n, n)
            proj = p @ v2
            resid = meas[vi].T[:, ::-1] - proj         # (W, nz), layer-ordered
            resid /= np.maximum(row_sum, eps)[:, None]
            resid[row_sum <= eps] = 0.0
            update = p.T @ resid                       # (n*n, nz)
            update /= np.maximum(col_sum, eps)[:, None]
            update[col_sum <= eps] = 0.0
            vol += cfg.relaxation * update.reshape(n, n, n)
            if cfg.nonneg:
                np.maximum(vol, 0.0, out=vol)
        if callback is not None:
            callback(it, vol)
    return vol


def projection_consistency(volume: np.ndarray, projections: np.ndarray,
                           angles_deg, pitch: float | None = None,
                           bounds=geo.DEFAULT_BOUNDS) -> float:
    """Relative forward-model mismatch: ||P(vol) - meas|| / ||meas||."""
    re_proj = forward_project(volume, angles_deg, projections.shape[2], pitch, bounds)
    norm = np.linalg.norm(projections)
    if norm == 0:
        return float(np.linalg.norm(re_proj))
    return float(np.linalg.norm(re_proj - projections) / norm)
