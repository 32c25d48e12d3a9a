"""Parallel-beam geometry: view poses, detector rays, and ray sampling.

Conventions used throughout the package:

* World coordinates are right-handed with z up; the reconstruction
  volume is an axis-aligned box, by default [-1, 1]^3.
* A view is identified by its azimuth angle phi (degrees) in the x-y
  plane.  The beam travels along ``axis = (cos phi, sin phi, 0)``; the
  detector plane is spanned by ``u = (-sin phi, cos phi, 0)`` and
  ``v = (0, 0, 1)``.
* Detector pixel (ix, iy) has ix running along u (left to right) and iy
  down the rows, so row 0 is the top of the image (+z).
* Rays are parameterised as ``origin + t * axis`` with origins in the
  plane through the world origin; t is clipped to the volume box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_BOUNDS = ((-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0))


@dataclass(frozen=True)
class ViewPose:
    """A fixed parallel-beam view: azimuth plus detector raster."""

    azimuth_deg: float
    width: int
    height: int
    pitch: float

    @property
    def axis(self) -> np.ndarray:
        a = np.deg2rad(self.azimuth_deg)
        return np.array([np.cos(a), np.sin(a), 0.0])

    @property
    def u_dir(self) -> np.ndarray:
        a = np.deg2rad(self.azimuth_deg)
        return np.array([-np.sin(a), np.cos(a), 0.0])

    @property
    def v_dir(self) -> np.ndarray:
        return np.array([0.0, 0.0, 1.0])

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"detector dims must be positive, got {self.width}x{self.height}")
        if not (np.isfinite(self.pitch) and self.pitch > 0):
            raise ValueError(f"pixel pitch must be positive, got {self.pitch}")


@dataclass
class RayBundle:
    """Parallel rays sharing one direction; t0 == t1 marks a miss."""

    origins: np.ndarray      # (N, 3)
    direction: np.ndarray    # (3,)
    t_near: np.ndarray       # (N,)
    t_far: np.ndarray        # (N,)

    def __len__(self):
        return self.origins.shape[0]

    @property
    def lengths(self) -> np.ndarray:
        return self.t_far - self.t_near


def pose_from_azimuth(azimuth_deg: float, width: int, height: int, pitch: float) -> ViewPose:
    return ViewPose(float(azimuth_deg), int(width), int(height), float(pitch))


def rotate_z(points: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate points about the z axis by ``angle_deg`` (counterclockwise)."""
    a = np.deg2rad(angle_deg)
    c, s = np.cos(a), np.sin(a)
    p = np.asarray(points, dtype=np.float64)
    out = p.copy()
    out[..., 0] = c * p[..., 0] - s * p[..., 1]
    out[..., 1] = s * p[..., 0] + c * p[..., 1]
    return out


def world_to_camera(points: np.ndarray, pose: ViewPose) -> np.ndarray:
    """Map world points to (u, v, depth) in the view frame."""
    p = np.asarray(points, dtype=np.float64)
    basis = np.stack([pose.u_dir, pose.v_dir, pose.axis], axis=1)
    return p @ basis


def camera_to_world(uvd: np.ndarray, pose: ViewPose) -> np.ndarray:
    q = np.asarray(uvd, dtype=np.float64)
    basis = np.stack([pose.u_dir, pose.v_dir, pose.axis], axis=0)
    return q @ basis


def pixel_to_uv(pose: ViewPose, ix, iy):
    """Detector indices (float allowed) to metric (u, v) on the detector."""
    u = (np.asarray(ix, dtype=np.float64) - (pose.width - 1) / 2.0) * pose.pitch
    v = ((pose.height - 1) / 2.0 - np.asarray(iy, dtype=np.float64)) * pose.pitch
    return u, v


def uv_to_pixel(pose: ViewPose, u, v):
    ix = np.asarray(u, dtype=np.float64) / pose.pitch + (pose.width - 1) / 2.0
    iy = (pose.height - 1) / 2.0 - np.asarray(v, dtype=np.float64) / pose.pitch
    return ix, iy


def project_to_pixels(points: np.ndarray, pose: ViewPose):
    """World points to (pixel xy (N,2), depth (N,)) for feature lookup."""
    uvd = world_to_camera(points, pose)
    ix, iy = uv_to_pixel(pose, uvd[..., 0], uvd[..., 1])
    return np.stack([ix, iy], axis=-1), uvd[..., 2]


def ray_box_intersection(origins: np.ndarray, direction: np.ndarray,
                         bounds=DEFAULT_BOUNDS):
    """Slab-method clip of parallel rays against an axis-aligned box.

    Returns (t_near, t_far); rays that miss the box get t_near == t_far
    == 0 so that downstream integrals evaluate to zero.
    """
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    t0 = np.full(o.shape[0], -np.inf)
    t1 = np.full(o.shape[0], np.inf)
    miss = np.zeros(o.shape[0], dtype=bool)
    for k in range(3):
        if abs(d[k]) > 1e-12:
            ta = (lo[k] - o[:, k]) / d[k]
            tb = (hi[k] - o[:, k]) / d[k]
            t0 = np.maximum(t0, np.minimum(ta, tb))
            t1 = np.minimum(t1, np.maximum(ta, tb))
        else:
            miss |= (o[:, k] < lo[k]) | (o[:, k] > hi[k])
    miss |= t1 <= t0
    t0 = np.where(miss, 0.0, t0)
    t1 = np.where(miss, 0.0, t1)
    return t0, t1


def detector_rays(pose: ViewPose, ix, iy, bounds=DEFAULT_BOUNDS) -> RayBundle:
    """Rays through the given detector positions (float indices allowed)."""
    u, v = pixel_to_uv(pose, ix, iy)
    origins = np.outer(u, pose.u_dir) + np.outer(v, pose.v_dir)
    t0, t1 = ray_box_intersection(origins, pose.axis, bounds)
    return RayBundle(origins, pose.axis, t0, t1)


def full_detector_rays(pose: ViewPose, bounds=DEFAULT_BOUNDS) -> RayBundle:
    """One ray per detector pixel, ordered row-major (iy, ix)."""
    iy, ix = np.meshgrid(np.arange(pose.height), np.arange(pose.width), indexing="ij")
    return detector_rays(pose, ix.ravel(), iy.ravel(), bounds)


def sample_along_rays(rays: RayBundle, n: int, mode: str = "uniform",
                      rng: np.random.Generator | None = None):
    """Quadrature nodes along each ray.

    ``uniform`` places midpoint-rule nodes t0 + (j + 1/2) ds; ``stratified``
    jitters each node uniformly inside its own bin (one draw per node).
    Returns (points (N, n, 3), ds (N,)) where ds is the per-ray step so
    that ``sum(f(points) * ds)`` approximates the line integral.
    """
    if n < 1:
        raise ValueError(f"need at least one sample per ray, got {n}")
    if mode not in ("uniform", "stratified"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    span = (rays.t_far - rays.t_near)
    ds = span / n
    if mode == "uniform":
        offsets = np.full((len(rays), n), 0.5)
    else:
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        offsets = rng.uniform(0.0, 1.0, size=(len(rays), n))
    t = rays.t_near[:, None] + (np.arange(n)[None, :] + offsets) * ds[:, None]
    points = rays.origins[:, None, :] + t[..., None] * rays.direction[None, None, :]
    return points, ds


def grid_centers(n: int, bounds=DEFAULT_BOUNDS) -> np.ndarray:
    """Cell-center coordinates of an n^3 voxel grid over ``bounds``;
    returned as (n, n, n, 3) indexed [ix, iy, iz]."""
    axes = [np.linspace(b[0], b[1], n, endpoint=False) + (b[1] - b[0]) / (2 * n) for b in bounds]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1)


def voxel_size(n: int, bounds=DEFAULT_BOUNDS) -> np.ndarray:
    return np.array([(b[1] - b[0]) / n for b in bounds])
