"""Time-resolved test objects: colliding droplets and a melt pool.

A phantom is a family of fields over normalized time t in [0, 1].  A
field slice is a plain callable mapping world points (N, 3) to per-point
(delta, beta) pairs (N, 2): the refractive decrement and the absorption
index of the material, scaled by a smooth occupancy in [0, 1].

The droplet scenario runs three stages: linear approach of two spherical
droplets, bridging through a smooth (metaball) union while they overlap,
then a crossfade into a single volume-matched ellipsoid whose elongation
rings down as a damped oscillation.  All shape boundaries are smoothed
over a band of width ``kappa`` so projections and voxelizations are
resolution-friendly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


# ---------------------------------------------------------------------------
# scalar field building blocks
# ---------------------------------------------------------------------------

def smoothstep(edge0: float, edge1: float, x):
    t = np.clip((np.asarray(x, dtype=np.float64) - edge0) / (edge1 - edge0), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def smooth_union(d1, d2, k: float):
    """Polynomial smooth minimum of two signed distances (blend radius k)."""
    if k <= 0:
        return np.minimum(d1, d2)
    h = np.clip(0.5 + 0.5 * (d2 - d1) / k, 0.0, 1.0)
    return d2 * (1.0 - h) + d1 * h - k * h * (1.0 - h)


def smooth_subtract(d_keep, d_cut, k: float):
    """Smooth subtraction: keep ``d_keep`` outside of ``d_cut``."""
    return -smooth_union(-np.asarray(d_keep), np.asarray(d_cut), k)


def occupancy_from_distance(d, kappa: float):
    """1 inside (d <= -kappa/2), 0 outside, smooth across the band."""
    return 1.0 - smoothstep(-kappa / 2.0, kappa / 2.0, np.asarray(d))


def sphere_distance(points: np.ndarray, center, radius: float):
    return np.linalg.norm(points - np.asarray(center, dtype=np.float64), axis=-1) - radius


def ellipsoid_distance(points: np.ndarray, center, axes):
    """First-order signed distance to an axis-aligned ellipsoid (exact on
    the surface, approximate elsewhere; adequate for occupancy bands)."""
    q = (points - np.asarray(center, dtype=np.float64)) / np.asarray(axes, dtype=np.float64)
    k0 = np.linalg.norm(q, axis=-1)
    k1 = np.linalg.norm(q / np.asarray(axes, dtype=np.float64), axis=-1)
    safe = np.maximum(k1, 1e-12)
    return np.where(k0 < 1e-12, -np.min(axes), k0 * (k0 - 1.0) / safe)


def box_distance(points: np.ndarray, center, half):
    q = np.abs(points - np.asarray(center, dtype=np.float64)) - np.asarray(half, dtype=np.float64)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Material:
    """Complex refractive index deviation 1 - delta + i*beta."""

    delta0: float = 1.0e-6
    beta0: float = 1.0e-9

    def __post_init__(self):
        if self.delta0 <= 0 or self.beta0 <= 0:
            raise ValueError("material coefficients must be positive")


@dataclass(frozen=True)
class DropletScenario:
    """Two droplets colliding along x, merging into an oscillating blob."""

    r1: float = 0.32
    r2: float = 0.26
    speed1: float = 0.45
    speed2: float = 0.45
    start_x1: float = -0.52
    start_x2: float = 0.52
    impact_y: float = 0.0
    kappa: float = 0.06
    smooth_k: float = 0.08
    merge_window: float = 0.16
    blend_window: float = 0.10
    osc_amp: float = 0.35
    osc_damping: float = 4.0
    osc_period: float = 0.28
    material: Material = field(default_factory=Material)

    def __post_init__(self):
        if min(self.r1, self.r2) <= 0:
            raise ValueError("droplet radii must be positive")
        if self.kappa <= 0 or self.kappa >= min(self.r1, self.r2):
            raise ValueError("boundary band must satisfy 0 < kappa < min radius")
        if self.speed1 < 0 or self.speed2 < 0 or self.speed1 + self.speed2 <= 0:
            raise ValueError("droplets must approach each other")
        if self.start_x2 - self.start_x1 <= self.r1 + self.r2:
            raise ValueError("droplets must start separated")

    @property
    def t_contact(self) -> float:
        gap = (self.start_x2 - self.start_x1) - (self.r1 + self.r2)
        return gap / (self.speed1 + self.speed2)

    @property
    def t_merge(self) -> float:
        return self.t_contact + self.merge_window

    @property
    def merged_radius(self) -> float:
        return (self.r1 ** 3 + self.r2 ** 3) ** (1.0 / 3.0)

    def centers(self, t: float):
        c1 = np.array([self.start_x1 + self.speed1 * t, self.impact_y / 2.0, 0.0])
        c2 = np.array([self.start_x2 - self.speed2 * t, -self.impact_y / 2.0, 0.0])
        return c1, c2

    def merged_center(self, t: float) -> np.ndarray:
        m1, m2 = self.r1 ** 3, self.r2 ** 3
        c1, c2 = self.centers(self.t_merge)
        com = (m1 * c1 + m2 * c2) / (m1 + m2)
        v_com = (m1 * self.speed1 - m2 * self.speed2) / (m1 + m2)
        return com + np.array([v_com * max(t - self.t_merge, 0.0), 0.0, 0.0])

    def elongation(self, t: float) -> float:
        tau = max(t - self.t_merge, 0.0)
        return self.osc_amp * np.exp(-self.osc_damping * tau) * np.cos(2 * np.pi * tau / self.osc_period)

    def distance(self, points: np.ndarray, t: float) -> np.ndarray:
        c1, c2 = self.centers(t)
        d_pair = smooth_union(sphere_distance(points, c1, self.r1),
                              sphere_distance(points, c2, self.r2), self.smooth_k)
        if t < self.t_merge:
            return d_pair
        eps = self.elongation(t)
        axes = self.merged_radius * np.array([1.0 + eps,
                                              1.0 / np.sqrt(1.0 + eps),
                                              1.0 / np.sqrt(1.0 + eps)])
        d_blob = ellipsoid_distance(points, self.merged_center(t), axes)
        w = smoothstep(self.t_merge, self.t_merge + self.blend_window, t)
        return (1.0 - w) * d_pair + w * d_blob

    def field(self, t: float):
        """Field slice at time t: points (N, 3) -> (delta, beta) (N, 2)."""
        coeff = np.array([self.material.delta0, self.material.beta0])

        def sample(points: np.ndarray) -> np.ndarray:
            occ = occupancy_from_distance(self.distance(np.asarray(points, dtype=np.float64), t),
                                          self.kappa)
            return occ[..., None] * coeff

        return sample


@dataclass(frozen=True)
class MeltScenario:
    """A solid block carved by a deepening, laterally scanning cavity."""

    block_center: tuple = (0.0, 0.0, -0.35)
    block_half: tuple = (0.85, 0.85, 0.45)
    cavity_width: float = 0.20
    cavity_depth_max: float = 0.55
    scan_from: float = -0.45
    scan_to: float = 0.45
    kappa: float = 0.05
    smooth_k: float = 0.06
    material: Material = field(default_factory=lambda: Material(3.0e-6, 1.0e-7))

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("boundary band must be positive")
        if self.cavity_width <= 0 or self.cavity_depth_max <= 0:
            raise ValueError("cavity dimensions must be positive")

    def distance(self, points: np.ndarray, t: float) -> np.ndarray:
        d_block = box_distance(points, self.block_center, self.block_half)
        z_top = self.block_center[2] + self.block_half[2]
        depth = 0.05 + 0.5 * self.cavity_depth_max * smoothstep(0.0, 1.0, t)
        x_c = self.scan_from + (self.scan_to - self.scan_from) * t
        center = (x_c, 0.0, z_top + 0.02 - depth)
        axes = (self.cavity_width, self.cavity_width, depth)
        d_cavity = ellipsoid_distance(points, center, axes)
        return smooth_subtract(d_block, d_cavity, self.smooth_k)

    def field(self, t: float):
        coeff = np.array([self.material.delta0, self.material.beta0])

        def sample(points: np.ndarray) -> np.ndarray:
            occ = occupancy_from_distance(self.distance(np.asarray(points, dtype=np.float64), t),
                                          self.kappa)
            return occ[..., None] * coeff

        return sample


# ---------------------------------------------------------------------------
# experiment sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentSet:
    """A collection of repeated acquisitions of one scenario.

    ``rel_angles_deg`` are the view azimuths relative to the first view
    (so they start at 0); the absolute orientation of each experiment is
    drawn at random unless ``azimuths_deg`` pins it, and is stored only
    in the sealed evaluation section of the dataset manifest.
    ``jitter`` scales droplet radii and speeds per experiment by a
    uniform factor in [1 - jitter, 1 + jitter]; it must be zero for kind
    "reproducible" and positive for "quasi-reproducible".
    """

    kind: str = "reproducible"
    n_experiments: int = 16
    n_timestamps: int = 24
    rel_angles_deg: tuple = (0.0, 23.8)
    jitter: float = 0.0
    azimuths_deg: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("reproducible", "quasi-reproducible"):
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        if self.kind == "reproducible" and self.jitter != 0.0:
            raise ValueError("reproducible sets must not jitter scenario parameters")
        if self.kind == "quasi-reproducible" and not (0.0 < self.jitter < 1.0):
            raise ValueError("quasi-reproducible sets need jitter in (0, 1)")
        if self.n_experiments < 1 or self.n_timestamps < 1:
            raise ValueError("need at least one experiment and one timestamp")
        angles = tuple(float(a) for a in self.rel_angles_deg)
        if len(angles) < 2:
            raise ValueError("need at least two views per timestamp")
        if angles[0] != 0.0 or any(b <= a for a, b in zip(angles, angles[1:])):
            raise ValueError("relative view angles must start at 0 and increase")
        if any(not np.isfinite(a) or a >= 180.0 for a in angles):
            raise ValueError("relative view angles must lie in [0, 180)")
        if self.azimuths_deg is not None and len(self.azimuths_deg) != self.n_experiments:
            raise ValueError("azimuths_deg must list one angle per experiment")

    @property
    def n_views(self) -> int:
        return len(self.rel_angles_deg)

    def timeline(self) -> np.ndarray:
        if self.n_timestamps == 1:
            return np.zeros(1)
        return np.linspace(0.0, 1.0, self.n_timestamps)

    def experiment_azimuth(self, exp_id: int) -> float:
        if self.azimuths_deg is not None:
            return float(self.azimuths_deg[exp_id])
        rng = np.random.default_rng((self.seed, 0xA217, exp_id))
        return float(rng.uniform(0.0, 180.0))

    def experiment_scenario(self, base: DropletScenario, exp_id: int) -> DropletScenario:
        if self.jitter == 0.0:
            return base
        rng = np.random.default_rng((self.seed, 0x5C31, exp_id))
        f = rng.uniform(1.0 - self.jitter, 1.0 + self.jitter, size=4)
        return replace(base, r1=base.r1 * f[0], r2=base.r2 * f[1],
                       speed1=base.speed1 * f[2], speed2=base.speed2 * f[3])


def scenario_from_dict(type_name: str, d: dict):
    """Rebuild a scenario from its manifest serialization."""
    kinds = {"DropletScenario": DropletScenario, "MeltScenario": MeltScenario}
    if type_name not in kinds:
        raise ValueError(f"unknown scenario type {type_name!r}")
    d = dict(d)
    d["material"] = Material(**d["material"])
    for key, val in d.items():
        if isinstance(val, list):
            d[key] = tuple(val)
    return kinds[type_name](**d)


# ---------------------------------------------------------------------------
# voxelization
# ---------------------------------------------------------------------------

def voxelize(field_slice, n: int, bounds=None, chunk: int = 65536) -> np.ndarray:
    """Evaluate a field slice at the centers of an n^3 grid.

    Returns (n, n, n, 2) with the (delta, beta) channels last; indexing
    follows [ix, iy, iz] with coordinates increasing along each axis.
    """
    from .geometry import DEFAULT_BOUNDS, grid_centers

    if bounds is None:
        bounds = DEFAULT_BOUNDS
    pts = grid_centers(n, bounds).reshape(-1, 3)
    out = np.empty((pts.shape[0], 2), dtype=np.float64)
    for lo in range(0, pts.shape[0], chunk):
        hi = min(lo + chunk, pts.shape[0])
        out[lo:hi] = field_slice(pts[lo:hi])
    return out.reshape(n, n, n, 2)
