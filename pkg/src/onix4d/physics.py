"""Projection-approximation forward model and detector effects.

For a weakly scattering object described by delta (refractive decrement)
and beta (absorption index), a parallel-beam view records

* absorbance  A   = (4 pi / lambda) * integral of beta  along the ray,
* phase shift Phi = (2 pi / lambda) * integral of delta along the ray.

Line integrals are evaluated with the midpoint rule (n equal steps per
ray, optionally stratified).  The same quadrature is reused by the
algebraic baseline and by the differentiable renderer that trains the
implicit model, so all reconstruction routes share one physics.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry as geo

HC_KEV_NM = 1.23984193  # photon energy (keV) times wavelength (nm)


def wavelength_m_from_energy(energy_kev: float) -> float:
    if energy_kev <= 0:
        raise ValueError("photon energy must be positive")
    return HC_KEV_NM / energy_kev * 1e-9


@dataclass(frozen=True)
class NoiseModel:
    """Detector noise: none, additive gaussian, or poisson counting."""

    kind: str = "none"
    sigma: float = 0.0      # gaussian std on the flat-normalized intensity
    photons: float = 0.0    # poisson: mean counts at unit intensity

    def __post_init__(self):
        if self.kind not in ("none", "gaussian", "poisson"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.kind == "gaussian" and self.sigma <= 0:
            raise ValueError("gaussian noise needs sigma > 0")
        if self.kind == "poisson" and self.photons <= 0:
            raise ValueError("poisson noise needs photons > 0")


@dataclass(frozen=True)
class AcquisitionSpec:
    """Beam, detector raster, and quadrature used by the simulator.

    World geometry is dimensionless; ``unit_m`` says how many meters one
    world unit spans, which fixes the wavelength in world units and with
    it the absolute scale of A and Phi.
    """

    energy_kev: float = 10.0
    unit_m: float = 1.0e-3
    width: int = 64
    height: int = 64
    pitch: float = 2.0 / 64
    samples_per_ray: int = 128
    noise: NoiseModel = field(default_factory=NoiseModel)
    bounds: tuple = geo.DEFAULT_BOUNDS

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.pitch <= 0:
            raise ValueError("detector raster must have positive dims and pitch")
        if self.samples_per_ray < 1:
            raise ValueError("need at least one sample per ray")
        if self.unit_m <= 0:
            raise ValueError("unit_m must be positive")

    @property
    def wavelength(self) -> float:
        """Wavelength in world units."""
        return wavelength_m_from_energy(self.energy_kev) / self.unit_m

    @property
    def absorbance_coeff(self) -> float:
        return 4.0 * np.pi / self.wavelength

    @property
    def phase_coeff(self) -> float:
        return 2.0 * np.pi / self.wavelength

    def pose(self, azimuth_deg: float) -> geo.ViewPose:
        return geo.ViewPose(float(azimuth_deg), self.width, self.height, self.pitch)


@dataclass
class ProjectionImage:
    """One view at one timestamp: absorbance and phase maps (H, W)."""

    absorbance: np.ndarray
    phase: np.ndarray
    pose: geo.ViewPose
    timestamp: float

    def validate(self) -> "ProjectionImage":
        for name, img in (("absorbance", self.absorbance), ("phase", self.phase)):
            if img.shape != (self.pose.height, self.pose.width):
                raise ValueError(f"{name} shape {img.shape} does not match detector "
                                 f"{self.pose.height}x{self.pose.width}")
            if not np.all(np.isfinite(img)):
                raise ValueError(f"{name} contains non-finite pixels")
        if np.min(self.absorbance) < -1e-9:
            raise ValueError("absorbance must be non-negative")
        return self


def render_projection(field_slice, pose: geo.ViewPose, spec: AcquisitionSpec,
                      mode: str = "uniform", rng: np.random.Generator | None = None,
                      timestamp: float = 0.0, chunk_rays: int = 8192) -> ProjectionImage:
    """Render one full-detector view of a (delta, beta) field slice."""
    rays = geo.full_detector_rays(pose, spec.bounds)
    n = spec.samples_per_ray
    sums = np.zeros((len(rays), 2))
    for lo in range(0, len(rays), chunk_rays):
        hi = min(lo + chunk_rays, len(rays))
        sub = geo.RayBundle(rays.origins[lo:hi], rays.direction,
                            rays.t_near[lo:hi], rays.t_far[lo:hi])
        pts, ds = geo.sample_along_rays(sub, n, mode, rng)
        vals = field_slice(pts.reshape(-1, 3)).reshape(hi - lo, n, 2)
        sums[lo:hi] = vals.sum(axis=1) * ds[:, None]
    phase = (spec.phase_coeff * sums[:, 0]).reshape(pose.height, pose.width)
    absorb = (spec.absorbance_coeff * sums[:, 1]).reshape(pose.height, pose.width)
    return ProjectionImage(absorb, phase, pose, timestamp).validate()


def integrate_rays(field_fn, points: np.ndarray, ds: np.ndarray,
                   channel_matrix: np.ndarray | None = None) -> ad.Tensor:
    """Differentiable quadrature: sum field values along each ray.

    ``field_fn`` maps flat points (N*S, 3) to a Tensor (N*S, C); the
    result is a Tensor (N, C) of per-ray sums times the step ds, times an
    optional constant (C, C') channel mixing matrix.
    """
    n, s, _ = points.shape
    vals = field_fn(points.reshape(-1, 3))
    c = vals.data.shape[1]
    per_ray = ad.reshape(vals, (n, s, c))
    weighted = ad.mul(per_ray, ad.Tensor(ds[:, None, None].astype(vals.dtype)))
    sums = ad.tensor_sum(weighted, axis=1)
    if channel_matrix is not None:
        sums = ad.linear(sums, ad.Tensor(channel_matrix.astype(vals.dtype)))
    return sums


# ---------------------------------------------------------------------------
# detector effects and preprocessing
# ---------------------------------------------------------------------------

def intensity_from_absorbance(absorbance: np.ndarray) -> np.ndarray:
    return np.exp(-np.asarray(absorbance))


def absorbance_from_intensity(intensity: np.ndarray) -> np.ndarray:
    i = np.asarray(intensity)
    if np.any(i <= 0):
        raise ValueError("intensity must be positive to take a log")
    return -np.log(i)


def corrupt(intensity: np.ndarray, noise: NoiseModel,
            rng: np.random.Generator | None = None,
            flat: np.ndarray | None = None) -> np.ndarray:
    """Apply flat-field gain and detector noise to a clean intensity."""
    raw = np.asarray(intensity, dtype=np.float64)
    if flat is not None:
        raw = raw * np.asarray(flat, dtype=np.float64)
    if noise.kind == "none":
        return raw
    if rng is None:
        raise ValueError("noise simulation needs an rng")
    if noise.kind == "gaussian":
        scale = noise.sigma if flat is None else noise.sigma * np.asarray(flat)
        return raw + rng.normal(0.0, 1.0, size=raw.shape) * scale
    counts = rng.poisson(np.clip(raw, 0.0, None) * noise.photons)
    return counts.astype(np.float64) / noise.photons


def flat_field_correct(raw: np.ndarray, flat: np.ndarray,
                       dark: np.ndarray | None = None):
    """Normalize a raw frame by (flat - dark); returns (corrected, bad_mask)
    where bad pixels (non-positive or non-finite reference) read 1.0."""
    raw = np.asarray(raw, dtype=np.float64)
    flat = np.asarray(flat, dtype=np.float64)
    dark_a = np.zeros_like(flat) if dark is None else np.asarray(dark, dtype=np.float64)
    denom = flat - dark_a
    bad = ~np.isfinite(denom) | (denom <= 0) | ~np.isfinite(raw)
    safe = np.where(bad, 1.0, denom)
    corrected = np.where(bad, 1.0, (raw - dark_a) / safe)
    return corrected, bad


def paganin_filter(intensity: np.ndarray, delta_over_beta: float,
                   distance_m: float, wavelength_m: float, pixel_m: float) -> np.ndarray:
    """Single-material phase retrieval; returns the absorbance map.

    The flat-corrected intensity is low-pass filtered by
    1 / (1 + (delta/beta) * z * lambda * |k|^2 / (4 pi)) in Fourier space
    and then -log is taken; at zero propagation distance this reduces to
    plain -log(I).
    """
    img = np.asarray(intensity, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("paganin_filter expects a single 2-d frame")
    if np.any(img <= 0) or not np.all(np.isfinite(img)):
        raise ValueError("intensity must be positive and finite")
    if distance_m < 0 or delta_over_beta <= 0 or wavelength_m <= 0 or pixel_m <= 0:
        raise ValueError("physical parameters must be positive (distance may be 0)")
    if distance_m == 0.0:
        return -np.log(img)
    ky = 2 * np.pi * np.fft.fftfreq(img.shape[0], d=pixel_m)
    kx = 2 * np.pi * np.fft.fftfreq(img.shape[1], d=pixel_m)
    k2 = ky[:, None] ** 2 + kx[None, :] ** 2
    denom = 1.0 + delta_over_beta * distance_m * wavelength_m * k2 / (4 * np.pi)
    filtered = np.fft.ifft2(np.fft.fft2(img) / denom).real
    filtered = np.clip(filtered, 1e-12, None)
    return -np.log(filtered)


# ---------------------------------------------------------------------------
# dataset simulation
# ---------------------------------------------------------------------------

def simulate_dataset(scenario, expset, spec: AcquisitionSpec, out_dir: str,
                     seal: bool = True) -> dict:
    """Render a full experiment set to disk and return its manifest.

    Each experiment gets one absorbance and one phase stack (T, V, H, W).
    Views are posed at the experiment's absolute azimuth plus the shared
    relative angles; the absolute azimuth (and, for jittered sets, the
    per-experiment scenario parameters) go into the sealed ``eval_only``
    manifest section unless ``seal`` is False.

    Noise is applied on intensity (then converted back to absorbance);
    gaussian noise also perturbs the phase channel proportionally, while
    poisson counting leaves phase untouched.
    """
    import dataclasses

    from . import fileio
    from .phantom import DropletScenario

    if expset.jitter > 0 and not isinstance(scenario, DropletScenario):
        raise ValueError("parameter jitter is only defined for droplet scenarios")

    os.makedirs(out_dir, exist_ok=True)
    timeline = expset.timeline()
    per_exp = []
    azimuths = []
    scenarios = []
    stacks = []
    for e in range(expset.n_experiments):
        scn = (expset.experiment_scenario(scenario, e)
               if isinstance(scenario, DropletScenario) else scenario)
        phi1 = expset.experiment_azimuth(e)
        rng = np.random.default_rng((expset.seed, 0xD07A, e))
        absorb = np.zeros((len(timeline), expset.n_views, spec.height, spec.width), dtype=np.float32)
        phase = np.zeros_like(absorb)
        for ti, t in enumerate(timeline):
            field_slice = scn.field(float(t))
            for vi, rel in enumerate(expset.rel_angles_deg):
                proj = render_projection(field_slice, spec.pose(phi1 + rel), spec,
                                         timestamp=float(t))
                a, p = proj.absorbance, proj.phase
                if spec.noise.kind != "none":
                    raw = corrupt(intensity_from_absorbance(a), spec.noise, rng)
                    a = absorbance_from_intensity(np.clip(raw, 1e-12, None))
                    if spec.noise.kind == "gaussian":
                        p = p + rng.normal(0.0, 1.0, p.shape) * spec.noise.sigma * max(
                            float(np.abs(p).max()), 1e-12)
                absorb[ti, vi] = a
                phase[ti, vi] = p
        files = {"absorbance": f"proj_e{e:02d}_abs.xmpj", "phase": f"proj_e{e:02d}_pha.xmpj"}
        fileio.write_xmpj(os.path.join(out_dir, files["absorbance"]), absorb, "absorbance")
        fileio.write_xmpj(os.path.join(out_dir, files["phase"]), phase, "phase")
        entry = {"id": e, "rel_angles_deg": list(expset.rel_angles_deg),
                 "files": files}
        if not seal:
            entry["azimuth_deg"] = phi1
        per_exp.append(entry)
        azimuths.append(phi1)
        scenarios.append(dataclasses.asdict(scn))
        stacks.append((absorb, phase))

    norm_a = max(float(a.max()) for a, _ in stacks)
    norm_p = max(float(p.max()) for _, p in stacks)
    manifest = {
        "format": "onix4d-dataset",
        "version": 1,
        "kind": expset.kind,
        "seed": expset.seed,
        "scenario_type": type(scenario).__name__,
        "scenario": dataclasses.asdict(scenario),
        "detector": {"width": spec.width, "height": spec.height, "pitch": spec.pitch},
        "acquisition": {"energy_kev": spec.energy_kev, "unit_m": spec.unit_m,
                        "samples_per_ray": spec.samples_per_ray,
                        "noise": dataclasses.asdict(spec.noise)},
        "timeline": {"count": len(timeline), "values": [float(t) for t in timeline]},
        "channel_norm": {"absorbance": max(norm_a, 1e-12), "phase": max(norm_p, 1e-12)},
        "experiments": per_exp,
    }
    if seal:
        manifest["eval_only"] = {"azimuths_deg": azimuths, "scenarios": scenarios}
    fileio.save_manifest(out_dir, manifest)
    return manifest


# ---------------------------------------------------------------------------
# sampled volumes as fields
# ---------------------------------------------------------------------------

class VolumeField:
    """Trilinear interpolation of a voxel volume, zero outside the grid.

    Accepts (n, n, n) single-channel or (n, n, n, 2) two-channel volumes;
    sampling follows the cell-center convention of ``geometry.grid_centers``
    so voxelizing a field and wrapping it reproduces the field up to
    interpolation error.
    """

    def __init__(self, volume: np.ndarray, bounds=geo.DEFAULT_BOUNDS):
        vol = np.asarray(volume, dtype=np.float64)
        if vol.ndim == 3:
            vol = vol[..., None]
        if vol.ndim != 4:
            raise ValueError(f"volume must be 3-d or 3-d + channels, got {volume.shape}")
        self.volume = vol
        self.bounds = bounds
        self.lo = np.array([b[0] for b in bounds])
        self.step = np.array([(b[1] - b[0]) / n for b, n in zip(bounds, vol.shape[:3])])

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return self.sample(points)

    def sample(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        squeeze = p.ndim == 1
        p = np.atleast_2d(p)
        g = (p - self.lo) / self.step - 0.5
        nx, ny, nz, c = self.volume.shape
        i0 = np.floor(g).astype(np.int64)
        f = g - i0
        out = np.zeros((p.shape[0], c))
        flat = self.volume.reshape(-1, c)
        dims = np.array([nx, ny, nz])
        for corner in range(8):
            off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
            idx = i0 + off
            w = np.prod(np.where(off, f, 1.0 - f), axis=1)
            valid = np.all((idx >= 0) & (idx < dims), axis=1)
            ic = np.clip(idx, 0, dims - 1)
            lin = (ic[:, 0] * ny + ic[:, 1]) * nz + ic[:, 2]
            out += flat[lin] * (w * valid)[:, None]
        if self.volume.shape[3] == 1:
            out = out[:, 0]
        return out[0] if squeeze else out
