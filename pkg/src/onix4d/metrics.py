"""Reconstruction quality metrics.

* ``mse``: mean squared error of arrays of equal shape.
* ``ssim``/``dssim``: the classic structural similarity with an 11x11
  Gaussian window (sigma 1.5, K1 0.01, K2 0.03) evaluated on the valid
  region; DSSIM = (1 - SSIM) / 2.  Volumes are scored slice-wise and
  averaged.
* ``fsc``/``frc``: Fourier shell (3-d) and ring (2-d) correlation over
  integer-radius shells, with the half-bit threshold curve and the
  crossing-based resolution estimate in voxels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


# ---------------------------------------------------------------------------
# SSIM / DSSIM
# ---------------------------------------------------------------------------

def _gaussian_1d(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable valid-mode filtering of a 2-d image with a 1-d kernel."""
    w = np.lib.stride_tricks.sliding_window_view(img, k.size, axis=0)
    img = w @ k
    w = np.lib.stride_tricks.sliding_window_view(img, k.size, axis=1)
    return w @ k


def ssim(a: np.ndarray, b: np.ndarray, data_range: float | None = None,
         k1: float = 0.01, k2: float = 0.03, window: int = 11,
         sigma: float = 1.5) -> float:
    """Mean SSIM of two 2-d images over the valid window region.

    ``data_range`` defaults to the value range of the reference ``b``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < window:
        raise ValueError(f"ssim needs 2-d images at least {window} pixels wide, got {a.shape}")
    if data_range is None:
        data_range = float(b.max() - b.min())
    if data_range <= 0:
        data_range = 1.0
    kern = _gaussian_1d(window, sigma)
    mu_a = _filter_valid(a, kern)
    mu_b = _filter_valid(b, kern)
    var_a = _filter_valid(a * a, kern) - mu_a ** 2
    var_b = _filter_valid(b * b, kern) - mu_b ** 2
    cov = _filter_valid(a * b, kern) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def dssim(a: np.ndarray, b: np.ndarray, data_range: float | None = None) -> float:
    """Structural dissimilarity (1 - SSIM) / 2; zero for identical images."""
    return (1.0 - ssim(a, b, data_range)) / 2.0


def dssim_slices(va: np.ndarray, vb: np.ndarray, data_range: float | None = None,
                 axis: int = 0) -> float:
    """Volume DSSIM: mean over axis-aligned slices (default axis 0)."""
    va = np.asarray(va, dtype=np.float64)
    vb = np.asarray(vb, dtype=np.float64)
    if va.shape != vb.shape or va.ndim != 3:
        raise ValueError(f"need equal 3-d volumes, got {va.shape} vs {vb.shape}")
    va = np.moveaxis(va, axis, 0)
    vb = np.moveaxis(vb, axis, 0)
    return float(np.mean([dssim(sa, sb, data_range) for sa, sb in zip(va, vb)]))


# ---------------------------------------------------------------------------
# Fourier shell / ring correlation
# ---------------------------------------------------------------------------

@dataclass
class CorrelationCurve:
    shell_freq: np.ndarray    # cycles per voxel, shells 0 .. n//2
    correlation: np.ndarray
    counts: np.ndarray        # Fourier coefficients per shell
    kind: str


def _shell_correlation(a: np.ndarray, b: np.ndarray, kind: str) -> CorrelationCurve:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    n = a.shape[0]
    if any(s != n for s in a.shape):
        raise ValueError(f"shell correlation needs equal dims, got {a.shape}")
    fa = np.fft.fftn(a)
    fb = np.fft.fftn(b)
    k = np.fft.fftfreq(n) * n
    grids = np.meshgrid(*([k] * a.ndim), indexing="ij")
    radius = np.sqrt(sum(g ** 2 for g in grids))
    shell = np.rint(radius).astype(np.int64).ravel()
    n_shells = n // 2 + 1
    keep = shell < n_shells
    shell = shell[keep]
    cross = np.bincount(shell, weights=(fa * np.conj(fb)).real.ravel()[keep],
                        minlength=n_shells)
    pow_a = np.bincount(shell, weights=(np.abs(fa) ** 2).ravel()[keep], minlength=n_shells)
    pow_b = np.bincount(shell, weights=(np.abs(fb) ** 2).ravel()[keep], minlength=n_shells)
    counts = np.bincount(shell, minlength=n_shells)
    denom = np.sqrt(pow_a * pow_b)
    corr = np.divide(cross, denom, out=np.zeros(n_shells), where=denom > 0)
    return CorrelationCurve(np.arange(n_shells) / n, corr, counts, kind)


def fsc(volume_a: np.ndarray, volume_b: np.ndarray) -> CorrelationCurve:
    """Fourier shell correlation of two cubic volumes."""
    va, vb = np.asarray(volume_a), np.asarray(volume_b)
    if va.ndim != 3:
        raise ValueError("fsc expects 3-d volumes")
    return _shell_correlation(va, vb, "fsc")


def frc(image_a: np.ndarray, image_b: np.ndarray) -> CorrelationCurve:
    """Fourier ring correlation of two square images."""
    ia, ib = np.asarray(image_a), np.asarray(image_b)
    if ia.ndim != 2:
        raise ValueError("frc expects 2-d images")
    return _shell_correlation(ia, ib, "frc")


def half_bit_threshold(counts: np.ndarray) -> np.ndarray:
    """Half-bit information threshold per shell given coefficient counts."""
    n = np.maximum(np.asarray(counts, dtype=np.float64), 1.0)
    root = np.sqrt(n)
    return (0.2071 + 1.9102 / root) / (1.2071 + 0.9102 / root)


@dataclass
class ResolutionResult:
    resolution_voxels: float
    crossing_freq: float      # cycles per voxel
    at_limit: bool


def resolution_half_bit(curve: CorrelationCurve) -> ResolutionResult:
    """Resolution from the first crossing below the half-bit curve.

    The crossing frequency is linearly interpolated between shells and
    converted to a period in voxels; if the correlation never drops below
    the threshold the result saturates at the Nyquist period (2 voxels)
    and is flagged ``at_limit``.
    """
    thr = half_bit_threshold(curve.counts)
    corr = curve.correlation
    freq = curve.shell_freq
    for k in range(1, len(corr)):
        if corr[k] < thr[k]:
            d_prev = corr[k - 1] - thr[k - 1]
            d_here = corr[k] - thr[k]
            if d_prev <= 0:
                f_cross = freq[k - 1] if freq[k - 1] > 0 else freq[k]
            else:
                frac = d_prev / (d_prev - d_here)
                f_cross = freq[k - 1] + frac * (freq[k] - freq[k - 1])
            f_cross = max(f_cross, freq[1])
            return ResolutionResult(float(1.0 / f_cross), float(f_cross), False)
    nyquist = freq[-1] if freq[-1] > 0 else 0.5
    return ResolutionResult(float(1.0 / nyquist), float(nyquist), True)
