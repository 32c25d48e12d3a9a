"""Tour of the reconstruction-quality metrics.

Three families: plain mean squared error, structural dissimilarity
(DSSIM, a perceptual image distance), and Fourier shell/ring correlation
(FSC/FRC) with the half-bit criterion, which turns agreement between two
volumes into a spatial resolution estimate.

Run:  python3 demos/04_metrics_tour.py
"""

import numpy as np

from onix4d import metrics

rng = np.random.default_rng(42)

# -- 1. MSE and DSSIM basics --------------------------------------------------
img = rng.uniform(0.0, 1.0, size=(48, 48))
smooth = img
for _ in range(3):   # cheap blur by neighbor averaging
    smooth = 0.25 * (np.roll(smooth, 1, 0) + np.roll(smooth, -1, 0)
                     + np.roll(smooth, 1, 1) + np.roll(smooth, -1, 1))

print("identities:")
print(f"  mse(a, a)   = {metrics.mse(img, img):.1e}")
print(f"  dssim(a, a) = {metrics.dssim(img, img):.1e}")
# at a fixed data_range the score is symmetric in its arguments; left to
# default, the range is read off the second (reference) image
sym = abs(metrics.dssim(img, smooth, data_range=1.0)
          - metrics.dssim(smooth, img, data_range=1.0))
print(f"  dssim symmetry |d(a,b) - d(b,a)| = {sym:.1e}  (fixed data_range)")

noisy = img + rng.normal(scale=0.05, size=img.shape)
print("\nsensitivity:")
print(f"  dssim(img, img + noise)      = {metrics.dssim(img, noisy):.4f}")
print(f"  dssim(img, blurred img)      = {metrics.dssim(img, smooth):.4f}")
print(f"  dssim(img, 1 - img)          = {metrics.dssim(img, 1.0 - img):.4f}"
      "   (anticorrelated structure scores worst)")

# -- 2. FSC: resolution from two half-set volumes ------------------------------
# Build a volume pair that shares structure up to a known spatial
# frequency and is independent noise beyond it; the half-bit crossing
# should sit at that frequency.
n, cutoff = 48, 10
freqs = np.fft.fftfreq(n) * n
kx, ky, kz = np.meshgrid(freqs, freqs, freqs, indexing="ij")
radius = np.sqrt(kx ** 2 + ky ** 2 + kz ** 2)

shared = np.fft.fftn(rng.normal(size=(n, n, n))) * (radius < cutoff)
noise = [np.fft.fftn(rng.normal(size=(n, n, n))) * (radius >= cutoff)
         for _ in range(2)]
vol_a = np.fft.ifftn(shared + noise[0]).real
vol_b = np.fft.ifftn(shared + noise[1]).real

curve = metrics.fsc(vol_a, vol_b)
thr = metrics.half_bit_threshold(curve.counts)
res = metrics.resolution_half_bit(curve)

print(f"\nFSC of two volumes sharing structure below shell {cutoff}:")
for k in range(0, n // 2 + 1, 3):
    bar = "#" * int(max(curve.correlation[k], 0.0) * 40)
    print(f"  shell {k:2d}  corr {curve.correlation[k]:+.3f}  "
          f"half-bit {thr[k]:.3f}  {bar}")
print(f"half-bit crossing at {res.crossing_freq * n:.2f} shells "
      f"(constructed cutoff {cutoff}) -> resolution "
      f"{res.resolution_voxels:.2f} voxels per period")

# -- 3. FRC is the 2-d analogue ------------------------------------------------
ring = metrics.frc(img, noisy)
r2 = metrics.resolution_half_bit(ring)
print(f"\nFRC of the noisy image pair: resolution {r2.resolution_voxels:.2f} px"
      f"{' (at the sampling limit)' if r2.at_limit else ''}")
