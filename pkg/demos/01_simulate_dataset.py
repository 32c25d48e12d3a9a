"""Simulate a small time-resolved two-view acquisition and inspect it.

A droplet-collision scenario is imaged by a two-camera setup (relative
angle 23.8 deg) over a handful of timestamps, repeated for a few
"experiments" that share dynamics but have unknown absolute orientations.
The simulator writes one projection stack per experiment and channel
(absorbance and phase), plus a manifest whose ``eval_only`` section seals
the information a training run must never see.

Run:  python3 demos/01_simulate_dataset.py
"""

import json
import os
import tempfile

import numpy as np

from onix4d import fileio
from onix4d.phantom import DropletScenario, ExperimentSet
from onix4d.physics import AcquisitionSpec, simulate_dataset

out_dir = os.path.join(tempfile.gettempdir(), "onix4d_demo_dataset")

# -- 1. describe the scene, the repetitions, and the detector --------------
scenario = DropletScenario()                      # two droplets colliding and merging
expset = ExperimentSet(kind="reproducible",       # same dynamics every repetition
                       n_experiments=3,
                       n_timestamps=6,
                       rel_angles_deg=(0.0, 23.8),
                       seed=11)
spec = AcquisitionSpec(width=48, height=48, pitch=2.0 / 48, samples_per_ray=96)

print(f"scenario: droplets r1={scenario.r1} r2={scenario.r2}, "
      f"delta0={scenario.material.delta0:g}, beta0={scenario.material.beta0:g}")
print(f"acquiring {expset.n_experiments} experiments x {expset.n_timestamps} "
      f"timestamps x {len(expset.rel_angles_deg)} views at {spec.width}x{spec.height}")

manifest = simulate_dataset(scenario, expset, spec, out_dir)

# -- 2. what landed on disk -------------------------------------------------
print(f"\nwrote {out_dir}:")
for name in sorted(os.listdir(out_dir)):
    print(f"  {name}  ({os.path.getsize(os.path.join(out_dir, name))} bytes)")

# -- 3. the manifest: open part vs sealed part ------------------------------
open_manifest = fileio.load_manifest(out_dir)                      # training view
sealed = fileio.load_manifest(out_dir, include_eval=True)          # evaluation view
print(f"\nmanifest keys visible to training: {sorted(open_manifest)}")
print(f"channel normalization constants: "
      f"{json.dumps(open_manifest['channel_norm'], sort_keys=True)}")
print(f"sealed-only keys: {sorted(set(sealed) - set(open_manifest))}")
print(f"sealed absolute azimuths (deg) per experiment: "
      f"{[round(a, 2) for a in sealed['eval_only']['azimuths_deg']]}")

# -- 4. a quick look at one projection stack ---------------------------------
stack, channel = fileio.read_xmpj(os.path.join(out_dir, "proj_e00_abs.xmpj"))
print(f"\nexp000 {channel} stack: shape (T, V, H, W) = {stack.shape}")
t_mid = stack.shape[0] // 2
img = stack[t_mid, 0]
print(f"view 0 at timestamp {t_mid}: absorbance in [{img.min():.4f}, {img.max():.4f}], "
      f"occupied fraction {(img > 0.01 * img.max()).mean():.2%}")

# absorbance is a line integral: the brightest pixel should be close to the
# attenuation coefficient times the longest chord through the droplets
mu = spec.absorbance_coeff * scenario.material.beta0
print(f"peak absorbance / (mu * droplet diameter) = "
      f"{img.max() / (mu * 2 * scenario.r1):.3f}  (about 1 when a ray "
      f"crosses a full droplet)")
