"""
Where the estimator works and where it breaks
=============================================

Three small synthetic studies:

1. per-pixel error against the normalized image derivative |Is| (confidence),
2. depth error of the aligned equation against the un-aligned baseline as the
   sensor separation grows,
3. how a lateral shift between the two captures compares with an axial one.

Each one uses fewer trials than the acceptance suite so it runs in about a
minute.  Run with ``python3 demos/sensitivity.py``.
"""
import os
from dataclasses import replace

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from dfdd.experiments import Settings, calibrate, confidence_bins, motion_comparison, sweep

OUT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "out")
os.makedirs(OUT, exist_ok=True)

base = Settings(trials=1, calib_trials=1)

# 1. Confidence: pointwise depth error binned by |Is| decile.
noisy = replace(base, noise=0.005)
bins, n = confidence_bins(noisy, calibrate(noisy))
print(f"confidence deciles over {n} pixels:")
for x in bins.samples:
    print(f"  up to {x.value:.1f}: MAE {x.mae * 1e3:6.1f} mm")

# 2. Sensor separation: aligned equation vs baseline with a magnification term.
ds = base.optics.delta_s * np.geomspace(0.5, 8, 5)
res = sweep("delta_s", ds, base)
print("delta_s (mm)  aligned MAE  baseline MAE")
for x in res.samples:
    print(f"  {x.value * 1e3:8.3f}   {x.mae * 1e3:8.2f} mm  {x.mae_old * 1e3:8.2f} mm")

# 3. Motion between captures, one blur radius in size.
for t in motion_comparison(replace(base, z_grid=(0.6, 0.9, 1.2))):
    print(f"Z = {t.Z:.1f} m, shift {t.shift_mm:.2f} mm: snapshot {t.snapshot * 1e3:.2f} mm, "
          f"lateral {t.lateral * 1e3:.1f} mm, axial {t.axial * 1e3:.2f} mm")

fig, ax = plt.subplots(1, 2, figsize=(9, 3.5))
ax[0].plot(bins.column("value"), bins.column("mae") * 1e3, "o-")
ax[0].set_xlabel("|Is| quantile")
ax[0].set_ylabel("MAE (mm)")
ax[1].loglog(res.column("value") * 1e3, res.column("mae") * 1e3, "o-", label="aligned")
ax[1].loglog(res.column("value") * 1e3, res.column("mae_old") * 1e3, "^--", label="baseline")
ax[1].set_xlabel("sensor separation (mm)")
ax[1].legend()
fig.tight_layout()
fig.savefig(os.path.join(OUT, "sensitivity.png"), dpi=90)
print("wrote", os.path.join(OUT, "sensitivity.png"))
