"""
Countdowns, horizons and the four errors
========================================

An event's ground truth is the number of minutes until it next starts. A
model is only asked to be exact inside a horizon ``h``; beyond it the
target is ``h`` itself. This script builds one countdown, clips a few
predictors and shows how inMAE, oMAE, wMAE and eMAE react.
"""

import numpy as np

from anticipation.objective import clip_output, countdown, frame_metrics

# A 16 minute video at 1 fps with one occurrence from minute 14 to 15.
fps = 1.0
y = countdown([(14 * 60, 15 * 60)], 16 * 60, fps)
print("y at 0, 11, 13.5, 14.5 and 15.5 min:", y[[0, 660, 810, 870, 930]])

# With h = 3 every frame before minute 11 is out of horizon.
h = 3.0
print("clipped target before 11 min is constant:", np.unique(np.minimum(y[:660], h)))

# Predictors are clipped the same way before scoring.
print("A(1.5; 2) =", clip_output(1.5, 2.0), " A(7.3; 5) =", clip_output(7.3, 5.0))

# Compare a perfect model, the constant "always h" guess and a noisy model.
rng = np.random.default_rng(0)
finite = np.where(np.isinf(y), 60.0, y)
candidates = {
    "perfect": finite,
    "constant h": np.full_like(y, h),
    "noisy": np.clip(finite + rng.normal(0, 0.5, y.shape), 0, None),
}
for name, pred in candidates.items():
    m = frame_metrics(pred, y, h)
    m["wMAE"] = (m["inMAE"] + m["oMAE"]) / 2
    print(f"{name:>10}: " + "  ".join(f"{k} {m[k]:.3f}" if m[k] is not None else f"{k}  -  "
                                      for k in ("inMAE", "oMAE", "wMAE", "eMAE")))

# The constant guess is perfect out of horizon and pays only inside it.
