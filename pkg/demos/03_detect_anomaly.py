"""The four detection steps: reconstruct, difference, threshold, mask.

The threshold is the 95th percentile of pooled absolute reconstruction
errors over a healthy calibration set, so on healthy data roughly 5% of
ROI pixels light up; a planted anomaly lights up far more.
"""

import numpy as np

from siad import (ArchitectureSpec, RoiMask, SignalSpec, TrainConfig,
                  calibrate_threshold, detect, gen_diseased, gen_null_cohort,
                  reconstruct, train)
from siad.anomaly import reconstruction_error
from siad.synth import keyed_rng

arch = ArchitectureSpec(side=16, channels=(8, 16), latent_dim=4)
roi = RoiMask.centered_square(16)

train_imgs = gen_null_cohort(120, 16, 1.0, seed=11)
conds = keyed_rng(11, 90, 0).normal(size=(120, 2))
weights = train([(img, conds[i]) for i, img in enumerate(train_imgs)], arch,
                TrainConfig(epochs=15, lr=1e-4, batch_size=16, seed=3)).weights

# calibrate the threshold on held-out healthy subjects
cal_imgs = gen_null_cohort(40, 16, 1.0, seed=12, start_index=200)
cal_conds = keyed_rng(12, 90, 1).normal(size=(40, 2))
errors = [reconstruction_error(x, reconstruct(x, cal_conds[i], weights))
          for i, x in enumerate(cal_imgs)]
threshold = calibrate_threshold(errors, roi, 0.95)
print(f"threshold: 95th percentile of {threshold.calibration_count} pooled "
      f"|errors| = {threshold.value:.3f}")

# healthy subject: a few pixels exceed the threshold by construction
healthy = gen_null_cohort(1, 16, 1.0, seed=13, start_index=900)[0]
cond = np.zeros(2)
mask = detect(healthy, cond, weights, threshold, roi)
print(f"\nhealthy subject: {len(mask)} of {roi.count} ROI pixels flagged "
      f"(about 5% by construction)")

# diseased subject: a 3x3 plateau of amplitude 3 planted inside the ROI
region = tuple(int(i) for i in np.arange(256).reshape(16, 16)[6:9, 6:9].ravel())
diseased = gen_diseased(1, 16, SignalSpec(region, amplitude=3.0), 1.0, seed=14)[0]
mask = detect(diseased, cond, weights, threshold, roi)
hit = len(set(region) & set(int(i) for i in mask.pixels))
print(f"diseased subject: {len(mask)} pixels flagged, "
      f"{hit}/{len(region)} of the true region recovered")
print("grid of flagged pixels (X = flagged, . = clear, within the ROI):")
flags = mask.as_bool(256).reshape(16, 16)
for r in range(4, 12):
    print("   " + "".join("X" if flags[r, c] else "." for c in range(4, 12)))
