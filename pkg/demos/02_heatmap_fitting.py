"""Fit 2D Gaussians to joint heatmaps and turn them into flow conditions.

The 2D detector's per-joint heatmap carries more than a point estimate:
its width says how certain the detector is.  A Levenberg-Marquardt fit
recovers amplitude, mean, and covariance; wide fits flag ambiguity.

    python3 demos/02_heatmap_fitting.py
"""

import numpy as np

from ambiflow import ndcore as nd
from ambiflow.heatmap import (HeatmapGaussian, build_condition, fit_gaussian,
                              is_ambiguous, synthesize_heatmap)

# 1. a clean detection: tight isotropic Gaussian, sigma = 2 px.
g = HeatmapGaussian(a=1.0, mux=130.0, muy=120.0, s11=4.0, s12=0.0, s22=4.0)
hm = synthesize_heatmap(g, 256, 256)
fit = fit_gaussian(hm)
print("clean fit   mu = (%.3f, %.3f)  sigma = (%.3f, %.3f)  converged=%s"
      % (fit.gaussian.mux, fit.gaussian.muy, *fit.gaussian.sigmas(),
         fit.converged))

# 2. an occluded detection: wide, tilted, and noisy.
g2 = HeatmapGaussian(a=0.7, mux=90.0, muy=160.0, s11=49.0, s12=18.0, s22=25.0)
hm2 = synthesize_heatmap(g2, 256, 256)
hm2 = hm2 + nd.rng_from(0, "demo2").normal(scale=0.01, size=hm2.shape)
fit2 = fit_gaussian(hm2)
print("occluded fit mu = (%.2f, %.2f)  cov =" % (fit2.gaussian.mux,
                                                 fit2.gaussian.muy))
print(np.round(fit2.gaussian.cov(), 2))

# 3. ambiguity flag: any fitted std above the 2.1 px threshold.
print("ambiguous? clean:", is_ambiguous([fit.gaussian]),
      " occluded:", is_ambiguous([fit2.gaussian]))

# 4. a bimodal blob is not a Gaussian; the fit reports high residual
#    so downstream code can distrust the covariance.
twin = synthesize_heatmap(HeatmapGaussian(1.0, 80.0, 128.0, 16.0, 0.0, 16.0),
                          256, 256)
twin += synthesize_heatmap(HeatmapGaussian(1.0, 170.0, 128.0, 16.0, 0.0, 16.0),
                           256, 256)
print("bimodal fit high_residual =", fit_gaussian(twin).high_residual)

# 5. sixteen fits become one 78-dim condition vector (three hip joints
#    are dropped: the pose is hip-centered, their evidence is redundant).
fits = [HeatmapGaussian(1.0, 128.0 + j, 128.0 - j, 4.0, 0.0, 4.0)
        for j in range(16)]
cond = build_condition(fits, hip_indices=(0, 1, 4))
print("condition vector:", cond.shape, "first joint block:",
      np.round(cond[:6], 1))
