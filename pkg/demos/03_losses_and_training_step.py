"""Tour the loss suite and a single five-phase training step.

Six terms shape the posterior: two L1 reconstruction losses (predicted 2D,
deterministic 3D), an MMD matching the joint (y, z) distribution, an
adversarial term from a kinematic-chain discriminator, a k-best hypothesis
loss, and a heatmap-calibration loss tying hypothesis spread to detector
uncertainty.

    python3 demos/03_losses_and_training_step.py
"""

import numpy as np

from ambiflow import data, losses, ndcore as nd
from ambiflow.losses import LossWeights
from ambiflow.trainer import TrainConfig, build_models, train_step

# 1. the parts, on hand-made inputs.
y = nd.constant(np.zeros((2, 4)))
y_hat = nd.constant(np.array([[1.0, -1.0, 0.5, -0.5], [2.0, 0.0, 0.0, 0.0]]))
print("l2d  (mean per-row L1):", float(losses.l2d(y, y_hat).data))

V = nd.constant(nd.rng_from(0, "demo3").normal(size=(400, 6)))
W = nd.constant(nd.rng_from(1, "demo3").normal(size=(400, 6)))
far = nd.constant(nd.rng_from(1, "demo3").normal(size=(400, 6)) + 3.0)
print("mmd2 same dist: %.4f   shifted: %.4f"
      % (float(losses.mmd_unbiased(V, W).data),
         float(losses.mmd_unbiased(V, far).data)))

x = np.zeros(6)
H = np.array([x + 0.1, x + 1.0, x - 2.0])
print("l_mb k=1 (best only):", float(losses.l_mb(H, x, k=1).data),
      " k=3 (mean of all):", float(losses.l_mb(H, x, k=3).data))

# the heatmap loss is one-sided: hypothesis spread may exceed the fitted
# covariance for free, only undershooting a wide (masked-in) fit costs.
fit = nd.constant(np.array([[25.0, 0.0, 25.0]]))    # sigma = 5 px, occluded
tight = nd.constant(np.array([[4.0, 0.0, 4.0]]))
wide = nd.constant(np.array([[36.0, 0.0, 36.0]]))
print("l_hm undershoot: %.3f   overshoot: %.3f"
      % (float(losses.l_hm(fit, tight, 2.1).data),
         float(losses.l_hm(fit, wide, 2.1).data)))

# 2. one real training step on a tiny synthetic batch.
samples = data.generate_dataset(data.GenConfig(n_samples=64, seed=0))
arrays = data.prepare_arrays(samples)
model, disc = build_models()
cfg = TrainConfig(epochs=1, batch_size=32, n_hyp=4,
                  weights=LossWeights(k=2))
opt_f = nd.Adam(model.parameters(), lr=cfg.lr)
opt_d = nd.Adam(disc.parameters(), lr=cfg.lr)
batch = {k: arrays[k][:32] for k in ("x", "y", "cond", "cov_fit")}
report = train_step(model, disc, opt_f, opt_d, batch, cfg, step=0, epoch=0)
print("step 0:", " ".join(f"{k}={getattr(report, k):.3f}"
                          for k in ("l2d", "l_det", "l_mmd", "l_gen",
                                    "l_mb", "l_hm", "total")))

# at an identity-initialized flow the deterministic inverse exactly
# mirrors the forward pass, so l_det equals l2d on step 0.
print("l_det == l2d at init:", np.isclose(report.l_det, report.l2d,
                                          rtol=1e-12))
