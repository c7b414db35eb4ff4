"""End-to-end desk-scale experiment: generate, train, sample, evaluate.

A synthetic articulated skeleton is posed at random, projected through an
orthographic camera (100 px/m, so depth is invisible), and 30% of joints
get wide detector Gaussians standing in for occlusion.  A short training
run is enough to see the posterior behave: hypotheses agree with the 2D
evidence, spread along depth, and open up exactly at the occluded joints.

This script uses a deliberately short schedule so it finishes in a few
minutes; `tests/test_acceptance.py` runs the full staged schedule, and
the CLI offers the same pipeline:

    ambiflow gen --out ds.afds
    ambiflow train --data ds.afds --out run
    ambiflow sample --model run/model.afnf --data eval.afds --out h.afhy
    ambiflow eval --hyps h.afhy --data eval.afds --out evalout

    python3 demos/04_toy_experiment.py
"""

import numpy as np

from ambiflow import data, metrics, ndcore as nd
from ambiflow.losses import LossWeights
from ambiflow.trainer import TrainConfig, build_models, train

EPOCHS = 24         # acceptance runs 60+20; bump this for real margins
N_TRAIN = 1500
N_EVAL = 64
M = 50

# 1. synthetic data: forward kinematics + orthographic projection.  The
#    difficulty knobs (root yaw range, joint angle scale) match the
#    acceptance fixture's desk-scale setting.
gen = dict(occlusion_rate=0.3, yaw_range=0.6, angle_scale=0.8)
train_samples = data.generate_dataset(
    data.GenConfig(n_samples=N_TRAIN, seed=0, **gen))
eval_samples = data.generate_dataset(
    data.GenConfig(n_samples=N_EVAL, seed=1000, **gen))
arrays = data.prepare_arrays(train_samples)
print("train x/y/cond:", arrays["x"].shape, arrays["y"].shape,
      arrays["cond"].shape)

# 2. short training run (prints one line per epoch).  Narrow subnets fit
#    this problem size far faster than the published width-1024 default.
model, disc = build_models(J=16, hidden=256)
cfg = TrainConfig(epochs=EPOCHS, batch_size=64, lr=2e-4, n_hyp=8,
                  seed=0, weights=LossWeights(k=4))
model, disc, history = train(arrays, cfg, model=model, disc=disc, log=print)

# 3. 50 posterior draws per evaluation pose, z0 prediction first.
ev = data.prepare_arrays(eval_samples)
hyps = np.stack([model.sample_hypotheses(ev["y"][i], ev["cond"][i], M=M,
                                         rng=nd.rng_from(77, f"hyp{i}"),
                                         prepend_z0=True)
                 for i in range(N_EVAL)])

# 4. evaluate in mm, hip-centered, against the true 3D poses.
gts = np.stack([data.hip_center(s.pose3d) * 1000.0 for s in eval_samples])
draws = 1000.0 * hyps[:, 1:].reshape(N_EVAL, M, 16, 3)
draws -= draws[:, :, :1, :]
z0 = 1000.0 * hyps[:, 0].reshape(N_EVAL, 16, 3)
z0 -= z0[:, :1, :]
report = metrics.evaluate(draws, gts, z0=z0)
print(report.summary())

# 5. the signature behavior: depth spreads more than x/y, and occluded
#    joints spread more than clean ones, even this early in training.
spread = np.stack([metrics.hypothesis_spread(draws[i])[0]
                   for i in range(N_EVAL)])
print("mean spread mm  x %.0f  y %.0f  depth %.0f"
      % tuple(spread.mean(axis=(0, 1))))
occ = np.stack([s.occluded for s in eval_samples])
xy = spread[:, :, :2].mean(axis=2)
print("xy spread mm  occluded %.0f  vs clean %.0f"
      % (xy[occ].mean(), xy[~occ].mean()))
