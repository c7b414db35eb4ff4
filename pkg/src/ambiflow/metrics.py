"""Pose evaluation metrics and hypothesis-set statistics.

All pose arguments are (J, 3) arrays in millimetres; batched helpers take
(B, J, 3).  Hip-centering (or whatever protocol alignment) is the caller's
responsibility, the functions here only measure.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .heatmap import HeatmapGaussian

CPS_RANGE = 300.0


def _joint_dists(x_hat, x):
    a = np.asarray(x_hat, dtype=np.float64)
    b = np.asarray(x, dtype=np.float64)
    return np.sqrt(((a - b) ** 2).sum(axis=-1))


def mpjpe(x_hat, x):
    """Mean over joints of Euclidean joint distance (mm)."""
    return float(_joint_dists(x_hat, x).mean())


def procrustes_align(x_hat, x, with_scale=True):
    """Similarity-align x_hat onto x (rotation, translation, and by default
    scale), minimizing squared joint error.  Raises on collinear input.

    The SSE-optimal transform can, very rarely, increase the mean joint
    distance even though it lowers the squared error; since the identity is
    also a similarity transform, it is returned instead in that case so
    alignment never worsens MPJPE.
    """
    a = np.asarray(x_hat, dtype=np.float64)
    b = np.asarray(x, dtype=np.float64)
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    ac, bc = a - mu_a, b - mu_b
    H = ac.T @ bc
    U, D, Vt = np.linalg.svd(H)
    if D[1] <= 1e-12 * max(D[0], 1e-300):
        raise NumericError("degenerate pose: joints are collinear")
    sign = np.sign(np.linalg.det(U @ Vt))
    S = np.diag([1.0, 1.0, sign])
    R = U @ S @ Vt
    if with_scale:
        denom = (ac * ac).sum()
        s = (D @ np.diag(S)) / denom
    else:
        s = 1.0
    aligned = s * ac @ R + mu_b
    if mpjpe(aligned, b) > mpjpe(a, b):
        return a.copy()
    return aligned


def pmpjpe(x_hat, x, with_scale=True):
    """MPJPE after Procrustes alignment; never exceeds plain MPJPE."""
    return mpjpe(procrustes_align(x_hat, x, with_scale), x)


def pck(x_hat, x, tau=150.0):
    """Percentage of joints with error strictly below tau mm."""
    d = _joint_dists(x_hat, x)
    return float(100.0 * (d < tau).mean())


def cps(x_hat, x):
    """Correct-pose area: integral over thresholds in [0, 300] mm of the
    all-joints-below-threshold indicator, which reduces to
    max(0, 300 - max joint error)."""
    worst = float(_joint_dists(x_hat, x).max())
    return max(0.0, CPS_RANGE - worst)


def best_of(H, x, metric=mpjpe):
    """(index, value) minimizing metric over hypotheses; ties keep the
    lowest index."""
    H = np.asarray(H, dtype=np.float64)
    if H.shape[0] < 1:
        raise ValueError("empty hypothesis set")
    vals = np.array([metric(h, x) for h in H])
    idx = int(np.argmin(vals))
    return idx, float(vals[idx])


def worst_of(H, x, metric=mpjpe):
    """(index, value) maximizing metric over hypotheses; ties keep the
    lowest index."""
    H = np.asarray(H, dtype=np.float64)
    if H.shape[0] < 1:
        raise ValueError("empty hypothesis set")
    vals = np.array([metric(h, x) for h in H])
    idx = int(np.argmax(vals))
    return idx, float(vals[idx])


def hypothesis_spread(H):
    """Per-joint per-axis std (ddof=1) and per-joint x/y covariance.

    H: (M, J, 3) -> (std (J, 3), cov_xy (J, 2, 2)).
    """
    H = np.asarray(H, dtype=np.float64)
    if H.shape[0] < 2:
        raise ValueError("spread needs at least 2 hypotheses")
    std = H.std(axis=0, ddof=1)
    dev = H[:, :, :2] - H[:, :, :2].mean(axis=0, keepdims=True)
    cov = np.einsum("mja,mjb->jab", dev, dev) / (H.shape[0] - 1)
    return std, cov


def noise_baseline(z0_pose, gaussians, M, depth_sigma, rng, mm_per_px=10.0):
    """Uninformed hypothesis set: the z0 pose plus per-joint 2D noise.

    Row 0 is the noise-free z0 pose; rows 1..M-1 add x/y noise drawn from
    each joint's fitted Gaussian (converted px -> mm) and depth noise from
    a single constant Gaussian.  Mirrors the sanity baseline the flow has
    to beat.
    """
    z0 = np.asarray(z0_pose, dtype=np.float64)
    J = z0.shape[0]
    covs = np.zeros((J, 2, 2))
    for j, g in enumerate(gaussians):
        if isinstance(g, HeatmapGaussian):
            covs[j] = g.cov()
        else:
            s11, s12, s22 = np.asarray(g, dtype=np.float64)[-3:]
            covs[j] = [[s11, s12], [s12, s22]]
    out = np.repeat(z0[None], M, axis=0)
    for j in range(J):
        L = np.linalg.cholesky(covs[j] + 1e-12 * np.eye(2))
        eps = rng.standard_normal((M - 1, 2)) @ L.T * mm_per_px
        out[1:, j, :2] += eps
    out[1:, :, 2] += rng.normal(0.0, depth_sigma, size=(M - 1, J))
    return out


@dataclass
class EvalReport:
    """Per-sample metric columns plus their means and the joint-wise spread."""

    columns: dict
    per_joint_spread: np.ndarray = None
    aggregates: dict = field(init=False)

    def __post_init__(self):
        n = {len(v) for v in self.columns.values()}
        if len(n) > 1:
            raise ValueError(f"ragged metric columns: {sorted(n)}")
        self.aggregates = {k: float(np.mean(v)) for k, v in self.columns.items()}

    @property
    def n_samples(self):
        return len(next(iter(self.columns.values())))

    def to_csv(self, path):
        keys = list(self.columns)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["sample"] + keys)
            for i in range(self.n_samples):
                wr.writerow([i] + [repr(float(self.columns[k][i])) for k in keys])

    def summary(self):
        lines = [f"samples: {self.n_samples}"]
        for k, v in self.aggregates.items():
            lines.append(f"{k}: {v:.4f}")
        return "\n".join(lines) + "\n"


def evaluate(hypotheses, gts, z0=None, with_scale=True):
    """Standard report over per-sample hypothesis sets.

    hypotheses: (n, M, J, 3) mm, gts: (n, J, 3) mm, z0: optional (n, J, 3).
    Poses must already be protocol-aligned (hip-centered).  Best/worst are
    selected per metric: argmin for errors, argmax for PCK/CPS where
    higher is better.
    """
    hyp = np.asarray(hypotheses, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if hyp.shape[0] != gts.shape[0]:
        raise ValueError(f"sample count mismatch: {hyp.shape[0]} vs {gts.shape[0]}")
    n = hyp.shape[0]
    cols = {k: np.zeros(n) for k in
            ("best_mpjpe", "best_idx", "worst_mpjpe", "best_pmpjpe",
             "best_pck", "best_cps", "spread_x_mm", "spread_y_mm",
             "spread_depth_mm")}
    if z0 is not None:
        for k in ("z0_mpjpe", "z0_pmpjpe", "z0_pck", "z0_cps"):
            cols[k] = np.zeros(n)
    spread_sum = np.zeros((hyp.shape[2], 3))
    for i in range(n):
        H, x = hyp[i], gts[i]
        idx, val = best_of(H, x, mpjpe)
        cols["best_mpjpe"][i] = val
        cols["best_idx"][i] = idx
        cols["worst_mpjpe"][i] = worst_of(H, x, mpjpe)[1]
        cols["best_pmpjpe"][i] = best_of(H, x, pmpjpe)[1]
        # PCK/CPS improve upward, so their best hypothesis is the argmax
        cols["best_pck"][i] = worst_of(H, x, pck)[1]
        cols["best_cps"][i] = worst_of(H, x, cps)[1]
        std, _ = hypothesis_spread(H)
        per_axis = std.mean(axis=0)
        cols["spread_x_mm"][i] = per_axis[0]
        cols["spread_y_mm"][i] = per_axis[1]
        cols["spread_depth_mm"][i] = per_axis[2]
        spread_sum += std
        if z0 is not None:
            cols["z0_mpjpe"][i] = mpjpe(z0[i], x)
            cols["z0_pmpjpe"][i] = pmpjpe(z0[i], x, with_scale)
            cols["z0_pck"][i] = pck(z0[i], x)
            cols["z0_cps"][i] = cps(z0[i], x)
    return EvalReport(columns=cols, per_joint_spread=spread_sum / n)
