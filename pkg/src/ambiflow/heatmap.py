"""2D-detector uncertainty: Gaussian heatmap synthesis, fitting, conditions.

Each joint's heatmap is summarized by an amplitude, mean, and 2x2
covariance obtained from nonlinear least squares (Levenberg-Marquardt with
an analytic Jacobian, covariance kept positive definite via its Cholesky
factor).  The six coefficients of every non-hip joint, stacked in joint
order, form the raw condition vector for the flow.
"""

import csv
from dataclasses import dataclass

import numpy as np

from ._binio import Reader, Writer
from .errors import ShapeError

HEATMAP_MAGIC = b"AFHM"
HEATMAP_VERSION = 1

SIGMA_GT = 2.0          # px, ground-truth heatmap width
EIG_FLOOR = 1e-4        # px^2, smallest admissible covariance eigenvalue
AMBIGUOUS_SIGMA = 5.0   # px, per-joint threshold marking a sample ambiguous


@dataclass
class HeatmapGaussian:
    """Amplitude, mean (px), and covariance entries (px^2) of one joint."""

    a: float
    mux: float
    muy: float
    s11: float
    s12: float
    s22: float

    def cov(self):
        return np.array([[self.s11, self.s12], [self.s12, self.s22]])

    def sigmas(self):
        return np.sqrt(self.s11), np.sqrt(self.s22)

    def coeffs(self):
        """[A, mux, muy, S11, S12, S22] — the condition ordering."""
        return np.array([self.a, self.mux, self.muy, self.s11, self.s12, self.s22])

    @classmethod
    def from_cov(cls, a, mu, cov):
        cov = np.asarray(cov, dtype=np.float64)
        return cls(a, float(mu[0]), float(mu[1]),
                   float(cov[0, 0]), float(cov[0, 1]), float(cov[1, 1]))


@dataclass
class FitResult:
    gaussian: HeatmapGaussian
    converged: bool
    high_residual: bool
    n_iter: int
    sse: float


def _check_spd(cov):
    if cov[0, 0] <= 0 or cov[1, 1] <= 0 or np.linalg.det(cov) <= 0:
        raise ValueError(f"covariance not positive definite: {cov.tolist()}")


def synthesize_heatmap(g, w, h):
    """Evaluate A*exp(-0.5 (p-mu)^T S^-1 (p-mu)) at integer pixel centers."""
    cov = g.cov()
    _check_spd(cov)
    if not (0 <= g.mux <= w - 1 and 0 <= g.muy <= h - 1):
        raise ValueError(f"mean ({g.mux}, {g.muy}) outside {w}x{h} image")
    P = np.linalg.inv(cov)
    xs = np.arange(w, dtype=np.float64) - g.mux
    ys = np.arange(h, dtype=np.float64) - g.muy
    dx = xs[None, :]
    dy = ys[:, None]
    q = P[0, 0] * dx * dx + 2.0 * P[0, 1] * dx * dy + P[1, 1] * dy * dy
    return g.a * np.exp(-0.5 * q)


def fit_gaussian(hm, init=None, max_iter=200, rel_tol=1e-8):
    """Levenberg-Marquardt fit of a 2D Gaussian to a heatmap.

    The covariance is optimized through its Cholesky factor so it can never
    leave the PSD cone; after convergence its eigenvalues are floored at
    1e-4 px^2.  Damping starts at 1e-3, x10 on a rejected step, /10 on an
    accepted one.  Convergence is a relative residual decrease below
    `rel_tol`; hitting `max_iter` returns the best iterate with
    converged=False.
    """
    hm = np.asarray(hm, dtype=np.float64)
    if hm.ndim != 2:
        raise ShapeError(f"heatmap must be 2D, got {hm.shape}")
    if hm.max() <= 0:
        raise ValueError("degenerate heatmap: no positive values")
    h, w = hm.shape
    if init is None:
        iy, ix = np.unravel_index(np.argmax(hm), hm.shape)
        init = HeatmapGaussian(1.0, float(ix), float(iy),
                               SIGMA_GT ** 2, 0.0, SIGMA_GT ** 2)
    L0 = np.linalg.cholesky(init.cov())
    theta = np.array([init.a, init.mux, init.muy, L0[0, 0], L0[1, 0], L0[1, 1]])

    px = np.arange(w, dtype=np.float64)[None, :].repeat(h, axis=0).ravel()
    py = np.arange(h, dtype=np.float64)[:, None].repeat(w, axis=1).ravel()
    target = hm.ravel()

    def model_and_jac(th):
        a, mx, my, l11, l21, l22 = th
        det_l = l11 * l22
        if abs(det_l) < 1e-9:
            return None, None, np.inf
        s11, s12, s22 = l11 * l11, l11 * l21, l21 * l21 + l22 * l22
        det = s11 * s22 - s12 * s12
        p11, p12, p22 = s22 / det, -s12 / det, s11 / det
        dx = px - mx
        dy = py - my
        g1 = p11 * dx + p12 * dy
        g2 = p12 * dx + p22 * dy
        q = g1 * dx + g2 * dy
        v = a * np.exp(-0.5 * np.clip(q, 0.0, 1400.0))
        r = target - v
        lt1 = g1 * l11 + g2 * l21   # (L^T g)_1
        lt2 = g2 * l22              # (L^T g)_2
        jac = np.stack([v / a, v * g1, v * g2,
                        v * g1 * lt1, v * g2 * lt1, v * g2 * lt2], axis=1)
        return v, jac, float(r @ r)

    lam = 1e-3
    converged = False
    n_iter = 0
    sse = np.inf
    for n_iter in range(1, max_iter + 1):
        v, jac, sse = model_and_jac(theta)
        r = target - v
        H = jac.T @ jac
        g = jac.T @ r
        accepted = False
        while lam < 1e12:
            damped = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                delta = np.linalg.solve(damped, g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = theta + delta
            _, _, sse_new = model_and_jac(trial)
            if sse_new < sse:
                theta = trial
                lam = max(lam / 10.0, 1e-12)
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            # damping exhausted without any decrease: relative residual
            # decrease is zero, which is below rel_tol by definition
            converged = True
            break
        if sse - sse_new < rel_tol * max(sse, 1e-300):
            sse = sse_new
            converged = True
            break
        sse = sse_new

    a, mx, my, l11, l21, l22 = theta
    cov = np.array([[l11 * l11, l11 * l21],
                    [l11 * l21, l21 * l21 + l22 * l22]])
    evals, evecs = np.linalg.eigh(cov)
    cov = (evecs * np.maximum(evals, EIG_FLOOR)) @ evecs.T
    gauss = HeatmapGaussian.from_cov(max(a, 1e-12), (mx, my), cov)
    high_residual = bool(np.max(np.abs(target - model_and_jac(theta)[0])) > 0.2 * hm.max())
    return FitResult(gaussian=gauss, converged=converged,
                     high_residual=high_residual, n_iter=n_iter, sse=sse)


def fit_joint_gaussians(maps, init=None):
    """Fit every per-joint heatmap of one sample; maps is (J, h, w)."""
    return [fit_gaussian(maps[j], init) for j in range(maps.shape[0])]


def build_condition(gaussians, hip_indices):
    """Stack [A, mux, muy, S11, S12, S22] of all non-hip joints, joint order."""
    hips = set(int(h) for h in hip_indices)
    parts = []
    for j, g in enumerate(gaussians):
        if j in hips:
            continue
        if g is None:
            raise ValueError(f"missing Gaussian for joint {j}")
        parts.append(g.coeffs())
    return np.concatenate(parts)


def is_ambiguous(gaussians, threshold=AMBIGUOUS_SIGMA):
    """True iff any joint's fitted std exceeds the threshold (strict)."""
    for g in gaussians:
        sx, sy = g.sigmas()
        if sx > threshold or sy > threshold:
            return True
    return False


def condition_standardizer(center, J=16, n_hips=3, mu_scale=0.01, sigma2_scale=0.04):
    """Fixed affine constants mapping raw px-unit conditions to O(1) inputs.

    Means are centered on the image center and scaled by `mu_scale`;
    covariance entries by `sigma2_scale`.  Stored inside the model file so
    a reloaded model standardizes identically.
    """
    shift = np.tile([0.0, center[0], center[1], 0.0, 0.0, 0.0], J - n_hips)
    scale = np.tile([1.0, mu_scale, mu_scale,
                     sigma2_scale, sigma2_scale, sigma2_scale], J - n_hips)
    return shift, scale


def write_heatmaps(path, maps):
    """maps: (n_samples, J, h, w) array; stored as little-endian float32."""
    maps = np.asarray(maps, dtype=np.float32)
    if maps.ndim != 4:
        raise ShapeError(f"expected (n, J, h, w), got {maps.shape}")
    n, J, h, w = maps.shape
    with open(path, "wb") as fh:
        wr = Writer(fh)
        wr.raw(HEATMAP_MAGIC)
        wr.u32(HEATMAP_VERSION)
        wr.u32(w)
        wr.u32(h)
        wr.u32(J)
        wr.u32(n)
        wr.array(maps.ravel(), dtype="<f4")


def read_heatmaps(path):
    with open(path, "rb") as fh:
        r = Reader(fh)
        r.expect_magic(HEATMAP_MAGIC, HEATMAP_VERSION, "heatmap")
        w, h, J, n = r.u32(), r.u32(), r.u32(), r.u32()
        flat = r.array_raw(n * J * h * w, "<f4")
    return flat.astype(np.float64).reshape(n, J, h, w)


def write_gaussians_csv(path, fits_per_sample):
    """CSV export of fitted Gaussians: one row per (sample, joint)."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["sample", "joint", "a", "mux", "muy",
                     "s11", "s12", "s22", "converged", "high_residual"])
        for i, fits in enumerate(fits_per_sample):
            for j, f in enumerate(fits):
                g = f.gaussian
                vals = [g.a, g.mux, g.muy, g.s11, g.s12, g.s22]
                wr.writerow([i, j] + [repr(float(v)) for v in vals] +
                            [int(f.converged), int(f.high_residual)])
