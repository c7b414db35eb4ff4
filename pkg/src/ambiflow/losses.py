"""Training objectives for the flow: L_2D, MMD, L_det, L_MB, L_HM, total.

All functions build ndcore graphs, so every term is differentiable with
respect to whichever inputs carry gradients.  Per-sample values are L1
sums over coordinates; batched inputs are averaged over the batch.
"""

from dataclasses import dataclass

import numpy as np

from . import ndcore as nd

DEFAULT_BANDWIDTHS = (0.0025, 0.04, 0.81)


@dataclass
class LossWeights:
    """Weights and constants of the total objective.

    sigma_t is the mask threshold in px (1.05 * the 2 px ground-truth
    heatmap width); mm_per_px converts hypothesis covariances into px^2
    before comparing with fitted heatmap covariances.
    """

    lam_mmd: float = 10.0
    lam_det: float = 4.0
    lam_mb: float = 4.0
    lam_hm: float = 750.0
    k: int = 5
    sigma_t: float = 2.1
    mm_per_px: float = 10.0
    bandwidths: tuple = DEFAULT_BANDWIDTHS

    def __post_init__(self):
        for name in ("lam_mmd", "lam_det", "lam_mb", "lam_hm", "k",
                     "sigma_t", "mm_per_px"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if any(b <= 0 for b in self.bandwidths):
            raise ValueError("kernel bandwidths must be positive")


def _rows(a):
    t = nd.as_tensor(a)
    if t.ndim == 1:
        t = nd.reshape(t, (1, t.shape[0]))
    return t


def _l1_rows(a, b):
    """Mean over rows of the per-row L1 distance."""
    ta, tb = _rows(a), _rows(b)
    return nd.tmean(nd.tsum(nd.absolute(nd.sub(ta, tb)), axis=1))


def l2d(y, y_hat):
    """L1 between observed and predicted 2D poses (batch mean)."""
    return _l1_rows(y, y_hat)


def l_det(x, x_hat_det):
    """L1 between the true 3D pose and its z_det reconstruction."""
    return _l1_rows(x, x_hat_det)


def imq_kernel(v, v_hat, bandwidths=DEFAULT_BANDWIDTHS):
    """Inverse-multiquadratic mixture sum_b b / (b + ||v - v_hat||^2)."""
    d = nd.sub(nd.as_tensor(v), nd.as_tensor(v_hat))
    sq = nd.tsum(nd.mul(d, d))
    out = None
    for b in bandwidths:
        term = nd.div(nd.constant(float(b)), nd.add(sq, float(b)))
        out = term if out is None else nd.add(out, term)
    return out


def _kernel_matrix(A, B, bandwidths):
    """IMQ mixture evaluated on all pairs of rows of A and B."""
    sq_a = nd.tsum(nd.mul(A, A), axis=1, keepdims=True)          # (n, 1)
    sq_b = nd.reshape(nd.tsum(nd.mul(B, B), axis=1), (1, B.shape[0]))
    G = nd.matmul(A, nd.swap_last_axes(B))
    D = nd.sub(nd.add(sq_a, sq_b), nd.mul(G, 2.0))
    K = None
    for b in bandwidths:
        term = nd.div(nd.constant(float(b)), nd.add(D, float(b)))
        K = term if K is None else nd.add(K, term)
    return K


def mmd_unbiased(V, V_hat, bandwidths=DEFAULT_BANDWIDTHS):
    """Unbiased squared MMD between two equally sized sample sets.

    Three-sum form: within-set kernel means exclude the diagonal, the
    cross term uses all pairs.  The estimate may be negative.  Gradient
    blocking for the 2D part of V_hat is the caller's job (pass the
    blocked tensor in).
    """
    V, V_hat = _rows(V), _rows(V_hat)
    n = V.shape[0]
    m = V_hat.shape[0]
    if n < 2 or m < 2:
        raise ValueError(f"mmd needs at least 2 samples per set, got {n}, {m}")
    eye_n = nd.constant(np.eye(n))
    eye_m = nd.constant(np.eye(m))
    K_vv = _kernel_matrix(V, V, bandwidths)
    K_hh = _kernel_matrix(V_hat, V_hat, bandwidths)
    K_vh = _kernel_matrix(V, V_hat, bandwidths)
    same_v = nd.div(nd.tsum(nd.sub(K_vv, nd.mul(K_vv, eye_n))), n * (n - 1))
    same_h = nd.div(nd.tsum(nd.sub(K_hh, nd.mul(K_hh, eye_m))), m * (m - 1))
    cross = nd.mul(nd.tmean(K_vh), 2.0)
    return nd.sub(nd.add(same_v, same_h), cross)


def l_mb(H, x, k):
    """L1 between x and the mean of its k best hypotheses.

    Hypotheses are ranked by MPJPE against x; ties keep the lower index.
    The selection itself is treated as a constant, gradients flow into the
    selected hypotheses only.
    """
    Ht = nd.as_tensor(H)
    xt = nd.as_tensor(x)
    L = Ht.shape[0]
    if not 1 <= k <= L:
        raise ValueError(f"k={k} outside [1, {L}]")
    hyp = Ht.data.reshape(L, -1, 3)
    ref = xt.data.reshape(-1, 3)
    err = np.sqrt(((hyp - ref[None]) ** 2).sum(axis=2)).mean(axis=1)
    # index order, not rank order, so k = L sums exactly like a plain mean
    chosen = np.sort(np.argsort(err, kind="stable")[:k])
    flatH = nd.reshape(Ht, (L, hyp.shape[1] * 3))
    mean_best = nd.tmean(nd.take(flatH, chosen, axis=0), axis=0)
    return nd.tsum(nd.absolute(nd.sub(nd.reshape(xt, (hyp.shape[1] * 3,)), mean_best)))


def xy_covariance(H):
    """Per-joint x/y covariance entries across hypotheses, unbiased.

    H: (B, L, J, 3) tensor -> (B, J, 3) tensor of [S11, S12, S22].
    """
    Ht = nd.as_tensor(H)
    if Ht.ndim != 4:
        raise ValueError(f"expected (B, L, J, 3), got {Ht.shape}")
    L = Ht.shape[1]
    if L < 2:
        raise ValueError("covariance needs at least 2 hypotheses")
    xs = nd.narrow(Ht, 3, 0, 1)
    ys = nd.narrow(Ht, 3, 1, 1)
    dx = nd.sub(xs, nd.tmean(xs, axis=1, keepdims=True))
    dy = nd.sub(ys, nd.tmean(ys, axis=1, keepdims=True))
    s11 = nd.div(nd.tsum(nd.mul(dx, dx), axis=1), L - 1)
    s12 = nd.div(nd.tsum(nd.mul(dx, dy), axis=1), L - 1)
    s22 = nd.div(nd.tsum(nd.mul(dy, dy), axis=1), L - 1)
    return nd.concat([s11, s12, s22], axis=2)


def l_hm(cov_fit, cov_hyp, sigma_t):
    """Masked lower-bound RMSE between heatmap and hypothesis covariances.

    Both covariances are [S11, S12, S22] triples in px^2; arbitrary leading
    batch dims are averaged.  The mask (from the fitted values, a constant)
    is 1 only where either fitted std exceeds sigma_t, and the diagonal
    differences are clamped so exceeding the target spread is free.
    """
    fit = nd.as_tensor(cov_fit)
    hyp = nd.as_tensor(cov_hyp)
    if fit.shape != hyp.shape or fit.shape[-1] != 3:
        raise ValueError(f"covariance triples expected, got {fit.shape} vs {hyp.shape}")
    shape = (1, 3) if fit.ndim == 1 else (-1, 3)
    fit = nd.reshape(fit, shape)
    hyp = nd.reshape(hyp, shape)
    f11, f12, f22 = (nd.narrow(fit, 1, i, 1) for i in range(3))
    h11, h12, h22 = (nd.narrow(hyp, 1, i, 1) for i in range(3))
    mask = ((np.sqrt(np.maximum(f11.data, 0.0)) > sigma_t) |
            (np.sqrt(np.maximum(f22.data, 0.0)) > sigma_t)).astype(np.float64)
    d11 = nd.relu(nd.sub(f11, h11))
    d22 = nd.relu(nd.sub(f22, h22))
    d12 = nd.sub(f12, h12)
    sq = nd.add(nd.add(nd.mul(d11, d11), nd.mul(d22, d22)), nd.mul(d12, d12))
    per = nd.mul(nd.sqrt_guarded(sq), nd.constant(mask))
    return nd.tmean(per)


def total_nf_loss(parts, w):
    """Weighted sum of the six loss parts.

    parts: mapping with keys l2d, l_gen, l_mmd, l_det, l_mb, l_hm.
    """
    return nd.add(
        nd.add(nd.as_tensor(parts["l2d"]), nd.as_tensor(parts["l_gen"])),
        nd.add(
            nd.add(nd.mul(nd.as_tensor(parts["l_mmd"]), w.lam_mmd),
                   nd.mul(nd.as_tensor(parts["l_det"]), w.lam_det)),
            nd.add(nd.mul(nd.as_tensor(parts["l_mb"]), w.lam_mb),
                   nd.mul(nd.as_tensor(parts["l_hm"]), w.lam_hm))))
