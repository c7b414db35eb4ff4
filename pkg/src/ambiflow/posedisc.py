"""3D pose discriminator with a Kinematic Chain Space layer (WGAN-GP).

The critic scores poses through two branches: one sees the raw flattened
pose, the other a Gram matrix of bone vectors (squared bone lengths on the
diagonal, inter-bone angles off it).  Training uses the gradient-penalty
Wasserstein objective, which needs differentiating through the critic's
input gradient; ndcore's re-traceable backward provides that.
"""

from dataclasses import dataclass, field

import numpy as np

from . import ndcore as nd
from .errors import ShapeError

LEAK = 0.2


@dataclass(frozen=True)
class Skeleton:
    """Joint tree: names, parent indices (-1 for the root), hip indices."""

    names: tuple
    parents: tuple
    hips: tuple
    bones: tuple = field(init=False)

    def __post_init__(self):
        J = len(self.names)
        if len(self.parents) != J:
            raise ValueError("names and parents must have equal length")
        if self.parents[0] != -1 or any(p < 0 for p in self.parents[1:]):
            raise ValueError("tree must be rooted at joint 0 (pelvis)")
        for j, p in enumerate(self.parents[1:], start=1):
            if p >= j:
                raise ValueError(f"parent {p} of joint {j} must precede it")
        object.__setattr__(self, "bones",
                           tuple((self.parents[j], j) for j in range(1, J)))

    @property
    def n_joints(self):
        return len(self.names)

    def bone_matrix(self):
        """C with column b mapping joints to bone vector b: B = X @ C."""
        J = self.n_joints
        C = np.zeros((J, J - 1))
        for b, (p, c) in enumerate(self.bones):
            C[p, b] = -1.0
            C[c, b] = 1.0
        return C


def default_skeleton():
    """16-joint body: pelvis-rooted legs, spine chain, head, and arms."""
    names = ("pelvis", "r_hip", "r_knee", "r_ankle",
             "l_hip", "l_knee", "l_ankle",
             "spine", "thorax", "head",
             "l_shoulder", "l_elbow", "l_wrist",
             "r_shoulder", "r_elbow", "r_wrist")
    parents = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 8, 10, 11, 8, 13, 14)
    return Skeleton(names=names, parents=parents, hips=(0, 1, 4))


def kcs(x, skel):
    """Kinematic Chain Space matrix Psi = B^T B, with B = X C.

    x: (B, 3J) or (3J,) root-relative poses.  Returns a tensor of shape
    (B, J-1, J-1); diag entries are squared bone lengths.
    """
    J = skel.n_joints
    t = nd.as_tensor(x)
    if t.ndim == 1:
        t = nd.reshape(t, (1, t.shape[0]))
    if t.shape[1] != 3 * J:
        raise ShapeError(f"kcs: expected (*, {3 * J}), got {t.shape}")
    X = nd.swap_last_axes(nd.reshape(t, (t.shape[0], J, 3)))  # (B, 3, J)
    B = nd.matmul(X, nd.constant(skel.bone_matrix()))          # (B, 3, J-1)
    return nd.matmul(nd.swap_last_axes(B), B)                  # (B, J-1, J-1)


class Discriminator:
    """Two-branch critic: flattened KCS matrix and raw pose, merged to a score."""

    def __init__(self, skel=None, seed=0, kcs_hidden=100, pose_hidden=100,
                 merge_hidden=100):
        self.skel = skel if skel is not None else default_skeleton()
        self.seed = seed
        self.kcs_hidden = kcs_hidden
        self.pose_hidden = pose_hidden
        self.merge_hidden = merge_hidden
        J = self.skel.n_joints
        self.dim_pose = 3 * J
        self.dim_kcs = (J - 1) * (J - 1)

        def make(name, fan_in, shape):
            lim = np.sqrt(6.0 / fan_in)
            data = nd.rng_from(seed, f"disc-{name}").uniform(-lim, lim, size=shape)
            return nd.Tensor(data, requires_grad=True)

        def bias(shape):
            return nd.Tensor(np.zeros(shape), requires_grad=True)

        kh, ph, mh = kcs_hidden, pose_hidden, merge_hidden
        self.kw1, self.kb1 = make("kw1", self.dim_kcs, (self.dim_kcs, kh)), bias(kh)
        self.kw2, self.kb2 = make("kw2", kh, (kh, kh)), bias(kh)
        self.pw1, self.pb1 = make("pw1", self.dim_pose, (self.dim_pose, ph)), bias(ph)
        self.pw2, self.pb2 = make("pw2", ph, (ph, ph)), bias(ph)
        self.mw1, self.mb1 = make("mw1", kh + ph, (kh + ph, mh)), bias(mh)
        self.mw2, self.mb2 = make("mw2", mh, (mh, 1)), bias(1)

    def parameters(self):
        return [self.kw1, self.kb1, self.kw2, self.kb2,
                self.pw1, self.pb1, self.pw2, self.pb2,
                self.mw1, self.mb1, self.mw2, self.mb2]

    def score(self, x):
        """x: (B, 3J) poses -> (B,) critic scores."""
        t = nd.as_tensor(x)
        if t.ndim == 1:
            t = nd.reshape(t, (1, t.shape[0]))
        psi = kcs(t, self.skel)
        psi_flat = nd.reshape(psi, (t.shape[0], self.dim_kcs))
        hk = nd.leaky_relu(nd.add(nd.matmul(psi_flat, self.kw1), self.kb1), LEAK)
        hk = nd.leaky_relu(nd.add(nd.matmul(hk, self.kw2), self.kb2), LEAK)
        hp = nd.leaky_relu(nd.add(nd.matmul(t, self.pw1), self.pb1), LEAK)
        hp = nd.leaky_relu(nd.add(nd.matmul(hp, self.pw2), self.pb2), LEAK)
        h = nd.concat([hk, hp], axis=1)
        h = nd.leaky_relu(nd.add(nd.matmul(h, self.mw1), self.mb1), LEAK)
        out = nd.add(nd.matmul(h, self.mw2), self.mb2)
        return nd.reshape(out, (t.shape[0],))


def gradient_penalty(score_fn, real, fake, lam_gp=10.0, rng=None):
    """lam * E[(||grad_x score(x~)||_2 - 1)^2] on uniform interpolates.

    score_fn maps a (B, D) tensor to (B,) scores.  real/fake are treated as
    constants; the result stays differentiable w.r.t. the critic weights via
    the re-traced gradient.
    """
    real = np.asarray(real.data if isinstance(real, nd.Tensor) else real, dtype=np.float64)
    fake = np.asarray(fake.data if isinstance(fake, nd.Tensor) else fake, dtype=np.float64)
    if real.ndim == 1:
        real = real[None, :]
    if fake.ndim == 1:
        fake = fake[None, :]
    if real.shape[0] == 0 or fake.shape[0] == 0:
        raise ValueError("gradient penalty needs a non-empty batch")
    if real.shape != fake.shape:
        raise ShapeError(f"real {real.shape} vs fake {fake.shape}")
    if rng is None:
        eps = np.full((real.shape[0], 1), 0.5)
    else:
        eps = rng.uniform(0.0, 1.0, size=(real.shape[0], 1))
    xt = nd.Tensor(eps * real + (1.0 - eps) * fake, requires_grad=True)
    s = nd.tsum(score_fn(xt))
    g = nd.grad(s, xt, create_graph=True)
    sq = nd.tsum(nd.mul(g, g), axis=1)
    gn = nd.sqrt_guarded(sq)
    d = nd.sub(gn, 1.0)
    return nd.mul(nd.tmean(nd.mul(d, d)), lam_gp)


def disc_loss(disc, real, fake, lam_gp=10.0, rng=None):
    """mean D(fake) - mean D(real) + gradient penalty (critic minimizes)."""
    wass = nd.sub(nd.tmean(disc.score(fake)), nd.tmean(disc.score(real)))
    return nd.add(wass, gradient_penalty(disc.score, real, fake, lam_gp, rng))


def gen_loss(disc, fake):
    """Generator term: negated mean critic score of generated poses."""
    return nd.neg(nd.tmean(disc.score(fake)))


def write_disc(w, disc):
    w.u32(disc.skel.n_joints)
    w.u32(len(disc.skel.hips))
    for h in disc.skel.hips:
        w.u32(h)
    for p in disc.skel.parents:
        w.i64(p)
    w.u32(disc.kcs_hidden)
    w.u32(disc.pose_hidden)
    w.u32(disc.merge_hidden)
    w.i64(int(disc.seed))
    for p in disc.parameters():
        w.array(p.data)


def read_disc(r):
    J = r.u32()
    hips = tuple(r.u32() for _ in range(r.u32()))
    parents = tuple(r.i64() for _ in range(J))
    kh, ph, mh = r.u32(), r.u32(), r.u32()
    seed = r.i64()
    skel = default_skeleton()
    if skel.parents != parents or skel.hips != hips:
        skel = Skeleton(names=tuple(f"j{i}" for i in range(J)),
                        parents=parents, hips=hips)
    disc = Discriminator(skel=skel, seed=seed, kcs_hidden=kh,
                         pose_hidden=ph, merge_hidden=mh)
    for p in disc.parameters():
        p.data = r.array(p.data.size).reshape(p.data.shape)
    return disc
