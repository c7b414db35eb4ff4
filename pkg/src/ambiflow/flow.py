"""Conditional affine-coupling flow between 3D poses and [2D pose, latent].

The model is a bijection x in R^{3J} <-> [y, z] in R^{2J} x R^J built from
affine coupling blocks with a fixed random permutation after each block.
Each block's scale outputs pass through a soft clamp so exp(s) stays in
(e^-a, e^a).  A small fully connected encoder h maps the raw per-joint
Gaussian coefficients to the 56-dim condition fed to every subnet.

Running the flow backward with sampled z ~ N(0, I) turns one 2D observation
into arbitrarily many 3D hypotheses; z = 0 gives the single approximate-mode
prediction.
"""

import numpy as np

from . import ndcore as nd
from . import posedisc
from ._binio import Reader, Writer
from .errors import ShapeError

MODEL_MAGIC = b"AFNF"
MODEL_VERSION = 1


def soft_clamp(r, alpha=2.0):
    """(2a/pi) * arctan(r/a): smooth, odd, bounded to (-a, a)."""
    if alpha <= 0:
        raise ValueError(f"clamp alpha must be positive, got {alpha}")
    return nd.mul(nd.arctan(nd.mul(r, 1.0 / alpha)), 2.0 * alpha / np.pi)


def _linear(x, W, b):
    return nd.add(nd.matmul(x, W), b)


def _kaiming_uniform(rng, fan_in, shape):
    lim = np.sqrt(6.0 / fan_in)
    return rng.uniform(-lim, lim, size=shape)


class CouplingBlock:
    """One affine coupling step on a (d1 + d2)-dim vector with condition c.

    subnet1 reads (u1, c) and produces scale/translation for u2; subnet2
    then reads the updated u2 and transforms u1.  Both halves therefore get
    updated within a single block, and the inverse is closed-form.
    """

    def __init__(self, d1, d2, cond_dim, hidden, alpha, seed, tag):
        self.d1, self.d2, self.alpha = d1, d2, alpha
        self.hidden = hidden

        def make(name, fan_in, shape, zero=False):
            if zero:
                data = np.zeros(shape)
            else:
                data = _kaiming_uniform(nd.rng_from(seed, f"{tag}-{name}"), fan_in, shape)
            return nd.Tensor(data, requires_grad=True)

        # last layers start at zero so a fresh flow is the identity map
        self.w1a = make("w1a", d1 + cond_dim, (d1 + cond_dim, hidden))
        self.b1a = make("b1a", 1, (hidden,), zero=True)
        self.w1b = make("w1b", hidden, (hidden, 2 * d2), zero=True)
        self.b1b = make("b1b", 1, (2 * d2,), zero=True)
        self.w2a = make("w2a", d2 + cond_dim, (d2 + cond_dim, hidden))
        self.b2a = make("b2a", 1, (hidden,), zero=True)
        self.w2b = make("w2b", hidden, (hidden, 2 * d1), zero=True)
        self.b2b = make("b2b", 1, (2 * d1,), zero=True)

    def parameters(self):
        return [self.w1a, self.b1a, self.w1b, self.b1b,
                self.w2a, self.b2a, self.w2b, self.b2b]

    def _st1(self, u1, c):
        h = nd.relu(_linear(nd.concat([u1, c], axis=1), self.w1a, self.b1a))
        st = _linear(h, self.w1b, self.b1b)
        s = soft_clamp(nd.narrow(st, 1, 0, self.d2), self.alpha)
        t = nd.narrow(st, 1, self.d2, self.d2)
        return s, t

    def _st2(self, u2, c):
        h = nd.relu(_linear(nd.concat([u2, c], axis=1), self.w2a, self.b2a))
        st = _linear(h, self.w2b, self.b2b)
        s = soft_clamp(nd.narrow(st, 1, 0, self.d1), self.alpha)
        t = nd.narrow(st, 1, self.d1, self.d1)
        return s, t

    def forward(self, u, c):
        """Returns (u_out, per-row sum of scale activations)."""
        u1 = nd.narrow(u, 1, 0, self.d1)
        u2 = nd.narrow(u, 1, self.d1, self.d2)
        s1, t1 = self._st1(u1, c)
        v2 = nd.add(nd.mul(u2, nd.exp(s1)), t1)
        s2, t2 = self._st2(v2, c)
        v1 = nd.add(nd.mul(u1, nd.exp(s2)), t2)
        slog = nd.add(nd.tsum(s1, axis=1), nd.tsum(s2, axis=1))
        return nd.concat([v1, v2], axis=1), slog

    def inverse(self, v, c):
        v1 = nd.narrow(v, 1, 0, self.d1)
        v2 = nd.narrow(v, 1, self.d1, self.d2)
        s2, t2 = self._st2(v2, c)
        u1 = nd.mul(nd.sub(v1, t2), nd.exp(nd.neg(s2)))
        s1, t1 = self._st1(u1, c)
        u2 = nd.mul(nd.sub(v2, t1), nd.exp(nd.neg(s1)))
        return nd.concat([u1, u2], axis=1)


class FlowModel:
    """Conditional coupling flow plus the condition encoder.

    The raw condition (6 Gaussian coefficients per non-hip joint) is first
    standardized by fixed affine constants, then encoded by a one-hidden-
    layer network to `cond_dim` features shared by every coupling subnet.
    """

    def __init__(self, J=16, n_blocks=8, hidden=1024, cond_hidden=256,
                 cond_dim=56, alpha=2.0, seed=0, hips=(0, 1, 4),
                 cond_shift=None, cond_scale=None):
        if len(hips) >= J:
            raise ValueError("hip set must be smaller than the joint count")
        self.J = J
        self.n_blocks = n_blocks
        self.hidden = hidden
        self.cond_hidden = cond_hidden
        self.cond_dim = cond_dim
        self.alpha = alpha
        self.seed = seed
        self.hips = tuple(int(h) for h in hips)
        self.dim_x = 3 * J
        self.dim_y = 2 * J
        self.dim_z = J
        self.cond_in = 6 * (J - len(self.hips))
        self.d1 = self.dim_x // 2
        self.d2 = self.dim_x - self.d1

        self.cond_shift = (np.zeros(self.cond_in) if cond_shift is None
                           else np.asarray(cond_shift, dtype=np.float64).copy())
        self.cond_scale = (np.ones(self.cond_in) if cond_scale is None
                           else np.asarray(cond_scale, dtype=np.float64).copy())
        if self.cond_shift.shape != (self.cond_in,) or self.cond_scale.shape != (self.cond_in,):
            raise ShapeError(f"condition standardizer must have length {self.cond_in}")

        self.blocks = [CouplingBlock(self.d1, self.d2, cond_dim, hidden, alpha,
                                     seed, f"block{i}")
                       for i in range(n_blocks)]
        self.perms = [nd.rng_from(seed, f"perm{i}").permutation(self.dim_x)
                      for i in range(n_blocks)]
        self.inv_perms = [np.argsort(p) for p in self.perms]

        self.we1 = nd.Tensor(_kaiming_uniform(nd.rng_from(seed, "enc-w1"),
                                              self.cond_in, (self.cond_in, cond_hidden)),
                             requires_grad=True)
        self.be1 = nd.Tensor(np.zeros(cond_hidden), requires_grad=True)
        self.we2 = nd.Tensor(_kaiming_uniform(nd.rng_from(seed, "enc-w2"),
                                              cond_hidden, (cond_hidden, cond_dim)),
                             requires_grad=True)
        self.be2 = nd.Tensor(np.zeros(cond_dim), requires_grad=True)

    def parameters(self):
        ps = []
        for b in self.blocks:
            ps.extend(b.parameters())
        ps.extend([self.we1, self.be1, self.we2, self.be2])
        return ps

    def randomize_weights(self, rng, scale=1.0):
        """Overwrite all weights with random values (tests, never training)."""
        for p in self.parameters():
            fan_in = p.data.shape[0] if p.data.ndim == 2 else 1
            if p.data.ndim == 2:
                p.data = rng.normal(0.0, scale / np.sqrt(fan_in), size=p.data.shape)
            else:
                p.data = rng.normal(0.0, 0.01 * scale, size=p.data.shape)

    def _rows(self, a, d, what):
        t = nd.as_tensor(a)
        if t.ndim == 1:
            t = nd.reshape(t, (1, t.shape[0]))
        if t.ndim != 2 or t.shape[1] != d:
            raise ShapeError(f"{what}: expected (*, {d}), got {t.shape}")
        return t

    def encode(self, cond):
        """Raw Gaussian coefficients -> cond_dim features."""
        c = self._rows(cond, self.cond_in, "condition")
        std = nd.mul(nd.sub(c, nd.constant(self.cond_shift)), nd.constant(self.cond_scale))
        h = nd.relu(_linear(std, self.we1, self.be1))
        return _linear(h, self.we2, self.be2)

    def forward(self, x, cond=None, c_enc=None, want_logdet=False):
        """3D pose -> (2D prediction, detector latent [, log|det J|])."""
        if c_enc is None:
            c_enc = self.encode(cond)
        u = self._rows(x, self.dim_x, "pose")
        if c_enc.shape[0] not in (1, u.shape[0]):
            raise ShapeError(f"condition batch {c_enc.shape[0]} vs pose batch {u.shape[0]}")
        if c_enc.shape[0] == 1 and u.shape[0] > 1:
            c_enc = nd.broadcast_to(c_enc, (u.shape[0], c_enc.shape[1]))
        logdet = None
        for i, blk in enumerate(self.blocks):
            u, slog = blk.forward(u, c_enc)
            u = nd.take(u, self.perms[i], axis=1)
            logdet = slog if logdet is None else nd.add(logdet, slog)
        y = nd.narrow(u, 1, 0, self.dim_y)
        z = nd.narrow(u, 1, self.dim_y, self.dim_z)
        if want_logdet:
            return y, z, logdet
        return y, z

    def inverse(self, y, z, cond=None, c_enc=None):
        """(2D pose, latent) -> 3D pose."""
        if c_enc is None:
            c_enc = self.encode(cond)
        y = self._rows(y, self.dim_y, "2d pose")
        z = self._rows(z, self.dim_z, "latent")
        if y.shape[0] != z.shape[0]:
            raise ShapeError(f"batch mismatch: y {y.shape[0]} vs z {z.shape[0]}")
        u = nd.concat([y, z], axis=1)
        if c_enc.shape[0] == 1 and u.shape[0] > 1:
            c_enc = nd.broadcast_to(c_enc, (u.shape[0], c_enc.shape[1]))
        for i in reversed(range(self.n_blocks)):
            u = nd.take(u, self.inv_perms[i], axis=1)
            u = self.blocks[i].inverse(u, c_enc)
        return u

    def log_abs_det_jacobian(self, x, cond):
        """Per-sample log|det dforward/dx|; permutations contribute zero."""
        with nd.no_grad():
            _, _, logdet = self.forward(x, cond, want_logdet=True)
        out = logdet.data
        return float(out[0]) if np.asarray(x).ndim == 1 else out

    def sample_hypotheses(self, y, cond, M, rng=None, force_z0=False,
                          prepend_z0=False):
        """M 3D hypotheses for one 2D observation, as an (M[, +1], 3J) array.

        Each hypothesis inverts the flow at an i.i.d. z ~ N(0, I).
        force_z0 replaces every draw with the all-zero latent;
        prepend_z0 adds the z = 0 pose as row 0 (M + 1 rows total).
        """
        if M < 1:
            raise ValueError(f"hypothesis count must be >= 1, got {M}")
        if rng is None and not force_z0:
            raise ValueError("rng required unless force_z0 is set")
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        cond = np.asarray(cond, dtype=np.float64).reshape(-1)
        if force_z0:
            zs = np.zeros((M, self.dim_z))
        else:
            zs = rng.standard_normal((M, self.dim_z))
        if prepend_z0:
            zs = np.vstack([np.zeros((1, self.dim_z)), zs])
        with nd.no_grad():
            c_enc = self.encode(cond)
            ys = nd.broadcast_to(nd.reshape(nd.constant(y), (1, self.dim_y)),
                                 (zs.shape[0], self.dim_y))
            x = self.inverse(ys, nd.constant(zs), c_enc=c_enc)
        return x.data

    # ------------------------------------------------------------------
    # serialization

    def save(self, path, disc=None):
        save_model(self, path, disc=disc)


def write_model_body(w, model, disc=None):
    """Header, condition standardizer, permutations, weights onto a Writer."""
    for v in (model.J, model.n_blocks, model.hidden, model.cond_hidden,
              model.cond_dim, model.d1, model.d2, model.cond_in):
        w.u32(v)
    w.f64(model.alpha)
    w.i64(int(model.seed))
    w.u32(len(model.hips))
    for h in model.hips:
        w.u32(h)
    w.array(model.cond_shift)
    w.array(model.cond_scale)
    for p in model.perms:
        w.array(p, dtype="<u4")
    for p in model.parameters():
        w.array(p.data)
    if disc is None:
        w.u8(0)
    else:
        w.u8(1)
        posedisc.write_disc(w, disc)


def read_model_body(r):
    """Counterpart of write_model_body; returns (model, disc or None)."""
    J, n_blocks, hidden, cond_hidden, cond_dim, d1, d2, cond_in = (
        r.u32() for _ in range(8))
    alpha = r.f64()
    seed = r.i64()
    hips = tuple(r.u32() for _ in range(r.u32()))
    cond_shift = r.array(cond_in)
    cond_scale = r.array(cond_in)
    model = FlowModel(J=J, n_blocks=n_blocks, hidden=hidden,
                      cond_hidden=cond_hidden, cond_dim=cond_dim,
                      alpha=alpha, seed=seed, hips=hips,
                      cond_shift=cond_shift, cond_scale=cond_scale)
    if (d1, d2, cond_in) != (model.d1, model.d2, model.cond_in):
        raise ShapeError("model header dims are inconsistent")
    model.perms = [r.array_raw(model.dim_x, "<u4").astype(np.intp)
                   for _ in range(n_blocks)]
    model.inv_perms = [np.argsort(p) for p in model.perms]
    for p in model.parameters():
        p.data = r.array(p.data.size).reshape(p.data.shape)
    disc = None
    if r.u8() == 1:
        disc = posedisc.read_disc(r)
    return model, disc


def save_model(model, path, disc=None):
    """Model file: versioned header plus write_model_body and a CRC.

    The pose discriminator, when given, is stored in the same file so one
    artifact carries everything a resumed run needs.
    """
    with open(path, "wb") as fh:
        w = Writer(fh)
        w.raw(MODEL_MAGIC)
        w.u32(MODEL_VERSION)
        write_model_body(w, model, disc)
        w.finish_crc()


def load_model(path):
    """Returns (FlowModel, Discriminator or None)."""
    with open(path, "rb") as fh:
        r = Reader(fh)
        r.expect_magic(MODEL_MAGIC, MODEL_VERSION, "flow model")
        model, disc = read_model_body(r)
        r.check_crc()
    return model, disc
