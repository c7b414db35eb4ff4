"""Training schedule for the conditional flow and its pose discriminator.

Each step runs five phases on one batch: (1) forward pass for the 2D
reconstruction and latent-distribution (MMD) losses, (2) inverse passes at
drawn latents for the generator, k-best and covariance losses, (3) an
inverse pass at the detector latent for the cycle loss, (4) a clipped Adam
update of the flow from the single combined graph, and (5) a WGAN-GP update
of the discriminator on fresh detached fakes.

All randomness comes from streams derived from (seed, label) where the
label encodes epoch or step indices, so a run resumed from a checkpoint
continues bit-exactly.
"""

from dataclasses import dataclass, field

import numpy as np

from . import flow as flowmod
from . import losses
from . import ndcore as nd
from . import posedisc
from ._binio import Reader, Writer
from .errors import ConfigError, FileFormatError, NumericError
from .losses import LossWeights

CKPT_MAGIC = b"AFCK"
CKPT_VERSION = 1

HISTORY_FIELDS = ("step", "epoch", "lr", "l2d", "l_gen", "l_mmd", "l_det",
                  "l_mb", "l_hm", "total", "disc_loss", "gp", "z_rms")


@dataclass
class TrainConfig:
    epochs: int = 155
    batch_size: int = 64
    lr: float = 1e-4
    lr_halve_after: int = 150   # epochs at full lr before halving
    clip: float = 15.0
    n_hyp: int = 200            # latent draws per sample for phase 2
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_every: int = 0   # epochs; 0 disables

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch size must be >= 2 (unbiased MMD)")
        if self.lr <= 0 or self.clip <= 0:
            raise ConfigError("lr and clip must be positive")
        if self.n_hyp < 2:
            raise ConfigError("n_hyp must be >= 2 (hypothesis covariance)")
        if self.weights.k > self.n_hyp:
            raise ConfigError(
                f"k-best k={self.weights.k} exceeds n_hyp={self.n_hyp}")

    def lr_at(self, epoch):
        return self.lr * (0.5 if epoch >= self.lr_halve_after else 1.0)


@dataclass
class StepReport:
    step: int
    epoch: int
    lr: float
    l2d: float
    l_gen: float
    l_mmd: float
    l_det: float
    l_mb: float
    l_hm: float
    total: float
    disc_loss: float
    gp: float
    z_rms: float

    def row(self):
        return [getattr(self, f) for f in HISTORY_FIELDS]


def build_models(J=16, model_seed=0, disc_seed=1, cond_center=(128.0, 128.0),
                 **flow_kwargs):
    """Fresh flow + discriminator pair with a matching skeleton."""
    from .heatmap import condition_standardizer

    skel = posedisc.default_skeleton()
    if skel.n_joints != J:
        raise ConfigError(f"default skeleton has {skel.n_joints} joints, not {J}")
    shift, scale = condition_standardizer(cond_center, J=J,
                                          n_hips=len(skel.hips))
    model = flowmod.FlowModel(J=J, seed=model_seed, hips=skel.hips,
                              cond_shift=shift, cond_scale=scale,
                              **flow_kwargs)
    disc = posedisc.Discriminator(skel, seed=disc_seed)
    return model, disc


def _annotate(term, step, exc):
    return NumericError(f"{term} produced a non-finite value at step {step}: {exc}")


def train_step(model, disc, opt_flow, opt_disc, batch, cfg, step, epoch):
    """One five-phase update; returns a StepReport of scalar diagnostics."""
    w = cfg.weights
    B = batch["x"].shape[0]
    J = model.J
    L = cfg.n_hyp
    x = nd.constant(batch["x"])
    y = nd.constant(batch["y"])
    cond = nd.constant(batch["cond"])
    parts = {}
    term = "forward pass"
    try:
        # phase 1: forward, reconstruction + latent MMD
        c_enc = model.encode(cond)
        y_hat, z_det = model.forward(x, c_enc=c_enc)
        term = "l2d"
        parts["l2d"] = losses.l2d(y, y_hat)
        term = "l_mmd"
        z_prior = nd.rng_from(cfg.seed, f"mmdz{step}").standard_normal((B, J))
        V = nd.concat([y, nd.constant(z_prior)], axis=1)
        V_hat = nd.concat([nd.stop_gradient(y_hat), z_det], axis=1)
        parts["l_mmd"] = losses.mmd_unbiased(V, V_hat, w.bandwidths)

        # phase 2: hypotheses from drawn latents
        term = "inverse pass"
        zL = nd.rng_from(cfg.seed, f"z{step}").standard_normal((B * L, J))
        y_rep = np.repeat(batch["y"], L, axis=0)
        c_rep = model.encode(nd.constant(np.repeat(batch["cond"], L, axis=0)))
        x_gen = model.inverse(nd.constant(y_rep), nd.constant(zL), c_enc=c_rep)
        term = "l_gen"
        parts["l_gen"] = posedisc.gen_loss(disc, x_gen)
        term = "l_mb"
        H = nd.reshape(x_gen, (B, L, 3 * J))
        mb_sum = None
        for b in range(B):
            Hb = nd.reshape(nd.narrow(H, 0, b, 1), (L, 3 * J))
            xb = nd.reshape(nd.narrow(x, 0, b, 1), (3 * J,))
            lb = losses.l_mb(Hb, xb, w.k)
            mb_sum = lb if mb_sum is None else nd.add(mb_sum, lb)
        parts["l_mb"] = nd.mul(mb_sum, 1.0 / B)
        term = "l_hm"
        cov_hyp = losses.xy_covariance(nd.reshape(x_gen, (B, L, J, 3)))
        to_px2 = (1000.0 / w.mm_per_px) ** 2
        parts["l_hm"] = losses.l_hm(nd.constant(batch["cov_fit"]),
                                    nd.mul(cov_hyp, to_px2), w.sigma_t)

        # phase 3: cycle through the detector latent (gradients flow into it)
        term = "l_det"
        x_det = model.inverse(y, z_det, c_enc=c_enc)
        parts["l_det"] = losses.l_det(x, x_det)

        # phase 4: combined backward, clip, Adam
        term = "total loss"
        total = losses.total_nf_loss(parts, w)
        grads = [g.data for g in nd.grad(total, model.parameters())]
        grads = nd.clip_gradients(grads, -cfg.clip, cfg.clip)
        for p, g in zip(model.parameters(), grads):
            p.grad = g
        opt_flow.step()
        opt_flow.zero_grad()
    except NumericError as e:
        raise _annotate(term, step, e) from e

    # keep scalars, then release the flow graph before building the
    # discriminator graph so the two never coexist at full size
    part_vals = {k: float(v.data) for k, v in parts.items()}
    total_val = float(total.data)
    z_rms = float(np.sqrt(np.mean(z_det.data ** 2)))
    del (parts, total, grads, x_gen, H, Hb, xb, lb, mb_sum, cov_hyp, x_det,
         y_hat, z_det, V, V_hat, c_enc, c_rep)

    # phase 5: discriminator on fresh detached fakes
    term = "discriminator update"
    try:
        zf = nd.rng_from(cfg.seed, f"discz{step}").standard_normal((B, J))
        with nd.no_grad():
            fake = model.inverse(y, nd.constant(zf), c_enc=model.encode(cond))
        fake = nd.constant(fake.data)
        wass = nd.sub(nd.tmean(disc.score(fake)), nd.tmean(disc.score(x)))
        gp = posedisc.gradient_penalty(disc.score, x, fake,
                                       rng=nd.rng_from(cfg.seed, f"gp{step}"))
        d_loss = nd.add(wass, gp)
        dgrads = [g.data for g in nd.grad(d_loss, disc.parameters())]
        dgrads = nd.clip_gradients(dgrads, -cfg.clip, cfg.clip)
        for p, g in zip(disc.parameters(), dgrads):
            p.grad = g
        opt_disc.step()
        opt_disc.zero_grad()
    except NumericError as e:
        raise _annotate(term, step, e) from e

    return StepReport(
        step=step, epoch=epoch, lr=opt_flow.lr,
        l2d=part_vals["l2d"], l_gen=part_vals["l_gen"],
        l_mmd=part_vals["l_mmd"], l_det=part_vals["l_det"],
        l_mb=part_vals["l_mb"], l_hm=part_vals["l_hm"],
        total=total_val, disc_loss=float(d_loss.data),
        gp=float(gp.data), z_rms=z_rms)


def train(arrays, cfg, model=None, disc=None, out_dir=None, resume=None,
          log=None):
    """Full schedule over prepared arrays; returns (model, disc, history).

    arrays is the dict from data.prepare_arrays.  resume takes a checkpoint
    path and continues from the epoch after the one stored there; the run
    seed must match the original so derived random streams line up.
    """
    import os

    n = arrays["x"].shape[0]
    step = 0
    start_epoch = 0
    if resume is not None:
        model, disc, opt_flow, opt_disc, start_epoch, step, seed = (
            load_checkpoint(resume))
        if seed != cfg.seed:
            raise ConfigError(
                f"checkpoint seed {seed} does not match config seed {cfg.seed}")
    else:
        if model is None or disc is None:
            built = build_models(J=arrays["J"])
            model = model or built[0]
            disc = disc or built[1]
        opt_flow = nd.Adam(model.parameters(), lr=cfg.lr)
        opt_disc = nd.Adam(disc.parameters(), lr=cfg.lr)
    history = []
    for epoch in range(start_epoch, cfg.epochs):
        lr = cfg.lr_at(epoch)
        opt_flow.lr = lr
        opt_disc.lr = lr
        order = nd.rng_from(cfg.seed, f"shuffle{epoch}").permutation(n)
        epoch_rows = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            if idx.size < 2:
                continue
            batch = {k: arrays[k][idx] for k in ("x", "y", "cond")}
            batch["cov_fit"] = arrays["cov_fit"][idx]
            report = train_step(model, disc, opt_flow, opt_disc, batch,
                                cfg, step, epoch)
            history.append(report)
            epoch_rows.append(report)
            step += 1
        if log is not None and epoch_rows:
            mean = {f: float(np.mean([getattr(r, f) for r in epoch_rows]))
                    for f in ("l2d", "l_mmd", "l_det", "total", "disc_loss")}
            log(f"epoch {epoch + 1}/{cfg.epochs} lr={lr:g} "
                f"l2d={mean['l2d']:.4f} mmd={mean['l_mmd']:.4f} "
                f"det={mean['l_det']:.4f} total={mean['total']:.3f} "
                f"disc={mean['disc_loss']:.3f}")
        if (out_dir is not None and cfg.checkpoint_every > 0
                and (epoch + 1) % cfg.checkpoint_every == 0):
            path = os.path.join(out_dir, f"checkpoint_ep{epoch + 1:04d}.afck")
            save_checkpoint(path, model, disc, opt_flow, opt_disc,
                            epoch + 1, step, cfg.seed)
    return model, disc, history


def write_history_csv(path, history):
    with open(path, "w") as fh:
        fh.write(",".join(HISTORY_FIELDS) + "\n")
        for r in history:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in r.row()) + "\n")


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, model, disc, opt_flow, opt_disc, epochs_done,
                    step, seed):
    with open(path, "wb") as fh:
        w = Writer(fh)
        w.raw(CKPT_MAGIC)
        w.u32(CKPT_VERSION)
        w.u32(epochs_done)
        w.u64(step)
        w.i64(seed)
        flowmod.write_model_body(w, model, disc)
        for opt in (opt_flow, opt_disc):
            m, v, t = opt.state_arrays()
            w.u64(t)
            for a in m:
                w.array(a.ravel())
            for a in v:
                w.array(a.ravel())
        w.finish_crc()


def load_checkpoint(path):
    """Returns (model, disc, opt_flow, opt_disc, epochs_done, step, seed)."""
    with open(path, "rb") as fh:
        r = Reader(fh)
        r.expect_magic(CKPT_MAGIC, CKPT_VERSION, "checkpoint")
        epochs_done = r.u32()
        step = r.u64()
        seed = r.i64()
        model, disc = flowmod.read_model_body(r)
        if disc is None:
            raise FileFormatError("checkpoint is missing the discriminator")
        opts = []
        for obj in (model, disc):
            params = obj.parameters()
            opt = nd.Adam(params)
            t = r.u64()
            m = [r.array(p.data.size).reshape(p.data.shape) for p in params]
            v = [r.array(p.data.size).reshape(p.data.shape) for p in params]
            opt.load_state(m, v, t)
            opts.append(opt)
        r.check_crc()
    return model, disc, opts[0], opts[1], epochs_done, step, seed


# ---------------------------------------------------------------------------
# quick sanity run

def overfit_smoke(arrays, steps=200, lr=1e-3, n_hyp=4, k=2, seed=0):
    """Hammer a handful of samples; losses must fall if wiring is right.

    Returns first/final loss readings plus the final z = 0 pose error in mm.
    """
    from .metrics import mpjpe

    cfg = TrainConfig(epochs=1, batch_size=max(2, arrays["x"].shape[0]),
                      lr=lr, lr_halve_after=10 ** 9, n_hyp=n_hyp, seed=seed,
                      weights=LossWeights(k=k))
    model, disc = build_models(J=arrays["J"])
    opt_flow = nd.Adam(model.parameters(), lr=lr)
    opt_disc = nd.Adam(disc.parameters(), lr=lr)
    batch = {k2: arrays[k2] for k2 in ("x", "y", "cond", "cov_fit")}
    first = None
    report = None
    for step in range(steps):
        report = train_step(model, disc, opt_flow, opt_disc, batch,
                            cfg, step, 0)
        if first is None:
            first = report
    errs = []
    for i in range(arrays["x"].shape[0]):
        z0 = model.sample_hypotheses(arrays["y"][i], arrays["cond"][i],
                                     M=1, force_z0=True)[0]
        errs.append(mpjpe(z0.reshape(-1, 3), arrays["x"][i].reshape(-1, 3)))
    return {"l2d_first": first.l2d, "l2d_final": report.l2d,
            "total_first": first.total, "total_final": report.total,
            "z0_mpjpe_mm": 1000.0 * float(np.mean(errs))}
