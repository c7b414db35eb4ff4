"""Command-line pipeline: gen, train, sample, eval, fit-heatmaps, plot.

Configuration is a flat `key = value` file with `#` comments and an
optional `include = other.cfg` directive (paths relative to the including
file).  `--set key=value` overrides win over the file.  Unknown keys are
rejected so typos fail loudly instead of silently training with defaults.

Exit codes: 0 success, 2 configuration problem, 3 file I/O problem,
4 numeric failure during computation.

Thread pinning: AMBIFLOW_THREADS (default 1) is written into the BLAS
thread-count variables before numpy loads, which is why the heavy imports
live inside the subcommand handlers.
"""

import argparse
import math
import os
import sys

from .errors import ConfigError, FileFormatError, NumericError


def _pin_threads():
    n = os.environ.get("AMBIFLOW_THREADS", "")
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        if n:
            os.environ[var] = n
        else:
            os.environ.setdefault(var, "1")


# ---------------------------------------------------------------------------
# config handling

def _coerce(raw):
    raw = raw.strip()
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    return raw


def parse_config_file(path, _seen=None):
    """Flat key = value file; include directives compose left to right."""
    _seen = _seen or set()
    real = os.path.realpath(path)
    if real in _seen:
        raise ConfigError(f"config include cycle at {path}")
    _seen.add(real)
    out = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    for ln, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected key = value")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key == "include":
            inc = os.path.join(os.path.dirname(path), val)
            out.update(parse_config_file(inc, _seen))
        else:
            out[key] = _coerce(val)
    return out


def resolve_config(defaults, args):
    """defaults dict + optional --config file + --set overrides."""
    cfg = dict(defaults)
    raw = {}
    if getattr(args, "config", None):
        raw.update(parse_config_file(args.config))
    for pair in getattr(args, "set", None) or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, _, val = pair.partition("=")
        raw[key.strip()] = _coerce(val)
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise ConfigError(
            f"unknown config keys {unknown}; valid: {sorted(defaults)}")
    cfg.update(raw)
    return cfg


def write_effective_config(cfg, path):
    with open(path, "w") as fh:
        for k in sorted(cfg):
            fh.write(f"{k} = {cfg[k]}\n")


# ---------------------------------------------------------------------------
# subcommands

GEN_DEFAULTS = {
    "n_samples": 5000, "occlusion_rate": 0.3, "seed": 0,
    "camera_kind": "ortho", "camera_scale": 100.0,
    "camera_cx": 128.0, "camera_cy": 128.0,
    "sigma_clean": 2.0, "sigma_occ_lo": 4.0, "sigma_occ_hi": 10.0,
    "yaw_range": math.pi, "angle_scale": 1.0,
}

TRAIN_DEFAULTS = {
    "epochs": 155, "batch_size": 64, "lr": 1e-4, "lr_halve_after": 150,
    "clip": 15.0, "n_hyp": 200, "seed": 0, "checkpoint_every": 0,
    "model_seed": 0, "disc_seed": 1,
    "lam_mmd": 10.0, "lam_det": 4.0, "lam_mb": 4.0, "lam_hm": 750.0,
    "k_best": 5, "sigma_t": 2.1, "mm_per_px": 10.0,
}

SAMPLE_DEFAULTS = {"count": 200, "seed": 0, "limit": 0}

EVAL_DEFAULTS = {"with_scale": True}


def cmd_gen(args):
    import numpy as np

    from . import data

    cfg = resolve_config(GEN_DEFAULTS, args)
    cam = data.Camera(kind=cfg["camera_kind"], scale=cfg["camera_scale"],
                      center=(cfg["camera_cx"], cfg["camera_cy"]))
    gen = data.GenConfig(
        n_samples=cfg["n_samples"], occlusion_rate=cfg["occlusion_rate"],
        seed=cfg["seed"], camera=cam, sigma_clean=cfg["sigma_clean"],
        sigma_occluded=(cfg["sigma_occ_lo"], cfg["sigma_occ_hi"]),
        yaw_range=cfg["yaw_range"], angle_scale=cfg["angle_scale"])
    samples = data.generate_dataset(gen)
    data.write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    if args.heatmaps:
        from .heatmap import write_heatmaps

        count = min(args.heatmap_count, len(samples))
        maps = [data.sample_heatmaps(s, args.heatmap_size, args.heatmap_size)
                for s in samples[:count]]
        write_heatmaps(args.heatmaps, np.stack(maps))
        print(f"wrote {count} heatmap stacks to {args.heatmaps}")
    return 0


def cmd_train(args):
    import numpy as np

    from . import data, trainer
    from .flow import save_model
    from .losses import LossWeights

    cfg = resolve_config(TRAIN_DEFAULTS, args)
    samples = data.read_dataset(args.data)
    arrays = data.prepare_arrays(samples)
    weights = LossWeights(lam_mmd=cfg["lam_mmd"], lam_det=cfg["lam_det"],
                          lam_mb=cfg["lam_mb"], lam_hm=cfg["lam_hm"],
                          k=cfg["k_best"], sigma_t=cfg["sigma_t"],
                          mm_per_px=cfg["mm_per_px"])
    tc = trainer.TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
        lr_halve_after=cfg["lr_halve_after"], clip=cfg["clip"],
        n_hyp=cfg["n_hyp"], seed=cfg["seed"], weights=weights,
        checkpoint_every=cfg["checkpoint_every"])
    os.makedirs(args.out, exist_ok=True)
    write_effective_config(cfg, os.path.join(args.out, "effective.cfg"))
    model = disc = None
    if args.resume is None:
        cam = arrays["camera"]
        model, disc = trainer.build_models(
            J=arrays["J"], model_seed=cfg["model_seed"],
            disc_seed=cfg["disc_seed"], cond_center=cam.center)
    if args.quiet:
        log = None
    else:
        def log(msg):
            print(msg, flush=True)
    model, disc, history = trainer.train(arrays, tc, model=model, disc=disc,
                                         out_dir=args.out, resume=args.resume,
                                         log=log)
    save_model(model, os.path.join(args.out, "model.afnf"), disc=disc)
    trainer.write_history_csv(os.path.join(args.out, "history.csv"), history)
    print(f"trained {len(history)} steps; artifacts in {args.out}")
    return 0


def cmd_sample(args):
    import numpy as np

    from . import data, ndcore
    from .flow import load_model

    cfg = resolve_config(SAMPLE_DEFAULTS, args)
    model, _ = load_model(args.model)
    samples = data.read_dataset(args.data)
    arrays = data.prepare_arrays(samples, hips=model.hips)
    n = arrays["x"].shape[0]
    if cfg["limit"]:
        n = min(n, cfg["limit"])
    hyps = np.zeros((n, cfg["count"] + 1, model.dim_x))
    for i in range(n):
        rng = ndcore.rng_from(cfg["seed"], f"hyp{i}")
        hyps[i] = model.sample_hypotheses(arrays["y"][i], arrays["cond"][i],
                                          M=cfg["count"], rng=rng,
                                          prepend_z0=True)
    data.write_hypotheses(args.out, hyps, z0_first=True)
    print(f"wrote {n} x {cfg['count']}+z0 hypotheses to {args.out}")
    return 0


def _reprojection_px(hyp_m, y_px, scale):
    """Mean absolute px error between projected xy and the centered target."""
    import numpy as np

    y_c = y_px - y_px.mean(axis=0)
    proj = scale * hyp_m[..., :2]
    return np.abs(proj - y_c).mean(axis=(-2, -1))


def cmd_eval(args):
    import numpy as np

    from . import data
    from .metrics import EvalReport, evaluate

    cfg = resolve_config(EVAL_DEFAULTS, args)
    flat, z0_first = data.read_hypotheses(args.hyps)
    samples = data.read_dataset(args.data)
    n, M_total, dim = flat.shape
    if n > len(samples):
        raise FileFormatError(
            f"{n} hypothesis sets but only {len(samples)} dataset samples")
    samples = samples[:n]
    J = dim // 3
    hyp = flat.reshape(n, M_total, J, 3)
    z0 = hyp[:, 0] if z0_first else None
    draws = hyp[:, 1:] if z0_first else hyp

    def center_mm(p):
        return 1000.0 * (p - p[..., :1, :])

    gts = np.stack([data.hip_center(s.pose3d) * 1000.0 for s in samples])
    report = evaluate(center_mm(draws), gts,
                      z0=center_mm(z0) if z0 is not None else None,
                      with_scale=cfg["with_scale"])
    cols = dict(report.columns)
    cam = samples[0].camera
    if cam.kind == "ortho":
        reproj = np.stack([_reprojection_px(draws[i], samples[i].pose2d, cam.scale)
                           for i in range(n)])
        cols["hyp_reproj_med_px"] = np.median(reproj, axis=1)
        if z0 is not None:
            cols["z0_reproj_px"] = np.array(
                [_reprojection_px(z0[i], samples[i].pose2d, cam.scale)
                 for i in range(n)])
    report = EvalReport(columns=cols, per_joint_spread=report.per_joint_spread)
    os.makedirs(args.out, exist_ok=True)
    report.to_csv(os.path.join(args.out, "eval.csv"))
    _write_spread_csv(os.path.join(args.out, "spread.csv"), draws, samples)
    with open(os.path.join(args.out, "summary.txt"), "w") as fh:
        fh.write(report.summary())
    print(report.summary(), end="")
    return 0


def _write_spread_csv(path, draws, samples):
    """Per-joint detector vs hypothesis spread, px, for calibration checks."""
    import csv

    import numpy as np

    from .metrics import hypothesis_spread

    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["sample", "joint", "occluded", "sigma_fit_x_px",
                     "sigma_fit_y_px", "spread_x_px", "spread_y_px",
                     "spread_depth_mm"])
        for i, s in enumerate(samples):
            scale = s.camera.scale
            std, _ = hypothesis_spread(draws[i])   # metres
            for j in range(s.pose3d.shape[0]):
                wr.writerow([i, j, int(s.occluded[j]),
                             repr(float(np.sqrt(s.gaussians[j, 3]))),
                             repr(float(np.sqrt(s.gaussians[j, 5]))),
                             repr(float(std[j, 0] * scale)),
                             repr(float(std[j, 1] * scale)),
                             repr(float(std[j, 2] * 1000.0))])


def cmd_fit_heatmaps(args):
    from .heatmap import fit_joint_gaussians, read_heatmaps, write_gaussians_csv

    maps = read_heatmaps(args.heatmaps)
    fits = [fit_joint_gaussians(stack) for stack in maps]
    write_gaussians_csv(args.out, fits)
    total = sum(len(f) for f in fits)
    bad = sum(1 for f in fits for r in f if not r.converged)
    print(f"fit {total} heatmaps ({bad} unconverged) -> {args.out}")
    return 0


def cmd_plot(args):
    import numpy as np

    from . import data, plots

    os.makedirs(args.out, exist_ok=True)
    wrote = []
    if args.history:
        wrote.append(plots.loss_curves(args.history,
                                       os.path.join(args.out, "loss_curves")))
    if args.hyps and args.data:
        from .metrics import evaluate
        from .posedisc import default_skeleton

        flat, z0_first = data.read_hypotheses(args.hyps)
        samples = data.read_dataset(args.data)[:flat.shape[0]]
        J = flat.shape[2] // 3
        hyp = flat.reshape(flat.shape[0], -1, J, 3)
        draws = hyp[:, 1:] if z0_first else hyp
        hyp_mm = 1000.0 * (draws - draws[..., :1, :])
        gts = np.stack([data.hip_center(s.pose3d) * 1000.0 for s in samples])
        wrote.append(plots.error_vs_m(hyp_mm, gts,
                                      os.path.join(args.out, "error_vs_m")))
        report = evaluate(hyp_mm, gts)
        names = default_skeleton().names if J == 16 else [str(j) for j in range(J)]
        wrote.append(plots.spread_bars(report.per_joint_spread, names,
                                       os.path.join(args.out, "spread_bars")))
    if not wrote:
        raise ConfigError("plot needs --history and/or --hyps with --data")
    print("wrote " + ", ".join(wrote))
    return 0


# ---------------------------------------------------------------------------
# argument wiring

def build_parser():
    p = argparse.ArgumentParser(
        prog="ambiflow",
        description="normalizing-flow 3D pose ambiguity pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key")

    sp = sub.add_parser("gen", help="generate a synthetic dataset")
    sp.add_argument("--out", required=True, help="dataset file to write")
    sp.add_argument("--heatmaps", help="also write synthesized heatmaps here")
    sp.add_argument("--heatmap-count", type=int, default=8)
    sp.add_argument("--heatmap-size", type=int, default=256)
    common(sp)
    sp.set_defaults(fn=cmd_gen)

    sp = sub.add_parser("train", help="train flow + discriminator")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--resume", help="checkpoint file to continue from")
    sp.add_argument("--quiet", action="store_true")
    common(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("sample", help="draw pose hypotheses from a model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="hypothesis file to write")
    common(sp)
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("eval", help="score hypotheses against ground truth")
    sp.add_argument("--hyps", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="output directory")
    common(sp)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("fit-heatmaps", help="fit Gaussians to heatmap stacks")
    sp.add_argument("--heatmaps", required=True)
    sp.add_argument("--out", required=True, help="CSV file to write")
    common(sp)
    sp.set_defaults(fn=cmd_fit_heatmaps)

    sp = sub.add_parser("plot", help="render diagnostic figures")
    sp.add_argument("--history", help="training history CSV")
    sp.add_argument("--hyps", help="hypothesis file")
    sp.add_argument("--data", help="dataset file (with --hyps)")
    sp.add_argument("--out", required=True, help="output directory")
    common(sp)
    sp.set_defaults(fn=cmd_plot)
    return p


def entry(argv=None):
    _pin_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (FileFormatError, OSError) as e:
        print(f"file error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(entry())
