"""Diagnostic figures with machine-readable twins.

Every plot writes an SVG next to a CSV holding exactly the plotted numbers.
The CSV is the artifact to hash or diff; SVG output carries renderer noise
(ids, library version) and is for eyes only.
"""

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import mpjpe

_SVG_META = {"Date": None}   # keep reruns from embedding a timestamp

LOSS_KEYS = ("l2d", "l_gen", "l_mmd", "l_det", "l_mb", "l_hm", "total",
             "disc_loss")


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)


def loss_curves(history_csv, out_base):
    """Per-step loss curves from a training history CSV.

    Writes out_base.svg and out_base.csv; returns the csv path.
    """
    with open(history_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"empty history: {history_csv}")
    steps = [int(r["step"]) for r in rows]
    fig, axes = plt.subplots(2, 4, figsize=(16, 7))
    out_rows = []
    for ax, key in zip(axes.ravel(), LOSS_KEYS):
        vals = [float(r[key]) for r in rows]
        ax.plot(steps, vals, lw=0.8)
        ax.set_title(key)
        ax.set_xlabel("step")
    for r in rows:
        out_rows.append([r["step"], r["epoch"]] +
                        [repr(float(r[k])) for k in LOSS_KEYS])
    fig.tight_layout()
    fig.savefig(out_base + ".svg", metadata=_SVG_META)
    plt.close(fig)
    _write_rows(out_base + ".csv", ["step", "epoch"] + list(LOSS_KEYS), out_rows)
    return out_base + ".csv"


def error_vs_m(hyps_mm, gts_mm, out_base, ms=None):
    """Mean best-of-m MPJPE as the hypothesis budget m grows.

    hyps_mm: (n, M, J, 3), gts_mm: (n, J, 3), both hip-centered mm.  The
    curve is nonincreasing by construction since larger budgets only add
    candidates.
    """
    hyps_mm = np.asarray(hyps_mm, dtype=np.float64)
    gts_mm = np.asarray(gts_mm, dtype=np.float64)
    M = hyps_mm.shape[1]
    if ms is None:
        ms = [m for m in (1, 2, 5, 10, 20, 50, 100, 200, 500) if m <= M]
        if ms[-1] != M:
            ms.append(M)
    errs = np.array([[mpjpe(h, x) for h in H] for H, x in zip(hyps_mm, gts_mm)])
    curve = [(m, float(np.mean(errs[:, :m].min(axis=1)))) for m in ms]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([c[0] for c in curve], [c[1] for c in curve], marker="o")
    ax.set_xscale("log")
    ax.set_xlabel("hypotheses m")
    ax.set_ylabel("mean best-of-m MPJPE (mm)")
    fig.tight_layout()
    fig.savefig(out_base + ".svg", metadata=_SVG_META)
    plt.close(fig)
    _write_rows(out_base + ".csv", ["m", "mean_best_mpjpe_mm"],
                [[m, repr(v)] for m, v in curve])
    return out_base + ".csv"


def spread_bars(per_joint_spread_mm, joint_names, out_base):
    """Per-joint hypothesis standard deviation, one bar group per axis."""
    spread = np.asarray(per_joint_spread_mm, dtype=np.float64)
    if spread.shape != (len(joint_names), 3):
        raise ValueError(f"expected ({len(joint_names)}, 3), got {spread.shape}")
    idx = np.arange(len(joint_names))
    fig, ax = plt.subplots(figsize=(10, 4))
    for a, (label, off) in enumerate((("x", -0.25), ("y", 0.0), ("depth", 0.25))):
        ax.bar(idx + off, spread[:, a], width=0.25, label=label)
    ax.set_xticks(idx)
    ax.set_xticklabels(joint_names, rotation=60, ha="right")
    ax.set_ylabel("hypothesis std (mm)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_base + ".svg", metadata=_SVG_META)
    plt.close(fig)
    _write_rows(out_base + ".csv", ["joint", "std_x_mm", "std_y_mm", "std_depth_mm"],
                [[n] + [repr(float(v)) for v in row]
                 for n, row in zip(joint_names, spread)])
    return out_base + ".csv"
