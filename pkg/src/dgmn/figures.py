"""Matplotlib rendering of the CLI's reports.

Every report command writes a PNG next to its CSV/JSON output. Figures are
data views only; the delimited files remain the authoritative artifacts.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

PALETTE = {"dgmn": "#1f77b4", "nonlocal": "#d62728", "accent": "#2ca02c"}

plt.rcParams.update({
    "figure.figsize": (6.4, 4.0),
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 120,
})


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_gradcheck(report, path) -> None:
    """Horizontal bars of per-tensor max relative error on a log axis."""
    names = [r.name for r in report.rows]
    errs = [max(r.max_rel_err, 1e-18) for r in report.rows]
    fig, ax = plt.subplots(figsize=(6.4, 0.3 * len(names) + 1.5))
    ax.barh(range(len(names)), errs, color=PALETTE["dgmn"])
    ax.set_yticks(range(len(names)), names, fontsize=7)
    ax.axvline(report.threshold, color=PALETTE["nonlocal"], linestyle="--",
               label=f"threshold {report.threshold:g}")
    ax.set_xscale("log")
    ax.set_xlabel("max relative error vs central differences")
    ax.invert_yaxis()
    ax.legend(loc="lower right")
    _finish(fig, path)


def plot_equiv(errors, tolerance, path) -> None:
    fig, ax = plt.subplots()
    ax.plot(range(len(errors)), [max(e, 1e-18) for e in errors], ".",
            color=PALETTE["dgmn"])
    ax.axhline(tolerance, color=PALETTE["nonlocal"], linestyle="--",
               label=f"tolerance {tolerance:g}")
    ax.set_yscale("log")
    ax.set_xlabel("random case")
    ax.set_ylabel("max |vectorized - naive|")
    ax.legend(loc="upper right")
    _finish(fig, path)


def plot_cost(report, nonlocal_report, path) -> None:
    """Component MAC breakdown for the layer next to the attention reference."""
    fig, axes = plt.subplots(1, 2, figsize=(9.0, 4.0))
    for ax, rep, color in ((axes[0], report, PALETTE["dgmn"]),
                           (axes[1], nonlocal_report, PALETTE["nonlocal"])):
        rows = [r for r in rep.rows if r.macs > 0]
        ax.barh(range(len(rows)), [r.macs for r in rows], color=color)
        ax.set_yticks(range(len(rows)), [r.name for r in rows], fontsize=7)
        ax.set_xlabel("MACs")
        ax.set_title(f"{rep.config.get('model', '?')}: "
                     f"{rep.total_macs / 1e9:.2f} GMACs", fontsize=9)
        ax.invert_yaxis()
    _finish(fig, path)


def plot_scaling(report, path) -> None:
    ns = [r.positions for r in report.rows]
    fig, ax = plt.subplots()
    ax.loglog(ns, [r.dgmn_macs for r in report.rows], "o-",
              color=PALETTE["dgmn"],
              label=f"sampled layer (slope {report.dgmn_slope:.2f})")
    ax.loglog(ns, [r.attention_macs for r in report.rows], "s-",
              color=PALETTE["nonlocal"],
              label=f"dense attention term (slope {report.nonlocal_attention_slope:.2f})")
    ax.loglog(ns, [r.nonlocal_macs for r in report.rows], "s--",
              color=PALETTE["nonlocal"], alpha=0.5, label="dense attention total")
    ax.set_xlabel("positions N = h*w")
    ax.set_ylabel("MACs")
    ax.legend()
    _finish(fig, path)


def plot_curve(curve, path) -> None:
    steps = [r.step for r in curve]
    fig, ax = plt.subplots()
    ax.plot(steps, [r.loss for r in curve], color=PALETTE["dgmn"], label="loss")
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy")
    ax.set_yscale("log")
    ax2 = ax.twinx()
    ax2.plot(steps, [r.square_accuracy for r in curve], color=PALETTE["accent"],
             alpha=0.7, label="square accuracy")
    ax2.set_ylabel("target-square accuracy")
    ax2.set_ylim(-0.02, 1.02)
    ax2.grid(False)
    lines = ax.get_lines() + ax2.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines], loc="center right")
    _finish(fig, path)


def plot_bench(rows, path) -> None:
    """rows: (label, seconds) pairs."""
    fig, ax = plt.subplots(figsize=(6.4, 0.35 * len(rows) + 1.5))
    ax.barh(range(len(rows)), [r[1] for r in rows], color=PALETTE["dgmn"])
    ax.set_yticks(range(len(rows)), [r[0] for r in rows], fontsize=7)
    ax.set_xlabel("seconds per call")
    ax.invert_yaxis()
    _finish(fig, path)
