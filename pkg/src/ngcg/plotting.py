"""Figures rendered next to the delimited outputs of ``eval`` and ``ablate``."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}

RECALL_KEYS = ("R@1", "R@5", "R@10")
LOC_KEYS = ("L@50", "L@100", "L@150")


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def report_figure(row: dict[str, float], path, title: str = ""):
    """Bar chart of one report's R@K and L@D values."""
    with plt.rc_context(STYLE):
        fig, (ax_r, ax_l) = plt.subplots(1, 2, figsize=(6.0, 2.6), sharey=True)
        for ax, keys, colour in ((ax_r, RECALL_KEYS, "#3b6ea8"), (ax_l, LOC_KEYS, "#c46a2b")):
            keys = [k for k in keys if k in row]
            vals = [row[k] for k in keys]
            ax.bar(keys, vals, color=colour, width=0.6)
            for x, v in enumerate(vals):
                ax.text(x, v + 0.02, f"{v:.3f}", ha="center", va="bottom", fontsize=7)
        ax_r.set_ylim(0.0, 1.1)
        ax_r.set_ylabel("fraction of queries")
        ax_r.set_title("recall")
        ax_l.set_title("localization")
        if title:
            fig.suptitle(title)
        _save(fig, path)


def ablation_figure(axis: str, rows: list[dict], path):
    """Grouped bars: one group per axis value, one bar per metric."""
    metrics = RECALL_KEYS + LOC_KEYS
    labels = [str(r["axis_value"]) for r in rows]
    width = 0.8 / len(metrics)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(rows) + 2.0), 3.0))
        cmap = plt.get_cmap("tab10")
        for j, m in enumerate(metrics):
            xs = [i + (j - (len(metrics) - 1) / 2) * width for i in range(len(rows))]
            ax.bar(xs, [float(r[m]) for r in rows], width, label=m, color=cmap(j))
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(labels)
        ax.set_xlabel(axis)
        ax.set_ylabel("held-out score")
        ax.set_ylim(0.0, 1.05)
        ax.legend(ncol=3, loc="upper left", frameon=False)
        _save(fig, path)


def training_curve(losses: list[float], heldout_r1: list[float], path):
    with plt.rc_context(STYLE):
        fig, (ax_l, ax_r) = plt.subplots(1, 2, figsize=(6.0, 2.6))
        ax_l.plot(range(len(losses)), losses, lw=0.8)
        ax_l.set_xlabel("step")
        ax_l.set_ylabel("InfoNCE loss")
        ax_r.plot(range(1, len(heldout_r1) + 1), heldout_r1, marker="o", ms=2.5)
        ax_r.set_xlabel("epoch")
        ax_r.set_ylabel("held-out R@1")
        ax_r.set_ylim(0.0, 1.0)
        _save(fig, path)
