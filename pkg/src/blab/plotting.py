"""Figures written next to the CSV reports.

Everything renders through the Agg backend with fixed metadata so a rerun
produces byte-identical PNG files.
"""

from __future__ import annotations

import contextlib

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 100,
}
GROUP_COLORS = {"head": "#33658a", "med": "#86bbd8", "tail": "#f26419", "all": "#555555"}
ARM_COLORS = ["#33658a", "#999999", "#f6ae2d", "#f26419"]


@contextlib.contextmanager
def figure(path, width=4.5, height=3.2, ncols=1):
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, ncols, figsize=(width, height))
        try:
            yield fig, axes
            fig.tight_layout()
            fig.savefig(path, format="png", metadata={"Software": None})
        finally:
            plt.close(fig)


def plot_overlap_matrix(values, path, title="Inter-class overlap (log BC)"):
    values = np.asarray(values)
    with figure(path, 4.2, 3.6) as (fig, ax):
        im = ax.imshow(values, cmap="viridis", interpolation="nearest")
        ax.set_xlabel("class")
        ax.set_ylabel("class")
        ax.set_title(title)
        ticks = np.arange(values.shape[0])
        ax.set_xticks(ticks)
        ax.set_yticks(ticks)
        fig.colorbar(im, ax=ax, shrink=0.85)


def plot_outlier_rates(report, path, groups=None):
    classes = sorted(report.classes)
    rates = [report.classes[c].mean_rate for c in classes]
    colors = [GROUP_COLORS[groups.group_of(c)] if groups else GROUP_COLORS["all"] for c in classes]
    with figure(path) as (fig, ax):
        ax.bar([str(c) for c in classes], rates, color=colors)
        ax.set_xlabel("class")
        ax.set_ylabel("outlier rate (mean over lambda)")
        ax.set_title("Outlier sample rate")


def plot_confidence(report, path):
    """Conf and Cred per group for both guidance modes, one bar cluster per scale."""
    keys = sorted(report.entries)
    scales = sorted({k[2] for k in keys})
    group_names = [g for g in ("head", "med", "tail") if any(k[0] == g for k in keys)]
    with figure(path, 7.5, 3.0, ncols=2) as (fig, axes):
        for ax, idx, label in ((axes[0], 0, "mean Conf"), (axes[1], 1, "mean Cred")):
            width = 0.8 / (2 * len(group_names))
            for gi, group in enumerate(group_names):
                for mi, mode in enumerate(("standard", "modified")):
                    vals = [report.entries[(group, mode, s)][idx] for s in scales]
                    offset = (2 * gi + mi) * width - 0.4 + width / 2
                    ax.bar(
                        np.arange(len(scales)) + offset,
                        vals,
                        width,
                        color=GROUP_COLORS[group],
                        alpha=1.0 if mode == "standard" else 0.45,
                        label=f"{group} {'N' if mode == 'standard' else 'H2T'}",
                    )
            ax.set_xticks(np.arange(len(scales)))
            ax.set_xticklabels([f"s={s:g}" for s in scales])
            ax.set_ylabel(label)
        axes[1].legend(ncol=2, frameon=False)


def plot_comparison(rows, path):
    """Grouped accuracy bars (head/med/tail/all) per arm."""
    metrics = ("head_acc", "med_acc", "tail_acc", "overall_acc")
    with figure(path, 6.0, 3.2) as (fig, ax):
        width = 0.8 / len(rows)
        for i, row in enumerate(rows):
            ax.bar(
                np.arange(len(metrics)) + i * width - 0.4 + width / 2,
                [row[m] for m in metrics],
                width,
                label=row["arm"],
                color=ARM_COLORS[i % len(ARM_COLORS)],
            )
        ax.set_xticks(np.arange(len(metrics)))
        ax.set_xticklabels(["head", "med", "tail", "all"])
        ax.set_ylabel("test accuracy")
        ax.set_ylim(0, 1)
        ax.legend(frameon=False, fontsize=7)


def plot_scatter(features, labels, path):
    features = np.asarray(features)
    with figure(path, 4.0, 4.0) as (fig, ax):
        ax.scatter(features[:, 0], features[:, 1], c=labels, s=4, cmap="tab10")
        ax.set_aspect("equal")
