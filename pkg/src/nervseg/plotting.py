"""Report figures written to files next to the tabular outputs."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import SUMMARY_COLUMNS  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}

LABELS = {
    "accuracy": "Accuracy",
    "sensitivity": "Sensitivity",
    "specificity": "Specificity",
    "precision": "Precision",
    "balanced_accuracy": "Balanced Accuracy",
    "f2": "F2",
    "dice": "Dice",
}


def _save(fig, path):
    from pathlib import Path

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_learning_curves(epochs, path):
    """Training losses and validation Dice/F2 per epoch."""
    with plt.rc_context(RC):
        fig, (ax_l, ax_m) = plt.subplots(1, 2, figsize=(8, 3))
        x = [r["epoch"] for r in epochs]
        for key, style in (("total", "-"), ("bce", "--"), ("edge", ":")):
            ax_l.plot(x, [r[key] for r in epochs], style, label=key)
        ax_l.set_xlabel("epoch")
        ax_l.set_ylabel("train loss")
        ax_l.legend(frameon=False)
        if epochs and "val_dice" in epochs[0]:
            for key in ("val_dice", "val_f2"):
                ax_m.plot(x, [r[key] for r in epochs], label=key[4:].capitalize())
            ax_m.set_ylim(0, 1)
            ax_m.legend(frameon=False)
        ax_m.set_xlabel("epoch")
        ax_m.set_ylabel("validation")
        return _save(fig, path)


def plot_crossval_summary(summary, path, title=""):
    """Bar chart of fold means with std error bars, in the column order of the tables."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(7, 3))
        keys = [k for k in SUMMARY_COLUMNS if summary.get(k, {}).get("mean") is not None]
        means = [summary[k]["mean"] for k in keys]
        stds = [summary[k]["std"] for k in keys]
        ax.bar(range(len(keys)), means, yerr=stds, color="0.6", edgecolor="0.2", capsize=3)
        ax.set_xticks(range(len(keys)))
        ax.set_xticklabels([LABELS[k] for k in keys], rotation=30, ha="right")
        ax.set_ylim(0, 1.05)
        ax.set_title(title)
        return _save(fig, path)


def plot_overlay_panel(image, overlay_img, path, title=""):
    """Source image next to its blue/red/white prediction comparison."""
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 2, figsize=(6, 3))
        axes[0].imshow(np.asarray(image))
        axes[1].imshow(overlay_img)
        for ax in axes:
            ax.set_axis_off()
        axes[0].set_title("input")
        axes[1].set_title(title or "blue: over, red: under, white: hit")
        return _save(fig, path)


def plot_benchmark(rows, path):
    with plt.rc_context(RC):
        fig, (ax_t, ax_p) = plt.subplots(1, 2, figsize=(8, 3))
        names = [r["architecture"] for r in rows]
        pos = np.arange(len(rows))
        ax_t.barh(pos, [r["time_ms_mean"] for r in rows], xerr=[r["time_ms_std"] for r in rows],
                  color="0.6", edgecolor="0.2", capsize=2)
        ax_t.set_xlabel("inference time (ms)")
        ax_p.barh(pos, [r["parameters"] / 1e6 for r in rows], color="0.6", edgecolor="0.2")
        ax_p.set_xlabel("parameters (M)")
        for ax in (ax_t, ax_p):
            ax.set_yticks(pos)
            ax.set_yticklabels(names)
            ax.invert_yaxis()
        ax_p.set_yticklabels([])
        return _save(fig, path)
