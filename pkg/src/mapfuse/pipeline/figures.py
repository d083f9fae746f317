"""Report figures written next to the CSV / key=value outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

MODE_LABELS = {
    "fusion": "Fusion (CNN + ViT)",
    "local_only": "CNN only",
    "rgb_resize": "RGB / resize",
    "rgb_resize_conv": "RGB / resize + conv",
    "rgbd_resize_conv": "RGBD / resize + conv",
}


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def plot_training_log(rows, path):
    steps = [r["step"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, [r["loss"] for r in rows], lw=0.8, color="0.3", label="training loss")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    val = [(r["step"], r["val_mean_cm"]) for r in rows if r["val_mean_cm"] != ""]
    if val:
        ax2 = ax.twinx()
        ax2.plot(*zip(*val), "o-", color="tab:red", ms=3, label="val mean [cm]")
        ax2.set_ylabel("validation mean error [cm]", color="tab:red")
    _finish(fig, path)


def plot_error_histogram(metrics, path, title=None):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(metrics.errors, bins=min(30, max(5, metrics.count // 3)), color="tab:blue", alpha=0.8)
    ax.axvline(metrics.mean_cm, color="k", ls="--", lw=1, label=f"mean {metrics.mean_cm:.2f} cm")
    ax.axvline(metrics.median_cm, color="tab:red", ls=":", lw=1, label=f"median {metrics.median_cm:.2f} cm")
    ax.set_xlabel("position error [cm]")
    ax.set_ylabel("frames")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    _finish(fig, path)


def plot_ablation(rows, path):
    labels = [MODE_LABELS.get(r["mode"], r["mode"]) for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(1.6 * len(rows) + 2, 3.5))
    ax.bar(x - 0.18, [r["mean_cm"] for r in rows], 0.36, label="mean")
    ax.bar(x + 0.18, [r["median_cm"] for r in rows], 0.36, label="median")
    ax.set_xticks(x, labels, rotation=15)
    ax.set_ylabel("position error [cm]")
    ax.legend(frameon=False)
    _finish(fig, path)


def plot_comparison(report, path):
    from mapfuse.pipeline.experiments import COMPARED_MODES, ENVIRONMENTS

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    x = np.arange(len(COMPARED_MODES))
    for i, env in enumerate(ENVIRONMENTS):
        vals = [report.median_mean_cm(m, env) for m in COMPARED_MODES]
        ax1.bar(x + (i - 0.5) * 0.36, vals, 0.36, label=env)
    ax1.set_xticks(x, [MODE_LABELS[m] for m in COMPARED_MODES])
    ax1.set_ylabel("median over seeds of mean error [cm]")
    ax1.legend(frameon=False)
    for j, mode in enumerate(COMPARED_MODES):
        inc = [100 * report.relative_increase(s, mode) for s in report.seeds]
        ax2.scatter(np.full(len(inc), j), inc, color="0.4", s=14)
        ax2.hlines(100 * report.median_relative_increase(mode), j - 0.25, j + 0.25, color="tab:red")
    ax2.axhline(0, color="k", lw=0.5)
    ax2.set_xticks(x, [MODE_LABELS[m] for m in COMPARED_MODES])
    ax2.set_ylabel("static -> dynamic error increase [%]")
    _finish(fig, path)
