"""Matplotlib figures written next to the JSON/CSV reports (Agg backend, files only)."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from invmark.augmentation import SEVERITY_SIGN  # noqa: E402
from invmark.objectives import MetricReport  # noqa: E402


def sweep_curves(report: MetricReport) -> dict[str, list[tuple[float, float]]]:
    """BRR per attack, ordered from mild to severe; parameterless attacks are skipped."""
    curves = defaultdict(list)
    for e in report.entries:
        if e.level is not None:
            curves[e.noise].append((e.level, e.brr_percent))
    return {
        name: sorted(points, key=lambda p: SEVERITY_SIGN.get(name, 1) * p[0])
        for name, points in curves.items()
    }


def plot_sweep(report: MetricReport, path, title: str = "BRR under attack") -> Path:
    curves = sweep_curves(report)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name, points in sorted(curves.items()):
        ax.plot(range(1, len(points) + 1), [b for _, b in points], marker="o", label=name)
    ax.axhline(report.brr_percent, color="k", ls="--", lw=0.8, label="clean")
    ax.set_xlabel("severity step")
    ax.set_ylabel("BRR (%)")
    ax.set_ylim(0, 101)
    ax.set_title(title)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    return _save(fig, path)


def plot_residuals(covers, marked, residuals, path, titles=None) -> Path:
    """Cover, marked and normalized-residual rows for a few images."""
    n = len(covers)
    fig, axes = plt.subplots(3, n, figsize=(2.2 * n, 6.6), squeeze=False)
    for i in range(n):
        for row, (img, label) in enumerate(((covers[i], "cover"), (marked[i], "marked"), (residuals[i], "residual"))):
            ax = axes[row][i]
            arr = np.asarray(img, dtype=np.float64)
            ax.imshow(arr.mean(-1) if label == "residual" else np.clip(arr, 0, 1),
                      cmap="inferno" if label == "residual" else None, vmin=0, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_ylabel(label)
        if titles:
            axes[0][i].set_title(titles[i], fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_bars(values: dict[str, float], path, ylabel: str, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    names = list(values)
    ax.bar(names, [values[k] for k in names], color=plt.cm.tab10.colors[: len(names)])
    for i, k in enumerate(names):
        ax.text(i, values[k], f"{values[k]:.2f}", ha="center", va="bottom", fontsize=8)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_history(logs: dict[str, list[dict]], path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for stage, rows in logs.items():
        if rows:
            ax.plot([r["step"] for r in rows], [r["loss"] for r in rows], label=stage)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
