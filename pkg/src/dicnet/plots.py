"""PNG rendering of diagnostic JSON payloads."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _plot_histograms(ax, hist: dict, label_fmt: str) -> None:
    edges = np.asarray(hist["bin_edges"])
    centers = 0.5 * (edges[1:] + edges[:-1])
    for key, counts in hist["counts"].items():
        counts = np.asarray(counts, dtype=float)
        total = counts.sum()
        ax.plot(centers, counts / total if total else counts, label=label_fmt.format(key))
    ax.legend(fontsize=8)
    ax.set_ylabel("fraction")


def plot_figure(figure: int, payload: dict, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if figure == 3:
        _plot_histograms(ax, payload["histogram"], "class {}")
        ax.set_xlabel(payload["histogram"]["name"])
    elif figure == 4:
        _plot_histograms(ax, payload["histogram"], "epoch {}")
        ax.set_xlabel("d")
    elif figure == 5:
        rows = payload["rows"]
        ks = [r["k"] for r in rows]
        ax.errorbar(ks, [r["mean_auroc"] for r in rows], yerr=[r["std_auroc"] for r in rows], marker="o")
        ax.set_xscale("log", base=2)
        ax.set_xlabel("channels k")
        ax.set_ylabel("pixel AUROC")
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
