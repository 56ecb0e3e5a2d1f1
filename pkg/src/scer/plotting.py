"""Scatter figures for the report: worst-group accuracy against the alignment losses."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# no timestamp or version strings, so reruns write identical bytes
PNG_METADATA = {"Software": None}


def scatter_panels(points: list[dict], spearman: dict, path) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(8.0, 3.4), dpi=100)
    y = [p["worst_acc"] for p in points]
    for ax, key, title in ((axes[0], "loss_spur", "spurious loss"), (axes[1], "loss_core", "core loss")):
        ax.scatter([p[key] for p in points], y, s=18, color="tab:blue" if key == "loss_spur" else "tab:orange")
        rho = spearman.get(key)
        label = "n/a" if rho is None else f"{rho:+.3f}"
        ax.set_title(f"{title} (Spearman {label})", fontsize=10)
        ax.set_xlabel(key)
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("worst-group accuracy")
    fig.tight_layout()
    fig.savefig(Path(path), format="png", metadata=PNG_METADATA)
    plt.close(fig)
