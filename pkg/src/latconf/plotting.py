"""Precision-recall figures written straight to image files."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_pr_curve(curve: Sequence[tuple[float, float]], path, prevalence: float | None = None,
                  title: str = "Precision-recall", label: str | None = None):
    """Step plot of (recall, precision) points; the prevalence line marks a random scorer."""
    fig, ax = plt.subplots(figsize=(4.5, 4.0), dpi=100)
    if curve:
        recall, precision = zip(*curve)
        ax.step([0.0, *recall], [precision[0], *precision], where="post", lw=1.5, label=label)
    if prevalence is not None:
        ax.axhline(prevalence, color="0.5", ls="--", lw=1, label=f"prevalence {prevalence:.3f}")
    ax.set(xlim=(0, 1), ylim=(0, 1.02), xlabel="recall", ylabel="precision", title=title)
    ax.grid(alpha=0.3)
    if label or prevalence is not None:
        ax.legend(loc="lower left", frameon=False)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
