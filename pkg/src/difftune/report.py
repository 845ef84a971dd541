"""Figure rendering for training curves, ablations, and eval summaries.

Everything renders through the Agg backend straight to files; no display.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def plot_training_curve(metrics, path) -> None:
    """Loss-vs-step line plot from a list of MetricsRow."""
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = [row.step for row in metrics]
    losses = [row.loss for row in metrics]
    phase = metrics[0].phase if metrics else "?"
    ax.plot(steps, losses, lw=0.9, color="tab:blue")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(f"phase {phase} training loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ablation(entries, path) -> None:
    """Bar chart of final loss per recap strategy; entries are (label, loss)."""
    fig, ax = plt.subplots(figsize=(7, 4))
    labels = [label for label, _ in entries]
    losses = [loss for _, loss in entries]
    ax.bar(range(len(entries)), losses, color="tab:purple")
    ax.set_xticks(range(len(entries)))
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel("final loss (tail mean)")
    ax.set_title("condition-density ablation")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_eval_summary(separations: dict, retention: float, consistency: float, path) -> None:
    """Per-pattern separation bars annotated with the scalar probe values."""
    fig, ax = plt.subplots(figsize=(7, 4))
    names = [k for k in separations if k != "all"]
    values = [separations[k] for k in names]
    ax.bar(range(len(names)), values, color="tab:green")
    ax.axhline(separations["all"], color="k", lw=1, ls="--", label=f"all = {separations['all']:.4f}")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel("pair separation (1 - cos)")
    ax.set_title(f"eval probes (knn {retention:.1f}%, consistency {consistency:.4f})")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
