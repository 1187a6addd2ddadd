"""Static loss/accuracy curves and comparison bars (PNG)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_curves(trials: dict, path, title: str = "") -> Path:
    """``trials`` maps a label (e.g. "functional/seed0") to its EpochRecord list."""
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    for label, records in trials.items():
        epochs = [r.epoch for r in records]
        ax_loss.plot(epochs, [r.mean_fkt_loss for r in records], label=f"{label} total")
        if any(r.mean_ssl_loss for r in records):
            ax_loss.plot(epochs, [r.mean_ssl_loss for r in records], "--", label=f"{label} ssl")
        if any(r.mean_ce_loss for r in records):
            ax_loss.plot(epochs, [r.mean_ce_loss for r in records], ":", label=f"{label} ce")
        tested = [(r.epoch, r.test_accuracy) for r in records if r.test_accuracy is not None]
        if tested:
            ax_acc.plot(*zip(*tested), label=f"{label} test")
        ax_acc.plot(epochs, [r.train_accuracy for r in records], alpha=0.5, label=f"{label} train")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0, 1.02)
    for ax in (ax_loss, ax_acc):
        ax.legend(fontsize=6)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_comparison_bars(report, path) -> Path:
    metrics = ("accuracy", "precision", "recall")
    regimes = list(report.rows)
    width = 0.8 / len(regimes)
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, regime in enumerate(regimes):
        row = report.rows[regime]
        xs = [j + i * width for j in range(len(metrics))]
        ax.bar(xs, [100 * row["mean"][m] for m in metrics], width,
               yerr=[100 * row["std"][m] for m in metrics], capsize=3, label=regime)
    ax.set_xticks([j + width * (len(regimes) - 1) / 2 for j in range(len(metrics))])
    ax.set_xticklabels([m.capitalize() for m in metrics])
    ax.set_ylabel("%")
    ax.set_title(f"{report.dataset} ({report.backbone})")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
