"""Matplotlib figures written to files: loss curve and evaluation summary."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path):
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_loss_curve(losses, path):
    """``losses`` is [(epoch, loss, input_size), ...] as produced by training."""
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [e for e, _, _ in losses]
    values = [v for _, v, _ in losses]
    ax.plot(epochs, values, color="tab:blue", linewidth=1.2)
    if values and min(values) > 0:
        ax.set_yscale("log")
    changes = [e for (e, _, s), (_, _, prev) in zip(losses[1:], losses[:-1]) if s != prev]
    for e in changes:
        ax.axvline(e, color="0.7", linewidth=0.8, linestyle="--")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.set_title("Training loss" + (" (dashed: input size change)" if changes else ""))
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def plot_report(report, path, label="gridspot"):
    """Bar chart of precision, recall, F1 and accuracy with counts and FPS in the title."""
    names = ["precision", "recall", "F1", "accuracy"]
    values = [report.precision, report.recall, report.f1, report.accuracy]
    fig, ax = plt.subplots(figsize=(6, 4))
    bars = ax.bar(names, values, color=["tab:blue", "tab:orange", "tab:green", "tab:purple"])
    for bar, v in zip(bars, values):
        ax.text(bar.get_x() + bar.get_width() / 2, v + 0.01, f"{v:.3f}", ha="center", va="bottom", fontsize=9)
    ax.set_ylim(0, 1.1)
    fps = "n/a" if report.fps != report.fps else f"{report.fps:.2f}"
    ax.set_title(f"{label}: TP={report.tp} FP={report.fp} FN={report.fn}  "
                 f"IoU>={report.iou_threshold:g}  FPS={fps}", fontsize=10)
    fig.tight_layout()
    _save(fig, path)
