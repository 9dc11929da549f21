"""SVG line charts for training curves. CSV files stay the source of truth."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "margincal",  # stable element ids across runs
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_curves(logs: dict, path, title: str | None = None) -> None:
    """Loss (left) and mIoU (right) against epoch; ``logs`` maps a label to a TrainLog."""
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_miou) = plt.subplots(1, 2, figsize=(8, 3))
        for i, (label, log) in enumerate(logs.items()):
            color = f"C{i}"
            epochs = log.column("epoch")
            if not len(epochs):
                continue
            ax_loss.plot(epochs, log.column("train_loss"), color=color, label=f"{label} train")
            ax_loss.plot(epochs, log.column("val_loss"), color=color, ls="--", label=f"{label} val")
            ax_miou.plot(epochs, log.column("train_miou"), color=color, label=f"{label} train")
            ax_miou.plot(epochs, log.column("val_miou"), color=color, ls="--", label=f"{label} val")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("loss")
        ax_miou.set_xlabel("epoch")
        ax_miou.set_ylabel("mIoU")
        ax_miou.legend(loc="lower right", frameon=False)
        if title:
            fig.suptitle(title)
        _save(fig, path)


def plot_gap(gaps: dict, path) -> None:
    """Normalized train/validation loss gap per epoch; ``gaps`` maps label to (epochs, gap)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        for i, (label, (epochs, gap)) in enumerate(gaps.items()):
            ax.plot(epochs, gap, color=f"C{i}", label=label)
        ax.set_xlabel("epoch")
        ax.set_ylabel("|val - train| / train")
        ax.legend(frameon=False)
        _save(fig, path)


def plot_surrogates(path, rho: float = 1.0) -> None:
    """0-1 loss, piecewise-linear margin loss and calibrated log-loss on one axis."""
    from .losses import calibrated_log, rho_margin

    lam = np.linspace(-2 * rho - 1, 3 * rho + 1, 400)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(lam, (lam <= 0).astype(float), color="k", lw=1, label="0-1")
        ax.plot(lam, rho_margin(lam, rho), color="C1", label=f"margin, rho={rho:g}")
        ax.plot(lam, calibrated_log(lam, rho), color="C0", ls=":", label=f"calibrated log, rho={rho:g}")
        ax.set_xlabel("margin")
        ax.set_ylim(-0.1, 3)
        ax.legend(frameon=False)
        _save(fig, path)
