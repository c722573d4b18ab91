"""Figure rendering for run reports.

Every CLI run that writes a delimited output also renders a matplotlib
figure next to it, using the headless Agg backend.  Figures are written
atomically (temp file + rename) like every other artifact.
"""

from __future__ import annotations

import os
import tempfile

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np

from .spline import Spline


def _atomic_savefig(fig, path: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    suffix = os.path.splitext(path)[1] or ".png"
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".partial-",
                               suffix=suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fig.savefig(fh, format=suffix.lstrip("."), dpi=120,
                        bbox_inches="tight")
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
    finally:
        plt.close(fig)


def save_training_curves(path: str, history: list[dict]) -> None:
    """MSE curves plus the per-epoch Lipschitz audit and mean AELR."""
    epochs = [row["epoch"] for row in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.semilogy(epochs, [row["train_mse"] for row in history],
                 label="train MSE")
    ax1.semilogy(epochs, [row["test_mse"] for row in history],
                 label="test MSE")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("MSE")
    ax1.legend()
    ax2.plot(epochs, [row["lipschitz_audit"] for row in history],
             label="Lipschitz audit")
    aelr = [row["mean_aelr"] for row in history]
    if np.all(np.isfinite(aelr)):
        ax2.plot(epochs, aelr, label="mean AELR")
    ax2.set_xlabel("epoch")
    ax2.legend()
    fig.suptitle("training metrics")
    _atomic_savefig(fig, path)


def save_dual_curve(path: str, history: list[dict]) -> None:
    """Dual objective and audit across critic-training epochs."""
    epochs = [row["epoch"] for row in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, [row["train_dual"] for row in history])
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("dual objective")
    ax2.plot(epochs, [row["lipschitz_audit"] for row in history])
    ax2.axhline(1.0, color="gray", linestyle=":")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("Lipschitz audit")
    fig.suptitle("critic training")
    _atomic_savefig(fig, path)


def save_residual_curve(path: str, residuals, psnrs=None) -> None:
    """Fixed-point residuals (log scale), with the PSNR trace when known."""
    iters = np.arange(1, len(residuals) + 1)
    n_axes = 2 if psnrs is not None else 1
    fig, axes = plt.subplots(1, n_axes, figsize=(4.5 * n_axes, 3.5),
                             squeeze=False)
    ax = axes[0][0]
    ax.semilogy(iters, residuals)
    ax.set_xlabel("iteration")
    ax.set_ylabel("fixed-point residual")
    if psnrs is not None:
        ax2 = axes[0][1]
        ax2.plot(iters, psnrs)
        ax2.set_xlabel("iteration")
        ax2.set_ylabel("PSNR (dB)")
    fig.suptitle("solver run")
    _atomic_savefig(fig, path)


def save_spline_plot(path: str, spline: Spline) -> None:
    """Feasible spline profile with its knots marked."""
    knots = spline.knots
    coeffs = spline.projected()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(knots, coeffs, marker="o", markersize=3)
    ax.set_xlabel("x")
    ax.set_ylabel("spline(x)")
    ax.set_title("activation profile")
    _atomic_savefig(fig, path)


def save_image_panel(path: str, images: dict[str, np.ndarray]) -> None:
    """Grayscale panels side by side (e.g. truth / measurement / recon)."""
    if not images:
        raise ValueError("need at least one image")
    names = list(images)
    fig, axes = plt.subplots(1, len(names), figsize=(3.2 * len(names), 3.4),
                             squeeze=False)
    for ax, name in zip(axes[0], names):
        ax.imshow(np.clip(images[name], 0.0, 1.0), cmap="gray",
                  vmin=0.0, vmax=1.0)
        ax.set_title(name)
        ax.axis("off")
    _atomic_savefig(fig, path)
