"""PNG rendering: loss curves, SSIM-map panels and translation contact sheets."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .training import LossHistory  # noqa: E402


def _smooth(v: np.ndarray, k: int) -> np.ndarray:
    if k <= 1 or len(v) < k:
        return v
    return np.convolve(v, np.ones(k) / k, mode="valid")


def plot_loss_curves(history: LossHistory, path: str | Path, domain_names=("X", "Y")) -> Path:
    """Four panels: generator / discriminator losses for each translation direction."""
    nx, ny = domain_names
    it = history.column("iteration")
    k = max(1, len(it) // 50)
    panels = [
        (f"(a) generator {nx}->{ny}", ["adv_y", "gen_total"]),
        (f"(b) discriminator {ny}", ["disc_y_loss"]),
        (f"(c) generator {ny}->{nx}", ["adv_x", "gen_total"]),
        (f"(d) discriminator {nx}", ["disc_x_loss"]),
    ]
    fig, axes = plt.subplots(2, 2, figsize=(10, 7))
    for ax, (title, cols) in zip(axes.ravel(), panels):
        for c in cols:
            v = history.column(c)
            ax.plot(it, v, alpha=0.3, lw=0.8)
            sm = _smooth(v, k)
            ax.plot(it[len(it) - len(sm):], sm, lw=1.5, label=c)
        ax.set_title(title)
        ax.set_xlabel("iteration")
        ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_ssim_panel(rows: list[tuple[str, np.ndarray, np.ndarray, np.ndarray]], path: str | Path) -> Path:
    """One row per entry ``(label, source, translated, ssim_map)``: source | translated | map."""
    n = max(len(rows), 1)
    fig, axes = plt.subplots(n, 3, figsize=(9, 3 * n), squeeze=False)
    for r, (label, src, tr, smap) in enumerate(rows):
        axes[r, 0].imshow(src, cmap="gray", vmin=-1, vmax=1)
        axes[r, 0].set_title(f"{label}: source", fontsize=8)
        axes[r, 1].imshow(tr, cmap="gray", vmin=-1, vmax=1)
        axes[r, 1].set_title("translated", fontsize=8)
        im = axes[r, 2].imshow(smap, cmap="viridis", vmin=-1, vmax=1)
        axes[r, 2].set_title(f"SSIM map (mean {float(np.mean(smap)):.3f})", fontsize=8)
        fig.colorbar(im, ax=axes[r, 2], fraction=0.046)
    for ax in axes.ravel():
        ax.axis("off")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_contact_sheet(sources, translated, path: str | Path, titles=("input", "translated")) -> Path:
    """Two rows: inputs above their translations."""
    n = max(len(sources), 1)
    fig, axes = plt.subplots(2, n, figsize=(2 * n, 4.2), squeeze=False)
    for i, (s, t) in enumerate(zip(sources, translated)):
        axes[0, i].imshow(s, cmap="gray", vmin=-1, vmax=1)
        axes[1, i].imshow(t, cmap="gray", vmin=-1, vmax=1)
    axes[0, 0].set_title(titles[0], fontsize=8, loc="left")
    axes[1, 0].set_title(titles[1], fontsize=8, loc="left")
    for ax in axes.ravel():
        ax.axis("off")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
