"""Figures written next to the CSV outputs of the command-line tools."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .optimize import LossReport  # noqa: E402

_TERMS = ("photometric", "normal", "light", "alpha")


def loss_figure(path, history: list[LossReport], smooth: int = 25) -> None:
    """Total and per-term loss curves with stage boundaries marked."""
    if not history:
        return
    it = np.array([r.iteration for r in history])
    fig, ax = plt.subplots(figsize=(7, 4), dpi=100)
    for name in ("total",) + _TERMS:
        y = np.array([getattr(r, name) for r in history])
        if not np.any(y > 0):
            continue
        if smooth > 1 and len(y) > smooth:
            y = np.convolve(y, np.ones(smooth) / smooth, mode="valid")
            x = it[smooth - 1:]
        else:
            x = it
        ax.plot(x, y, label=name, lw=1.8 if name == "total" else 1.0)
    stages = [r.stage for r in history]
    for k in range(1, len(stages)):
        if stages[k] != stages[k - 1]:
            ax.axvline(it[k], color="0.6", ls="--", lw=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def image_panel(path, images: dict[str, np.ndarray]) -> None:
    """Side-by-side panel of named RGB images, clamped to [0, 1]."""
    fig, axes = plt.subplots(1, len(images), figsize=(2.6 * len(images), 2.8), dpi=100, squeeze=False)
    for ax, (name, img) in zip(axes[0], images.items()):
        ax.imshow(np.clip(np.asarray(img), 0.0, 1.0), interpolation="nearest")
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def bench_figure(path, result: dict) -> None:
    """Candidate counts for hull-tested versus box-only leaf tests."""
    fig, ax = plt.subplots(figsize=(4, 3.2), dpi=100)
    counts = [result["candidate_hits_aabb"], result["candidate_hits_proxy"]]
    ax.bar(["AABB only", "hull test"], counts, color=["0.6", "tab:blue"])
    ax.set_ylabel("leaf candidates")
    ax.set_title(f"ratio {result['ratio']:.3f}", fontsize=9)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
