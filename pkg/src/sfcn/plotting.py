"""Report figures written next to the CSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .trainer import smoothed  # noqa: E402

# no Software/date chunks, so reruns write identical bytes
_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_loss_curves(curves: dict, path, window: int = 1, title: str = "training loss"):
    """One line per named curve; ``window`` > 1 overlays the moving average."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, curve in curves.items():
        line, = ax.plot(curve.iterations, curve.losses, lw=0.6, alpha=0.35 if window > 1 else 1.0)
        if window > 1:
            ax.plot(curve.iterations, smoothed(curve.losses, window), color=line.get_color(), lw=1.5, label=name)
        else:
            line.set_label(name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    _save(fig, path)


def plot_pr_curve(result, path, title: str = "precision / recall"):
    curve = np.array(result.curve)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(curve[:, 2], curve[:, 1], lw=1.5)
    best = curve[np.argmax(curve[:, 3])]
    ax.plot([best[2]], [best[1]], "o", label=f"maxF {result.f:.4f} at tau {result.tau:.3f}")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(title)
    ax.legend(loc="lower left")
    _save(fig, path)


def plot_frequency_map(freq, path):
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(freq, cmap="viridis", vmin=0.0, vmax=1.0)
    fig.colorbar(im, ax=ax, label="road frequency")
    ax.set_title("road distribution")
    ax.set_xticks([])
    ax.set_yticks([])
    _save(fig, path)


def plot_ablation(rows, path):
    """Bar chart of per-variant median F1 with per-seed points."""
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    fig, ax = plt.subplots(figsize=(5, 4))
    for i, v in enumerate(variants):
        f1 = [r["f1"] for r in rows if r["variant"] == v]
        ax.bar(i, np.median(f1), color="0.8", edgecolor="0.3")
        ax.plot([i] * len(f1), f1, "k.", ms=6)
    ax.set_xticks(range(len(variants)), variants)
    ax.set_ylabel("held-out F1")
    lo = min(r["f1"] for r in rows)
    ax.set_ylim(max(0.0, lo - 0.05), 1.0)
    ax.set_title("stepwise ablation")
    _save(fig, path)
