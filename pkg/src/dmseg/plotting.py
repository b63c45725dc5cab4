"""Figures written next to the CLI's tabular outputs. Always renders off-screen."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from dmseg import distance  # noqa: E402


def _mid_slice(vol: np.ndarray, index: int | None) -> tuple[np.ndarray, int]:
    if index is None:
        # the slice with the most foreground reads best; fall back to the centre
        counts = (np.abs(vol) > 0).sum(axis=(1, 2))
        index = int(np.argmax(counts)) if counts.any() else vol.shape[0] // 2
    return vol[index], index


def distance_map_panel(mask: np.ndarray, path, class_id: int = 1, z: int | None = None) -> int:
    """Mask next to its O-DM, I-DM, NI-DM and SNI-DM on one axial slice; returns the slice index."""
    mask = np.asarray(mask)
    maps = {"Mask": (mask == class_id).astype(np.float32)}
    for variant, title in (("odm", "O-DM"), ("idm", "I-DM"), ("nidm", "NI-DM"), ("snidm", "SNI-DM")):
        maps[title] = distance.distance_map(mask, class_id, variant).values
    _, z = _mid_slice(maps["Mask"], z)

    fig, axes = plt.subplots(1, len(maps), figsize=(3.2 * len(maps), 3.4))
    for ax, (title, vol) in zip(axes, maps.items()):
        sl = vol[z]
        if title == "SNI-DM":
            lim = float(np.abs(sl).max()) or 1.0
            im = ax.imshow(sl, cmap="RdBu_r", vmin=-lim, vmax=lim)
        else:
            im = ax.imshow(sl, cmap="gray" if title == "Mask" else "viridis")
        ax.set_title(title)
        ax.set_xticks([])
        ax.set_yticks([])
        if title != "Mask":
            fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    fig.suptitle(f"class {class_id}, slice z={z}")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return z


def loss_curves(history: list[dict], path, title: str = "") -> None:
    """Train/validation loss and validation Dice per epoch."""
    epochs = [h["epoch"] for h in history]
    fig, (ax_l, ax_d) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax_l.plot(epochs, [h["train_loss"] for h in history], label="train")
    if any("val_loss" in h for h in history):
        ax_l.plot(epochs, [h.get("val_loss", math.nan) for h in history], label="validation")
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("loss")
    ax_l.legend()
    dice = [h.get("val_dice") for h in history]
    if any(d is not None for d in dice):
        ax_d.plot(epochs, [math.nan if d is None else d for d in dice], color="tab:green")
    ax_d.set_xlabel("epoch")
    ax_d.set_ylabel("validation Dice")
    ax_d.set_ylim(0, 1)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def comparison_bars(rows: list[dict], path, metric: str = "dc") -> None:
    """One bar per configuration row; failed rows show as empty slots."""
    labels = [r["label"] for r in rows]
    values = [r.get(metric) for r in rows]
    values = [math.nan if v is None else float(v) for v in values]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(rows) + 2), 4.2))
    ax.bar(range(len(rows)), np.nan_to_num(values, nan=0.0), color="tab:blue")
    for i, v in enumerate(values):
        ax.text(i, 0 if math.isnan(v) else v, "failed" if math.isnan(v) else f"{v:.3f}",
                ha="center", va="bottom", fontsize=8)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(metric)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
