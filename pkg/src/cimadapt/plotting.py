"""Figures written by the CLI: macro occupancy per tile, per-layer bitline use,
training curves.  Uses the non-interactive Agg backend."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Patch  # noqa: E402

from .mapper import PALETTE, MappingPlan, render_mapping  # noqa: E402

# deterministic output: no timestamps or software tags in the PNG metadata
_SAVE = {"dpi": 120, "metadata": {"Software": None}}


def plot_mapping(plan: MappingPlan, path, title: str | None = None) -> None:
    """One panel per tile; colour = layer, white = unused cell."""
    tiles = render_mapping(plan)
    fig, axes = plt.subplots(1, len(tiles), figsize=(3.2 * len(tiles) + 1.5, 3.6), squeeze=False)
    for t, (ax, img) in enumerate(zip(axes[0], tiles)):
        ax.imshow(img, interpolation="nearest", aspect="auto")
        ax.set_title(f"tile {t}", fontsize=9)
        ax.set_xlabel("bitline")
        if t == 0:
            ax.set_ylabel("wordline")
    handles = [Patch(color=PALETTE[i % len(PALETTE)] / 255.0, label=m.layer) for i, m in enumerate(plan.layers)]
    if handles:
        fig.legend(handles=handles, loc="center right", fontsize=7, frameon=False)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout(rect=(0, 0, 0.85 if handles else 1, 1))
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def plot_layer_bitlines(plans: dict[str, MappingPlan], path) -> None:
    """Grouped bars of columns per conv layer, one group member per plan."""
    fig, ax = plt.subplots(figsize=(7, 3.5))
    width = 0.8 / max(len(plans), 1)
    for i, (name, plan) in enumerate(plans.items()):
        cols = [m.columns for m in plan.layers]
        x = np.arange(len(cols)) + i * width
        ax.bar(x, cols, width=width, label=f"{name} ({plan.used_bls} BLs)")
    ax.set_xlabel("conv layer index")
    ax.set_ylabel("bitlines")
    ax.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def plot_curves(curves: dict[str, list[float]], path, ylabel: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    start = 0
    for name, ys in curves.items():
        if not ys:
            continue
        ax.plot(np.arange(start, start + len(ys)), ys, label=name)
        start += len(ys)
    ax.set_xlabel("epoch (cumulative)")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
