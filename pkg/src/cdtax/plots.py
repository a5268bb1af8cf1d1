"""Figure rendering for the report path.

Writes image files next to the delimited output: a channel-sensitivity
heatmap over (model, benchmark) rows and a placement bar chart for a single
matrix. Data-only exports live in :mod:`cdtax.channels`; everything here is
presentation.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .channels import SensitivityTable

__all__ = ["render_sensitivity_heatmap", "render_placement_bars"]

EFFECT_COLUMNS = ("delta_key", "delta_prompt", "delta_int")
COLUMN_TITLES = (r"$\Delta$ key", r"$\Delta$ prompt", r"$\Delta$ interaction")


def render_sensitivity_heatmap(table: SensitivityTable, path: str | Path) -> None:
    rows = table.rows
    labels = [f"{r.model} / {r.benchmark}" if r.benchmark else r.model for r in rows]
    data = np.array([[getattr(r, col) for col in EFFECT_COLUMNS] for r in rows])
    span = max(1.0, float(np.abs(data).max()))

    fig, ax = plt.subplots(figsize=(6.5, 0.5 * len(rows) + 1.8))
    im = ax.imshow(data, cmap="RdBu_r", vmin=-span, vmax=span, aspect="auto")
    ax.set_xticks(range(len(EFFECT_COLUMNS)), COLUMN_TITLES)
    ax.set_yticks(range(len(rows)), labels)
    for i in range(len(rows)):
        for j in range(len(EFFECT_COLUMNS)):
            ax.text(j, i, f"{data[i, j]:+.2f}", ha="center", va="center", fontsize=8)
    fig.colorbar(im, ax=ax, label="percentage points")
    ax.set_title("Channel sensitivity")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_placement_bars(
    scores: Mapping[str, float], path: str | Path, title: str = "Placement scores"
) -> None:
    order = ("none", "key_only", "prompt_only", "both")
    present = [k for k in order if k in scores]
    values = [scores[k] for k in present]

    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    bars = ax.bar(present, values, color="#4878a8")
    ax.bar_label(bars, fmt="%.2f", fontsize=8)
    ax.set_ylabel("score (percentage points)")
    ax.set_ylim(0, max(100.0, max(values) * 1.1 if values else 100.0))
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
