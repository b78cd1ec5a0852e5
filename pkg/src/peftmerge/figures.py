"""Matplotlib rendering for the report paths.

Each command that emits a delimited table also renders a small PNG next
to it (disable with --no-figures).  Figures are presentation-only; the
CSV/JSON files remain the canonical outputs.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_DPI = 150


def _save(fig, path):
    fig.savefig(str(path), dpi=_DPI, metadata={"Software": None})
    plt.close(fig)


def render_run_figure(rows: list[dict], task_ids: list[str], path) -> None:
    """Grouped bars: per-task accuracy for each (order, seed) run."""
    fig, ax = plt.subplots(figsize=(7.0, 3.2))
    x = np.arange(len(task_ids))
    width = 0.8 / max(len(rows), 1)
    for j, row in enumerate(rows):
        accs = [row["per_task"][t] * 100 for t in task_ids]
        label = f"{row['order']} s{row['seed']}" if row["order"] != "-" else f"s{row['seed']}"
        ax.bar(x + j * width, accs, width, label=label)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(task_ids)
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.set_title(f"per-task accuracy ({rows[0]['method']})" if rows else "per-task accuracy")
    ax.legend(fontsize=7, ncol=3)
    fig.tight_layout()
    _save(fig, path)


def render_sweep_figure(pairs: list[tuple[float, float]], dimension: str, path) -> None:
    """Line plot of average accuracy against the swept value."""
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    xs = [p[0] for p in pairs]
    ys = [p[1] for p in pairs]
    ax.plot(range(len(xs)), ys, marker="o")
    ax.set_xticks(range(len(xs)))
    ax.set_xticklabels([f"{x:g}" for x in xs])
    ax.set_xlabel(dimension)
    ax.set_ylabel("average accuracy (%)")
    ax.set_title(f"{dimension} sweep")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def render_ablate_figure(rows: list[tuple[str, float]], path) -> None:
    """Bar chart comparing initialisation strategies."""
    fig, ax = plt.subplots(figsize=(4.2, 3.2))
    names = [r[0] for r in rows]
    vals = [r[1] for r in rows]
    ax.bar(names, vals, color=["#888888", "#3572b0", "#62a85e"])
    ax.set_ylabel("average accuracy (%)")
    ax.set_ylim(0, 100)
    ax.set_title("module initialisation ablation")
    for i, v in enumerate(vals):
        ax.text(i, v + 1, f"{v:.1f}", ha="center", fontsize=8)
    fig.tight_layout()
    _save(fig, path)
