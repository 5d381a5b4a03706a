"""Figures written next to the line-delimited metrics and report files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 120,
}


def _figure(ncols: int = 1, width: float = 4.0, height: float = 3.0):
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, ncols, figsize=(width * ncols, height), squeeze=False)
    return fig, axes[0]


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_history(history: Sequence[dict], path: str | Path, title: str = "training") -> Path:
    """Loss and learning rate against step."""
    steps = [r["step"] for r in history]
    fig, (ax_loss, ax_lr) = _figure(2)
    with plt.rc_context(_STYLE):
        ax_loss.plot(steps, [r["loss"] for r in history], lw=1.2, color="C0")
        ax_loss.set_xlabel("step")
        ax_loss.set_ylabel("loss")
        ax_loss.set_title(title)
        ax_lr.plot(steps, [r["lr"] for r in history], lw=1.2, color="C1")
        ax_lr.set_xlabel("step")
        ax_lr.set_ylabel("learning rate")
    return _save(fig, path)


def plot_raft(metrics: Sequence[dict], path: str | Path) -> Path:
    """Mean sampled vs. selected reward per RAFT iteration."""
    its = [m["iteration"] for m in metrics]
    fig, (ax,) = _figure()
    with plt.rc_context(_STYLE):
        ax.plot(its, [m["mean_reward"] for m in metrics], "o-", label="all samples")
        ax.plot(its, [m["mean_selected_reward"] for m in metrics], "s--", label="selected")
        ax.set_xlabel("iteration")
        ax.set_ylabel("mean reward")
        ax.legend(frameon=False)
    return _save(fig, path)


def plot_reports(reports: dict, path: str | Path) -> Path:
    """One bar panel per numeric report column, one bar per model."""
    from .evaluation import EvalReport

    cols = [(label, attr) for label, attr in EvalReport.COLUMNS if any(getattr(r, attr) is not None for r in reports.values())]
    fig, axes = _figure(len(cols), width=2.2, height=2.6)
    names = list(reports)
    with plt.rc_context(_STYLE):
        for ax, (label, attr) in zip(axes, cols):
            vals = [getattr(reports[n], attr) or 0.0 for n in names]
            ax.bar(range(len(names)), vals, color=[f"C{i}" for i in range(len(names))])
            ax.set_xticks(range(len(names)))
            ax.set_xticklabels(names, rotation=45, ha="right")
            ax.set_title(label)
    return _save(fig, path)
