"""SVG learning curves from metrics CSVs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["svg.fonttype"] = "none"  # keep labels as text so they stay searchable
plt.rcParams["svg.hashsalt"] = "btr"


def _columns(rows: list[dict], *names):
    return [np.array([r[n] for r in rows], dtype=np.float64) for n in names]


def learning_curve(runs: dict[str, list[dict]], out: Path, title: str = "evaluation return") -> Path:
    """IQM with its bootstrap band plus the mean, one colour per run."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for k, (label, rows) in enumerate(runs.items()):
        frame, iqm, lo, hi, mean = _columns(rows, "frame", "iqm", "ci_low", "ci_high", "mean")
        colour = f"C{k % 10}"
        prefix = "" if len(runs) == 1 else f"{label} "
        ax.plot(frame, iqm, color=colour, label=f"{prefix}iqm")
        ax.fill_between(frame, lo, hi, color=colour, alpha=0.2, linewidth=0)
        ax.plot(frame, mean, color=colour, linestyle="--", label=f"{prefix}mean")
    ax.set_xlabel("frames")
    ax.set_ylabel("return")
    ax.set_title(title)
    ax.legend(loc="best", fontsize="small")
    fig.tight_layout()
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out


def diagnostics(runs: dict[str, list[dict]], out: Path) -> Path:
    """Dormant %, SRank, action gap and weight norm over training."""
    panels = [("dormant_pct", "dormant %"), ("srank", "srank"), ("action_gap", "action gap"), ("l2_total", "weight L2")]
    fig, axes = plt.subplots(2, 2, figsize=(8, 6))
    for ax, (col, name) in zip(axes.ravel(), panels):
        for k, (label, rows) in enumerate(runs.items()):
            frame, y = _columns(rows, "frame", col)
            ax.plot(frame, y, color=f"C{k % 10}", label=label)
        ax.set_title(name)
        ax.set_xlabel("frames")
    axes[0, 0].legend(loc="best", fontsize="small")
    fig.tight_layout()
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out
