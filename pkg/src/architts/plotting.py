"""Figures written next to the CSV/JSON reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.4,
    "lines.markersize": 4,
    "axes.spines.top": False,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_sharing(rows: Sequence[dict], path: str | Path) -> Path:
    """Error rate (solid) and speaker cosine (dotted) on the left, wall time on the right."""
    with plt.rc_context(STYLE):
        fig, (left, right) = plt.subplots(1, 2, figsize=(7.0, 2.8))
        score = left.twinx()
        for nfe in sorted({r["nfe"] for r in rows}):
            sub = sorted((r for r in rows if r["nfe"] == nfe), key=lambda r: r["sharing_ratio"])
            x = [r["sharing_ratio"] for r in sub]
            line, = left.plot(x, [100 * r["token_error_rate"] for r in sub], "o-", label=f"NFE {nfe}")
            score.plot(x, [r["speaker_cosine"] for r in sub], "s:", color=line.get_color())
            right.plot(x, [r["wall_time"] for r in sub], "o-", color=line.get_color(), label=f"NFE {nfe}")
        left.set_xlabel("sharing ratio")
        left.set_ylabel("token error rate (%)")
        score.set_ylabel("speaker cosine")
        right.set_xlabel("sharing ratio")
        right.set_ylabel("wall time (s)")
        left.legend(loc="upper left")
        right.legend(loc="upper right")
        fig.tight_layout()
        return _save(fig, path)


def plot_training(records: Sequence[dict], path: str | Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        steps = [r["step"] for r in records]
        for key, style in (("total", "-"), ("cfm", "--"), ("dir", ":"), ("ctc", "-.")):
            ax.plot(steps, [r[key] for r in records], style, label=key)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)
