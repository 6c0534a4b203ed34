"""Matplotlib renderings written next to the CSV outputs."""
from __future__ import annotations

from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

if TYPE_CHECKING:
    from .evaluate import EvalReport
    from .sweep import SweepResult

LABELS = {"lnn": "LNN", "lstm": "LSTM", "ode-lstm": "ODE-LSTM"}
MARKERS = {"lnn": "o", "lstm": "s", "ode-lstm": "^"}
STYLE = {"font.size": 10, "axes.spines.top": False, "axes.spines.right": False,
         "axes.grid": True, "grid.alpha": 0.3, "lines.markersize": 5,
         "savefig.dpi": 120, "savefig.bbox": "tight", "figure.figsize": (5.5, 4)}
XLABELS = {"training_instant": "beam training instant (slot index)",
           "prediction_instant": "normalized prediction instant",
           "noise_factor": "noise factor $N_F$ (dB)"}


def styled(fn):
    def wrapper(*args, **kw):
        with plt.rc_context(STYLE):
            return fn(*args, **kw)
    wrapper.__name__, wrapper.__doc__ = fn.__name__, fn.__doc__
    return wrapper


@styled
def plot_sweep(res: "SweepResult", path: Path) -> Path:
    fig, ax = plt.subplots()
    for kind, vals in res.table.items():
        ax.plot(res.values, vals, marker=MARKERS.get(kind, "x"), label=LABELS.get(kind, kind))
    if res.axis == "training_instant":
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    ax.set_xlabel(XLABELS[res.axis])
    ax.set_ylabel("normalized spectral efficiency")
    ax.legend()
    fig.savefig(path)
    plt.close(fig)
    return path


@styled
def plot_loss(losses: Sequence[float], path: Path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(range(len(losses)), losses, marker=".")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy per term")
    if title:
        ax.set_title(title)
    fig.savefig(path)
    plt.close(fig)
    return path


@styled
def plot_report(report: "EvalReport", path: Path, title: str = "") -> Path:
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5), sharey=True)
    a.plot(range(1, len(report.by_slot) + 1), report.by_slot, marker="o")
    a.xaxis.set_major_locator(MaxNLocator(integer=True))
    a.set_xlabel("slot index")
    a.set_ylabel("normalized spectral efficiency")
    b.plot(report.tbars, report.by_tbar, marker="o")
    b.set_xlabel("normalized prediction instant")
    if title:
        fig.suptitle(title)
    fig.savefig(path)
    plt.close(fig)
    return path
