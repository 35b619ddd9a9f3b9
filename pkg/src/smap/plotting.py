"""Line charts for training curves and sweeps, written through matplotlib's Agg backend.

matplotlib is an optional extra (``pip install .[plot]``); it is imported only when a
chart is actually requested so the core library stays numpy-only.
"""
from __future__ import annotations

from typing import Dict, Sequence, Tuple

import numpy as np


def moving_average(y: Sequence[float], window: int) -> list:
    """Trailing mean over at most ``window`` samples (shorter at the start)."""
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        return []
    c = np.cumsum(np.insert(y, 0, 0.0))
    idx = np.arange(1, y.size + 1)
    lo = np.maximum(idx - window, 0)
    return list((c[idx] - c[lo]) / (idx - lo))


def chart_file(path: str, series: Dict[str, Tuple[Sequence[float], Sequence[float]]], title: str = "",
               xlabel: str = "", ylabel: str = "", log_y: bool = False) -> str:
    """Plot named (x, y) series to ``path``; the format follows the file extension."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise RuntimeError("plotting needs matplotlib; install the 'plot' extra") from exc

    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    try:
        for name, (x, y) in series.items():
            ax.plot(np.asarray(x, float), np.asarray(y, float), label=name, linewidth=1.5)
        if log_y:
            ax.set_yscale("log")
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if len(series) > 1:
            ax.legend()
        ax.grid(alpha=0.3)
        fig.tight_layout()
        # fixed metadata keeps repeated runs byte-identical
        fig.savefig(path, metadata={"Date": None} if path.endswith(".svg") else None)
    finally:
        plt.close(fig)
    return path
