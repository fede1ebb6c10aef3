"""Static SVG figures for CLI artifacts.

Rendering uses the Agg backend with a fixed SVG hash salt and no date
metadata, so the same data always gives the same bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {"svg.hashsalt": "odnmr", "svg.fonttype": "path", "figure.dpi": 72,
       "font.size": 9, "axes.grid": True, "grid.alpha": 0.3}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
    return path


def line_plot(path, x, series: dict, xlabel: str, ylabel: str, title: str = "",
              logx: bool = False, markers: tuple = ()) -> Path:
    """One or more curves sharing ``x``.  Names in ``markers`` are drawn as points."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        for name, y in series.items():
            if name in markers:
                ax.plot(x, y, "o", ms=3, label=name)
            else:
                ax.plot(x, y, "-", lw=1.2, label=name)
        if logx:
            ax.set_xscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if len(series) > 1:
            ax.legend(frameon=False)
        return _save(fig, path)


def xy_plot(path, curves: list, xlabel: str, ylabel: str, title: str = "",
            loglog: bool = False) -> Path:
    """Curves with their own abscissae: ``[(label, x, y, style), ...]``."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        for label, x, y, style in curves:
            ax.plot(x, y, style, ms=3, lw=1.2, label=label)
        if loglog:
            ax.set_xscale("log")
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def heatmap(path, x, y, values, xlabel: str, ylabel: str, title: str = "",
            vmin: float = 0.0, vmax: float = 1.0) -> Path:
    """``values[i, j]`` at ``(x[j], y[i])``, drawn as cell-centred pixels."""
    values = np.asarray(values, dtype=float)
    with plt.rc_context({**_RC, "axes.grid": False}):
        fig, ax = plt.subplots(figsize=(5.0, 3.8))
        mesh = ax.pcolormesh(_edges(x), _edges(y), np.ma.masked_invalid(values),
                             vmin=vmin, vmax=vmax, cmap="viridis", shading="flat")
        fig.colorbar(mesh, ax=ax)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def _edges(c):
    c = np.asarray(c, dtype=float)
    if c.size == 1:
        return np.array([c[0] - 0.5, c[0] + 0.5])
    mid = 0.5 * (c[1:] + c[:-1])
    return np.concatenate([[2 * c[0] - mid[0]], mid, [2 * c[-1] - mid[-1]]])
