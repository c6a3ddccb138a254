"""SVG figure emission.  Every figure here is a derived artifact; the runner
writes a CSV with the same series next to each one."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

matplotlib.rcParams["svg.hashsalt"] = "resmatch"

_META = {"Date": None}


def _save(fig, path: Path | str) -> None:
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def line_chart(path, series: dict[str, np.ndarray], x=None, xlabel: str = "", ylabel: str = "",
               title: str = "", logy: bool = False) -> None:
    fig, ax = plt.subplots(figsize=(6, 4), constrained_layout=True)
    for label, ys in series.items():
        xs = np.arange(len(ys)) if x is None else x
        ax.plot(xs, ys, label=label)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    _save(fig, path)


def field_panels(path, panels: list[tuple[str, np.ndarray]], cmap: str = "viridis",
                 shared_scale: bool = True) -> None:
    n = len(panels)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.2), constrained_layout=True)
    if n == 1:
        axes = [axes]
    vmin = vmax = None
    if shared_scale:
        vmin = min(float(np.min(a)) for _, a in panels)
        vmax = max(float(np.max(a)) for _, a in panels)
    for ax, (title, arr) in zip(axes, panels):
        im = ax.imshow(arr, origin="lower", cmap=cmap, vmin=vmin, vmax=vmax)
        ax.set_title(title, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046)
    _save(fig, path)


def well_timeseries(path, times: np.ndarray, prior: np.ndarray, posterior: np.ndarray,
                    observed: np.ndarray, title: str, ylabel: str) -> None:
    """Prior members gray, posterior members blue, observations red dots."""
    fig, ax = plt.subplots(figsize=(5, 3.4), constrained_layout=True)
    for row in prior:
        ax.plot(times, row, color="0.7", lw=0.6, zorder=1)
    for row in posterior:
        ax.plot(times, row, color="tab:blue", lw=0.7, alpha=0.7, zorder=2)
    ax.plot(times, observed, "o", color="tab:red", ms=4, zorder=3)
    ax.set_xlabel("time (days)")
    ax.set_ylabel(ylabel)
    ax.set_title(title, fontsize=10)
    _save(fig, path)


def well_grid(path, times, prior_by_well: dict[str, np.ndarray], post_by_well: dict[str, np.ndarray],
              obs_by_well: dict[str, np.ndarray], ylabel: str, title: str) -> None:
    names = list(prior_by_well)
    n = len(names)
    cols = min(3, n)
    rows = -(-n // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(3.4 * cols, 2.6 * rows), constrained_layout=True)
    axes = np.atleast_1d(axes).ravel()
    for ax, name in zip(axes, names):
        for row in prior_by_well[name]:
            ax.plot(times, row, color="0.7", lw=0.5, zorder=1)
        for row in post_by_well[name]:
            ax.plot(times, row, color="tab:blue", lw=0.6, alpha=0.7, zorder=2)
        ax.plot(times, obs_by_well[name], "o", color="tab:red", ms=3, zorder=3)
        ax.set_title(name, fontsize=9)
    for ax in axes[n:]:
        ax.axis("off")
    fig.suptitle(f"{title} ({ylabel})", fontsize=11)
    _save(fig, path)
