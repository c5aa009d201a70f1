"""Figure rendering for CLI reports.

Every function takes plain arrays (the same data written to CSV), draws on a
fresh figure with the non-interactive Agg backend and saves it to ``path``.
"""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 6.0 * (math.sqrt(5) - 1) / 2),
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.4,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_sweep(W, mean, stderr, path, ylabel="asymptotic $Q_0$", bounds=None):
    """Order parameter against disorder strength, with the critical bracket shaded."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.errorbar(W, mean, yerr=stderr, fmt="o-", ms=3, capsize=2)
        if bounds is not None and bounds.found:
            ax.axvspan(bounds.w_lower, bounds.w_upper, color="tab:orange", alpha=0.25,
                       label=f"[{bounds.w_lower:.3f}, {bounds.w_upper:.3f}]")
            ax.legend()
        ax.set_xlabel("$W/J$")
        ax.set_ylabel(ylabel)
        return _save(fig, path)


def plot_spectrum(times, n, Q, path):
    """Heat map of Q_n(t) on log time, n on the vertical axis."""
    times = np.asarray(times)
    Q = np.asarray(Q)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        mesh = ax.pcolormesh(np.arange(len(times)), n, Q.T, shading="nearest", cmap="viridis")
        ticks = np.linspace(0, len(times) - 1, min(6, len(times))).round().astype(int)
        ax.set_xticks(ticks)
        ax.set_xticklabels([f"{times[i]:.3g}" for i in ticks])
        ax.set_xlabel("$tJ$")
        ax.set_ylabel("$n$")
        fig.colorbar(mesh, ax=ax, label=r"$\tilde Q_n$")
        return _save(fig, path)


def plot_dynamics(times, series: dict, path, loglog=True):
    """Several time series (e.g. S2, P00, Q0) on one axis."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, y in series.items():
            y = np.asarray(y, dtype=float)
            ax.plot(times, np.where(y > 0, y, np.nan) if loglog else y, label=label)
        if loglog:
            ax.set_xscale("log")
            ax.set_yscale("log")
        ax.set_xlabel("$tJ$")
        ax.legend()
        return _save(fig, path)


def plot_phase_diagram(W, U, S2, path, contour=None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        mesh = ax.pcolormesh(W, U, np.asarray(S2), shading="nearest", cmap="magma")
        fig.colorbar(mesh, ax=ax, label="asymptotic $S^2$")
        if contour is not None:
            ax.plot(contour, U, "w--", label="iso-$S^2$")
            ax.legend(loc="upper left")
        ax.set_xlabel("$W/J$")
        ax.set_ylabel("$U/J$")
        return _save(fig, path)


def plot_ldos(energies, rho, path, site=None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(energies, rho)
        ax.set_xlabel("$E/J$")
        ax.set_ylabel("LDOS" if site is None else f"LDOS (site {site})")
        return _save(fig, path)
