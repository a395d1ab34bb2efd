"""Figure rendering for case reports.

The report pipeline writes plot data as CSV (the canonical output) and
renders a PNG of the same series next to it.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SERIES_STYLE = {
    "measured": {"color": "0.25", "lw": 1.8},
    "lqr_mpc_weights": {"color": "tab:blue", "lw": 1.4, "ls": "--"},
    "lqr_ioc_weights": {"color": "tab:red", "lw": 1.4},
    "lqr_ioc_diagonal": {"color": "tab:green", "lw": 1.2, "ls": ":"},
}


def render_trajectory_figure(series: dict[str, np.ndarray], path, title: str = ""):
    """Plot state trajectories per dimension, one panel per state.

    Args:
        series: map of series name to a (N, n) state array.
        path: output image path (format from the extension).
        title: optional figure title.
    """
    n = next(iter(series.values())).shape[1]
    fig, axes = plt.subplots(n, 1, sharex=True, figsize=(7.0, 2.4 * n), squeeze=False)
    for i in range(n):
        ax = axes[i, 0]
        for name, states in series.items():
            style = _SERIES_STYLE.get(name, {"lw": 1.2})
            ax.plot(np.arange(states.shape[0]), states[:, i], label=name, **style)
        ax.set_ylabel(f"x{i}")
        ax.grid(True, alpha=0.3)
    axes[-1, 0].set_xlabel("k")
    axes[0, 0].legend(fontsize=8, loc="best")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
