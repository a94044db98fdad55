"""PNG figures for grids, posteriors and sweep curves (matplotlib, Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_grid(grid, path, title: str = "") -> None:
    xmin, xmax, ymin, ymax = grid.bounds
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(grid.values, origin="lower", extent=(xmin, xmax, ymin, ymax), cmap="viridis",
              aspect="auto")
    ax.set_xlabel("z1")
    ax.set_ylabel("z2")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_posterior(true_grid, approx_grid, path, title: str = "") -> None:
    """True posterior density against a histogram of the approximate one."""
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(true_grid.z, true_grid.values, label="true posterior")
    if approx_grid is not None:
        width = approx_grid.z[1] - approx_grid.z[0]
        ax.bar(approx_grid.z, approx_grid.values, width=width, alpha=0.4, label="q(z|x)")
    ax.set_xlabel("z")
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_sweep_curves(rows, path) -> None:
    """One panel per target: mean +- std of the final metric against rho, per mode."""
    targets = sorted({r["target"] for r in rows})
    n = len(targets)
    cols = min(3, n)
    nrows = (n + cols - 1) // cols
    fig, axes = plt.subplots(nrows, cols, figsize=(3.2 * cols, 2.6 * nrows), squeeze=False)
    for ax, target in zip(axes.flat, targets):
        for mode in sorted({r["mode"] for r in rows if r["target"] == target}):
            sel = sorted((r for r in rows if r["target"] == target and r["mode"] == mode),
                         key=lambda r: r["rho"])
            rho = np.array([r["rho"] for r in sel])
            mean = np.array([r["mean"] for r in sel])
            std = np.nan_to_num(np.array([r["std"] for r in sel]))
            ax.errorbar(rho, mean, yerr=std, marker="o", capsize=3, label=mode)
        ax.set_title(f"energy {target}")
        ax.set_xlabel("rho")
        ax.legend(fontsize=7)
    for ax in list(axes.flat)[n:]:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
