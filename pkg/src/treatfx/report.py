"""Table and figure rendering.  Plots are drawn from the machine-readable CSV
artifacts, never from in-memory state, and are written as SVG."""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

# deterministic SVG output across reruns
matplotlib.rcParams["svg.hashsalt"] = "treatfx"

_SAVE_KW = {"format": "svg", "metadata": {"Date": None}}


def _finish(fig, out_path):
    fig.tight_layout()
    fig.savefig(out_path, **_SAVE_KW)
    plt.close(fig)


def contrast_matrix_frame(po_levels: dict, ates: list, n_arms: int) -> pd.DataFrame:
    """Square frame: potential-outcome levels on the diagonal, ATEs below it."""
    cells = [["" for _ in range(n_arms)] for _ in range(n_arms)]
    for arm, est in po_levels.items():
        cells[arm][arm] = f"{est.point:.3f} ({est.se:.3f})"
    for est in ates:
        cells[est.contrast.m][est.contrast.l] = f"{est.point:.3f} ({est.se:.3f})"
    labels = [f"arm {a}" for a in range(n_arms)]
    return pd.DataFrame(cells, index=labels, columns=labels)


def plot_effect_path(paths_csv, out_svg) -> None:
    """Effect-over-time curves, one line per contrast, with 90% bands."""
    df = pd.read_csv(paths_csv)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for contrast, grp in df.groupby("contrast"):
        grp = grp.sort_values("horizon")
        ax.plot(grp["horizon"], grp["point"], marker="o", label=str(contrast))
        ax.fill_between(grp["horizon"], grp["ci90_lo"], grp["ci90_hi"], alpha=0.2)
    ax.axhline(0.0, color="grey", lw=0.8)
    ax.set_xlabel("outcome horizon (month)")
    ax.set_ylabel("average effect (days)")
    ax.legend(title="contrast", fontsize=8)
    _finish(fig, out_svg)


def plot_gate_diff(gates_csv, out_svg) -> None:
    """GATE minus ATE bars with 90% confidence intervals, per contrast/column."""
    df = pd.read_csv(gates_csv)
    panels = list(df.groupby(["contrast", "column"]))
    if not panels:
        return
    fig, axes = plt.subplots(len(panels), 1, figsize=(7, 2.8 * len(panels)),
                             squeeze=False)
    for ax, ((contrast, column), grp) in zip(axes[:, 0], panels):
        x = np.arange(len(grp))
        err = 1.6448536269514722 * grp["se"]
        ax.bar(x, grp["gate_minus_ate"], yerr=err, capsize=3, color="#4878d0")
        ax.axhline(0.0, color="grey", lw=0.8)
        ax.set_xticks(x)
        ax.set_xticklabels([f"{g:.3g}" for g in grp["group"]], fontsize=7)
        ax.set_title(f"{contrast}: GATE - ATE by {column} (ATE={grp['ate'].iloc[0]:.2f})",
                     fontsize=9)
    _finish(fig, out_svg)


def plot_iate_density(density_csv, out_svg) -> None:
    df = pd.read_csv(density_csv)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for contrast, grp in df.groupby("contrast"):
        ax.plot(grp["grid"], grp["density"], label=str(contrast))
    ax.set_xlabel("IATE (days)")
    ax.set_ylabel("density")
    ax.legend(title="contrast", fontsize=8)
    _finish(fig, out_svg)


def _kernel_smooth(x, y, bandwidth=None):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if bandwidth is None:
        # Silverman rule on the x positions; cosmetic only
        sd = x.std()
        bandwidth = 1.06 * sd * len(x) ** (-1 / 5) if sd > 0 else 1.0
    grid = np.linspace(x.min(), x.max(), 200)
    w = np.exp(-0.5 * ((grid[:, None] - x[None, :]) / max(bandwidth, 1e-12)) ** 2)
    return grid, (w @ y) / w.sum(axis=1)


def plot_gate_smooth(gates_csv, out_svg) -> None:
    """Raw GATE points with a kernel-smoothed curve per contrast/column."""
    df = pd.read_csv(gates_csv)
    panels = list(df.groupby(["contrast", "column"]))
    if not panels:
        return
    fig, axes = plt.subplots(len(panels), 1, figsize=(7, 2.8 * len(panels)),
                             squeeze=False)
    for ax, ((contrast, column), grp) in zip(axes[:, 0], panels):
        x = grp["group"].to_numpy(dtype=np.float64)
        y = grp["point"].to_numpy(dtype=np.float64)
        ax.plot(x, y, "o", ms=4, color="#4878d0", label="GATE")
        if len(grp) >= 3:
            gx, gy = _kernel_smooth(x, y)
            ax.plot(gx, gy, color="green", label="smoothed")
        ax.axhline(grp["ate"].iloc[0], color="grey", lw=0.8, ls="--", label="ATE")
        ax.set_title(f"{contrast}: GATE by {column}", fontsize=9)
        ax.legend(fontsize=7)
    _finish(fig, out_svg)


def render_all(out_dir) -> list[str]:
    """Render every figure whose data file exists; returns written paths."""
    out_dir = Path(out_dir)
    written = []
    jobs = [
        ("effect_paths.csv", "effect_paths.svg", plot_effect_path),
        ("gates.csv", "gate_diff.svg", plot_gate_diff),
        ("gates.csv", "gate_smooth.svg", plot_gate_smooth),
        ("iate_density.csv", "iate_density.svg", plot_iate_density),
    ]
    for src, dst, fn in jobs:
        if (out_dir / src).exists():
            fn(out_dir / src, out_dir / dst)
            written.append(str(out_dir / dst))
    return written
