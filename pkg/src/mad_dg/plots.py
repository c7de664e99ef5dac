"""Deterministic SVG figures (fixed hash salt, no timestamps)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {"svg.hashsalt": "mad-dg", "svg.fonttype": "none", "font.size": 9}


def _save(fig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def _cell_label(params: dict) -> str:
    parts = []
    for k, v in params.items():
        if k == "components":
            parts.append("+".join(v) if v else "none")
        else:
            parts.append(f"{k}={v}")
    return ", ".join(parts)


def sweep_plot(table, path) -> None:
    """Heatmap when both n_views and lam vary, otherwise mean +- std per cell."""
    with plt.rc_context(_RC):
        axes = table.axes
        if len(axes.get("n_views", [])) > 1 and len(axes.get("lam", [])) > 1 and len(axes) == 2:
            ms, lams = axes["n_views"], axes["lam"]
            grid = np.full((len(ms), len(lams)), np.nan)
            for c in table.cells:
                grid[ms.index(c.params["n_views"]), lams.index(c.params["lam"])] = c.mean
            fig, ax = plt.subplots(figsize=(4.5, 3.5))
            im = ax.imshow(grid, origin="lower", cmap="viridis", aspect="auto")
            ax.set_xticks(range(len(lams)), [str(v) for v in lams])
            ax.set_yticks(range(len(ms)), [str(v) for v in ms])
            ax.set_xlabel("lambda")
            ax.set_ylabel("views M")
            for i in range(len(ms)):
                for j in range(len(lams)):
                    if np.isfinite(grid[i, j]):
                        ax.text(j, i, f"{grid[i, j]:.3f}", ha="center", va="center", color="w")
            fig.colorbar(im, ax=ax, label="target accuracy")
        else:
            labels = [_cell_label(c.params) for c in table.cells]
            means = [c.mean for c in table.cells]
            stds = [c.std for c in table.cells]
            fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(labels) + 1.5), 3.5))
            x = np.arange(len(labels))
            ax.errorbar(x, means, yerr=stds, fmt="o-", capsize=3)
            ax.set_xticks(x, labels, rotation=30, ha="right")
            ax.set_ylabel("target accuracy")
        fig.tight_layout()
        _save(fig, path)


def loss_curves(runs: Sequence[tuple[str, dict]], path, fields: Sequence[str] = ("l_det", "l_mad")) -> None:
    """Per-epoch mean losses for each (name, report dict)."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.5))
        for name, rep in runs:
            epochs = [e["epoch"] for e in rep["epochs"]]
            for f in fields:
                ax.plot(epochs, [e["losses"][f] for e in rep["epochs"]], marker=".", label=f"{name}: {f}")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean loss")
        ax.legend(fontsize=7)
        fig.tight_layout()
        _save(fig, path)


def probe_curves(result, path) -> None:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.5))
        n1 = len(result.phase1_curve)
        ax.plot(range(n1), result.phase1_curve, marker=".", label="shallow")
        ax.plot(range(n1, n1 + len(result.phase2_curve)), result.phase2_curve, marker=".", label="deepened")
        ax.set_xlabel("probe epoch")
        ax.set_ylabel("domain loss")
        ax.legend()
        fig.tight_layout()
        _save(fig, path)


def view_projection(report, path) -> None:
    with plt.rc_context(_RC):
        levels = [lv for lv in ("image", "instance") if lv in report.levels and "projection" in report.levels[lv]]
        fig, axs = plt.subplots(1, max(1, len(levels)), figsize=(4.0 * max(1, len(levels)), 3.5), squeeze=False)
        for ax, lv in zip(axs[0], levels):
            e = report.levels[lv]
            p = np.asarray(e["projection"])
            views = np.asarray(e["view"])
            for m in np.unique(views):
                sel = views == m
                ax.scatter(p[sel, 0], p[sel, 1], s=4, label=f"view {m}")
            ax.set_title(f"{lv} latents")
            ax.legend(fontsize=7, markerscale=3)
        fig.tight_layout()
        _save(fig, path)
