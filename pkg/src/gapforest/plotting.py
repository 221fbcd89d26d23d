"""Render the explanation and evaluation tables as PNG figures.

Plots are drawn from the same objects that are written to CSV, so a figure
never shows anything the delimited output does not contain.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 10,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}

# png metadata without a version string keeps the bytes reproducible
_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return path


def cumulative_weight(needed, path, max_rank=None):
    """Cumulative weight against neighbor rank: one thin line per query, mean in bold."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.5))
        longest = max(len(c.cumulative) for c in needed.curves)
        grid = np.ones((len(needed.curves), longest))
        for k, c in enumerate(needed.curves):
            grid[k, : len(c.cumulative)] = c.cumulative
            ax.plot(np.arange(1, len(c.cumulative) + 1), c.cumulative, color="0.6", lw=0.5)
        ax.plot(np.arange(1, longest + 1), grid.mean(axis=0), color="C0", lw=2, label="mean")
        lines = [f"{t:g} of weight: {m:.0f} neighbors" for t, m in zip(needed.thresholds, needed.mean)]
        ax.text(0.02, 0.98, "\n".join(lines + [f"N = {needed.n_train}"]), transform=ax.transAxes,
                va="top", fontsize=7, family="monospace")
        ax.set_xscale("log")
        if max_rank:
            ax.set_xlim(1, max_rank)
        ax.set_xlabel("number of nearest neighbors")
        ax.set_ylabel("cumulative GAP weight")
        ax.legend(loc="lower right")
        return _save(fig, path)


def neighbor_histogram(report, path):
    """Training-label histogram with the weighted neighbor labels on top."""
    edges = report.bin_edges
    widths = np.diff(edges)
    train = report.train_hist / max(report.train_hist.sum() * 1.0, 1.0) / widths
    neigh_total = report.neighbor_hist_weighted.sum()
    neigh = report.neighbor_hist_weighted / (neigh_total if neigh_total > 0 else 1.0) / widths
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.bar(edges[:-1], train, widths, align="edge", color="C1", alpha=0.5, label="training labels")
        ax.bar(edges[:-1], neigh, widths, align="edge", color="C0", alpha=0.6,
               label=f"neighbors ({report.threshold:.0%} weight)")
        ax.axvline(np.asarray(report.prediction).item() if report.task != "classification"
                   else float(np.argmax(report.prediction)), color="green", label="prediction")
        if report.realized_label is not None:
            ax.axvline(report.realized_label, color="red", label="realized")
        c = report.confidence
        ax.set_title(f"query {report.query_id}: weighted MAE {c.weighted_mae:.3g} "
                     f"vs train MAE {c.trainset_mae:.3g}", fontsize=9)
        ax.set_xlabel("label")
        ax.set_ylabel("density")
        ax.legend()
        return _save(fig, path)


def error_vs_confidence(table, path):
    """Absolute test error against weighted neighbor training error, with decile means."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.scatter(table.weighted_mae, table.abs_error, s=4, color="0.6", alpha=0.5, label="test points")
        ax.plot(table.decile_weighted_mae, table.decile_abs_error, "o-", color="C3", label="decile means")
        r1, r2 = table.pearson_per_point, table.pearson_decile_means
        fmt = lambda r: "undefined" if r is None else f"{r:.2f}"
        ax.set_title(f"per-point r = {fmt(r1)}, decile r = {fmt(r2)}", fontsize=9)
        ax.set_xlabel("weighted neighbor training MAE")
        ax.set_ylabel("absolute test error")
        ax.legend()
        return _save(fig, path)
