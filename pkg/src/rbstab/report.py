"""Figure rendering for run artifacts, written next to the delimited output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = [
    "figure_trace",
    "figure_error_scatter",
    "figure_sweep",
    "figure_field",
]


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)


def figure_trace(trace, path) -> None:
    """Greedy convergence: max estimator (and true errors, if traced) vs N."""
    ns = [r.n for r in trace.records]
    fig, ax = plt.subplots(figsize=(5.5, 4))
    ax.semilogy(ns, [r.max_estimator for r in trace.records], "o-",
                label="max estimator")
    if any(r.max_true_error is not None for r in trace.records):
        ax.semilogy(ns, [r.max_true_error for r in trace.records], "s--",
                    label="max true error (stabilized online)")
    if any(r.max_true_error_plain is not None for r in trace.records):
        ax.semilogy(ns, [r.max_true_error_plain for r in trace.records], "^:",
                    label="max true error (plain online)")
    ax.set_xlabel("basis size N")
    ax.set_ylabel("max over training set")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    _save(fig, path)


def figure_error_scatter(mus, errors, deltas, path, component: int = 0,
                         label: str = "mu1") -> None:
    """Per-point errors and estimator values sorted by one component."""
    mus = np.atleast_2d(mus)
    order = np.argsort(mus[:, component])
    x = mus[order, component]
    fig, ax = plt.subplots(figsize=(5.5, 4))
    ax.loglog(x, np.asarray(errors)[order], "o", ms=3, label="true error")
    if deltas is not None:
        ax.loglog(x, np.asarray(deltas)[order], ".", ms=3, alpha=0.7,
                  label="estimator")
    ax.set_xlabel(label)
    ax.set_ylabel("energy error")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    _save(fig, path)


def figure_sweep(xs, errors, fractions, path, xlabel: str,
                 logx: bool = True) -> None:
    """Threshold sweep: mean error plus unstabilized share on a twin axis."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    plot = ax.semilogy
    if logx:
        plot = ax.loglog
        keep = np.asarray(xs) > 0
        xs = np.asarray(xs, dtype=float)
        xs[~keep] = np.nan
    plot(xs, errors, "o-", color="tab:blue", label="mean error")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("mean error", color="tab:blue")
    ax.grid(True, which="both", alpha=0.3)
    twin = ax.twinx()
    twin.plot(xs, 100 * np.asarray(fractions), "s--", color="tab:red",
              label="unstabilized %")
    twin.set_ylabel("unstabilized share [%]", color="tab:red")
    twin.set_ylim(0, 100)
    _save(fig, path)


def figure_field(mesh, values, path, title: str = "") -> None:
    """Nodal field on the triangulation."""
    fig, ax = plt.subplots(figsize=(6, 3.2))
    tpc = ax.tripcolor(mesh.nodes[:, 0], mesh.nodes[:, 1], mesh.triangles,
                       values, shading="gouraud")
    fig.colorbar(tpc, ax=ax, shrink=0.9)
    ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    _save(fig, path)
