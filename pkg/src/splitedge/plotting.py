"""Static figures from trace and latency CSVs (Agg backend, PNG files)."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.8),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 9,
}
PHASE_COLUMNS = ("t_client_fwd_up", "t_server", "t_down_client_bwd", "t_sync", "t_head_fwd_up",
                 "t_server_fwd", "t_tail", "t_server_bwd", "t_down_head_bwd", "t_async")


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def _check(traces: dict):
    if not traces:
        raise ValueError("no traces to plot")
    for name, rows in traces.items():
        if not rows:
            raise ValueError(f"trace {name!r} has no rows")


def plot_accuracy(traces: dict, path) -> Path:
    """Eval accuracy against round, one line per run."""
    _check(traces)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, rows in traces.items():
            ax.plot([r["round"] + 1 for r in rows], [100 * r["eval_accuracy"] for r in rows],
                    marker="o", ms=3, label=name)
        ax.set_xlabel("round")
        ax.set_ylabel("test accuracy (%)")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def plot_latency_bars(traces: dict, path) -> Path:
    """Total simulated latency per run, stacked by phase."""
    _check(traces)
    names = list(traces)
    totals = {c: [sum(r.get(c, 0.0) for r in traces[n]) for n in names] for c in PHASE_COLUMNS}
    used = [c for c in PHASE_COLUMNS if any(totals[c])]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        bottom = [0.0] * len(names)
        for c in used:
            ax.bar(names, totals[c], bottom=bottom, label=c[2:])
            bottom = [b + v for b, v in zip(bottom, totals[c])]
        ax.set_ylabel("simulated latency (s)")
        ax.tick_params(axis="x", rotation=20)
        if used:
            ax.legend(fontsize=7)
        fig.tight_layout()
        return _save(fig, path)


def bytes_per_step(rows: list, column: str = "bytes_grad_down") -> float:
    """Bytes of ``column`` per global batch step, averaged over the run."""
    steps = sum(r["steps"] for r in rows)
    return sum(r[column] for r in rows) / steps if steps else 0.0


def plot_bytes_vs_clients(traces: dict, path, column: str = "bytes_grad_down") -> Path:
    """Per-step bytes of ``column`` against client count, one series per run label.

    Normalizing by steps keeps the series comparable when a fixed dataset is
    spread over more clients.
    """
    _check(traces)
    series = defaultdict(dict)
    for rows in traces.values():
        series[rows[0]["run"]][rows[0]["clients"]] = bytes_per_step(rows, column)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, pts in sorted(series.items()):
            ms = sorted(pts)
            ax.plot(ms, [pts[m] for m in ms], marker="s", ms=4, label=name)
        ax.set_xlabel("clients M")
        ax.set_ylabel(f"{column.replace('_', ' ')} per step")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def plot_latency_vs_size(rows: list, path) -> Path:
    """Total latency to target against dataset size, one line per architecture."""
    if not rows:
        raise ValueError("latency table is empty")
    by_arch = defaultdict(list)
    for r in rows:
        by_arch[r["architecture"]].append((r["dataset_size"], r["total_latency_s"]))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, pts in by_arch.items():
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ms=3, label=name)
        ax.set_xlabel("training samples")
        ax.set_ylabel("total training latency (s)")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)
