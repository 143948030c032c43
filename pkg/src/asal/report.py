"""Aggregation of run records into tables, CSV summaries and figures."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

SUMMARY_FIELDS = (
    "problem",
    "method",
    "n_runs",
    "rmse_mean",
    "rmse_se",
    "safe_fraction",
    "time_per_query",
    "time_ratio",
)


def read_records(path) -> list:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def standard_error(values) -> Optional[float]:
    """Standard error of the mean; None for a single run."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return None
    return float(v.std(ddof=1) / np.sqrt(v.size))


def aggregate(records: Iterable[dict], reference: Optional[str] = None) -> list:
    """One row per (problem, method), in first-seen order.

    ``time_ratio`` is the mean per-query time divided by that of the
    ``reference`` method on the same problem (default: the first method seen);
    None when the reference time is zero.
    """
    groups: dict = defaultdict(list)
    order = []
    for rec in records:
        key = (rec["problem"], rec["method"])
        if key not in groups:
            order.append(key)
        groups[key].append(rec)
    rows = []
    for problem, method in order:
        recs = groups[(problem, method)]
        rmse = [r["rmse"] for r in recs]
        rows.append(
            {
                "problem": problem,
                "method": method,
                "n_runs": len(recs),
                "rmse_mean": float(np.mean(rmse)),
                "rmse_se": standard_error(rmse),
                "safe_fraction": float(np.mean([r["safe_fraction"] for r in recs])),
                "time_per_query": float(np.mean([np.mean(r["query_times"]) for r in recs])),
            }
        )
    by_problem = defaultdict(list)
    for row in rows:
        by_problem[row["problem"]].append(row)
    for problem, prow in by_problem.items():
        ref = next((r for r in prow if r["method"] == reference), prow[0])
        for row in prow:
            denom = ref["time_per_query"]
            row["time_ratio"] = row["time_per_query"] / denom if denom > 0 else None
    return rows


def format_table(rows: list) -> str:
    header = f"{'problem':<12} {'method':<16} {'n':>3} {'RMSE':>18} {'safe':>6} {'s/query':>10} {'ratio':>8}"
    lines = [header, "-" * len(header)]
    for r in rows:
        se = "n/a" if r["rmse_se"] is None else f"{r['rmse_se']:.4f}"
        ratio = "n/a" if r["time_ratio"] is None else f"{r['time_ratio']:.3f}"
        lines.append(
            f"{r['problem']:<12} {r['method']:<16} {r['n_runs']:>3} "
            f"{r['rmse_mean']:>9.4f} ± {se:<6} {r['safe_fraction']:>6.3f} "
            f"{r['time_per_query']:>10.2e} {ratio:>8}"
        )
    return "\n".join(lines)


def write_csv(rows: list, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("" if r[k] is None else r[k]) for k in SUMMARY_FIELDS})
    return path


# -- figures ------------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_results(rows: list, out_dir, gamma: Optional[float] = None) -> list:
    """RMSE, safe fraction and per-query time panels, one figure per problem."""
    plt = _pyplot()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    problems = list(dict.fromkeys(r["problem"] for r in rows))
    for problem in problems:
        prow = [r for r in rows if r["problem"] == problem]
        names = [r["method"] for r in prow]
        pos = np.arange(len(prow))
        fig, axes = plt.subplots(1, 3, figsize=(11, 3.4))
        err = [0.0 if r["rmse_se"] is None else r["rmse_se"] for r in prow]
        axes[0].bar(pos, [r["rmse_mean"] for r in prow], yerr=err, capsize=3, color="tab:blue")
        axes[0].set_ylabel("RMSE")
        axes[1].bar(pos, [r["safe_fraction"] for r in prow], color="tab:green")
        if gamma is not None:
            axes[1].axhline(1 - gamma, color="k", ls="--", lw=1)
        axes[1].set_ylim(0, 1.05)
        axes[1].set_ylabel("safe query fraction")
        axes[2].bar(pos, [r["time_per_query"] for r in prow], color="tab:orange")
        axes[2].set_yscale("log")
        axes[2].set_ylabel("seconds per query")
        for ax in axes:
            ax.set_xticks(pos)
            ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
        fig.suptitle(problem)
        fig.tight_layout()
        path = out_dir / f"{problem}_summary.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def plot_training(log_records: list, path, window: int = 50) -> Path:
    """Per-step loss with its moving average, plus epoch RMSE when present."""
    from .trainer import smoothed

    plt = _pyplot()
    steps = [r for r in log_records if "loss" in r and "epoch" not in r]
    epochs = [r for r in log_records if "epoch" in r and r.get("rmse") is not None]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    loss = np.array([r["loss"] for r in steps], dtype=float)
    axes[0].plot(np.arange(1, loss.size + 1), loss, lw=0.5, alpha=0.5, color="tab:gray")
    if loss.size >= window:
        axes[0].plot(np.arange(window, loss.size + 1), smoothed(loss, window), color="tab:blue")
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("loss")
    if epochs:
        axes[1].plot([r["epoch"] for r in epochs], [r["rmse"] for r in epochs], marker="o", ms=3)
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("held-out RMSE")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
