"""Figures written next to JSON reports (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .simulator import SimReport, SweepResult  # noqa: E402


def figure_path(report_path: str | Path) -> Path:
    return Path(report_path).with_suffix(".png")


def plot_timeline(report: SimReport, out: str | Path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(7, 3.5))
    xs = range(1, len(report.survive_series) + 1)
    ax.step(xs, report.survive_series, where="post", label="resident gadgets")
    ax.axhline(report.survive_gadgets, color="tab:red", linestyle="--", linewidth=1,
               label=f"max {report.survive_gadgets}")
    ax.set_xlabel("event")
    ax.set_ylabel("gadgets")
    ax.set_title(title or f"limit {report.config['limit']} of {report.total_gadgets} gadgets")
    ax.legend(loc="upper right", fontsize="small")
    fig.tight_layout()
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return Path(out)


def plot_sweep(sweep: SweepResult, out: str | Path, title: str = "") -> Path:
    fracs = sorted(sweep.reports)
    reports = [sweep.reports[f] for f in fracs]
    labels = [f"{f.numerator}/{f.denominator}" for f in fracs]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(labels, [r.survive_gadgets for r in reports], marker="o", label="max resident gadgets")
    ax.plot(labels, [r.survive_gadgets_mean for r in reports], marker="s", label="mean resident gadgets")
    ax.set_xlabel("loading limit")
    ax.set_ylabel("gadgets")
    loads = ax.twinx()
    loads.plot(labels, [r.loads for r in reports], color="tab:gray", linestyle=":", marker="^",
               label="loads")
    loads.set_ylabel("loads")
    lines = ax.get_legend_handles_labels()
    extra = loads.get_legend_handles_labels()
    ax.legend(lines[0] + extra[0], lines[1] + extra[1], loc="upper left", fontsize="small")
    ax.set_title(title or ("monotonic" if sweep.monotonic else "NOT monotonic"))
    fig.tight_layout()
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return Path(out)
