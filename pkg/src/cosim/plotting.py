"""Matplotlib figures for run directories and sweeps.

Uses the Agg backend so figures render headless. Every figure is written as
PNG next to the data it was drawn from.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}


def _read_timeseries(path: Path) -> dict[str, list[float | None]]:
    cols: dict[str, list[float | None]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            for k, v in row.items():
                cols.setdefault(k, []).append(float(v) if v != "" else None)
    return cols


def _masked(xs: list, ys: list) -> tuple[list, list]:
    pts = [(x, y) for x, y in zip(xs, ys) if y is not None]
    return [p[0] for p in pts], [p[1] for p in pts]


def plot_timeseries(ts_csv: str | Path, out_png: str | Path, slo: dict | None = None) -> Path:
    """Three stacked panels: windowed P99 TTFT, P99 TBT and offline tokens/s."""
    cols = _read_timeseries(Path(ts_csv))
    t = cols.get("t", [])
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(3, 1, figsize=(6.0, 6.0), sharex=True)
        panels = [
            ("p99_ttft_5s", "P99 TTFT (s)", (slo or {}).get("ttft_target")),
            ("p99_tbt_5s", "P99 TBT (s)", (slo or {}).get("tbt_target")),
            ("offline_tput_5s", "offline tok/s", None),
        ]
        for ax, (key, label, target) in zip(axes, panels):
            x, y = _masked(t, cols.get(key, []))
            ax.plot(x, y, lw=1.0, color="C0")
            if target:
                ax.axhline(target, ls="--", lw=0.8, color="C3", label="target")
                ax.legend(loc="upper right", frameon=False)
            ax.set_ylabel(label)
        axes[-1].set_xlabel("time (s)")
        fig.tight_layout()
        out = Path(out_png)
        fig.savefig(out)
        plt.close(fig)
    return out


def plot_tbt_cdf(tbt: Sequence[float], out_png: str | Path, target: float | None = None) -> Path:
    xs = sorted(tbt)
    n = len(xs)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        if n:
            ax.plot(xs, [(i + 1) / n for i in range(n)], lw=1.0)
        if target:
            ax.axvline(target, ls="--", lw=0.8, color="C3")
        ax.set_xlabel("TBT (s)")
        ax.set_ylabel("CDF")
        fig.tight_layout()
        out = Path(out_png)
        fig.savefig(out)
        plt.close(fig)
    return out


def render_run(result, out_dir: str | Path) -> list[Path]:
    """Figures for a finished run whose CSVs are already in ``out_dir``."""
    from cosim.metrics import tbt_samples

    out = Path(out_dir)
    slo = {"ttft_target": result.slo.ttft_target, "tbt_target": result.slo.tbt_target}
    tbt = [x for r in result.requests if r.online for x in tbt_samples(r)]
    return [
        plot_timeseries(out / "timeseries.csv", out / "timeseries.png", slo),
        plot_tbt_cdf(tbt, out / "tbt_cdf.png", slo["tbt_target"]),
    ]


def render_dir(out_dir: str | Path) -> list[Path]:
    """Figures from a run directory on disk (no in-memory result needed)."""
    from cosim.metrics import read_metrics, read_tbt_from_csv

    out = Path(out_dir)
    m = read_metrics(out / "metrics.json")
    s = m.get("slo", {})
    slo = {
        "ttft_target": s.get("ttft_slo", 0) * s.get("scale", 1.0) or None,
        "tbt_target": s.get("tbt_slo", 0) * s.get("scale", 1.0) or None,
    }
    tbt = [x for xs in read_tbt_from_csv(out).values() for x in xs]
    return [
        plot_timeseries(out / "timeseries.csv", out / "timeseries.png", slo),
        plot_tbt_cdf(tbt, out / "tbt_cdf.png", slo["tbt_target"]),
    ]


def plot_sweep(rows: Sequence[dict], axis: str, out_png: str | Path) -> Path:
    """``rows`` hold ``policy``, ``value`` and report fields; one line per policy."""
    policies = sorted({r["policy"] for r in rows})
    metrics = [("ttft_p99", "P99 TTFT (s)"), ("tbt_p99", "P99 TBT (s)"),
               ("offline_throughput", "offline tok/s")]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(9.0, 2.8))
        for ax, (key, label) in zip(axes, metrics):
            for p in policies:
                pts = sorted((r["value"], r[key]) for r in rows if r["policy"] == p and r[key] is not None)
                ax.plot([a for a, _ in pts], [b for _, b in pts], marker="o", ms=3, lw=1.0, label=p)
            ax.set_xlabel(axis)
            ax.set_ylabel(label)
        axes[0].legend(frameon=False)
        fig.tight_layout()
        out = Path(out_png)
        fig.savefig(out)
        plt.close(fig)
    return out
