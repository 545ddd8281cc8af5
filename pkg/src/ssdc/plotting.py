"""Figures for trajectory tables and run directories.

matplotlib is imported only when a figure is requested, so the rest of the
package works without it. ``gnuplot_script`` needs nothing at all.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Sequence

from ssdc.outputs import AVAILABILITY_FILE, LEDGER_FILE


class PlottingUnavailable(RuntimeError):
    """matplotlib is not installed."""


def _pyplot():
    try:
        import matplotlib
    except ImportError:
        raise PlottingUnavailable("figures need matplotlib: pip install 'ssdc[plot]'") from None
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_trajectory(rows: Sequence[tuple[int, float, float, float]], path: str | Path, growth: float) -> Path:
    """World/ICT emissions on the left axis, ICT share on the right."""
    plt = _pyplot()
    years = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(years, [r[1] for r in rows], label="world (Mt)")
    ax.plot(years, [r[2] for r in rows], label=f"ICT, growth {growth:g} (Mt)")
    ax.set_xlabel("year")
    ax.set_ylabel("MtCO2e / year")
    ax2 = ax.twinx()
    share = [r[3] if math.isfinite(r[3]) else float("nan") for r in rows]
    ax2.plot(years, share, color="tab:red", linestyle="--", label="ICT share (%)")
    ax2.axhline(100.0, color="tab:red", linewidth=0.5)
    ax2.set_ylabel("share (%)")
    ax2.set_yscale("log")
    lines = ax.get_lines() + ax2.get_lines()[:1]
    ax.legend(lines, [ln.get_label() for ln in lines], loc="upper left")
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out)
    plt.close(fig)
    return out


def _read_csv(path: Path) -> dict[str, list[str]]:
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: [r[k] for r in rows] for k in (rows[0].keys() if rows else ())}


def plot_run(run_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Energy sources per step and service availability, as PNGs next to the CSVs."""
    plt = _pyplot()
    d = Path(run_dir)
    out = Path(out_dir) if out_dir else d
    out.mkdir(parents=True, exist_ok=True)
    led = _read_csv(d / LEDGER_FILE)
    hours = [float(t) / 3600.0 for t in led.get("time", [])]
    fig, ax = plt.subplots(figsize=(8, 4))
    stack = ["pv_to_load", "grid_to_load", "ups_to_load", "phones_to_load"]
    ax.stackplot(hours, *[[float(v) for v in led[c]] for c in stack], labels=stack)
    ax.plot(hours, [float(v) for v in led["unmet"]], color="black", linewidth=0.8, label="unmet")
    ax.set_xlabel("hours")
    ax.set_ylabel("Wh per step")
    ax.legend(loc="upper right", fontsize="small")
    fig.tight_layout()
    energy_png = out / "energy.png"
    fig.savefig(energy_png)
    plt.close(fig)

    av = _read_csv(d / AVAILABILITY_FILE)
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(av["service"], [float(v) for v in av["availability"]])
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("availability")
    fig.tight_layout()
    avail_png = out / "availability.png"
    fig.savefig(avail_png)
    plt.close(fig)
    return [energy_png, avail_png]


def gnuplot_script(kind: str, csv_path: str | Path, png_path: str | Path) -> str:
    """A gnuplot script drawing ``csv_path`` (a trajectory table or a ledger) into ``png_path``."""
    head = (
        "set datafile separator ','\n"
        "set key autotitle columnhead\n"
        "set terminal pngcairo size 900,500\n"
        f"set output '{png_path}'\n"
    )
    if kind == "trajectory":
        return head + (
            "set xlabel 'year'\nset ylabel 'MtCO2e / year'\n"
            "set y2label 'ICT share (%)'\nset logscale y2\nset y2tics\n"
            f"plot '{csv_path}' using 1:2 with lines, '' using 1:3 with lines, "
            "'' using 1:4 axes x1y2 with lines dashtype 2\n"
        )
    if kind == "ledger":
        return head + (
            "set xlabel 'hours'\nset ylabel 'Wh per step'\n"
            f"plot '{csv_path}' using ($2/3600):5 with lines, '' using ($2/3600):6 with lines, "
            "'' using ($2/3600):7 with lines, '' using ($2/3600):8 with lines, "
            "'' using ($2/3600):15 with lines\n"
        )
    raise ValueError(f"no gnuplot template for {kind!r}")
