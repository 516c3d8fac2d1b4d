#!/usr/bin/env python3
"""Render paper-style figures from rccm CSV outputs.

Six figure types, one vector image each:

  tracking  mean +/- 1 std tracking-error band over time with the tube
            bound, log-scale y (reads simulate-*.csv + its summary)
  postube   position tube sizes per system, error bars = 1 std over the
            contraction-rate grid (reads postube.csv: system,lambda,alpha)
  ctube     the same for control-input tubes (reads ctube.csv)
  cert      violation fractions per inequality and phase (reads cert.csv:
            system,phase,inequality,fraction)
  abalpha   gain convergence envelope over different initializations
            (reads abalpha.csv: run,step,alpha)
  scenario  planned corridor with tube shading and obstacles (reads
            scenario.txt, plan-*.csv, plan-*.manifest.txt)

Rendering is a pure function of the CSV bytes: fixed styles, a fixed
SVG hash salt, and no timestamps, so repeated runs are byte-identical.
All statistics here are means/stds/quantiles of raw per-run rows; every
scientific number originates upstream.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({
    "svg.hashsalt": "rccm-figures",
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 10,
})

FIGURES = ("tracking", "postube", "ctube", "cert", "abalpha", "scenario")


class SchemaError(ValueError):
    """A CSV is present but its header lacks a required column."""


def _read_rows(path: Path, required: tuple) -> list:
    if not path.exists():
        raise FileNotFoundError(f"required CSV missing: {path}")
    with open(path) as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"{path.name}: missing column '{missing[0]}'")
        rows = list(reader)
    if not rows:
        raise SchemaError(f"{path.name}: no data rows")
    return rows


def _glob_one(report_dir: Path, pattern: str) -> Path:
    matches = sorted(report_dir.glob(pattern))
    if not matches:
        raise FileNotFoundError(f"required CSV missing: {report_dir / pattern}")
    return matches[0]


def _save(fig, out: Path) -> Path:
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out


def fig_tracking(report_dir: Path, out: Path) -> Path:
    runs_path = _glob_one(report_dir, "simulate-*[0-9].csv")
    summary_path = _glob_one(report_dir, "simulate-*-summary.csv")
    rows = _read_rows(runs_path, ("run", "t", "err_norm"))
    summary = _read_rows(summary_path, ("alpha", "sigma"))[0]

    by_run = {}
    for row in rows:
        by_run.setdefault(int(row["run"]), []).append(
            (float(row["t"]), float(row["err_norm"])))
    if not by_run:
        raise SchemaError(f"{runs_path.name}: empty run set")
    t = np.array([p[0] for p in by_run[min(by_run)]])
    errs = np.array([[p[1] for p in by_run[r]] for r in sorted(by_run)])
    mean = errs.mean(axis=0)
    std = errs.std(axis=0)
    bound = float(summary["alpha"]) * float(summary["sigma"])

    fig, ax = plt.subplots()
    floor = 1e-6
    ax.fill_between(t, np.maximum(mean - std, floor), mean + std,
                    alpha=0.3, color="tab:blue", label="mean +/- 1 std")
    ax.plot(t, np.maximum(mean, floor), color="tab:blue", lw=1.5, label="mean error")
    ax.axhline(bound, color="tab:red", ls="--", lw=1.2,
               label=f"tube bound {bound:.3g}")
    ax.set_yscale("log")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("tracking error")
    ax.set_title(f"Tracking error over {len(by_run)} disturbed runs")
    ax.legend(loc="lower right")
    return _save(fig, out)


def _tube_bars(csv_name: str, title: str, report_dir: Path, out: Path) -> Path:
    rows = _read_rows(report_dir / csv_name, ("system", "lambda", "alpha"))
    by_system = {}
    for row in rows:
        by_system.setdefault(row["system"], []).append(float(row["alpha"]))
    names = sorted(by_system)
    means = [float(np.mean(by_system[s])) for s in names]
    stds = [float(np.std(by_system[s])) for s in names]

    fig, ax = plt.subplots()
    xs = np.arange(len(names))
    ax.bar(xs, means, yerr=stds, capsize=4, color="tab:blue", alpha=0.85)
    ax.set_xticks(xs, names)
    ax.set_ylabel("tube size (gain)")
    ax.set_title(title)
    return _save(fig, out)


def fig_postube(report_dir: Path, out: Path) -> Path:
    return _tube_bars("postube.csv",
                      "Position tube size (error bars: 1 std over rate grid)",
                      report_dir, out)


def fig_ctube(report_dir: Path, out: Path) -> Path:
    return _tube_bars("ctube.csv",
                      "Control-input tube size (error bars: 1 std over rate grid)",
                      report_dir, out)


def fig_cert(report_dir: Path, out: Path) -> Path:
    rows = _read_rows(report_dir / "cert.csv",
                      ("system", "phase", "inequality", "fraction"))
    systems = sorted({row["system"] for row in rows})
    phases = sorted({row["phase"] for row in rows})
    ineqs = sorted({row["inequality"] for row in rows})
    lookup = {(r["system"], r["phase"], r["inequality"]): float(r["fraction"])
              for r in rows}

    fig, axes = plt.subplots(1, len(systems), squeeze=False,
                             figsize=(3.2 * len(systems), 3.6))
    width = 0.8 / len(phases)
    for col, system in enumerate(systems):
        ax = axes[0][col]
        xs = np.arange(len(ineqs))
        for k, phase in enumerate(phases):
            vals = [lookup.get((system, phase, iq), 0.0) for iq in ineqs]
            ax.bar(xs + k * width, vals, width=width, label=phase)
        ax.set_xticks(xs + width * (len(phases) - 1) / 2, ineqs)
        ax.set_title(system)
        ax.set_ylabel("violation fraction" if col == 0 else "")
    axes[0][0].legend()
    fig.suptitle("Matrix-inequality violation fractions")
    fig.tight_layout()
    return _save(fig, out)


def fig_abalpha(report_dir: Path, out: Path) -> Path:
    rows = _read_rows(report_dir / "abalpha.csv", ("run", "step", "alpha"))
    by_run = {}
    for row in rows:
        by_run.setdefault(int(row["run"]), []).append(
            (int(row["step"]), float(row["alpha"])))
    steps = sorted({s for pts in by_run.values() for s, _ in pts})
    traces = np.array([[a for _, a in sorted(by_run[r])] for r in sorted(by_run)])
    mean = traces.mean(axis=0)
    std = traces.std(axis=0)

    fig, ax = plt.subplots()
    ax.fill_between(steps, mean - std, mean + std, alpha=0.3, color="tab:green",
                    label="mean +/- 1 std")
    for r, row in zip(sorted(by_run), traces):
        ax.plot(steps, row, lw=0.6, alpha=0.5)
    ax.plot(steps, mean, color="tab:green", lw=1.8, label="mean")
    ax.set_xlabel("refinement step")
    ax.set_ylabel("gain")
    ax.set_title(f"Gain convergence from {len(by_run)} initializations")
    ax.legend()
    return _save(fig, out)


def fig_scenario(report_dir: Path, out: Path) -> Path:
    scen_path = report_dir / "scenario.txt"
    if not scen_path.exists():
        raise FileNotFoundError(f"required file missing: {scen_path}")
    plan_path = _glob_one(report_dir, "plan-*[0-9].csv")
    manifest = _glob_one(report_dir, "plan-*.manifest.txt")

    start = goal = None
    obstacles = []
    bounds = None
    for raw in scen_path.read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, val = line.partition("=")
        nums = [float(v) for v in val.split()]
        key = key.strip()
        if key == "start":
            start = nums
        elif key == "goal":
            goal = nums
        elif key == "obstacle":
            obstacles.append(nums)
        elif key == "bounds":
            bounds = nums
    tube = 0.0
    for raw in manifest.read_text().splitlines():
        if raw.strip().startswith("tube_radius_pos"):
            tube = float(raw.split("=", 1)[1])
    rows = _read_rows(plan_path, ("t", "xstar0", "xstar1"))
    px = np.array([float(r["xstar0"]) for r in rows])
    pz = np.array([float(r["xstar1"]) for r in rows])

    fig, ax = plt.subplots(figsize=(7.0, 3.6))
    if tube > 0:
        step = max(len(px) // 200, 1)
        for x, z in zip(px[::step], pz[::step]):
            ax.add_patch(plt.Circle((x, z), tube, color="tab:blue", alpha=0.05,
                                    lw=0))
    ax.plot(px, pz, "k--", lw=1.4, label="planned nominal")
    for cx, cz, r in obstacles:
        ax.add_patch(plt.Circle((cx, cz), r, color="tab:gray", alpha=0.9))
    ax.plot(*start, "g^", ms=9, label="start")
    ax.plot(*goal, "r*", ms=12, label="goal")
    if bounds:
        ax.set_xlim(bounds[0], bounds[2])
        ax.set_ylim(bounds[1], bounds[3])
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("z [m]")
    ax.set_title("Tube-aware plan (shading: position tube)")
    ax.legend(loc="upper left", fontsize=8)
    return _save(fig, out)


RENDERERS = {
    "tracking": fig_tracking,
    "postube": fig_postube,
    "ctube": fig_ctube,
    "cert": fig_cert,
    "abalpha": fig_abalpha,
    "scenario": fig_scenario,
}


def render(report_dir, figure_name: str, out_path=None) -> Path:
    """Render one figure type from the CSVs in ``report_dir``."""
    report_dir = Path(report_dir)
    if figure_name not in RENDERERS:
        raise ValueError(f"unknown figure '{figure_name}'; choose from {FIGURES}")
    out = Path(out_path) if out_path else report_dir / f"fig-{figure_name}.svg"
    return RENDERERS[figure_name](report_dir, out)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--dir", required=True, help="directory of rccm CSV outputs")
    parser.add_argument("--fig", required=True, choices=FIGURES + ("all",))
    parser.add_argument("--out", help="output file (single figure only)")
    args = parser.parse_args(argv)
    names = FIGURES if args.fig == "all" else (args.fig,)
    try:
        for name in names:
            path = render(args.dir, name, args.out if args.fig != "all" else None)
            print(path)
    except (FileNotFoundError, SchemaError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
