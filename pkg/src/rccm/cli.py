"""Command-line entry point: train / refine / verify / simulate / plan / report.

Every subcommand resolves its options from flags plus an optional flat
``key = value`` config file, writes a manifest with the fully resolved
options next to its outputs, and can be re-run bitwise-identically from
that manifest via ``--config``.  The seed can be overridden globally
with the ``RCCM_SEED`` environment variable (the resolved value lands
in the manifest, so reruns stay reproducible).

Exit codes: 0 success, 1 domain failure (uncertified tube, failed
verification, infeasible plan, diverged training), 2 usage error.

CSV column layouts are a stable public contract; the figure component
consumes them.  See the README for the exact headers.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .certnets import load_checkpoint, save_checkpoint
from .numerics import InvalidArgumentError, derive_seed
from .planner import count_collisions, plan, scenario_from_text
from .refinement import refine_gain
from .simulation import (
    DivergedError,
    gen_disturbance,
    rollout_batch,
    run_rollouts,
    total_tracking_error,
    tube_margin,
)
from .systems import make_system, output_selector
from .training import TrainConfig, TrainingDivergedError, train
from .verification import Region, grid_verify, violation_rate


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(text: str) -> dict:
    """Flat key = value lines; '#' starts a comment."""
    out = {}
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise InvalidArgumentError(f"config line {i}: expected 'key = value'")
        out[key.strip()] = val.strip()
    return out


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    return parse_config(Path(path).read_text())


def _resolve(args, config: dict, key: str, default, cast):
    flag = getattr(args, key.replace(".", "_"), None)
    if flag is not None:
        return flag
    if key in config:
        raw = config[key]
        if cast is bool:
            return raw.lower() in ("1", "true", "yes")
        return cast(raw)
    return default


def _seed_with_env(seed: int) -> int:
    env = os.environ.get("RCCM_SEED")
    return int(env) if env else seed


def _write_manifest(out_dir: Path, name: str, entries: dict):
    lines = [f"# rccm {__version__} manifest; rerun with --config this file"]
    lines += [f"{k} = {_fmt(v)}" for k, v in sorted(entries.items())]
    (out_dir / name).write_text("\n".join(lines) + "\n")


def _write_csv(path: Path, header: list, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _selector_from_args(sys_, name: str, sel_file: str | None):
    if name in ("positions", "inputs"):
        return output_selector(sys_, name)
    if name == "custom":
        if not sel_file:
            raise InvalidArgumentError("--selector custom requires --selector-file")
        cfg = parse_config(Path(sel_file).read_text())
        rows = lambda s: np.array([[float(v) for v in part.split()]
                                   for part in s.split(";")])
        return output_selector(sys_, "custom", C=rows(cfg["C"]), D=rows(cfg["D"]),
                               label=cfg.get("label", "custom"))
    raise InvalidArgumentError(f"unknown selector '{name}'")


# -- subcommands ----------------------------------------------------------

TRAIN_KEYS = [
    ("system", str), ("selector", str), ("lambda", float), ("w_floor", float),
    ("n_train", int), ("epochs", int), ("batch_size", int), ("learning_rate", float),
    ("seed", int), ("xi_train", int), ("alpha_init", float), ("mu_init", float),
    ("hidden", int), ("c", int), ("w_sampling", str), ("ccm_lie_sign", str),
    ("quad_drift_convention", str),
]


def cmd_train(args) -> int:
    config = _load_config(args.config)
    defaults = TrainConfig()
    resolved = {}
    for key, cast in TRAIN_KEYS:
        field = "lam" if key == "lambda" else key
        resolved[key] = _resolve(args, config, key, getattr(defaults, field), cast)
    resolved["seed"] = _seed_with_env(resolved["seed"])
    cfg = TrainConfig(**{("lam" if k == "lambda" else k): v for k, v in resolved.items()})

    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    code = 0
    try:
        ckpt = train(cfg, on_step=lambda step, epoch, b: rows.append(
            [step, b["risk_c1"], b["risk_c2"], b["risk_c3"], b["risk_c4"],
             b["alpha"], b["total"]]))
    except TrainingDivergedError as err:
        print(f"training diverged at step {err.step}; saving last good state",
              file=sys.stderr)
        ckpt = err.checkpoint
        code = 1
    stem = f"train-{cfg.system}-{cfg.seed}"
    save_checkpoint(ckpt, str(out_dir / f"{stem}.ckpt"))
    _write_csv(out_dir / "history.csv",
               ["step", "risk_c1", "risk_c2", "risk_c3", "risk_c4", "alpha", "total"],
               rows)
    _write_manifest(out_dir, f"{stem}.manifest.txt", resolved)
    print(f"checkpoint: {out_dir / (stem + '.ckpt')}  alpha={ckpt.gains.alpha:.6g}")
    return code


def cmd_refine(args) -> int:
    config = _load_config(args.config)
    seed = _seed_with_env(_resolve(args, config, "seed", 0, int))
    n_samples = _resolve(args, config, "samples", 20_000, int)
    steps = _resolve(args, config, "steps", 2000, int)
    sel_name = _resolve(args, config, "selector", "positions", str)
    ckpt_path = args.ckpt or config.get("ckpt")
    ckpt = load_checkpoint(ckpt_path)
    sys_ = make_system(ckpt.system)
    sel = _selector_from_args(sys_, sel_name, args.selector_file)

    result = refine_gain(ckpt, sys_, sel, n_samples=n_samples, seed=seed, steps=steps)
    save_checkpoint(result.checkpoint, ckpt_path)  # the one sanctioned mutation

    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"refine-{ckpt.system}-{seed}"
    _write_csv(out_dir / f"{stem}.csv",
               ["selector", "alpha", "mu", "residual", "certified", "final_alpha"],
               [[sel.label, result.alpha, result.mu, result.residual,
                 int(result.certified), result.final_alpha]])
    _write_csv(out_dir / f"{stem}-trace.csv", ["step", "alpha"],
               [[i, a] for i, a in enumerate(result.alpha_trace)])
    _write_manifest(out_dir, f"{stem}.manifest.txt",
                    {"ckpt": ckpt_path, "selector": sel_name, "seed": seed,
                     "samples": n_samples, "steps": steps})
    status = "certified" if result.certified else "UNCERTIFIED"
    print(f"{sel.label}: alpha={result.alpha:.6g} mu={result.mu:.6g} "
          f"residual={result.residual:.3g} [{status}]")
    return 0 if result.certified else 1


def _region_from_file(sys_, path: str) -> Region:
    cfg = parse_config(Path(path).read_text())
    arrays = {}
    for key in ("x_lower", "x_upper", "xstar_lower", "xstar_upper",
                "ustar_lower", "ustar_upper", "w_lower", "w_upper"):
        if key not in cfg:
            raise InvalidArgumentError(f"region file missing '{key}'")
        arrays[key] = np.array([float(v) for v in cfg[key].split()])
    lower = np.concatenate([arrays["x_lower"], arrays["xstar_lower"],
                            arrays["ustar_lower"], arrays["w_lower"]])
    upper = np.concatenate([arrays["x_upper"], arrays["xstar_upper"],
                            arrays["ustar_upper"], arrays["w_upper"]])
    return Region(lower=lower, upper=upper)


def cmd_verify(args) -> int:
    config = _load_config(args.config)
    seed = _seed_with_env(_resolve(args, config, "seed", 0, int))
    mode = _resolve(args, config, "mode", "stat", str)
    samples = _resolve(args, config, "samples", 10_000, int)
    max_violation = _resolve(args, config, "max_violation", 0.05, float)
    sel_name = _resolve(args, config, "selector", "positions", str)
    ckpt_path = args.ckpt or config.get("ckpt")
    ckpt = load_checkpoint(ckpt_path)
    sys_ = make_system(ckpt.system)
    sel = _selector_from_args(sys_, sel_name, args.selector_file)
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"verify-{ckpt.system}-{seed}"

    if mode == "stat":
        rates = violation_rate(ckpt, sys_, sel, n_samples=samples, seed=seed)
        _write_csv(out_dir / f"{stem}.csv", ["inequality", "fraction"],
                   [[k, v] for k, v in sorted(rates.items())])
        _write_manifest(out_dir, f"{stem}.manifest.txt",
                        {"ckpt": ckpt_path, "mode": mode, "samples": samples,
                         "seed": seed, "selector": sel_name,
                         "max_violation": max_violation})
        for k, v in sorted(rates.items()):
            print(f"{k}: {v:.4f}")
        ok = rates["C1"] <= max_violation and rates["C2"] <= max_violation
        return 0 if ok else 1

    if mode == "grid":
        if not args.region or args.tau is None:
            print("grid mode requires --region FILE and --tau R", file=sys.stderr)
            return 2
        region = _region_from_file(sys_, args.region)
        report = grid_verify(ckpt, sys_, sel, region, tau=args.tau, seed=seed)
        (out_dir / f"{stem}.report.txt").write_text(report.to_text())
        _write_csv(out_dir / f"{stem}-worst.csv",
                   ["inequality", "value"] + [f"s{i}" for i in
                                              range(region.lower.size)],
                   [[k, report.worst[k][0], *report.worst[k][1]]
                    for k in sorted(report.worst)])
        _write_manifest(out_dir, f"{stem}.manifest.txt",
                        {"ckpt": ckpt_path, "mode": mode, "region": args.region,
                         "tau": args.tau, "seed": seed, "selector": sel_name})
        for ineq in sorted(report.passed):
            print(f"{ineq}: max={report.grid_max[ineq]:.6g} "
                  f"pass={report.passed[ineq]} (rigorous={report.rigorous})")
        return 0 if all(report.passed.values()) else 1

    print(f"unknown verify mode '{mode}'", file=sys.stderr)
    return 2


def cmd_simulate(args) -> int:
    config = _load_config(args.config)
    seed = _seed_with_env(_resolve(args, config, "seed", 0, int))
    sigma = _resolve(args, config, "sigma", 1.0, float)
    runs = _resolve(args, config, "runs", 100, int)
    horizon = _resolve(args, config, "T", 10.0, float)
    sel_name = _resolve(args, config, "selector", "positions", str)
    initial_error = bool(_resolve(args, config, "initial_error", False, bool))
    ckpt_path = args.ckpt or config.get("ckpt")
    ckpt = load_checkpoint(ckpt_path)
    sys_ = make_system(ckpt.system)
    sel = _selector_from_args(sys_, sel_name, args.selector_file)
    alpha = ckpt.tubes[sel.label].alpha if sel.label in ckpt.tubes else ckpt.gains.alpha

    try:
        trajs = run_rollouts(sys_, ckpt, n_runs=runs, sigma=sigma, seed=seed,
                             sel=sel, T=horizon, initial_error=initial_error)
    except DivergedError as err:
        print(f"simulation diverged: {err}", file=sys.stderr)
        return 1

    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"simulate-{ckpt.system}-{seed}"
    header = (["run", "t"]
              + [f"xstar{i}" for i in range(sys_.n)] + [f"x{i}" for i in range(sys_.n)]
              + [f"ustar{j}" for j in range(sys_.m)] + [f"u{j}" for j in range(sys_.m)]
              + [f"w{k}" for k in range(sys_.l)] + ["err_norm", "margin"])
    rows = []
    totals, worsts = [], []
    for r, tr in enumerate(trajs):
        tm = tube_margin(tr, sel, alpha, sigma)
        err = np.linalg.norm(tr.x - tr.x_star, axis=1)
        totals.append(total_tracking_error(tr, coords=sys_.position_coords))
        worsts.append(tm.worst)
        for k in range(tr.t.size):
            rows.append([r, tr.t[k], *tr.x_star[k], *tr.x[k], *tr.u_star[k],
                         *tr.u[k], *tr.w[k], err[k], tm.margins[k]])
    _write_csv(out_dir / f"{stem}.csv", header, rows)
    summary = [[runs, float(np.mean(totals)), float(np.std(totals)),
                float(np.min(worsts)),
                float(np.mean(np.array(worsts) >= 0.0)),
                alpha, sigma, sel.label]]
    _write_csv(out_dir / f"{stem}-summary.csv",
               ["runs", "mean_total_err", "std_total_err", "worst_margin",
                "frac_margin_ok", "alpha", "sigma", "selector"], summary)
    _write_manifest(out_dir, f"{stem}.manifest.txt",
                    {"ckpt": ckpt_path, "sigma": sigma, "runs": runs, "seed": seed,
                     "T": horizon, "selector": sel_name,
                     "initial_error": initial_error})
    print(f"total tracking error: {np.mean(totals):.4f} +/- {np.std(totals):.4f}  "
          f"worst margin: {np.min(worsts):.4f}")
    return 0


def cmd_plan(args) -> int:
    config = _load_config(args.config)
    seed = _seed_with_env(_resolve(args, config, "seed", 0, int))
    sigma = _resolve(args, config, "sigma", 1.0, float)
    replays = _resolve(args, config, "replays", 20, int)
    ckpt_path = args.ckpt or config.get("ckpt")
    scenario_path = args.scenario or config.get("scenario")
    ckpt = load_checkpoint(ckpt_path)
    sys_ = make_system(ckpt.system)
    scenario = scenario_from_text(Path(scenario_path).read_text())

    result = plan(scenario, sys_, ckpt, sigma=sigma)
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"plan-{ckpt.system}-{seed}"
    _write_manifest(out_dir, f"{stem}.manifest.txt",
                    {"ckpt": ckpt_path, "scenario": scenario_path, "sigma": sigma,
                     "replays": replays, "seed": seed})
    if not result.feasible:
        print(f"infeasible({result.reason})")
        return 1

    nom = result.nominal
    _write_csv(out_dir / f"{stem}.csv",
               ["t"] + [f"xstar{i}" for i in range(sys_.n)]
               + [f"ustar{j}" for j in range(sys_.m)],
               [[nom.t[k], *nom.x_star[k], *nom.u_star[k]]
                for k in range(nom.t.size)])

    sel = output_selector(sys_, "positions")
    alpha_p = ckpt.tubes["positions"].alpha if "positions" in ckpt.tubes \
        else ckpt.gains.alpha
    rows = []
    if replays > 0:
        dists = [gen_disturbance(sys_, nom.t[-1], sigma, derive_seed(seed, "replay", r))
                 for r in range(replays)]
        x0s = np.tile(nom.x_star[0], (replays, 1))
        trajs = rollout_batch(sys_, ckpt, [nom] * replays, dists, x0s, sel)
        for r, tr in enumerate(trajs):
            tm = tube_margin(tr, sel, alpha_p, sigma)
            rows.append([r, count_collisions(tr, scenario), tm.worst,
                         total_tracking_error(tr, coords=sys_.position_coords)])
    _write_csv(out_dir / f"{stem}-replay.csv",
               ["run", "collisions", "worst_margin", "total_err"], rows)
    collisions = sum(r[1] for r in rows)
    print(f"feasible plan: {nom.t[-1]:.2f} s, slowdown x{result.slowdown}, "
          f"{replays} replays, {collisions} collisions")
    return 0


def cmd_report(args) -> int:
    out_dir = Path(args.dir)
    if not out_dir.is_dir():
        print(f"no such directory: {out_dir}", file=sys.stderr)
        return 2
    lines = []

    summaries = sorted(out_dir.glob("simulate-*-summary.csv"))
    if summaries:
        lines.append("Total position tracking error (mean +/- std over runs)")
        for path in summaries:
            with open(path) as fh:
                row = list(csv.DictReader(fh))[0]
            system = path.name.split("-")[1]
            lines.append(f"  {system:>14}: {float(row['mean_total_err']):.4f} "
                         f"+/- {float(row['std_total_err']):.4f} "
                         f"(worst margin {float(row['worst_margin']):.4f})")
    refines = sorted(out_dir.glob("refine-*[0-9].csv"))
    if refines:
        lines.append("Refined tube gains")
        for path in refines:
            with open(path) as fh:
                for row in csv.DictReader(fh):
                    system = path.name.split("-")[1]
                    tag = "" if int(row["certified"]) else "  [UNCERTIFIED]"
                    lines.append(f"  {system:>14} {row['selector']:>10}: "
                                 f"alpha = {float(row['alpha']):.4f}{tag}")
    verifies = sorted(out_dir.glob("verify-*[0-9].csv"))
    if verifies:
        lines.append("Certificate violation fractions")
        for path in verifies:
            with open(path) as fh:
                parts = [f"{row['inequality']} {float(row['fraction']):.4f}"
                         for row in csv.DictReader(fh)]
            system = path.name.split("-")[1]
            lines.append(f"  {system:>14}: " + "  ".join(parts))
    if not lines:
        lines.append("no recognized CSV outputs found")
    text = "\n".join(lines) + "\n"
    (out_dir / "report.txt").write_text(text)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rccm",
        description="Robust contraction metrics with tube-certified controllers",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, ckpt=True):
        p.add_argument("--config", help="flat key = value config file / manifest")
        p.add_argument("--out", help="output directory (default: cwd)")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int, default=None,
                       help="worker hint; execution vectorizes internally and "
                            "results never depend on it")
        if ckpt:
            p.add_argument("--ckpt", help="checkpoint file")
            p.add_argument("--selector", help="positions | inputs | custom")
            p.add_argument("--selector-file", help="custom selector definition")

    p_train = sub.add_parser("train", help="joint metric/controller training")
    common(p_train, ckpt=False)
    p_train.add_argument("--system")
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--n-train", dest="n_train", type=int)
    p_train.add_argument("--selector")
    p_train.set_defaults(fn=cmd_train)

    p_refine = sub.add_parser("refine", help="tube refinement for a selector")
    common(p_refine)
    p_refine.add_argument("--samples", type=int)
    p_refine.add_argument("--steps", type=int)
    p_refine.set_defaults(fn=cmd_refine)

    p_verify = sub.add_parser("verify", help="statistical or grid certification")
    common(p_verify)
    p_verify.add_argument("--mode", choices=("stat", "grid"))
    p_verify.add_argument("--samples", type=int)
    p_verify.add_argument("--max-violation", dest="max_violation", type=float)
    p_verify.add_argument("--region", help="region file for grid mode")
    p_verify.add_argument("--tau", type=float, help="grid pitch for grid mode")
    p_verify.set_defaults(fn=cmd_verify)

    p_sim = sub.add_parser("simulate", help="disturbed tracking rollouts")
    common(p_sim)
    p_sim.add_argument("--sigma", type=float)
    p_sim.add_argument("--runs", type=int)
    p_sim.add_argument("--T", dest="T", type=float)
    p_sim.add_argument("--initial-error", dest="initial_error",
                       action="store_const", const=True)
    p_sim.set_defaults(fn=cmd_simulate)

    p_plan = sub.add_parser("plan", help="tube-aware motion planning")
    common(p_plan)
    p_plan.add_argument("--scenario", help="scenario file")
    p_plan.add_argument("--sigma", type=float)
    p_plan.add_argument("--replays", type=int)
    p_plan.set_defaults(fn=cmd_plan)

    p_report = sub.add_parser("report", help="aggregate output CSVs")
    p_report.add_argument("--dir", required=True)
    p_report.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    try:
        return args.fn(args)
    except (InvalidArgumentError, FileNotFoundError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
