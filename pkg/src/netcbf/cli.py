"""Command-line front end: ``netcbf run``, ``netcbf batch``, ``netcbf bounds`` and ``netcbf calibrate``."""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__, bounds, config
from . import montecarlo as mc
from .loop import Architecture, RunRecord

SUMMARY_HEADER = ["architecture", "safe_rate", "reach_rate", "success_rate", "avg_reach_time_s",
                  "peak_jerk_mean", "peak_jerk_max", "n_runs", "seed"]
ENVELOPE_HEADER = ["architecture", "step", "t_s", "obstacle", "mean", "min", "max"]


def trace_header(n_obs: int) -> list[str]:
    return (["step", "t_s", "h_min"] + [f"dist_obs{i + 1}" for i in range(n_obs)]
            + ["ee_x", "ee_y", "u1", "u2", "u3", "intervened"])


def fmt(v) -> str:
    """Six significant digits; integers and booleans stay integral, strings pass through."""
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    return f"{v:.6g}"


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def trace_rows(rec: RunRecord, scenario) -> list[list]:
    n = min(rec.n_steps, len(rec.states))
    X = rec.states[:n]
    d = scenario.obstacle_distances(X)
    ee = scenario.arm.end_effector(X[:, :3])
    rows = []
    for k in range(n):
        rows.append([k, k * rec.T_s, rec.h[k], *d[k], *ee[k], *rec.u_applied[k], rec.intervened[k]])
    return rows


def write_trace(path: Path, rec: RunRecord, scenario) -> None:
    _write_csv(path, trace_header(len(scenario.obstacles)), trace_rows(rec, scenario))


def summary_rows(report: mc.BatchReport) -> list[list]:
    return [[getattr(s, k) for k in SUMMARY_HEADER] for s in report.summaries]


def write_summary(path: Path, report: mc.BatchReport) -> None:
    _write_csv(path, SUMMARY_HEADER, summary_rows(report))


def write_envelope(path: Path, report: mc.BatchReport, T_s: float) -> None:
    rows = []
    for arch, env in report.clearance.items():
        for k in range(env.shape[0]):
            for j in range(env.shape[1]):
                rows.append([arch, k, k * T_s, j + 1, *env[k, j]])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ENVELOPE_HEADER)
        for row in rows:
            w.writerow([row[0]] + [fmt(v) for v in row[1:]])


def _clean(v):
    # JSON has no NaN; emit null instead
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _clean(e) for k, e in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(e) for e in v]
    if isinstance(v, np.generic):
        return _clean(v.item())
    return v


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def run_summary(rec: RunRecord) -> dict:
    return {
        "architecture": rec.architecture,
        "steps": rec.n_steps,
        "min_h": rec.min_h,
        "safety_violated": rec.safety_violated,
        "violation_step": rec.violation_step,
        "reached_all": rec.reached_all,
        "reach_steps": list(rec.reach_steps),
        "reach_time_s": rec.reach_time,
        "peak_jerk": rec.peak_jerk,
        "interventions": int(rec.intervened.sum()),
        "aborted": rec.aborted,
        "diagnostic": rec.diagnostic,
        "metadata": dict(rec.metadata),
    }


def _calibrated(cfg: config.ScenarioConfig, archs, margin_runs: int = 2):
    """Controller config with tolerances, calibrating only when the file does not pin them."""
    ex = cfg.experiment()
    ctrl = ex.controller
    info = {"pinned": cfg.pinned_calibration}
    needs = any(a == Architecture.COMBINED for a in archs)
    if cfg.pinned_calibration or not needs:
        info.update(w_bar_l=ctrl.w_bar_l, w_bar_r=ctrl.w_bar_r, delta_u=ctrl.delta_u)
        return ex, ctrl, info
    cal, ctrl = mc.calibrate(ex, ctrl, margin_runs=margin_runs)
    info.update(cal.as_dict())
    return ex, ctrl, info


def _load(args) -> config.ScenarioConfig:
    cfg = config.load(args.scenario)
    if getattr(args, "clip", None) is not None:
        cfg = cfg.with_disturbance(clip=args.clip)
    if getattr(args, "steps", None) is not None:
        cfg = replace(cfg, run=replace(cfg.run, sim_steps=args.steps))
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    arch = Architecture.parse(args.arch)
    ex, ctrl, cal = _calibrated(cfg, [arch])
    seed = cfg.disturbance.seed if args.seed is None else args.seed
    spec = cfg.disturbance_spec(seed)
    rec = mc.single_run(ex, arch, spec if spec.clip > 0 else None, ctrl)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trace(out / "trace.csv", rec, ex.scenario)
    summary = run_summary(rec)
    summary.update(seed=seed, clip=spec.clip, calibration=cal, version=__version__)
    _write_json(out / "summary.json", summary)
    state = "UNSAFE" if rec.safety_violated else "safe"
    print(f"{arch.label}: {rec.n_steps} steps, min h {fmt(rec.min_h)} ({state}), "
          f"reached {len(rec.reach_steps)}/{rec.n_targets}")
    if rec.aborted:
        print(f"run aborted: {rec.diagnostic}", file=sys.stderr)
        return 3
    return 0


def cmd_batch(args) -> int:
    cfg = _load(args)
    archs = cfg.architectures
    ex, ctrl, cal = _calibrated(cfg, archs)
    n_runs = args.runs or cfg.run.n_runs
    spec = cfg.disturbance_spec()
    report = mc.run_batch(ex, archs, spec, n_runs, ctrl, workers=args.workers)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_summary(out / "summary.csv", report)
    write_envelope(out / "envelope.csv", report, ex.scenario.arm.T_s)
    if not args.no_traces:
        tdir = out / "traces"
        tdir.mkdir(exist_ok=True)
        for arch, recs in report.records.items():
            for r, rec in enumerate(recs):
                write_trace(tdir / f"{arch}_run{r:03d}.csv", rec, ex.scenario)
    _write_json(out / "summary.json", {
        "summaries": [asdict(s) for s in report.summaries],
        "disturbance": asdict(spec),
        "run_seeds": [mc.run_seed(spec.seed, r) for r in range(n_runs)],
        "calibration": cal,
        "version": __version__,
    })
    for s in report.summaries:
        print(f"{s.architecture:18s} safe {s.safe_rate:.2f} reach {s.reach_rate:.2f} "
              f"time {fmt(s.avg_reach_time_s)} s jerk {fmt(s.peak_jerk_mean)}")
    return 3 if any(s.n_aborted for s in report.summaries) else 0


def cmd_bounds(args) -> int:
    try:
        t = bounds.ToleranceInputs(args.h, args.gamma, args.Lh, args.Lf, args.Lg, args.umax,
                                   args.tau, args.N)
        tab = bounds.tolerance_table(t)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"L_d          {fmt(tab['L_d'])}")
    print(f"w_bar_l      {fmt(tab['w_bar_l'])}")
    for l, w in enumerate(tab["w_bar_r"], start=1):
        print(f"w_bar_r(l={l})  {fmt(w)}")
    print(f"w_bar_r      {fmt(tab['w_bar_r_min'])}  (binding min over l)")
    for c in ("clause1", "clause2", "clause3"):
        print(f"{c}      {'PASS' if tab[c] else 'FAIL'}")
    return 0


def cmd_calibrate(args) -> int:
    cfg = _load(args)
    ex = cfg.experiment()
    cal, _ = mc.calibrate(ex, ex.controller, margin_runs=args.margin_runs)
    for k, v in cal.as_dict().items():
        print(f"{k:18s} {v if isinstance(v, list) else fmt(v)}")
    if args.write:
        cfg.with_calibration(cal.w_bar_l, cal.w_bar_r, cal.delta_u).save(args.write)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="netcbf", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="one closed-loop run; writes trace.csv and summary.json")
    r.add_argument("scenario")
    r.add_argument("--arch", default="combined", help="nominal_mpc, local_cbf, mpc_cbf, robust_local_cbf or combined")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--clip", type=float, default=None, help="override the disturbance clip (0 disables)")
    r.add_argument("--steps", type=int, default=None, help="override the simulation horizon")
    r.add_argument("--out", default="out")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("batch", help="paired batch; writes summary.csv, envelope.csv, traces/")
    b.add_argument("scenario")
    b.add_argument("--out-dir", default="out")
    b.add_argument("--runs", type=int, default=None)
    b.add_argument("--clip", type=float, default=None)
    b.add_argument("--steps", type=int, default=None)
    b.add_argument("--workers", type=int, default=None, help=f"default: ${mc.WORKERS_ENV} or CPU count")
    b.add_argument("--no-traces", action="store_true")
    b.set_defaults(func=cmd_batch)

    t = sub.add_parser("bounds", help="tolerance table and comparison clauses")
    t.add_argument("--h", type=float, required=True)
    t.add_argument("--gamma", type=float, required=True)
    t.add_argument("--Lh", type=float, required=True)
    t.add_argument("--Lf", type=float, required=True)
    t.add_argument("--Lg", type=float, required=True)
    t.add_argument("--umax", type=float, required=True)
    t.add_argument("--tau", type=int, default=0)
    t.add_argument("--N", type=int, default=1)
    t.set_defaults(func=cmd_bounds)

    c = sub.add_parser("calibrate", help="tolerances from disturbance-free runs")
    c.add_argument("scenario")
    c.add_argument("--margin-runs", type=int, default=2)
    c.add_argument("--steps", type=int, default=None)
    c.add_argument("--write", default=None, help="save a copy of the scenario with the values pinned")
    c.set_defaults(func=cmd_calibrate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except config.ConfigError as exc:
        print(f"{args.scenario}: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
