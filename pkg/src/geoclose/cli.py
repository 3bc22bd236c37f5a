"""Command line: ``geoclose {integrate,connect,close,verify,sweep}``.

Exit status is 0 when every declared check passes, 1 when a check fails or a
stage errors (the report is still written) and 2 for configuration errors.
Verbosity comes from the ``GEOCLOSE_LOG`` environment variable.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from .closer import _json_default, close_orbit
from .config import (build_metric, build_obstacles, closing_config, connect_endpoints, load_config,
                     seed_point)
from .connector import connect
from .errors import ConfigError, GeocloseError
from .flow import integrate
from .metric import PhasePoint, TangentPoint, unit_normalize

log = logging.getLogger("geoclose")

ENERGY_TOL = 1e-9
MATCH_RTOL = 1e-6


def _plain(obj):
    return json.loads(json.dumps(obj, default=_json_default))


# --------------------------------------------------------------- commands

def run_integrate(cfg, seed, out_dir, emit):
    metric = build_metric(cfg)
    fl = cfg["flow"]
    if fl["start"] is not None:
        tp = unit_normalize(metric, TangentPoint(np.array(fl["start"]["x"], float), np.array(fl["start"]["v"], float)))
    else:
        rng = np.random.default_rng(seed)
        tp = unit_normalize(metric, TangentPoint(rng.random(metric.dim), rng.normal(size=metric.dim)))
    arc = integrate(metric, None, PhasePoint(tp.x, metric.G(tp.x) @ tp.v), fl["duration"], fl["tol"])
    drift = arc.energy_drift
    final = arc.final()
    report = {"start": {"x": tp.x, "v": tp.v}, "final": {"x": final.x, "p": final.p},
              "energy_drift": drift, "steps": int(arc.times.size), "verified": drift < ENERGY_TOL}
    if emit:
        arc.to_csv(out_dir / "trajectory.csv", fl["samples"])
    return report


def run_connect(cfg, seed, out_dir, emit):
    metric = build_metric(cfg)
    c = cfg["connect"]
    start, target = connect_endpoints(metric, c)
    obstacles = build_obstacles(metric, cfg, target, c["tau"], c["rho"])
    res = connect(metric, start, target, c["tau"], c["rho"], mu=c["mu"], obstacles=obstacles,
                  endpoint_tol=c["endpoint_tol"], seed=seed, angle_floor=c["angle_floor"])
    report = dict(res.report)
    report["verified"] = bool(res.verified)
    report["obstacles"] = 0 if obstacles is None else len(obstacles)
    if emit and res.data is not None:
        res.data.to_csv(out_dir / "connecting_curve.csv")
    return report


def run_close(cfg, seed, out_dir, emit):
    metric = build_metric(cfg)
    tp = seed_point(metric, cfg, seed)
    pm, point, period, rep = close_orbit(metric, tp, closing_config(cfg))
    report = rep.to_dict()
    report["seed_point"] = {"x": tp.x, "v": tp.v}
    report["periodic_point"] = {"x": point.x, "v": point.v}
    report["perturbed_metric"] = pm.describe()
    report["verified"] = bool(rep.closed)
    if emit:
        pp = PhasePoint(point.x, metric.G(point.x) @ point.v)
        arc = integrate(metric, pm.factor, pp, period, closing_config(cfg).flow_tol)
        arc.to_csv(out_dir / "closed_orbit.csv", 20001)
    return report


def run_sweep(cfg, seed, out_dir, emit):
    metric = build_metric(cfg)
    c = cfg["connect"]
    rows = []
    for s in cfg["sweep"]["separations"]:
        start, target = connect_endpoints(metric, c, separation=s)
        res = connect(metric, start, target, c["tau"], c["rho"], mu=c["mu"], endpoint_tol=c["endpoint_tol"],
                      seed=seed)
        sep = res.report["separation"]
        rows.append({"separation": sep, "f_c1_norm": res.report["f_c1_norm"],
                     "tau_shift": abs(res.tau_tilde - c["tau"]), "c1_ratio": res.report["f_c1_norm"] / sep,
                     "tau_ratio": abs(res.tau_tilde - c["tau"]) / sep,
                     "endpoint_residual": res.report["endpoint_residual"], "verified": bool(res.verified)})
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    spread = lambda key: max(r[key] for r in rows) / min(r[key] for r in rows) if min(r[key] for r in rows) > 0 else math.inf
    order = sorted(rows, key=lambda r: r["separation"])
    monotone = all(a["f_c1_norm"] <= b["f_c1_norm"] for a, b in zip(order[:-1], order[1:]))
    limit = cfg["sweep"]["ratio_spread"]
    report = {"rows": rows, "c1_ratio_spread": spread("c1_ratio"), "tau_ratio_spread": spread("tau_ratio"),
              "monotone_f_c1_norm": monotone}
    report["verified"] = bool(all(r["verified"] for r in rows) and monotone
                              and report["c1_ratio_spread"] < limit and report["tau_ratio_spread"] < limit)
    return report


COMMANDS = {"integrate": run_integrate, "connect": run_connect, "close": run_close, "sweep": run_sweep}


def execute(command, cfg, seed, out_dir: Path, emit=False) -> dict:
    """Run one command and return its report (``verified`` says whether checks passed)."""
    t0 = time.perf_counter()
    try:
        body = COMMANDS[command](cfg, seed, out_dir, emit)
    except ConfigError:
        raise
    except GeocloseError as exc:
        log.error("%s failed: %s", command, exc)
        body = {"verified": False, "error": f"{type(exc).__name__}: {exc}"}
    report = {"command": command, "seed": seed, "config": cfg, **_plain(body)}
    report.setdefault("timing", {})
    report["timing"] = {**report["timing"], "total_seconds": time.perf_counter() - t0}
    return report


def deterministic_view(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "timing"}


def _close_enough(a, b, path=""):
    """List of paths where two report trees differ beyond ``MATCH_RTOL``."""
    if isinstance(a, dict) and isinstance(b, dict):
        out = []
        for k in set(a) | set(b):
            if k not in a or k not in b:
                out.append(f"{path}/{k}")
            else:
                out += _close_enough(a[k], b[k], f"{path}/{k}")
        return out
    if isinstance(a, list) and isinstance(b, list):
        if len(a) != len(b):
            return [path]
        return [p for x, y in zip(a, b) for p in _close_enough(x, y, path)]
    if isinstance(a, (int, float)) and isinstance(b, (int, float)) and not isinstance(a, bool):
        if math.isinf(a) or math.isinf(b) or math.isnan(a) or math.isnan(b):
            return [] if str(a) == str(b) else [path]
        return [] if abs(a - b) <= MATCH_RTOL * max(abs(a), abs(b)) + 1e-15 else [path]
    return [] if a == b else [path]


def run_verify(report_path: Path, out_dir: Path) -> tuple[dict, int]:
    saved = json.loads(Path(report_path).read_text())
    command = saved.get("command")
    if command not in COMMANDS:
        raise ConfigError(f"{report_path}: report has no re-runnable command")
    fresh = execute(command, saved["config"], saved["seed"], out_dir)
    diffs = _close_enough(deterministic_view(_plain(saved)), deterministic_view(_plain(fresh)))
    ok = bool(fresh.get("verified")) and not diffs
    return {"command": "verify", "report": str(report_path), "verified": ok, "mismatches": sorted(diffs),
            "rerun_verified": bool(fresh.get("verified"))}, 0 if ok else 1


# ------------------------------------------------------------------- main

def build_parser():
    parser = argparse.ArgumentParser(prog="geoclose", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("integrate", "integrate a geodesic and report energy drift"),
                       ("connect", "build the connecting conformal factor between two unit vectors"),
                       ("close", "close a near-recurrent geodesic on a periodic metric"),
                       ("sweep", "separation-scaling study of the connecting factor"),
                       ("verify", "re-run a saved report from its inputs and compare")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=0, help="random seed")
        p.add_argument("--out-dir", type=Path, default=Path("geoclose-out"))
        p.add_argument("--emit-trajectories", action="store_true", help="write trajectory CSV files")
        if name == "verify":
            p.add_argument("--report", type=Path, default=None, help="saved report (default OUT_DIR/report.json)")
    return parser


def _setup_logging():
    level = os.environ.get("GEOCLOSE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    out_dir: Path = args.out_dir
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "verify":
            report_path = args.report or out_dir / "report.json"
            result, code = run_verify(report_path, out_dir)
            (out_dir / "verify.json").write_text(json.dumps(result, indent=2, sort_keys=True))
            print(json.dumps(result, indent=2, sort_keys=True))
            return code
        cfg = load_config(args.config)
        report = execute(args.command, cfg, args.seed, out_dir, args.emit_trajectories)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    text = json.dumps(report, indent=2, sort_keys=True, default=_json_default)
    (out_dir / "report.json").write_text(text)
    summary = {k: report[k] for k in ("command", "verified", "f_c1_norm", "period", "gap", "error")
               if k in report}
    print(json.dumps(summary, default=_json_default))
    return 0 if report.get("verified") else 1


if __name__ == "__main__":
    sys.exit(main())
