"""``magslam`` command-line interface."""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
from pathlib import Path

import numpy as np

from .core_types import CsvFormatError, read_mag_csv
from .gpr import export_map_csv, parse_grid
from .harness import (
    ExperimentConfig,
    emit_plots,
    format_table,
    ingest_logs,
    load_config,
    read_truth_csv,
    run_study,
    summarize,
)
from .simulator import build_scenario, export_scenario
from .slam.report import evaluate, export_solution, load_map
from .slam.solver import SolverDivergedError, solve

EXIT_OK, EXIT_INPUT, EXIT_SOLVER = 0, 1, 2

log = logging.getLogger("magslam")


def _config(path) -> ExperimentConfig:
    return load_config(path) if path else ExperimentConfig()


def cmd_simulate(args) -> int:
    cfg = _config(args.config)
    paths = export_scenario(build_scenario(cfg.scenario), args.out)
    for name, p in paths.items():
        print(f"{name}: {p}")
    return EXIT_OK


def cmd_slam(args) -> int:
    cfg = _config(args.config)
    problem, stats = ingest_logs(args.imu, args.mag, cfg.ingest)
    print(f"aligned {stats.matched}/{stats.mag_records} magnetometer records ({stats.dropped} dropped)")
    sol = solve(problem, cfg.options)
    export_solution(sol, args.out)
    truth = read_truth_csv(args.truth) if args.truth else None
    emit_plots(sol, Path(args.out) / "plots", truth=truth, mag=problem.mag)
    print(f"iterations {sol.iterations} ({sol.reason}), final cost {sol.final_cost:.6g}")
    if truth is not None:
        before, after = evaluate(sol.initial_states, truth), evaluate(sol, truth)
        print(f"rmse before {before['rmse']:.4f} m, after {after['rmse']:.4f} m")
    return EXIT_OK


def cmd_study(args) -> int:
    cfg = _config(args.config)
    if args.workers:
        from dataclasses import replace
        cfg = replace(cfg, workers=args.workers)
    rows = run_study(cfg, args.out)
    print(format_table(summarize(rows)))
    return EXIT_OK


def cmd_predict_map(args) -> int:
    m = load_map(args.solution)
    export_map_csv(m, parse_grid(args.grid), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def _read_positions(path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    cols = [i for i, h in enumerate(header) if h in ("px", "py", "pz")]
    if len(cols) < 2:
        raise ValueError(f"{path}: no px,py columns in header {header}")
    return np.loadtxt(path, delimiter=",", skiprows=1, usecols=cols, ndmin=2)


def cmd_eval(args) -> int:
    res = evaluate(_read_positions(args.est), _read_positions(args.truth))
    print(f"rmse {res['rmse']!r}\nmax_error {res['max_error']!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="magslam", description="Magnetic-field GP-SLAM toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a scenario and export it")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("slam", help="solve from IMU and magnetometer logs")
    s.add_argument("--imu", required=True)
    s.add_argument("--mag", required=True)
    s.add_argument("--truth")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_slam)

    s = sub.add_parser("study", help="run a parameter study")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_study)

    s = sub.add_parser("predict-map", help="predict the field on a grid from a saved solution")
    s.add_argument("--solution", required=True)
    s.add_argument("--grid", required=True, help="x0:x1:nx,y0:y1:ny[,z0:z1:nz]")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict_map)

    s = sub.add_parser("eval", help="RMSE and max error between two trajectories")
    s.add_argument("--est", required=True)
    s.add_argument("--truth", required=True)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except SolverDivergedError as exc:
        print(f"error: solver failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except np.linalg.LinAlgError as exc:
        print(f"error: solver failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ValueError, OSError, CsvFormatError, configparser.Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
