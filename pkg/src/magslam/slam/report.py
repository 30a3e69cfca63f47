"""Trajectory metrics, bias tables and solution export."""

from __future__ import annotations

import configparser
import csv
from pathlib import Path
from typing import Sequence

import numpy as np

from ..kernels import Hyperparams, Kernel
from ..gpr import MapEstimate
from .solver import Solution

SENSORS = ("gyro", "accel")
AXES = ("x", "y", "z")


def _positions(traj) -> np.ndarray:
    if isinstance(traj, Solution):
        return traj.positions
    arr = np.asarray([getattr(s, "p", s) for s in traj], dtype=float)
    return arr.reshape(len(arr), -1)


def evaluate(estimate, truth) -> dict:
    """RMSE and maximum of the per-epoch position error norm, in metres.

    Either argument may be a Solution, a list of NavStates or an array of
    positions; only the common leading coordinates are compared.
    """
    E, T = _positions(estimate), _positions(truth)
    if E.shape[0] != T.shape[0]:
        raise ValueError(f"epoch count mismatch: estimate has {E.shape[0]}, truth has {T.shape[0]}")
    d = min(E.shape[1], T.shape[1])
    err = np.linalg.norm(E[:, :d] - T[:, :d], axis=1)
    return {"rmse": float(np.sqrt(np.mean(err**2))), "max_error": float(err.max(initial=0.0))}


def recover_biases(solution: Solution) -> list[dict]:
    """Mean bias over epochs before and after the solve, one row per sensor axis.

    Planar solutions report their odometry bias (m per step) in the accel rows.
    """
    rows = []
    for sensor in SENSORS:
        attr = "b_gyro" if sensor == "gyro" else "b_accel"
        before = np.mean([getattr(s, attr) for s in solution.initial_states], axis=0)
        after = np.mean([getattr(s, attr) for s in solution.states], axis=0)
        for i, ax in enumerate(AXES):
            rows.append({"sensor": sensor, "axis": ax, "before": float(before[i]), "after": float(after[i])})
    return rows


def write_trajectory_csv(path, states: Sequence) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "px", "py", "pz", "qw", "qx", "qy", "qz"])
        for s in states:
            w.writerow([repr(float(v)) for v in (s.t, *s.p, *s.q.as_array())])


def write_cost_trace_csv(path, trace: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "cost"])
        for i, c in enumerate(trace):
            w.writerow([i, repr(float(c))])


def write_bias_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sensor", "axis", "before", "after"])
        for r in rows:
            w.writerow([r["sensor"], r["axis"], repr(r["before"]), repr(r["after"])])


def export_solution(solution: Solution, out_dir) -> dict:
    """Write trajectory, cost trace, bias report and the map needed by ``predict-map``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "trajectory": out / "trajectory.csv",
        "initial": out / "initial_trajectory.csv",
        "cost": out / "cost_trace.csv",
        "biases": out / "biases.csv",
        "map": out / "map_training.csv",
        "manifest": out / "solution.ini",
    }
    write_trajectory_csv(paths["trajectory"], solution.states)
    write_trajectory_csv(paths["initial"], solution.initial_states)
    write_cost_trace_csv(paths["cost"], solution.cost_trace)
    write_bias_csv(paths["biases"], recover_biases(solution))
    cp = configparser.ConfigParser()
    cp["solution"] = {
        "converged": str(solution.converged),
        "iterations": str(solution.iterations),
        "reason": solution.reason,
        "final_cost": repr(solution.final_cost),
        "sigma_f": repr(solution.hypers.sigma_f),
        "length_scale": repr(solution.hypers.length_scale),
    }
    if solution.map is not None:
        m = solution.map
        cp["map"] = {"family": m.kernel.family, "input_dim": str(m.kernel.input_dim), "training": "map_training.csv"}
        with open(paths["map"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "z", "mx", "my", "mz", "noise_var"])
            for x, v, n in zip(m.train_locations, m.train_values, m.noise):
                w.writerow([repr(float(c)) for c in (*x, *v, n)])
    with open(paths["manifest"], "w") as fh:
        cp.write(fh)
    return paths


def load_map(solution_dir) -> MapEstimate:
    """Rebuild the field map written by :func:`export_solution`."""
    d = Path(solution_dir)
    cp = configparser.ConfigParser()
    if not cp.read(d / "solution.ini") or "map" not in cp:
        raise FileNotFoundError(f"{d} does not contain a solution with a field map")
    hyper = Hyperparams(float(cp["solution"]["sigma_f"]), float(cp["solution"]["length_scale"]))
    kernel = Kernel(cp["map"]["family"], hyper, int(cp["map"]["input_dim"]))
    data = np.loadtxt(d / cp["map"]["training"], delimiter=",", skiprows=1, ndmin=2)
    return MapEstimate(data[:, 0:3], data[:, 3:6], kernel, data[:, 6])
