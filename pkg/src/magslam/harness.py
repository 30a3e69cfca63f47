"""Experiment recipes: configs, parameter studies, log ingestion and plot data."""

from __future__ import annotations

import configparser
import csv
import logging
import math
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core_types import NavState, NoiseParams, read_imu_csv, read_mag_csv
from .kernels import Hyperparams
from .simulator import ScenarioConfig, SolverSetup, build_scenario, config_from_mapping, scenario_problem
from .strapdown import gravity_vector
from .slam.problem import HyperMode, OdometryNoise, Problem, StatePrior, ZeroPositionPrior, align_epochs
from .slam.report import evaluate, write_cost_trace_csv, write_trajectory_csv
from .slam.solver import Solution, SolverOptions, solve

log = logging.getLogger(__name__)

STUDIES = ("sigma_f_sweep", "wrong_sigma_f", "l_sweep", "wrong_l", "odometry_noise", "single_run")
RESULT_COLUMNS = ("study", "param", "seed", "rmse_before", "rmse_after", "max_before", "max_after",
                  "iterations", "converged")
SUMMARY_COLUMNS = ("study", "param", "seeds", "rmse_before", "max_before", "rmse_after", "max_after",
                   "converged", "failed_0.05")
FAIL_THRESHOLD = 0.05


@dataclass(frozen=True)
class IngestConfig:
    """Noise model and priors for logs read from disk."""

    planar: bool = True
    kernel: str = "se"
    sigma_f: float = 0.1
    length_scale: float = 0.1
    estimate_hypers: bool = False
    odom_sigma: float = 5e-4
    odom_sigma_v: float = 1e-3
    odom_sigma_q: float = 1e-3
    bias_walk: float = 1e-4
    gyro_walk: float = 1e-5
    bias_prior: float = 5e-2
    gravity: float = 9.81
    initial_x: float = 0.0
    initial_y: float = 0.0
    initial_z: float = 0.0
    zero_position_radius: Optional[float] = None
    zero_position_sigma: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    study: str = "single_run"
    values: tuple = ()
    seeds: int = 10
    first_seed: int = 0
    workers: int = 1
    scenario: ScenarioConfig = ScenarioConfig()
    setup: SolverSetup = SolverSetup()
    options: SolverOptions = SolverOptions()
    ingest: IngestConfig = IngestConfig()

    def __post_init__(self):
        if self.study not in STUDIES:
            raise ValueError(f"unknown study {self.study!r}; expected one of {STUDIES}")
        if self.study != "single_run" and not self.values:
            raise ValueError(f"study {self.study} needs at least one sweep value")
        if self.seeds < 1:
            raise ValueError(f"seeds must be >= 1, got {self.seeds}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")


# -- config files -----------------------------------------------------------


def _coerce(cls, name: str, raw: str):
    hint = typing.get_type_hints(cls)[name]
    raw = raw.strip()
    if typing.get_origin(hint) is typing.Union:
        if raw.lower() in ("", "none"):
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    if hint is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    return raw


def _from_section(cls, section, used: set):
    names = {f.name for f in fields(cls)}
    kw = {}
    for key, raw in section.items():
        if key in names:
            try:
                kw[key] = _coerce(cls, key, raw)
            except ValueError as exc:
                raise ValueError(f"[{section.name}] {key}: {exc}") from None
            used.add(key)
    return cls(**kw)


def parse_values(raw: str) -> tuple:
    return tuple(float(v) for v in raw.replace(";", ",").split(",") if v.strip())


def load_config(path) -> ExperimentConfig:
    """Read an INI file with ``[scenario]``, ``[solver]`` and ``[study]`` sections."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(f"config file not found: {path}")
    return config_from_parser(cp)


def config_from_parser(cp: configparser.ConfigParser) -> ExperimentConfig:
    unknown = [s for s in cp.sections() if s not in ("scenario", "solver", "study")]
    if unknown:
        raise ValueError(f"unknown config section(s): {', '.join(unknown)}")
    scen = config_from_mapping(cp["scenario"]) if cp.has_section("scenario") else ScenarioConfig()
    if cp.has_section("scenario"):
        bad = set(cp["scenario"]) - {f.name for f in fields(ScenarioConfig)}
        if bad:
            raise ValueError(f"[scenario] unknown key(s): {', '.join(sorted(bad))}")
    solver = cp["solver"] if cp.has_section("solver") else {}
    used: set = set()
    if solver:
        setup = _from_section(SolverSetup, solver, used)
        options = _from_section(SolverOptions, solver, used)
        ingest = _from_section(IngestConfig, solver, used)
        bad = set(solver) - used
        if bad:
            raise ValueError(f"[solver] unknown key(s): {', '.join(sorted(bad))}")
    else:
        setup, options, ingest = SolverSetup(), SolverOptions(), IngestConfig()
    kw: dict = {}
    if cp.has_section("study"):
        st = cp["study"]
        allowed = {"name", "values", "seeds", "first_seed", "workers"}
        bad = set(st) - allowed
        if bad:
            raise ValueError(f"[study] unknown key(s): {', '.join(sorted(bad))}")
        if "name" in st:
            kw["study"] = st["name"].strip()
        if "values" in st:
            kw["values"] = parse_values(st["values"])
        for key in ("seeds", "first_seed", "workers"):
            if key in st:
                kw[key] = int(st[key])
    return ExperimentConfig(scenario=scen, setup=setup, options=options, ingest=ingest, **kw)


# -- studies ----------------------------------------------------------------


def cell_inputs(cfg: ExperimentConfig, value: Optional[float], seed: int) -> tuple[ScenarioConfig, SolverSetup]:
    """Scenario and solver setup for one sweep value and seed."""
    scen, setup = cfg.scenario.replace(seed=seed), cfg.setup
    if cfg.study == "sigma_f_sweep":
        scen = scen.replace(sigma_f=value)
    elif cfg.study == "wrong_sigma_f":
        setup = replace(setup, sigma_f=value)
    elif cfg.study == "l_sweep":
        scen = scen.replace(length_scale=value)
    elif cfg.study == "wrong_l":
        setup = replace(setup, length_scale=value)
    elif cfg.study == "odometry_noise":
        scen = scen.replace(odom_sigma=value)
    return scen, setup


def run_cell(cfg: ExperimentConfig, value: Optional[float], seed: int) -> dict:
    row = {"study": cfg.study, "param": "" if value is None else repr(float(value)), "seed": seed}
    nan = float("nan")
    try:
        scen_cfg, setup = cell_inputs(cfg, value, seed)
        scn = build_scenario(scen_cfg)
        before = evaluate(dead_reckoned(scn), scn.truth_positions)
        row.update(rmse_before=before["rmse"], max_before=before["max_error"])
        sol = solve(scenario_problem(scn, setup), cfg.options)
        after = evaluate(sol.positions, scn.truth_positions)
        row.update(rmse_after=after["rmse"], max_after=after["max_error"], iterations=sol.iterations,
                   converged=sol.converged)
    except Exception as exc:  # a failed cell is a result, not a crash
        log.warning("study %s param %s seed %d failed: %s", cfg.study, row["param"], seed, exc)
        row.setdefault("rmse_before", nan)
        row.setdefault("max_before", nan)
        row.update(rmse_after=nan, max_after=nan, iterations=0, converged=False)
    return row


def dead_reckoned(scn) -> np.ndarray:
    steps = np.array([r.dv[:2] for r in scn.odometry])
    return np.vstack([scn.truth_positions[:1], scn.truth_positions[0] + np.cumsum(steps, axis=0)])


def _cell(args):
    return run_cell(*args)


def study_cells(cfg: ExperimentConfig) -> list:
    values = cfg.values if cfg.study != "single_run" else (cfg.values[:1] or (None,))
    return [(cfg, v, cfg.first_seed + s) for v in values for s in range(cfg.seeds)]


def run_study(cfg: ExperimentConfig, out_dir=None) -> list[dict]:
    """Every sweep value x seed; rows come back in a fixed order regardless of workers."""
    cells = study_cells(cfg)
    if cfg.workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            rows = list(pool.map(_cell, cells))
    else:
        rows = [_cell(c) for c in cells]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_results_csv(out / "results.csv", rows)
        write_summary_csv(out / "summary.csv", summarize(rows))
    return rows


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_results_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in RESULT_COLUMNS])


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for c in ("rmse_before", "rmse_after", "max_before", "max_after"):
            r[c] = float(r[c])
        r["seed"], r["iterations"] = int(r["seed"]), int(r["iterations"])
        r["converged"] = r["converged"] == "true"
    return rows


def summarize(rows: Sequence[dict]) -> list[dict]:
    """Median over seeds for each sweep value, in first-seen order."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["study"], r["param"]), []).append(r)
    out = []
    for (study, param), rs in groups.items():
        med = lambda c: float(np.nanmedian([r[c] for r in rs])) if any(math.isfinite(r[c]) for r in rs) else float("nan")
        out.append({
            "study": study, "param": param, "seeds": len(rs),
            "rmse_before": med("rmse_before"), "max_before": med("max_before"),
            "rmse_after": med("rmse_after"), "max_after": med("max_after"),
            "converged": sum(r["converged"] for r in rs),
            "failed_0.05": sum(not (r["rmse_after"] < FAIL_THRESHOLD) for r in rs),
        })
    return out


def write_summary_csv(path, summary: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in summary:
            w.writerow([_fmt(r[c]) for c in SUMMARY_COLUMNS])


PARAM_LABEL = {"sigma_f_sweep": "sigma_f", "wrong_sigma_f": "assumed sigma_f", "l_sweep": "l",
               "wrong_l": "assumed l", "odometry_noise": "odometry noise", "single_run": ""}


def format_table(summary: Sequence[dict]) -> str:
    """Plain-text table with a before row and one after row per sweep value."""
    lines = [f"{'':40s} {'RMSE [m]':>9s} {'Max Error [m]':>14s}"]
    if summary:
        lines.append(f"{'Before SLAM':40s} {summary[0]['rmse_before']:9.3f} {summary[0]['max_before']:14.3f}")
    for r in summary:
        label = PARAM_LABEL.get(r["study"], "")
        name = f"After SLAM, {label} = {float(r['param']):g}" if r["param"] else "After SLAM"
        lines.append(f"{name:40s} {r['rmse_after']:9.3f} {r['max_after']:14.3f}")
    return "\n".join(lines)


# -- ingestion --------------------------------------------------------------


@dataclass(frozen=True)
class AlignmentStats:
    imu_records: int
    mag_records: int
    matched: int
    dropped: int


def ingest_logs(imu_csv, mag_csv, config: IngestConfig = IngestConfig()) -> tuple[Problem, AlignmentStats]:
    """Read logs, tie magnetometer samples to IMU epochs and build a Problem.

    Samples farther than half a period from every epoch are dropped.
    """
    imu = read_imu_csv(imu_csv)
    mag = read_mag_csv(mag_csv)
    if not imu:
        raise ValueError(f"{imu_csv}: no IMU records")
    if not mag:
        raise ValueError(f"{mag_csv}: no magnetic measurements")
    t0 = imu[0].t - imu[0].T
    epoch_t = [t0] + [r.t for r in imu]
    lo, hi = t0 - imu[0].T / 2, imu[-1].t + imu[-1].T / 2
    if mag[-1].t < lo or mag[0].t > hi:
        raise ValueError(
            f"no overlapping time range: IMU covers [{t0!r}, {imu[-1].t!r}], "
            f"magnetometer covers [{mag[0].t!r}, {mag[-1].t!r}]"
        )
    idx = align_epochs(epoch_t, [r.T for r in imu], [m.t for m in mag])
    kept = [m for m, e in zip(mag, idx) if e >= 0]
    stats = AlignmentStats(len(imu), len(mag), len(kept), len(mag) - len(kept))
    if not kept:
        raise ValueError(f"all {len(mag)} magnetometer records are farther than T/2 from every IMU epoch")
    c = config
    zp = None if c.zero_position_radius is None else ZeroPositionPrior(c.zero_position_radius, c.zero_position_sigma)
    problem = Problem(
        imu=imu,
        mag=kept,
        initial_state=NavState(t0, p=(c.initial_x, c.initial_y, c.initial_z)),
        hyper_mode=HyperMode(Hyperparams(c.sigma_f, c.length_scale), c.estimate_hypers),
        kernel_family=c.kernel,
        odometry=OdometryNoise(c.odom_sigma, c.odom_sigma_v, c.odom_sigma_q),
        noise=NoiseParams(c.gyro_walk, c.bias_walk, gravity_vector(c.gravity)),
        prior=StatePrior(sigma_ba=c.bias_prior),
        zero_position=zp,
        planar=c.planar,
    )
    return problem, stats


def ingest_config_for(scn_cfg: ScenarioConfig, setup: SolverSetup) -> IngestConfig:
    """The ingestion settings that pose an exported scenario exactly like ``scenario_problem``."""
    sigma = scn_cfg.odom_sigma if setup.odom_sigma is None else setup.odom_sigma
    return IngestConfig(
        planar=True,
        kernel=setup.kernel or scn_cfg.kernel,
        sigma_f=scn_cfg.sigma_f if setup.sigma_f is None else setup.sigma_f,
        length_scale=scn_cfg.length_scale if setup.length_scale is None else setup.length_scale,
        estimate_hypers=setup.estimate_hypers,
        odom_sigma=max(sigma, setup.min_odom_sigma),
        bias_walk=setup.bias_walk,
        bias_prior=setup.bias_prior,
    )


def read_truth_csv(path) -> np.ndarray:
    """Ground-truth positions from a ``t,px,py[,pz]`` file."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:3] != ["t", "px", "py"]:
            raise ValueError(f"{path}: expected header starting t,px,py, got {header}")
        rows = []
        for line, row in enumerate(reader, start=2):
            try:
                rows.append([float(v) for v in row[1:len(header)]])
            except ValueError:
                raise ValueError(f"{path}:{line}: non-numeric value in {row}") from None
    return np.array(rows)


# -- plot data --------------------------------------------------------------


def _write_xy(path, P: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y"])
        for p in P:
            w.writerow([repr(float(p[0])), repr(float(p[1]))])


def _svg_polyline(pts: np.ndarray, colour: str, dash: bool = False) -> str:
    coords = " ".join(f"{x:.3f},{y:.3f}" for x, y in pts)
    extra = ' stroke-dasharray="6,4"' if dash else ""
    return f'<polyline fill="none" stroke="{colour}" stroke-width="1.5"{extra} points="{coords}"/>'


def _to_canvas(series: list, size=(480, 480), pad=30):
    allp = np.vstack([s for s in series if len(s)])
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    scale = min((size[0] - 2 * pad) / span[0], (size[1] - 2 * pad) / span[1])
    out = []
    for s in series:
        x = pad + (s[:, 0] - lo[0]) * scale
        y = size[1] - pad - (s[:, 1] - lo[1]) * scale
        out.append(np.column_stack([x, y]))
    return out


def trajectory_svg(path, odometry: np.ndarray, slam: np.ndarray, truth: Optional[np.ndarray] = None) -> None:
    series = [odometry[:, :2], slam[:, :2]] + ([truth[:, :2]] if truth is not None else [])
    pts = _to_canvas(series)
    body = [_svg_polyline(pts[0], "#00bcd4", dash=True), _svg_polyline(pts[1], "#1f3fbf")]
    if truth is not None:
        for x, y in pts[2]:
            body.append(f'<path d="M{x:.3f},{y - 4:.3f} l3.5,6.5 h-7 z" fill="#d62728"/>')
    _write_svg(path, body)


def cost_svg(path, trace: Sequence[float]) -> None:
    c = np.asarray(trace, dtype=float)
    pts = _to_canvas([np.column_stack([np.arange(len(c)), c])], size=(480, 320))[0]
    _write_svg(path, [_svg_polyline(pts, "#1f3fbf")], size=(480, 320))


def _write_svg(path, body: list, size=(480, 480)) -> None:
    with open(path, "w") as fh:
        fh.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{size[0]}" height="{size[1]}">\n')
        fh.write('<rect width="100%" height="100%" fill="white"/>\n')
        fh.write("\n".join(body) + "\n</svg>\n")


def emit_plots(solution: Solution, out_dir, truth: Optional[np.ndarray] = None, mag: Sequence = ()) -> list[Path]:
    """CSV series and SVG overlays for a solved trajectory; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    odo = np.array([s.p for s in solution.initial_states])
    est = solution.positions
    written = [out / "odometry_xy.csv", out / "slam_xy.csv"]
    _write_xy(written[0], odo)
    _write_xy(written[1], est)
    if truth is not None:
        written.append(out / "truth_xy.csv")
        _write_xy(written[-1], np.asarray(truth))
    written.append(out / "cost_trace.csv")
    write_cost_trace_csv(written[-1], solution.cost_trace)
    if len(mag):
        written.append(out / "field_magnitude.csv")
        with open(written[-1], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "magnitude"])
            for m in mag:
                w.writerow([repr(float(m.t)), repr(float(np.linalg.norm(m.y)))])
    written.append(out / "trajectory.svg")
    trajectory_svg(written[-1], odo, est, None if truth is None else np.asarray(truth))
    written.append(out / "cost_trace.svg")
    cost_svg(written[-1], solution.cost_trace)
    return written
