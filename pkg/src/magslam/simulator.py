"""Planar simulation scenarios: trajectory, sampled field, corrupted odometry.

Odometry noise and bias are per-step displacement errors in metres.  The
default configuration is a 0.5 m square walked twice with 25 cm spacing (16
steps), which with a 5 mm per-axis bias gives a dead-reckoned RMSE of about
0.066 m and a maximum error of about 0.113 m.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq

from .core_types import ImuRecord, MagRecord, NavState, Quaternion, write_imu_csv, write_mag_csv
from .kernels import Hyperparams, Kernel, KernelNotPSDError, factorize, cov_matrix

SHAPES = ("rectangle", "square", "spiral", "waypoints")
MAG_SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class ScenarioConfig:
    shape: str = "square"
    width: float = 0.5
    height: float = 0.5
    loops: int = 2
    spacing: float = 0.25
    waypoints: tuple = ()
    spiral_pitch: float = 0.25
    spiral_start_radius: float = 0.25
    sigma_f: float = 0.1
    length_scale: float = 0.1
    kernel: str = "se"
    odom_sigma: float = 5e-4
    odom_bias_x: float = 5e-3
    odom_bias_y: float = 5e-3
    mag_noise: float = 1e-3
    period: float = 1.0
    seed: int = 0

    @property
    def hyper(self) -> Hyperparams:
        return Hyperparams(self.sigma_f, self.length_scale)

    @property
    def odom_bias(self) -> np.ndarray:
        return np.array([self.odom_bias_x, self.odom_bias_y])

    def replace(self, **changes) -> "ScenarioConfig":
        kw = asdict(self)
        kw.update(changes)
        return ScenarioConfig(**kw)


@dataclass(frozen=True)
class Scenario:
    config: ScenarioConfig
    truth_positions: np.ndarray  # (N+1, 2)
    field_values: np.ndarray  # (N+1, 3) true local-frame field at each epoch
    odometry: list  # planar ImuRecords, dv = corrupted displacement
    mag: list
    times: np.ndarray

    @property
    def truth_states(self) -> list[NavState]:
        return [NavState(t, p=(*p, 0.0)) for t, p in zip(self.times, self.truth_positions)]

    @property
    def n_steps(self) -> int:
        return len(self.odometry)


def sample_field(locations, kernel: Kernel, seed) -> np.ndarray:
    """Exact joint GP draw at ``locations``; coincident locations share one value."""
    X = np.atleast_2d(np.asarray(locations, dtype=float))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out_dim = 3 if kernel.family == "se" else kernel.block
    if kernel.hyper.sigma_f == 0.0:
        return np.zeros((X.shape[0], out_dim))
    key = np.round(X, 12)
    uniq, inverse = np.unique(key, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    U = X[np.unique(inverse, return_index=True)[1]]
    F = factorize(cov_matrix(U, U, kernel), f" (family={kernel.family}, sigma_f={kernel.hyper.sigma_f:g}, "
                                           f"length_scale={kernel.hyper.length_scale:g})")
    if kernel.family == "se":
        vals = F.chol @ rng.standard_normal((U.shape[0], 3))
    else:
        vals = (F.chol @ rng.standard_normal(U.shape[0] * out_dim)).reshape(U.shape[0], out_dim)
    return vals[inverse]


def _polygon_loop(corners: np.ndarray, spacing: float) -> np.ndarray:
    pts = []
    n = len(corners)
    for c in range(n):
        a, b = corners[c], corners[(c + 1) % n]
        length = float(np.linalg.norm(b - a))
        steps = length / spacing
        k = int(round(steps))
        if k < 1 or abs(steps - k) > 1e-9:
            raise ValueError(f"edge length {length:g} m is not a positive multiple of spacing {spacing:g} m")
        direction = (b - a) / length
        for i in range(k):
            pts.append(a + direction * (i * spacing))
    return np.array(pts)


def _spiral(spacing: float, turns: int, pitch: float, r0: float) -> np.ndarray:
    if pitch <= 0 or r0 <= 0 or turns < 1:
        raise ValueError("spiral needs pitch > 0, start radius > 0 and at least one turn")
    b = pitch / (2 * math.pi)

    def point(th):
        r = r0 + b * th
        return np.array([r * math.cos(th), r * math.sin(th)])

    th_end = 2 * math.pi * turns
    pts = [point(0.0)]
    th = 0.0
    while True:
        cur = pts[-1]
        f = lambda t: float(np.linalg.norm(point(t) - cur)) - spacing
        hi = th + 2 * math.asin(min(1.0, spacing / (2 * (r0 + b * th)))) * 1.5 + 1e-6
        while f(hi) < 0:
            hi += 0.5
        th = brentq(f, th, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
        if th > th_end:
            break
        pts.append(point(th))
    return np.array(pts)


def _polyline(waypoints: np.ndarray, spacing: float) -> np.ndarray:
    """Points along a polyline with consecutive chord length exactly ``spacing``."""
    pts = [waypoints[0].astype(float)]
    seg = 0
    while seg < len(waypoints) - 1:
        cur = pts[-1]
        found = False
        for s in range(seg, len(waypoints) - 1):
            a, b = waypoints[s], waypoints[s + 1]
            d = b - a
            # solve |a + u d - cur| = spacing for u in [0, 1], taking the forward root
            f = a - cur
            A = float(d @ d)
            if A == 0:
                continue
            B = 2 * float(d @ f)
            C = float(f @ f) - spacing * spacing
            disc = B * B - 4 * A * C
            if disc < 0:
                continue
            u = (-B + math.sqrt(disc)) / (2 * A)
            u_min = 0.0
            if s == seg:
                # must move forward from the projection of cur onto this segment
                u_min = max(0.0, -float(d @ f) / A)
            if u_min - 1e-12 <= u <= 1.0 + 1e-12:
                pts.append(a + min(max(u, 0.0), 1.0) * d)
                seg = s
                found = True
                break
        if not found:
            break
    return np.array(pts)


def make_trajectory(shape: str, spacing: float, loops: int = 1, width: float = 1.0, height: Optional[float] = None,
                    waypoints: Sequence = (), spiral_pitch: Optional[float] = None,
                    spiral_start_radius: Optional[float] = None) -> np.ndarray:
    """Planar sample locations, shape ``(steps + 1, 2)``, starting at the first corner."""
    if not spacing > 0:
        raise ValueError(f"spacing must be > 0, got {spacing}")
    if loops < 1:
        raise ValueError(f"loops must be >= 1, got {loops}")
    shape = shape.lower()
    if shape in ("square", "rectangle"):
        h = width if (shape == "square" or height is None) else height
        if not (width > 0 and h > 0):
            raise ValueError("rectangle sides must be > 0")
        corners = np.array([[0.0, 0.0], [width, 0.0], [width, h], [0.0, h]])
        one = _polygon_loop(corners, spacing)
        return np.vstack([np.tile(one, (loops, 1)), one[:1]])
    if shape == "spiral":
        return _spiral(spacing, loops, spiral_pitch or spacing, spiral_start_radius or spacing)
    if shape == "waypoints":
        wp = np.asarray(waypoints, dtype=float).reshape(-1, 2)
        if len(wp) < 2 or np.allclose(wp, wp[0]):
            raise ValueError("waypoints shape needs at least two distinct points")
        path = np.vstack([np.tile(wp[:-1], (loops, 1)), wp[-1:]]) if loops > 1 else wp
        return _polyline(path, spacing)
    raise ValueError(f"unknown trajectory shape {shape!r}; expected one of {SHAPES}")


def corrupt_odometry(truth_steps, sigma: float, bias, seed) -> np.ndarray:
    """True per-step displacements plus a constant bias and white Gaussian noise."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    d = np.asarray(truth_steps, dtype=float).reshape(-1, 2)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    noise = rng.standard_normal(d.shape)
    return d + np.asarray(bias, dtype=float) + sigma * noise


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream])


def scenario_trajectory(cfg: ScenarioConfig) -> np.ndarray:
    return make_trajectory(
        cfg.shape, cfg.spacing, cfg.loops, width=cfg.width, height=cfg.height, waypoints=cfg.waypoints,
        spiral_pitch=cfg.spiral_pitch, spiral_start_radius=cfg.spiral_start_radius,
    )


def build_scenario(cfg: ScenarioConfig) -> Scenario:
    P = scenario_trajectory(cfg)
    n = P.shape[0]
    kernel = Kernel(cfg.kernel, cfg.hyper, 3)
    X3 = np.column_stack([P, np.zeros(n)])
    field = sample_field(X3, kernel, _rng(cfg.seed, 0))
    mag_noise = cfg.mag_noise * _rng(cfg.seed, 1).standard_normal(field.shape)
    steps = np.diff(P, axis=0)
    odo = corrupt_odometry(steps, cfg.odom_sigma, cfg.odom_bias, _rng(cfg.seed, 2))
    T = cfg.period
    times = np.arange(n) * T
    sigma = max(cfg.mag_noise, MAG_SIGMA_FLOOR)
    records = [ImuRecord(times[k + 1], Quaternion.identity(), (*odo[k], 0.0), T) for k in range(n - 1)]
    mags = [MagRecord(times[k], field[k] + mag_noise[k], sigma) for k in range(n)]
    return Scenario(cfg, P, field, records, mags, times)


# -- export -----------------------------------------------------------------


def config_to_dict(cfg: ScenarioConfig) -> dict:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "waypoints":
            v = ";".join(f"{x!r} {y!r}" for x, y in np.asarray(v, dtype=float).reshape(-1, 2)) if len(v) else ""
        out[f.name] = v if isinstance(v, str) else repr(v)
    return out


def config_from_mapping(section) -> ScenarioConfig:
    kw = {}
    for f in fields(ScenarioConfig):
        if f.name not in section:
            continue
        raw = str(section[f.name]).strip()
        if f.name == "waypoints":
            kw[f.name] = tuple(tuple(float(c) for c in pt.split()) for pt in raw.split(";") if pt.strip())
        elif f.type in ("int",) or isinstance(f.default, int) and not isinstance(f.default, bool):
            kw[f.name] = int(float(raw))
        elif isinstance(f.default, float):
            kw[f.name] = float(raw)
        else:
            kw[f.name] = raw
    return ScenarioConfig(**kw)


def export_scenario(scn: Scenario, out_dir) -> dict:
    """Write ``imu.csv``, ``mag.csv``, ``truth.csv`` and ``manifest.ini``; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"imu": out / "imu.csv", "mag": out / "mag.csv", "truth": out / "truth.csv", "manifest": out / "manifest.ini"}
    write_imu_csv(paths["imu"], scn.odometry)
    write_mag_csv(paths["mag"], scn.mag)
    with open(paths["truth"], "w", newline="") as fh:
        fh.write("t,px,py\n")
        for t, p in zip(scn.times, scn.truth_positions):
            fh.write(f"{float(t)!r},{float(p[0])!r},{float(p[1])!r}\n")
    cp = configparser.ConfigParser()
    cp["scenario"] = config_to_dict(scn.config)
    cp["files"] = {"imu": "imu.csv", "mag": "mag.csv", "truth": "truth.csv", "odometry": "planar-displacement"}
    with open(paths["manifest"], "w") as fh:
        cp.write(fh)
    return paths


@dataclass(frozen=True)
class SolverSetup:
    """How a simulated scenario is posed to the solver.

    ``sigma_f``/``length_scale`` of ``None`` mean "use the true value".
    ``odom_sigma`` of ``None`` uses the simulated noise level, floored at
    ``min_odom_sigma`` so that noise-free runs stay well conditioned.
    """

    sigma_f: Optional[float] = None
    length_scale: Optional[float] = None
    estimate_hypers: bool = False
    kernel: Optional[str] = None
    odom_sigma: Optional[float] = None
    min_odom_sigma: float = 1e-4
    bias_walk: float = 1e-4
    bias_prior: float = 5e-2


def scenario_problem(scn: Scenario, setup: SolverSetup = SolverSetup()):
    from .core_types import NoiseParams
    from .slam.problem import HyperMode, OdometryNoise, Problem, StatePrior

    cfg = scn.config
    hyper = Hyperparams(
        cfg.sigma_f if setup.sigma_f is None else setup.sigma_f,
        cfg.length_scale if setup.length_scale is None else setup.length_scale,
    )
    sigma = cfg.odom_sigma if setup.odom_sigma is None else setup.odom_sigma
    return Problem(
        imu=scn.odometry,
        mag=scn.mag,
        initial_state=NavState(scn.times[0], p=(*scn.truth_positions[0], 0.0)),
        hyper_mode=HyperMode(hyper, setup.estimate_hypers),
        kernel_family=setup.kernel or cfg.kernel,
        odometry=OdometryNoise(sigma_p=max(sigma, setup.min_odom_sigma)),
        noise=NoiseParams(1e-5, setup.bias_walk),
        prior=StatePrior(sigma_ba=setup.bias_prior),
        planar=True,
    )


# -- 3-D inertial increments --------------------------------------------------


def imu_from_poses(positions, orientations: Sequence[Quaternion], T: float, v0=None, gravity=(0.0, 0.0, 0.0),
                   t0: float = 0.0) -> tuple[list, list]:
    """IMU records that make strapdown integration reproduce the given poses.

    Velocities follow from the positions: with ``v0`` fixed, each step's
    ``dv`` is chosen so the next position is hit exactly, which also fixes the
    next velocity.  Returns ``(records, truth_states)``.
    """
    P = np.asarray(positions, dtype=float).reshape(-1, 3)
    if len(orientations) != len(P):
        raise ValueError(f"{len(P)} positions but {len(orientations)} orientations")
    if not T > 0:
        raise ValueError(f"T must be > 0, got {T}")
    g = np.asarray(gravity, dtype=float)
    v = (P[1] - P[0]) / T if v0 is None else np.asarray(v0, dtype=float)
    states = [NavState(t0, p=P[0], v=v, q=orientations[0])]
    records = []
    for k in range(len(P) - 1):
        q, q1 = orientations[k], orientations[k + 1]
        a_local = 2.0 * (P[k + 1] - P[k] - T * v) / T - T * g  # R dv
        dv = q.conjugate().rotate(a_local)
        dq = (q.conjugate() * q1).normalized()
        v = v + a_local + T * g
        t = t0 + (k + 1) * T
        records.append(ImuRecord(t, dq, dv, T))
        states.append(NavState(t, p=P[k + 1], v=v, q=q1))
    return records, states


def circular_poses(radius: float, n_steps: int, steps_per_turn: int, height: float = 0.0):
    """Positions on a horizontal circle with the sensor yawed along the tangent."""
    th = 2 * math.pi * np.arange(n_steps + 1) / steps_per_turn
    P = np.column_stack([radius * np.cos(th), radius * np.sin(th), np.full(th.shape, height)])
    Q = [Quaternion.from_axis_angle((0.0, 0.0, 1.0), a + math.pi / 2) for a in th]
    return P, Q
