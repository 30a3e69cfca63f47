"""Strapdown dead reckoning from (dq, dv) increments with random-walk biases.

Bias compensation happens before the increments are applied: the velocity
increment is corrected by ``b_accel * T`` and the orientation increment is
composed with the rotation ``Exp(-b_gyro * T)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core_types import ImuRecord, NavState, Quaternion, quat_compose, quat_to_rotmat


@dataclass(frozen=True)
class StrapdownConfig:
    gravity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    initial_state: NavState = field(default_factory=lambda: NavState(0.0))

    def __post_init__(self):
        g = np.array(self.gravity, dtype=float).reshape(3)
        g.flags.writeable = False
        object.__setattr__(self, "gravity", g)
        if not 0.0 <= float(np.linalg.norm(g)) <= 20.0:
            raise ValueError(f"|gravity| must lie in [0, 20] m/s^2, got {np.linalg.norm(g):.3f}")


def _check_finite(name: str, value) -> None:
    if not np.all(np.isfinite(np.asarray(value, dtype=float))):
        raise ValueError(f"non-finite value in {name}: {value}")


def corrected_increments(state: NavState, rec: ImuRecord) -> tuple[Quaternion, np.ndarray]:
    """Bias-compensated ``(dq, dv)`` for one record."""
    dq = rec.dq
    if np.any(state.b_gyro):
        dq = quat_compose(dq, Quaternion.from_rotvec(-state.b_gyro * rec.T))
    return dq, rec.dv - state.b_accel * rec.T


def propagate(state: NavState, rec: ImuRecord, cfg: StrapdownConfig) -> NavState:
    for name, value in (
        ("state.p", state.p),
        ("state.v", state.v),
        ("state.q", state.q.as_array()),
        ("state.b_gyro", state.b_gyro),
        ("state.b_accel", state.b_accel),
        ("rec.dq", rec.dq.as_array()),
        ("rec.dv", rec.dv),
        ("rec.T", rec.T),
    ):
        _check_finite(name, value)
    T = rec.T
    g = cfg.gravity
    dq, dv = corrected_increments(state, rec)
    R = quat_to_rotmat(state.q)
    v = state.v + R @ dv + T * g
    p = state.p + T * state.v + R @ (0.5 * T * dv) + 0.5 * T * T * g
    return state.replace(t=state.t + T, p=p, v=v, q=quat_compose(state.q, dq))


def propagate_bias(bias, w_sigma: float, rng_draw) -> np.ndarray:
    if w_sigma < 0:
        raise ValueError(f"w_sigma must be >= 0, got {w_sigma}")
    bias = np.asarray(bias, dtype=float)
    if w_sigma == 0:
        return bias.copy()
    return bias + w_sigma * np.asarray(rng_draw, dtype=float)


def check_sorted(records: Sequence[ImuRecord]) -> None:
    for k in range(1, len(records)):
        if not records[k].t > records[k - 1].t:
            raise ValueError(
                f"IMU records not time-sorted: record {k} has t={records[k].t!r} "
                f"after t={records[k - 1].t!r}"
            )


def dead_reckon(records: Sequence[ImuRecord], cfg: StrapdownConfig) -> list[NavState]:
    check_sorted(records)
    states = [cfg.initial_state]
    for rec in records:
        states.append(propagate(states[-1], rec, cfg))
    return states


def dead_reckon_planar(displacements, p0=(0.0, 0.0), bias=(0.0, 0.0)) -> np.ndarray:
    """Cumulative sum of per-step displacements minus a constant bias, shape (N+1, 2)."""
    d = np.asarray(displacements, dtype=float).reshape(-1, 2) - np.asarray(bias, dtype=float)
    out = np.empty((len(d) + 1, 2))
    out[0] = p0
    out[1:] = np.asarray(p0, dtype=float) + np.cumsum(d, axis=0)
    return out


def gravity_vector(magnitude: float = 9.81) -> np.ndarray:
    """Local-frame gravity with z up."""
    if not math.isfinite(magnitude):
        raise ValueError("gravity magnitude must be finite")
    return np.array([0.0, 0.0, -magnitude])
