"""Geometric and dataset types shared by every module.

Quaternion convention: Hamilton product, scalar first, and a state quaternion
rotates sensor-frame vectors into the local frame (``v_local = R(q) @ v_sensor``).
Orientation increments compose on the right: ``q_next = q ⊗ dq``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

IMU_HEADER = ["t", "dq_w", "dq_x", "dq_y", "dq_z", "dv_x", "dv_y", "dv_z", "T"]
MAG_HEADER = ["t", "mx", "my", "mz", "sigma"]

_NORM_TOL = 1e-6


def _frozen_vec(value, name: str, size: int = 3) -> np.ndarray:
    arr = np.array(value, dtype=float).reshape(-1)
    if arr.shape != (size,):
        raise ValueError(f"{name} must have {size} components, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Quaternion:
    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, a) -> "Quaternion":
        w, x, y, z = (float(v) for v in np.asarray(a, dtype=float).reshape(4))
        return cls(w, x, y, z)

    @classmethod
    def from_rotvec(cls, phi) -> "Quaternion":
        """Exponential map: rotation vector (axis * angle, rad) to unit quaternion."""
        phi = np.asarray(phi, dtype=float)
        angle = float(np.linalg.norm(phi))
        if angle < 1e-8:
            # second-order series keeps the map smooth through zero
            half = 0.5 * phi
            q = np.array([1.0 - angle * angle / 8.0, *(half * (1.0 - angle * angle / 24.0))])
        else:
            q = np.array([math.cos(angle / 2), *(math.sin(angle / 2) / angle * phi)])
        return cls.from_array(q / np.linalg.norm(q))

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "Quaternion":
        axis = np.asarray(axis, dtype=float)
        return cls.from_rotvec(axis / np.linalg.norm(axis) * angle)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    @property
    def vec(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def norm(self) -> float:
        return math.sqrt(self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)

    def normalized(self) -> "Quaternion":
        n = self.norm()
        if n == 0.0 or not math.isfinite(n):
            raise ValueError(f"cannot normalize quaternion with norm {n}")
        if n == 1.0:
            return self
        return Quaternion(self.w / n, self.x / n, self.y / n, self.z / n)

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def is_unit(self, tol: float = _NORM_TOL) -> bool:
        return abs(self.norm() - 1.0) <= tol

    def to_rotvec(self) -> np.ndarray:
        """Logarithm map; the returned angle lies in [0, pi]."""
        q = self.as_array()
        if q[0] < 0.0:
            q = -q
        v = q[1:]
        s = float(np.linalg.norm(v))
        if s < 1e-8:
            return 2.0 * v / q[0] * (1.0 - s * s / (3.0 * q[0] * q[0]))
        return 2.0 * math.atan2(s, q[0]) / s * v

    def rotate(self, v) -> np.ndarray:
        return quat_to_rotmat(self) @ np.asarray(v, dtype=float)

    def __mul__(self, other: "Quaternion") -> "Quaternion":
        return quat_compose(self, other)


def _hamilton(a: Quaternion, b: Quaternion) -> Quaternion:
    return Quaternion(
        a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    )


def quat_compose(a: Quaternion, b: Quaternion) -> Quaternion:
    """Hamilton product ``a ⊗ b``, renormalized."""
    return _hamilton(a, b).normalized()


def quat_to_rotmat(q: Quaternion) -> np.ndarray:
    w, x, y, z = q.w, q.x, q.y, q.z
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def right_jacobian(phi) -> np.ndarray:
    """SO(3) right Jacobian: ``Exp(phi + d) ≈ Exp(phi) Exp(Jr(phi) d)``."""
    phi = np.asarray(phi, dtype=float)
    a = float(np.linalg.norm(phi))
    S = skew(phi)
    if a < 1e-6:
        return np.eye(3) - 0.5 * S + S @ S / 6.0
    return np.eye(3) - (1 - math.cos(a)) / a**2 * S + (a - math.sin(a)) / a**3 * S @ S


def right_jacobian_inv(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    a = float(np.linalg.norm(phi))
    S = skew(phi)
    if a < 1e-6:
        return np.eye(3) + 0.5 * S + S @ S / 12.0
    coef = 1.0 / a**2 - (1 + math.cos(a)) / (2 * a * math.sin(a))
    return np.eye(3) + 0.5 * S + coef * S @ S


@dataclass(frozen=True)
class NavState:
    """Navigation state at one epoch.

    ``p``/``v`` are local-frame position (m) and velocity (m/s), ``q`` rotates
    sensor to local, ``b_gyro`` (rad/s) and ``b_accel`` (m/s^2) are sensor-frame
    biases.
    """

    t: float
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: Quaternion = field(default_factory=Quaternion.identity)
    b_gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_accel: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "t", float(self.t))
        for name in ("p", "v", "b_gyro", "b_accel"):
            object.__setattr__(self, name, _frozen_vec(getattr(self, name), name))
        if not self.q.is_unit():
            raise ValueError(f"NavState.q must be unit-norm, got norm {self.q.norm()}")

    def replace(self, **changes) -> "NavState":
        kw = dict(t=self.t, p=self.p, v=self.v, q=self.q, b_gyro=self.b_gyro, b_accel=self.b_accel)
        kw.update(changes)
        return NavState(**kw)


@dataclass(frozen=True)
class ImuRecord:
    """Odometry increment over ``(t - T, t]``.

    ``dq`` is the orientation change and ``dv`` the sensor-frame velocity
    change.  Planar problems reuse the layout with ``dq`` identity and ``dv``
    holding the per-step displacement in metres.
    """

    t: float
    dq: Quaternion
    dv: np.ndarray
    T: float

    def __post_init__(self):
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "dv", _frozen_vec(self.dv, "dv"))
        if not self.T > 0:
            raise ValueError(f"ImuRecord.T must be > 0, got {self.T}")
        if not self.dq.is_unit():
            raise ValueError(f"ImuRecord.dq must be unit-norm, got norm {self.dq.norm()}")


@dataclass(frozen=True)
class MagRecord:
    """Tri-axial field sample in the sensor frame (a.u.) with its per-axis std."""

    t: float
    y: np.ndarray
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "y", _frozen_vec(self.y, "y"))
        object.__setattr__(self, "sigma", float(self.sigma))
        if not self.sigma > 0:
            raise ValueError(f"MagRecord.sigma must be > 0, got {self.sigma}")


@dataclass(frozen=True)
class NoiseParams:
    w_gyro_sigma: float = 0.0
    w_accel_sigma: float = 0.0
    gravity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.w_gyro_sigma < 0 or self.w_accel_sigma < 0:
            raise ValueError("random-walk sigmas must be >= 0")
        object.__setattr__(self, "gravity", _frozen_vec(self.gravity, "gravity"))


# -- CSV layouts ------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def write_imu_csv(path, records: Iterable[ImuRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(IMU_HEADER)
        for r in records:
            w.writerow([_fmt(v) for v in (r.t, *r.dq.as_array(), *r.dv, r.T)])


def write_mag_csv(path, records: Iterable[MagRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MAG_HEADER)
        for r in records:
            w.writerow([_fmt(v) for v in (r.t, *r.y, r.sigma)])


class CsvFormatError(ValueError):
    """Malformed CSV input; ``line`` is 1-based and counts the header."""

    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.path = str(path)
        self.line = line


def _read_rows(path, header: Sequence[str]):
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            raise CsvFormatError(path, 1, "empty file, expected a header") from None
        if [h.strip() for h in got] != list(header):
            raise CsvFormatError(path, 1, f"expected header {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CsvFormatError(path, lineno, f"expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise CsvFormatError(path, lineno, str(exc)) from None
            if not all(math.isfinite(v) for v in vals):
                raise CsvFormatError(path, lineno, "non-finite value")
            yield lineno, vals


def read_imu_csv(path) -> list[ImuRecord]:
    out = []
    for lineno, v in _read_rows(path, IMU_HEADER):
        try:
            dq = Quaternion.from_array(v[1:5])
            if not dq.is_unit(1e-6):
                raise ValueError(f"dq not unit-norm (norm {dq.norm():.9g})")
            # keep written values bit-exact; only fix rows that are visibly off
            out.append(ImuRecord(v[0], dq if dq.is_unit(1e-12) else dq.normalized(), v[5:8], v[8]))
        except ValueError as exc:
            raise CsvFormatError(path, lineno, str(exc)) from None
    return out


def read_mag_csv(path) -> list[MagRecord]:
    out = []
    for lineno, v in _read_rows(path, MAG_HEADER):
        try:
            out.append(MagRecord(v[0], v[1:4], v[4]))
        except ValueError as exc:
            raise CsvFormatError(path, lineno, str(exc)) from None
    return out
