"""Problem definition for batch GP-SLAM."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..core_types import ImuRecord, MagRecord, NavState, NoiseParams
from ..kernels import Hyperparams, family_name
from ..strapdown import check_sorted


@dataclass(frozen=True)
class HyperMode:
    """Kernel hyperparameters: held at ``hyper`` or estimated starting from it."""

    hyper: Hyperparams
    estimate: bool = False

    @classmethod
    def fixed(cls, hyper: Hyperparams) -> "HyperMode":
        return cls(hyper, False)

    @classmethod
    def estimated(cls, init: Hyperparams) -> "HyperMode":
        return cls(init, True)


@dataclass(frozen=True)
class OdometryNoise:
    """Whitening of the odometry residuals.

    Planar problems use ``sigma_p`` as the per-axis displacement noise (m per
    step); full problems use all three for position (m), velocity (m/s) and
    orientation (rad) per record.
    """

    sigma_p: float = 5e-4
    sigma_v: float = 1e-3
    sigma_q: float = 1e-3

    def __post_init__(self):
        for name in ("sigma_p", "sigma_v", "sigma_q"):
            if not getattr(self, name) > 0:
                raise ValueError(f"OdometryNoise.{name} must be > 0")


@dataclass(frozen=True)
class StatePrior:
    """Gaussian prior on the first epoch, centred on ``Problem.initial_state``.

    In planar problems ``sigma_ba`` bounds the odometry bias (m per step).
    """

    sigma_p: float = 1e-6
    sigma_v: float = 1e-3
    sigma_q: float = 1e-3
    sigma_bg: float = 1e-2
    sigma_ba: float = 5e-2

    def __post_init__(self):
        for name in ("sigma_p", "sigma_v", "sigma_q", "sigma_bg", "sigma_ba"):
            if not getattr(self, name) > 0:
                raise ValueError(f"StatePrior.{name} must be > 0")


@dataclass(frozen=True)
class ZeroPositionPrior:
    """Soft constraint keeping every position within ``radius`` of the origin."""

    radius: float = 1.0
    sigma: float = 1.0

    def __post_init__(self):
        if not self.radius >= 0 or not self.sigma > 0:
            raise ValueError("ZeroPositionPrior needs radius >= 0 and sigma > 0")


@dataclass(frozen=True)
class Problem:
    """Odometry, field samples, priors and noise for one trajectory.

    Epoch 0 is ``initial_state``; IMU record ``k`` moves epoch ``k`` to
    ``k + 1`` and carries that epoch's timestamp.  Each magnetometer record is
    tied to the nearest epoch within half an integration period.

    With ``planar=True`` the records hold 2-D displacement odometry (see
    ``ImuRecord``), orientation stays identity, and the per-epoch bias state
    is an odometry displacement bias driven by ``noise.w_accel_sigma``.
    """

    imu: Sequence[ImuRecord]
    mag: Sequence[MagRecord]
    initial_state: NavState
    hyper_mode: HyperMode
    kernel_family: str = "se"
    odometry: OdometryNoise = OdometryNoise()
    noise: NoiseParams = NoiseParams(1e-5, 1e-4)
    prior: StatePrior = StatePrior()
    zero_position: Optional[ZeroPositionPrior] = None
    planar: bool = False
    mag_epochs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "imu", tuple(self.imu))
        object.__setattr__(self, "mag", tuple(self.mag))
        object.__setattr__(self, "kernel_family", family_name(self.kernel_family))
        if len(self.imu) < 1:
            raise ValueError("Problem needs at least 2 epochs (1 IMU record)")
        check_sorted(self.imu)
        if not self.noise.w_accel_sigma > 0:
            raise ValueError("noise.w_accel_sigma must be > 0 for the bias random walk")
        if not self.planar and not self.noise.w_gyro_sigma > 0:
            raise ValueError("noise.w_gyro_sigma must be > 0 for the bias random walk")
        epochs = align_epochs(self.epoch_times(), [r.T for r in self.imu], [m.t for m in self.mag])
        bad = [j for j, e in enumerate(epochs) if e < 0]
        if bad:
            j = bad[0]
            raise ValueError(
                f"magnetometer record {j} (t={self.mag[j].t!r}) is not within T/2 of any IMU epoch"
            )
        object.__setattr__(self, "mag_epochs", np.asarray(epochs, dtype=int))

    @property
    def n_epochs(self) -> int:
        return len(self.imu) + 1

    def epoch_times(self) -> np.ndarray:
        return np.array([self.initial_state.t] + [r.t for r in self.imu])


def align_epochs(epoch_t, periods, mag_t) -> list[int]:
    """Nearest-epoch index for each timestamp, or -1 when farther than T/2.

    Epoch ``k > 0`` uses the period of the record that produced it; epoch 0
    uses the first record's period.
    """
    epoch_t = np.asarray(epoch_t, dtype=float)
    half = 0.5 * np.array([periods[0]] + list(periods), dtype=float)
    out = []
    for t in mag_t:
        i = int(np.searchsorted(epoch_t, t))
        best, best_dt = -1, math.inf
        for c in (i - 1, i):
            if 0 <= c < len(epoch_t):
                dt = abs(epoch_t[c] - t)
                if dt <= half[c] * (1 + 1e-12) and dt < best_dt:
                    best, best_dt = c, dt
        out.append(best)
    return out
