"""Random small problems and finite-difference oracles shared by the tests."""

from __future__ import annotations

import numpy as np

from magslam.core_types import ImuRecord, MagRecord, NavState, NoiseParams, Quaternion
from magslam.kernels import Hyperparams, cov_matrix
from magslam.slam.problem import HyperMode, OdometryNoise, Problem, StatePrior, ZeroPositionPrior
from magslam.slam.residuals import Layout, build_residuals, retract
from magslam.strapdown import gravity_vector


def random_problem(rng, n_epochs=5, planar=False, family="se", zero_position=False, hyper=None):
    T = 0.1
    imu = []
    for k in range(n_epochs - 1):
        if planar:
            imu.append(ImuRecord((k + 1) * T, Quaternion.identity(), (*rng.normal(0, 0.2, 2), 0.0), T))
        else:
            dq = Quaternion.from_rotvec(rng.normal(0, 0.1, 3))
            imu.append(ImuRecord((k + 1) * T, dq, rng.normal(0, 0.2, 3), T))
    mag = [MagRecord(k * T, rng.normal(0, 0.1, 3), 0.01) for k in range(n_epochs)]
    s0 = NavState(0.0, p=rng.normal(0, 0.1, 3) * (np.array([1, 1, 0]) if planar else 1),
                  q=Quaternion.from_rotvec(rng.normal(0, 0.3, 3)) if not planar else Quaternion.identity())
    return Problem(
        imu=imu, mag=mag, initial_state=s0,
        hyper_mode=HyperMode(hyper or Hyperparams(0.1, 0.3)),
        kernel_family=family,
        odometry=OdometryNoise(0.01, 0.02, 0.01),
        noise=NoiseParams(1e-2, 1e-2, gravity_vector()),
        prior=StatePrior(0.1, 0.1, 0.1, 0.1, 0.1),
        zero_position=ZeroPositionPrior(0.05, 1.0) if zero_position else None,
        planar=planar,
    )


def random_states(rng, problem, scale=0.1):
    """States scattered around the origin (not a consistent trajectory)."""
    out = []
    for k, t in enumerate(problem.epoch_times()):
        if problem.planar:
            out.append(NavState(t, p=(*rng.normal(0, scale * 2, 2), 0.0), b_accel=(*rng.normal(0, 0.01, 2), 0.0)))
        else:
            out.append(NavState(t, p=rng.normal(0, scale * 2, 3), v=rng.normal(0, 0.5, 3),
                                q=Quaternion.from_rotvec(rng.normal(0, 0.5, 3)),
                                b_gyro=rng.normal(0, 0.05, 3), b_accel=rng.normal(0, 0.05, 3)))
    return out


def fd_jacobian(problem, states, hyper, field=None, h=1e-6):
    """Central differences of the residual vector and the log-determinant."""
    layout = Layout(problem.n_epochs, problem.planar, 0 if field is None else len(problem.mag))
    n = layout.size
    base = build_residuals(problem, states, hyper, field=field, with_jacobian=False)
    J = np.zeros((base.r.size, n))
    g = np.zeros(n)
    for i in range(n):
        d = np.zeros(n)
        d[i] = h
        out = []
        for sgn in (1.0, -1.0):
            st = retract(states, sgn * d[: layout.n_state], layout)
            f = None if field is None else field + sgn * d[layout.n_state:].reshape(-1, 3)
            out.append(build_residuals(problem, st, hyper, field=f, with_jacobian=False))
        J[:, i] = (out[0].r - out[1].r) / (2 * h)
        g[i] = (out[0].logdet - out[1].logdet) / (2 * h)
    return J, g


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def dense_posterior(X, Y, k, noise, Q):
    """Direct linear-solve oracle, one query at a time."""
    n = X.shape[0]
    b = k.block
    Kxx = cov_matrix(X, X, k) + np.diag(np.repeat(np.full(n, noise), b))
    Yv = Y if k.family == "se" else Y.reshape(-1, 1)
    means, covs = [], []
    for q in Q:
        Ks = cov_matrix(q[None, :], X, k)
        mean = Ks @ np.linalg.solve(Kxx, Yv)
        Kss = cov_matrix(q[None, :], q[None, :], k)
        cov = Kss - Ks @ np.linalg.solve(Kxx, Ks.T)
        means.append(mean.reshape(-1))
        covs.append(cov)
    return np.array(means), covs
