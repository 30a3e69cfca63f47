"""Whitened residual blocks, their analytic Jacobians, and the map log-determinant.

Two variants of the field term are provided:

* explicit field values ``m`` (one 3-vector per magnetometer sample) with a
  magnetometer block ``(y - R^T m) / sigma`` and a GP block ``chol(K)^{-1} m``;
* field values eliminated in closed form, leaving the whitened block
  ``chol(K + C)^{-1} R y`` plus ``log|K + C|``.  Minimizing the explicit form
  over ``m`` gives exactly this, and the solver iterates on it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from ..core_types import NavState, Quaternion, quat_compose, quat_to_rotmat, right_jacobian, right_jacobian_inv, skew
from ..kernels import SE, Hyperparams, Kernel, cov_grad_location, gram
from .problem import Problem

FULL_STRIDE = 15
PLANAR_STRIDE = 4


class Layout:
    """Offsets of the per-epoch unknowns in the packed parameter vector.

    Full epochs hold ``[p(3), v(3), dtheta(3), b_gyro(3), b_accel(3)]``;
    planar epochs hold ``[p(2), bias(2)]``.  Explicit field values, when
    present, follow all epochs as ``n_mag x 3``.
    """

    def __init__(self, n_epochs: int, planar: bool, n_field: int = 0):
        self.n_epochs = n_epochs
        self.planar = planar
        self.stride = PLANAR_STRIDE if planar else FULL_STRIDE
        self.n_state = n_epochs * self.stride
        self.n_field = n_field
        self.size = self.n_state + 3 * n_field
        self.pdim = 2 if planar else 3

    def p(self, k: int) -> int:
        return k * self.stride

    def v(self, k: int) -> int:
        return k * self.stride + 3

    def th(self, k: int) -> int:
        return k * self.stride + 6

    def bg(self, k: int) -> int:
        return k * self.stride + 9

    def ba(self, k: int) -> int:
        return k * self.stride + (2 if self.planar else 12)

    def m(self, j: int) -> int:
        return self.n_state + 3 * j


def pack(states: Sequence[NavState], layout: Layout) -> np.ndarray:
    """Vector-space coordinates of the states (orientation components are zero)."""
    x = np.zeros(layout.n_state)
    for k, s in enumerate(states):
        if layout.planar:
            x[layout.p(k):layout.p(k) + 2] = s.p[:2]
            x[layout.ba(k):layout.ba(k) + 2] = s.b_accel[:2]
        else:
            x[layout.p(k):layout.p(k) + 3] = s.p
            x[layout.v(k):layout.v(k) + 3] = s.v
            x[layout.bg(k):layout.bg(k) + 3] = s.b_gyro
            x[layout.ba(k):layout.ba(k) + 3] = s.b_accel
    return x


def retract(states: Sequence[NavState], delta: np.ndarray, layout: Layout) -> list[NavState]:
    """Apply a packed update; orientation moves by ``q <- q ⊗ Exp(dtheta)``."""
    out = []
    for k, s in enumerate(states):
        if layout.planar:
            p = s.p.copy()
            p[:2] += delta[layout.p(k):layout.p(k) + 2]
            ba = s.b_accel.copy()
            ba[:2] += delta[layout.ba(k):layout.ba(k) + 2]
            out.append(s.replace(p=p, b_accel=ba))
        else:
            dth = delta[layout.th(k):layout.th(k) + 3]
            q = quat_compose(s.q, Quaternion.from_rotvec(dth)) if np.any(dth) else s.q
            out.append(
                s.replace(
                    p=s.p + delta[layout.p(k):layout.p(k) + 3],
                    v=s.v + delta[layout.v(k):layout.v(k) + 3],
                    q=q,
                    b_gyro=s.b_gyro + delta[layout.bg(k):layout.bg(k) + 3],
                    b_accel=s.b_accel + delta[layout.ba(k):layout.ba(k) + 3],
                )
            )
    return out


class _Triplets:
    def __init__(self):
        self.rows: list[np.ndarray] = []
        self.cols: list[np.ndarray] = []
        self.vals: list[np.ndarray] = []

    def add(self, row0: int, col0: int, block) -> None:
        block = np.atleast_2d(np.asarray(block, dtype=float))
        r, c = np.nonzero(block)
        if r.size == 0:
            return
        self.rows.append(r + row0)
        self.cols.append(c + col0)
        self.vals.append(block[r, c])

    def add_dense(self, row0: int, cols: np.ndarray, block: np.ndarray) -> None:
        """Dense rows ``row0..`` over an arbitrary column index set."""
        nr = block.shape[0]
        rr = np.repeat(np.arange(row0, row0 + nr), len(cols))
        cc = np.tile(cols, nr)
        self.rows.append(rr)
        self.cols.append(cc)
        self.vals.append(block.ravel())

    def matrix(self, shape) -> sp.csr_matrix:
        if not self.rows:
            return sp.csr_matrix(shape)
        return sp.csr_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))), shape=shape
        )


@dataclass
class ResidualSet:
    """Stacked whitened residuals ``r``, Jacobian ``J``, and the log-determinant term.

    The objective is ``cost = r @ r + logdet``; ``logdet_grad`` is its
    gradient with respect to the packed parameters.
    """

    r: np.ndarray
    J: Optional[sp.csr_matrix]
    blocks: dict
    logdet: float
    logdet_grad: Optional[np.ndarray]

    @property
    def cost(self) -> float:
        return float(self.r @ self.r) + self.logdet

    def block(self, name: str) -> np.ndarray:
        return self.r[self.blocks[name]]

    def gradient(self) -> np.ndarray:
        g = 2.0 * (self.J.T @ self.r)
        if self.logdet_grad is not None:
            g = g + self.logdet_grad
        return np.asarray(g).ravel()


def solver_kernel(problem: Problem, hyper: Hyperparams) -> Kernel:
    return Kernel(problem.kernel_family, hyper, 3)


def mag_locations(problem: Problem, states: Sequence[NavState]) -> np.ndarray:
    return np.array([states[e].p for e in problem.mag_epochs]).reshape(-1, 3)


def mag_local_values(problem: Problem, states: Sequence[NavState]) -> np.ndarray:
    """Field samples rotated into the local frame, ``R(q_e) y``."""
    if problem.planar:
        return np.array([m.y for m in problem.mag]).reshape(-1, 3)
    return np.array([quat_to_rotmat(states[e].q) @ m.y for e, m in zip(problem.mag_epochs, problem.mag)]).reshape(-1, 3)


def mag_noise_var(problem: Problem) -> np.ndarray:
    return np.array([m.sigma**2 for m in problem.mag])


def _arrange(values: np.ndarray, kernel: Kernel) -> np.ndarray:
    if kernel.family == SE:
        return values
    return values.reshape(-1, 1)


class GPWhitening:
    """``chol(K(X) + C)^{-1} Y`` with derivatives w.r.t. locations and ``Y``."""

    def __init__(self, X: np.ndarray, values: np.ndarray, kernel: Kernel, noise_var=None):
        self.X = X
        self.kernel = kernel
        self.Ym = _arrange(values, kernel)
        self.factor = gram(X, kernel, noise_var)
        self.R = self.factor.whiten(self.Ym)
        self.c = self.Ym.shape[1]
        self.logdet = self.c * self.factor.logdet
        self._Linv = None

    @property
    def Linv(self) -> np.ndarray:
        if self._Linv is None:
            self._Linv = self.factor.whiten(np.eye(self.factor.size))
        return self._Linv

    def location_derivatives(self, j: int, dims: int):
        """For each coordinate ``a < dims`` of location ``j``: ``(d vec(R), d logdet)``."""
        b = self.kernel.block
        Linv = self.Linv
        G = cov_grad_location(self.X, j, self.kernel)
        A = Linv[:, j * b:(j + 1) * b]
        W_rows = Linv[:, j * b:(j + 1) * b].T @ Linv  # rows of (K + C)^{-1} for block j
        out = []
        for a in range(dims):
            B = Linv @ G[a]
            P = A @ B.T
            P = P + P.T
            P = np.tril(P)
            P[np.diag_indices_from(P)] *= 0.5
            dR = -(P @ self.R)
            dld = self.c * 2.0 * float(np.trace(W_rows @ G[a]))
            out.append((dR.ravel(), dld))
        return out

    def value_derivative(self, j: int, dvals: np.ndarray) -> np.ndarray:
        """``d vec(R)`` for a change ``dvals`` (3-vector) of location ``j``'s values."""
        b = self.kernel.block
        if self.kernel.family == SE:
            return np.outer(self.Linv[:, j], dvals).ravel()
        return self.Linv[:, j * b:(j + 1) * b] @ dvals


def build_residuals(
    problem: Problem,
    states: Sequence[NavState],
    hyper: Hyperparams,
    field: Optional[np.ndarray] = None,
    with_jacobian: bool = True,
    include_map: bool = True,
) -> ResidualSet:
    """Evaluate every residual block at the given linearization point.

    With ``field`` (``n_mag x 3`` local-frame values) the explicit magnetometer
    and GP blocks are produced; without it the field is eliminated.  The
    log-determinant of the GP covariance is returned separately in either case.
    """
    n_ep = problem.n_epochs
    if len(states) != n_ep:
        raise ValueError(f"state block: expected {n_ep} states, got {len(states)}")
    n_mag = len(problem.mag)
    if field is not None:
        field = np.asarray(field, dtype=float)
        if field.shape != (n_mag, 3):
            raise ValueError(f"field block: expected shape {(n_mag, 3)}, got {field.shape}")
    layout = Layout(n_ep, problem.planar, n_mag if field is not None else 0)
    tr = _Triplets()
    res: list[np.ndarray] = []
    blocks: dict[str, slice] = {}
    row = 0

    def start(name):
        blocks[name] = row

    def finish(name):
        blocks[name] = slice(blocks[name], row)

    # -- prior on the first epoch
    start("prior")
    pr = problem.prior
    s0, ref = states[0], problem.initial_state
    if problem.planar:
        r = np.concatenate([(s0.p[:2] - ref.p[:2]) / pr.sigma_p, (s0.b_accel[:2] - ref.b_accel[:2]) / pr.sigma_ba])
        res.append(r)
        if with_jacobian:
            tr.add(row, layout.p(0), np.eye(2) / pr.sigma_p)
            tr.add(row + 2, layout.ba(0), np.eye(2) / pr.sigma_ba)
        row += 4
    else:
        eq = (ref.q.conjugate() * s0.q).to_rotvec()
        r = np.concatenate([
            (s0.p - ref.p) / pr.sigma_p,
            (s0.v - ref.v) / pr.sigma_v,
            eq / pr.sigma_q,
            (s0.b_gyro - ref.b_gyro) / pr.sigma_bg,
            (s0.b_accel - ref.b_accel) / pr.sigma_ba,
        ])
        res.append(r)
        if with_jacobian:
            tr.add(row, layout.p(0), np.eye(3) / pr.sigma_p)
            tr.add(row + 3, layout.v(0), np.eye(3) / pr.sigma_v)
            tr.add(row + 6, layout.th(0), right_jacobian_inv(eq) / pr.sigma_q)
            tr.add(row + 9, layout.bg(0), np.eye(3) / pr.sigma_bg)
            tr.add(row + 12, layout.ba(0), np.eye(3) / pr.sigma_ba)
        row += 15
    finish("prior")

    # -- odometry
    start("odometry")
    od = problem.odometry
    g = problem.noise.gravity
    for k, rec in enumerate(problem.imu):
        a, b = states[k], states[k + 1]
        if problem.planar:
            r = (b.p[:2] - a.p[:2] - (rec.dv[:2] - a.b_accel[:2])) / od.sigma_p
            res.append(r)
            if with_jacobian:
                e = np.eye(2) / od.sigma_p
                tr.add(row, layout.p(k + 1), e)
                tr.add(row, layout.p(k), -e)
                tr.add(row, layout.ba(k), e)
            row += 2
            continue
        T = rec.T
        Rk = quat_to_rotmat(a.q)
        bgT = a.b_gyro * T
        D = quat_compose(rec.dq, Quaternion.from_rotvec(-bgT))
        dvc = rec.dv - a.b_accel * T
        p_hat = a.p + T * a.v + Rk @ (0.5 * T * dvc) + 0.5 * T * T * g
        v_hat = a.v + Rk @ dvc + T * g
        E = (quat_compose(a.q, D)).conjugate() * b.q
        eq = E.to_rotvec()
        res.append(np.concatenate([(b.p - p_hat) / od.sigma_p, (b.v - v_hat) / od.sigma_v, eq / od.sigma_q]))
        if with_jacobian:
            I3 = np.eye(3)
            sp_, sv, sq = od.sigma_p, od.sigma_v, od.sigma_q
            tr.add(row, layout.p(k + 1), I3 / sp_)
            tr.add(row, layout.p(k), -I3 / sp_)
            tr.add(row, layout.v(k), -T * I3 / sp_)
            tr.add(row, layout.th(k), Rk @ skew(0.5 * T * dvc) / sp_)
            tr.add(row, layout.ba(k), 0.5 * T * T * Rk / sp_)
            tr.add(row + 3, layout.v(k + 1), I3 / sv)
            tr.add(row + 3, layout.v(k), -I3 / sv)
            tr.add(row + 3, layout.th(k), Rk @ skew(dvc) / sv)
            tr.add(row + 3, layout.ba(k), T * Rk / sv)
            Jinv = right_jacobian_inv(eq)
            Rk1 = quat_to_rotmat(b.q)
            C = rec.dq.conjugate() * a.q.conjugate() * b.q
            tr.add(row + 6, layout.th(k + 1), Jinv / sq)
            tr.add(row + 6, layout.th(k), -Jinv @ Rk1.T @ Rk / sq)
            tr.add(row + 6, layout.bg(k), Jinv @ quat_to_rotmat(C).T @ right_jacobian(bgT) * T / sq)
        row += 9
    finish("odometry")

    # -- bias random walk
    start("bias_walk")
    wa, wg = problem.noise.w_accel_sigma, problem.noise.w_gyro_sigma
    for k in range(n_ep - 1):
        a, b = states[k], states[k + 1]
        if problem.planar:
            res.append((b.b_accel[:2] - a.b_accel[:2]) / wa)
            if with_jacobian:
                tr.add(row, layout.ba(k + 1), np.eye(2) / wa)
                tr.add(row, layout.ba(k), -np.eye(2) / wa)
            row += 2
        else:
            res.append(np.concatenate([(b.b_gyro - a.b_gyro) / wg, (b.b_accel - a.b_accel) / wa]))
            if with_jacobian:
                tr.add(row, layout.bg(k + 1), np.eye(3) / wg)
                tr.add(row, layout.bg(k), -np.eye(3) / wg)
                tr.add(row + 3, layout.ba(k + 1), np.eye(3) / wa)
                tr.add(row + 3, layout.ba(k), -np.eye(3) / wa)
            row += 6
    finish("bias_walk")

    logdet = 0.0
    ld_grad = np.zeros(layout.size) if with_jacobian else None
    if include_map and n_mag > 0:
        kernel = solver_kernel(problem, hyper)
        X = mag_locations(problem, states)
        epochs = problem.mag_epochs
        dims = layout.pdim
        if field is not None:
            # -- explicit magnetometer block
            start("mag")
            for j, (e, mrec) in enumerate(zip(epochs, problem.mag)):
                Rq = np.eye(3) if problem.planar else quat_to_rotmat(states[e].q)
                pred = Rq.T @ field[j]
                res.append((mrec.y - pred) / mrec.sigma)
                if with_jacobian:
                    tr.add(row, layout.m(j), -Rq.T / mrec.sigma)
                    if not problem.planar:
                        tr.add(row, layout.th(e), -skew(pred) / mrec.sigma)
                row += 3
            finish("mag")
            gp = GPWhitening(X, field, kernel, None)
        else:
            gp = GPWhitening(X, mag_local_values(problem, states), kernel, mag_noise_var(problem))
        start("gp")
        rvec = gp.R.ravel()
        res.append(rvec)
        logdet = gp.logdet
        if with_jacobian:
            nr = rvec.size
            acc: dict[int, np.ndarray] = {}

            def col_add(col, vec):
                if col in acc:
                    acc[col] = acc[col] + vec
                else:
                    acc[col] = vec.copy()

            for j, e in enumerate(epochs):
                for a, (dR, dld) in enumerate(gp.location_derivatives(j, dims)):
                    col_add(layout.p(e) + a, dR)
                    ld_grad[layout.p(e) + a] += dld
                if field is not None:
                    for a in range(3):
                        ea = np.zeros(3)
                        ea[a] = 1.0
                        col_add(layout.m(j) + a, gp.value_derivative(j, ea))
                elif not problem.planar:
                    Rq = quat_to_rotmat(states[e].q)
                    dY = -Rq @ skew(problem.mag[j].y)
                    for a in range(3):
                        col_add(layout.th(e) + a, gp.value_derivative(j, dY[:, a]))
            if acc:
                cols = np.array(sorted(acc))
                tr.add_dense(row, cols, np.stack([acc[c] for c in cols], axis=1))
        row += rvec.size
        finish("gp")

    # -- weak zero-position prior
    zp = problem.zero_position
    if zp is not None:
        start("zero_position")
        r = np.zeros(n_ep)
        for k, s in enumerate(states):
            p = s.p[: layout.pdim]
            n = float(np.linalg.norm(p))
            if n > zp.radius:
                r[k] = (n - zp.radius) / zp.sigma
                if with_jacobian:
                    tr.add(row + k, layout.p(k), (p / n / zp.sigma)[None, :])
        res.append(r)
        row += n_ep
        finish("zero_position")

    rr = np.concatenate(res) if res else np.zeros(0)
    J = tr.matrix((row, layout.size)) if with_jacobian else None
    return ResidualSet(rr, J, blocks, logdet, ld_grad)
