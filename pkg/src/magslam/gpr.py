"""Gaussian-process regression of the field: marginal likelihood, hyperparameter fit, prediction."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .kernels import SE, GramFactor, Hyperparams, Kernel, cov_grad_hypers, cov_matrix, gram, prior_block

LOG_2PI = math.log(2.0 * math.pi)

# log-space box for the hyperparameter search
LOG_SIGMA_F_BOUNDS = (math.log(1e-8), math.log(1e4))
LOG_LENGTH_BOUNDS = (math.log(1e-4), math.log(1e3))


def _value_matrix(values, k: Kernel, n: int) -> np.ndarray:
    """Arrange per-location values as the right-hand side of the Gram system.

    SE kernels use one column per field axis; matrix kernels stack all
    components location-major into a single column.
    """
    Y = np.asarray(values, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[0] != n:
        raise ValueError(f"{Y.shape[0]} values for {n} locations")
    if k.family == SE:
        return Y
    if Y.shape[1] != k.block:
        raise ValueError(f"{k.family} kernel needs {k.block} field components, got {Y.shape[1]}")
    return Y.reshape(n * k.block, 1)


def _noise_vector(noise, n: int) -> np.ndarray:
    nv = np.broadcast_to(np.asarray(noise, dtype=float), (n,)).copy()
    if np.any(nv < 0) or not np.all(np.isfinite(nv)):
        raise ValueError("noise variances must be finite and >= 0")
    return nv


@dataclass(frozen=True)
class MapEstimate:
    """Field observations at known local-frame locations plus the GP that explains them.

    ``noise`` holds one measurement variance per location (the diagonal of C_l).
    """

    train_locations: np.ndarray
    train_values: np.ndarray
    kernel: Kernel
    noise: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.train_locations, dtype=float))
        Y = np.asarray(self.train_values, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.shape[0] != Y.shape[0]:
            raise ValueError(f"{X.shape[0]} locations but {Y.shape[0]} values")
        if X.shape[0] == 0:
            raise ValueError("MapEstimate needs at least one training location")
        object.__setattr__(self, "train_locations", X)
        object.__setattr__(self, "train_values", Y)
        object.__setattr__(self, "noise", _noise_vector(self.noise, X.shape[0]))
        h = self.kernel.hyper
        if not (math.isfinite(h.sigma_f) and math.isfinite(h.length_scale)):
            raise ValueError("kernel hyperparameters must be finite")

    def factor(self) -> GramFactor:
        return gram(self.train_locations, self.kernel, self.noise)


def nlml(locations, values, k: Kernel, noise) -> float:
    """Negative log marginal likelihood, summed over independent value columns."""
    return nlml_and_grad(locations, values, k, noise, with_grad=False)[0]


def nlml_and_grad(locations, values, k: Kernel, noise, with_grad: bool = True):
    """``(nlml, d nlml / d(log sigma_f, log l))``."""
    X = np.atleast_2d(np.asarray(locations, dtype=float))
    n = X.shape[0]
    Y = _value_matrix(values, k, n)
    F = gram(X, k, _noise_vector(noise, n))
    A = F.solve(Y)
    c = Y.shape[1]
    N = F.size
    value = 0.5 * (float(np.sum(Y * A)) + c * F.logdet + c * N * LOG_2PI)
    if not with_grad:
        return value, None
    W = F.inverse()
    grad = np.empty(2)
    for j, dK in enumerate(cov_grad_hypers(X, k)):
        grad[j] = 0.5 * (-float(np.sum(A * (dK @ A))) + c * float(np.sum(W * dK)))
    return value, grad


@dataclass(frozen=True)
class HyperFit:
    hyper: Hyperparams
    nlml: float
    converged: bool
    iterations: int


def fit_hypers(locations, values, noise, init: Hyperparams, family: str = SE, input_dim: int = 3,
               max_iter: int = 200, gtol: float = 1e-8) -> HyperFit:
    """Minimize ``nlml`` over ``(log sigma_f, log l)`` with L-BFGS-B and analytic gradients."""
    X = np.atleast_2d(np.asarray(locations, dtype=float))
    if X.shape[0] < 5:
        raise ValueError(f"fit_hypers needs at least 5 samples, got {X.shape[0]}")
    base = Kernel(family, init, input_dim)
    best = {"f": math.inf, "theta": init.log_params}

    def objective(theta):
        try:
            f, g = nlml_and_grad(X, values, base.with_hyper(Hyperparams.from_log(theta)), noise)
        except np.linalg.LinAlgError:
            return 1e300, np.zeros(2)
        if f < best["f"]:
            best["f"], best["theta"] = f, np.array(theta)
        return f, g

    x0 = np.clip(init.log_params, [LOG_SIGMA_F_BOUNDS[0], LOG_LENGTH_BOUNDS[0]],
                 [LOG_SIGMA_F_BOUNDS[1], LOG_LENGTH_BOUNDS[1]])
    res = minimize(objective, x0, jac=True, method="L-BFGS-B",
                   bounds=[LOG_SIGMA_F_BOUNDS, LOG_LENGTH_BOUNDS],
                   options={"maxiter": max_iter, "gtol": gtol, "ftol": 1e-15})
    theta = best["theta"]
    return HyperFit(Hyperparams.from_log(theta), float(best["f"]), bool(res.success), int(res.nit))


def predict(m: MapEstimate, query) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and covariance of the field at one location."""
    mean, cov = predict_many(m, np.atleast_2d(np.asarray(query, dtype=float)))
    return mean[0], cov[0]


def predict_many(m: MapEstimate, queries, factor: GramFactor | None = None):
    """Posterior means ``(q, c)`` and covariances ``(q, c, c)`` at many locations."""
    k = m.kernel
    Q = np.atleast_2d(np.asarray(queries, dtype=float))
    F = factor if factor is not None else m.factor()
    X = m.train_locations
    Y = _value_matrix(m.train_values, k, X.shape[0])
    alpha = F.solve(Y)
    Ks = cov_matrix(Q, X, k)  # (q*b, n*b)
    V = F.whiten(Ks.T)  # (n*b, q*b)
    if k.family == SE:
        mean = Ks @ alpha  # (q, c)
        var = k.hyper.sigma_f**2 - np.einsum("ij,ij->j", V, V)
        cov = var[:, None, None] * np.eye(Y.shape[1])[None]
        return mean, cov
    b = k.block
    nq = Q.shape[0]
    mean = (Ks @ alpha).reshape(nq, b)
    Vb = V.reshape(V.shape[0], nq, b)
    cov = prior_block(k)[None] - np.einsum("kqa,kqb->qab", Vb, Vb)
    return mean, cov


def parse_grid(spec: str) -> np.ndarray:
    """Grid points from ``"x0:x1:nx,y0:y1:ny[,z0:z1:nz]"``; a missing z axis means z = 0."""
    axes = []
    for part in spec.split(","):
        fields = part.strip().split(":")
        if len(fields) != 3:
            raise ValueError(f"grid axis {part!r} must be start:stop:count")
        lo, hi, cnt = float(fields[0]), float(fields[1]), int(fields[2])
        if cnt < 1:
            raise ValueError(f"grid axis {part!r} needs a positive count")
        axes.append(np.linspace(lo, hi, cnt))
    if len(axes) == 2:
        axes.append(np.zeros(1))
    if len(axes) != 3:
        raise ValueError(f"grid spec {spec!r} must have 2 or 3 axes")
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def export_map_csv(m: MapEstimate, grid: np.ndarray, path) -> None:
    """Write ``x,y,z,mx,my,mz,var_x,var_y,var_z`` for every grid point."""
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    dim = m.train_locations.shape[1]
    F = m.factor()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "z", "mx", "my", "mz", "var_x", "var_y", "var_z"])
        for start in range(0, grid.shape[0], 512):
            chunk = grid[start:start + 512]
            mean, cov = predict_many(m, chunk[:, :dim], F)
            for g, mu, c in zip(chunk, mean, cov):
                mu3 = np.zeros(3)
                var3 = np.zeros(3)
                mu3[: mu.shape[0]] = mu
                var3[: mu.shape[0]] = np.diag(c)
                xyz = np.zeros(3)
                xyz[: g.shape[0]] = g
                w.writerow([repr(float(v)) for v in (*xyz, *mu3, *var3)])
