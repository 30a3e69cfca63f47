"""Covariance functions over sample locations and Gram-matrix factorization.

Three families share the hyperparameters ``(sigma_f, length_scale)``:

``se``
    squared exponential, applied independently to every field axis;
    the Gram matrix is ``n x n`` and is shared by the three axes.
``curl_free`` / ``div_free``
    matrix-valued kernels coupling the field components; the Gram matrix is
    ``(n * n_x) x (n * n_x)`` in location-major order.

The two matrix formulas are named after the field they produce when sampled,
which the test suite checks with finite-difference curl and divergence.
``curl_free`` evaluates ``(1/l^2) (I - r r^T) k_se`` and ``div_free`` evaluates
``(1/l^2) ((n_x - 1 - |r|^2) I + r r^T) k_se`` with ``r = (x - x') / l``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

SE = "se"
CURL_FREE = "curl_free"
DIV_FREE = "div_free"
FAMILIES = (SE, CURL_FREE, DIV_FREE)

_ALIASES = {
    "se": SE,
    "se-independent": SE,
    "se_independent": SE,
    "squared_exponential": SE,
    "curl-free": CURL_FREE,
    "curl_free": CURL_FREE,
    "div-free": DIV_FREE,
    "div_free": DIV_FREE,
    "divergence-free": DIV_FREE,
    "divergence_free": DIV_FREE,
}

JITTER_START = 1e-12
JITTER_MAX = 1e-4


def family_name(name: str) -> str:
    try:
        return _ALIASES[name.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown kernel family {name!r}; expected one of {FAMILIES}") from None


class KernelNotPSDError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    sigma_f: float
    length_scale: float

    def __post_init__(self):
        object.__setattr__(self, "sigma_f", float(self.sigma_f))
        object.__setattr__(self, "length_scale", float(self.length_scale))
        if not (math.isfinite(self.sigma_f) and self.sigma_f >= 0):
            raise ValueError(f"sigma_f must be finite and >= 0, got {self.sigma_f}")
        if not (math.isfinite(self.length_scale) and self.length_scale > 0):
            raise ValueError(f"length_scale must be finite and > 0, got {self.length_scale}")

    @property
    def log_params(self) -> np.ndarray:
        return np.array([math.log(self.sigma_f), math.log(self.length_scale)])

    @classmethod
    def from_log(cls, theta) -> "Hyperparams":
        return cls(math.exp(theta[0]), math.exp(theta[1]))


@dataclass(frozen=True)
class Kernel:
    family: str = SE
    hyper: Hyperparams = Hyperparams(0.1, 0.1)
    input_dim: int = 3

    def __post_init__(self):
        object.__setattr__(self, "family", family_name(self.family))
        if self.input_dim not in (2, 3):
            raise ValueError(f"input_dim must be 2 or 3, got {self.input_dim}")

    @property
    def block(self) -> int:
        """Output rows per location in the Gram matrix."""
        return 1 if self.family == SE else self.input_dim

    def with_hyper(self, hyper: Hyperparams) -> "Kernel":
        return Kernel(self.family, hyper, self.input_dim)


def _as_loc(x, dim=None) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if dim is not None and x.shape[0] != dim:
        raise ValueError(f"location has {x.shape[0]} components, expected {dim}")
    return x


def se_cov(x, x2, h: Hyperparams) -> float:
    x = _as_loc(x)
    x2 = _as_loc(x2)
    if x.shape != x2.shape:
        raise ValueError(f"dimension mismatch: {x.shape[0]} vs {x2.shape[0]}")
    d2 = float(np.dot(x - x2, x - x2))
    return h.sigma_f**2 * math.exp(-d2 / (2.0 * h.length_scale**2))


def matrix_cov(x, x2, k: Kernel) -> np.ndarray:
    if k.family == SE:
        raise ValueError("matrix_cov needs a curl_free or div_free kernel; use se_cov per axis")
    x = _as_loc(x, k.input_dim)
    x2 = _as_loc(x2, k.input_dim)
    return _matrix_blocks((x - x2)[None, :], k)[0]


def _matrix_blocks(d: np.ndarray, k: Kernel) -> np.ndarray:
    """Matrix kernel evaluated at difference vectors ``d`` of shape (m, n_x)."""
    n = k.input_dim
    l2 = k.hyper.length_scale**2
    s2 = np.einsum("ij,ij->i", d, d)
    e = k.hyper.sigma_f**2 * np.exp(-s2 / (2.0 * l2)) / l2
    rr = np.einsum("ia,ib->iab", d, d) / l2
    eye = np.eye(n)[None]
    if k.family == CURL_FREE:
        core = eye - rr
    else:
        core = (n - 1 - s2 / l2)[:, None, None] * eye + rr
    return e[:, None, None] * core


def cov_matrix(X1, X2, k: Kernel) -> np.ndarray:
    """Cross-covariance between two location sets (location-major for matrix kernels)."""
    X1 = np.atleast_2d(np.asarray(X1, dtype=float))
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    if X1.shape[1] != X2.shape[1]:
        raise ValueError(f"dimension mismatch: {X1.shape[1]} vs {X2.shape[1]}")
    d = X1[:, None, :] - X2[None, :, :]
    if k.family == SE:
        s2 = np.einsum("ijk,ijk->ij", d, d)
        return k.hyper.sigma_f**2 * np.exp(-s2 / (2.0 * k.hyper.length_scale**2))
    if X1.shape[1] != k.input_dim:
        raise ValueError(f"locations have {X1.shape[1]} components, kernel expects {k.input_dim}")
    n1, n2, b = X1.shape[0], X2.shape[0], k.input_dim
    blocks = _matrix_blocks(d.reshape(-1, b), k).reshape(n1, n2, b, b)
    return blocks.transpose(0, 2, 1, 3).reshape(n1 * b, n2 * b)


def prior_block(k: Kernel) -> np.ndarray:
    """Covariance of the field at a single location."""
    if k.family == SE:
        return k.hyper.sigma_f**2 * np.eye(3)
    return _matrix_blocks(np.zeros((1, k.input_dim)), k)[0]


def cov_grad_hypers(X, k: Kernel) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of ``cov_matrix(X, X)`` w.r.t. ``log sigma_f`` and ``log l``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    K = cov_matrix(X, X, k)
    dK_dsf = 2.0 * K
    l2 = k.hyper.length_scale**2
    d = X[:, None, :] - X[None, :, :]
    s2 = np.einsum("ijk,ijk->ij", d, d)
    if k.family == SE:
        return dK_dsf, K * s2 / l2
    n, b = X.shape[0], k.input_dim
    sf2 = k.hyper.sigma_f**2
    E = np.exp(-s2 / (2.0 * l2))
    rr = np.einsum("ija,ijb->ijab", d, d) / l2
    eye = np.eye(b)
    t = s2 / l2
    if k.family == CURL_FREE:
        core = eye - rr
        dcore = 2.0 * rr
    else:
        core = (b - 1 - t)[..., None, None] * eye + rr
        dcore = 2.0 * t[..., None, None] * eye - 2.0 * rr
    # d/dlog l of (sf2 / l^2) * E * core
    blocks = sf2 / l2 * E[..., None, None] * (-2.0 * core + dcore + t[..., None, None] * core)
    return dK_dsf, blocks.transpose(0, 2, 1, 3).reshape(n * b, n * b)


def cov_grad_location(X, i: int, k: Kernel) -> np.ndarray:
    """Derivative of column block ``i`` of ``cov_matrix(X, X)`` w.r.t. ``X[i]``.

    Returns shape ``(dim, n * block, block)``; entry ``[a]`` is
    ``d K[:, block_i] / d X[i, a]``.  Stationarity makes the diagonal block
    constant, so its derivative is zero.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, dim = X.shape
    l2 = k.hyper.length_scale**2
    d = X - X[i]  # x_j - x_i
    s2 = np.einsum("ij,ij->i", d, d)
    if k.family == SE:
        kv = k.hyper.sigma_f**2 * np.exp(-s2 / (2.0 * l2))
        return (kv[None, :] * d.T / l2)[:, :, None]
    b = k.input_dim
    Kb = _matrix_blocks(d, k)  # (n, b, b)
    E = k.hyper.sigma_f**2 * np.exp(-s2 / (2.0 * l2)) / l2
    out = np.empty((dim, n, b, b))
    eye = np.eye(b)
    for a in range(dim):
        ea = np.zeros(b)
        ea[a] = 1.0
        sym = (ea[None, :, None] * d[:, None, :] + d[:, :, None] * ea[None, None, :]) / l2
        if k.family == CURL_FREE:
            dcore = -sym
        else:
            dcore = -2.0 * d[:, a, None, None] / l2 * eye + sym
        dKdd = E[:, None, None] * dcore - Kb * (d[:, a] / l2)[:, None, None]
        out[a] = -dKdd
    return out.reshape(dim, n * b, b)


@dataclass(frozen=True)
class GramFactor:
    K: np.ndarray
    chol: np.ndarray
    jitter_used: float
    logdet: float

    @property
    def size(self) -> int:
        return self.K.shape[0]

    def solve(self, b) -> np.ndarray:
        return cho_solve((self.chol, True), b, check_finite=False)

    def whiten(self, b) -> np.ndarray:
        """``chol^{-1} b``."""
        return solve_triangular(self.chol, b, lower=True, check_finite=False)

    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.size))


def factorize(K: np.ndarray, context: str = "") -> GramFactor:
    """Cholesky with the adaptive jitter schedule (none, then 1e-12..1e-4 of the mean diagonal)."""
    K = np.asarray(K, dtype=float)
    if not np.all(np.isfinite(K)):
        raise KernelNotPSDError(f"kernel matrix has non-finite entries{context}")
    N = K.shape[0]
    scale = float(np.trace(K)) / N if N else 0.0
    jitter = 0.0
    while True:
        try:
            A = K if jitter == 0.0 else K + jitter * np.eye(N)
            L = np.linalg.cholesky(A)
            if np.all(np.diag(L) > 0):
                return GramFactor(K, L, jitter, 2.0 * float(np.sum(np.log(np.diag(L)))))
        except np.linalg.LinAlgError:
            pass
        if scale <= 0.0:
            break
        jitter = JITTER_START * scale if jitter == 0.0 else jitter * 10.0
        if jitter > JITTER_MAX * scale * (1 + 1e-9):
            break
    raise KernelNotPSDError(f"kernel matrix not PSD{context}")


def gram(locations, k: Kernel, noise_var=None) -> GramFactor:
    """Factorized Gram matrix of ``k`` over ``locations``.

    ``noise_var`` (scalar or one value per location) is added to the diagonal
    before factorization, giving ``K + C``.
    """
    X = np.atleast_2d(np.asarray(locations, dtype=float))
    if X.shape[0] < 1:
        raise ValueError("gram needs at least one location")
    if not (math.isfinite(k.hyper.sigma_f) and math.isfinite(k.hyper.length_scale)):
        raise ValueError("kernel hyperparameters must be finite")
    K = cov_matrix(X, X, k)
    if noise_var is not None:
        nv = np.broadcast_to(np.asarray(noise_var, dtype=float), (X.shape[0],))
        K = K + np.diag(np.repeat(nv, k.block))
    ctx = f" (family={k.family}, sigma_f={k.hyper.sigma_f:g}, length_scale={k.hyper.length_scale:g})"
    return factorize(K, ctx)
