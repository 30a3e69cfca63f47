"""Levenberg-Marquardt for ``|r(x)|^2 + h(x)`` where only ``r`` is a least-squares term.

``h`` (the GP log-determinant) contributes its gradient to the step but no
curvature; Marquardt's diagonal damping and the strict-decrease acceptance
rule keep the iteration monotone.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

DENSE_LIMIT = 4000
LAMBDA_MAX = 1e16


@dataclass
class LMResult:
    x: object
    cost: float
    cost_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    reason: str = ""


class NonFiniteCostError(FloatingPointError):
    def __init__(self, msg, last_x=None):
        super().__init__(msg)
        self.last_x = last_x


def _solve_damped(JtJ, g, lam):
    d = JtJ.diagonal().copy()
    floor = 1e-12 * max(float(d.max(initial=0.0)), 1e-300)
    d = np.maximum(d, floor) * lam
    if sp.issparse(JtJ):
        A = (JtJ + sp.diags(d)).tocsc()
        return spla.spsolve(A, -g)
    A = JtJ + np.diag(d)
    try:
        return sla.cho_solve(sla.cho_factor(A, lower=True, check_finite=False), -g, check_finite=False)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(A, -g, rcond=None)[0]


def levenberg_marquardt(
    evaluate: Callable,
    retract: Callable,
    x0,
    max_iter: int = 2000,
    rel_tol: float = 1e-10,
    grad_tol: float = 1e-8,
    lam0: float = 1e-4,
) -> LMResult:
    """Minimize ``evaluate(x).cost``.

    ``evaluate(x, with_jacobian)`` returns an object with ``cost``, ``J``,
    ``r`` and ``gradient()``; ``retract(x, delta)`` applies a step.
    """
    cur = evaluate(x0, True)
    F = cur.cost
    if not math.isfinite(F):
        raise NonFiniteCostError(f"initial cost is not finite ({F})", x0)
    x = x0
    trace = [F]
    lam = lam0
    reason = "max_iterations"
    it = 0
    while it < max_iter:
        g = 0.5 * cur.gradient()
        if float(np.linalg.norm(g)) * 2.0 < grad_tol:
            reason = "gradient"
            break
        J = cur.J
        JtJ = J.T @ J
        if JtJ.shape[0] <= DENSE_LIMIT:
            JtJ = JtJ.toarray()
        accepted = False
        while lam <= LAMBDA_MAX:
            delta = _solve_damped(JtJ, g, lam)
            if not np.all(np.isfinite(delta)):
                lam *= 10.0
                continue
            x_new = retract(x, delta)
            try:
                F_new = evaluate(x_new, False).cost
            except np.linalg.LinAlgError:
                F_new = math.inf
            if math.isfinite(F_new) and F_new < F:
                accepted = True
                break
            lam *= 10.0
        it += 1
        if not accepted:
            reason = "stalled"
            break
        dF = F - F_new
        x, F = x_new, F_new
        cur = evaluate(x, True)
        F = cur.cost
        trace.append(F)
        lam = max(lam / 10.0, 1e-12)
        if dF < rel_tol * max(1.0, abs(F)):
            reason = "cost"
            break
    converged = reason in ("gradient", "cost", "stalled")
    log.debug("LM finished after %d iterations: %s (cost %.6g)", it, reason, F)
    return LMResult(x, F, trace, it, converged, reason)
