"""MAP estimation of trajectory, biases, hyperparameters and field map."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..core_types import NavState
from ..gpr import MapEstimate, fit_hypers, predict_many
from ..kernels import Hyperparams
from ..strapdown import StrapdownConfig, dead_reckon
from .lm import LMResult, NonFiniteCostError, levenberg_marquardt
from .problem import Problem
from .residuals import (
    Layout,
    build_residuals,
    mag_local_values,
    mag_locations,
    mag_noise_var,
    retract,
    solver_kernel,
)

log = logging.getLogger(__name__)


class SolverDivergedError(RuntimeError):
    """The objective became non-finite; ``last_states`` is the last finite iterate."""

    def __init__(self, msg: str, last_states=None):
        super().__init__(msg)
        self.last_states = last_states


@dataclass(frozen=True)
class SolverOptions:
    max_iterations: int = 2000
    rel_tol: float = 1e-10
    grad_tol: float = 1e-8
    max_outer: int = 20
    outer_tol: float = 1e-9
    # Graduated length scale: solve first with this l, halving down to the
    # assumed value.  Widens the basin when the assumed l is much shorter
    # than the initial drift.  None disables it.
    length_continuation: Optional[float] = None


def continuation_schedule(length_scale: float, start: Optional[float]) -> list[float]:
    """Length scales to solve with before the final one, longest first."""
    if start is None or not start > length_scale:
        return []
    out = []
    l = start
    while l > length_scale * (1 + 1e-9):
        out.append(l)
        l /= 2.0
    return out


@dataclass(frozen=True)
class Solution:
    states: list
    map: Optional[MapEstimate]
    hypers: Hyperparams
    cost_trace: list
    converged: bool
    iterations: int
    initial_states: list = field(default_factory=list)
    field: Optional[np.ndarray] = None
    reason: str = ""

    @property
    def positions(self) -> np.ndarray:
        return np.array([s.p for s in self.states])

    @property
    def final_cost(self) -> float:
        return float(self.cost_trace[-1])


def initial_trajectory(problem: Problem) -> list[NavState]:
    """Dead-reckoned start, optionally pulled in by the zero-position prior."""
    s0 = problem.initial_state
    if problem.planar:
        states = [s0]
        p = s0.p.copy()
        for rec in problem.imu:
            p = p.copy()
            p[:2] += rec.dv[:2] - s0.b_accel[:2]
            states.append(s0.replace(t=rec.t, p=p))
    else:
        states = dead_reckon(problem.imu, StrapdownConfig(problem.noise.gravity, s0))
        states = [s.replace(t=t) for s, t in zip(states, problem.epoch_times())]
    if problem.zero_position is not None:
        layout = Layout(problem.n_epochs, problem.planar)
        res = levenberg_marquardt(
            lambda x, jac: build_residuals(problem, x, problem.hyper_mode.hyper, with_jacobian=jac, include_map=False),
            lambda x, d: retract(x, d, layout),
            states,
            max_iter=200,
        )
        states = res.x
    return states


def _run_lm(problem: Problem, states, hyper: Hyperparams, opts: SolverOptions, max_iter: int) -> LMResult:
    layout = Layout(problem.n_epochs, problem.planar)
    try:
        return levenberg_marquardt(
            lambda x, jac: build_residuals(problem, x, hyper, with_jacobian=jac),
            lambda x, d: retract(x, d, layout),
            states,
            max_iter=max_iter,
            rel_tol=opts.rel_tol,
            grad_tol=opts.grad_tol,
        )
    except NonFiniteCostError as exc:
        raise SolverDivergedError(str(exc), exc.last_x) from exc


def objective(problem: Problem, states, hyper: Hyperparams) -> float:
    return build_residuals(problem, states, hyper, with_jacobian=False).cost


def solve(problem: Problem, options: Optional[SolverOptions] = None,
          initial: Optional[Sequence[NavState]] = None) -> Solution:
    opts = options or SolverOptions()
    init = list(initial) if initial is not None else initial_trajectory(problem)
    hyper = problem.hyper_mode.hyper
    states = init
    trace: list[float] = []
    iterations = 0
    for l in continuation_schedule(hyper.length_scale, opts.length_continuation):
        res = _run_lm(problem, states, Hyperparams(hyper.sigma_f, l), opts, max(1, opts.max_iterations - iterations))
        states = res.x
        iterations += res.iterations
    converged = False
    reason = ""
    n_outer = opts.max_outer if problem.hyper_mode.estimate else 1
    for outer in range(n_outer):
        res = _run_lm(problem, states, hyper, opts, max(1, opts.max_iterations - iterations))
        states = res.x
        iterations += res.iterations
        trace.extend(res.cost_trace if not trace else res.cost_trace[1:])
        converged, reason = res.converged, res.reason
        if not problem.hyper_mode.estimate or len(problem.mag) < 5:
            break
        fit = fit_hypers(
            mag_locations(problem, states), mag_local_values(problem, states), mag_noise_var(problem),
            hyper, family=problem.kernel_family,
        )
        F_old = trace[-1]
        F_new = objective(problem, states, fit.hyper)
        if not F_new < F_old:
            break
        hyper = fit.hyper
        trace.append(F_new)
        log.debug("outer %d: sigma_f=%.4g l=%.4g cost %.6g", outer, hyper.sigma_f, hyper.length_scale, F_new)
        if F_old - F_new < opts.outer_tol * max(1.0, abs(F_new)) or iterations >= opts.max_iterations:
            break
    if not math.isfinite(trace[-1]):
        raise SolverDivergedError("final cost is not finite", states)
    return Solution(
        states=list(states),
        map=build_map(problem, states, hyper),
        hypers=hyper,
        cost_trace=trace,
        converged=converged,
        iterations=iterations,
        initial_states=list(init),
        field=None if not problem.mag else _posterior_field(problem, states, hyper),
        reason=reason,
    )


def build_map(problem: Problem, states, hyper: Hyperparams) -> Optional[MapEstimate]:
    if not problem.mag:
        return None
    return MapEstimate(
        mag_locations(problem, states), mag_local_values(problem, states),
        solver_kernel(problem, hyper), mag_noise_var(problem),
    )


def _posterior_field(problem: Problem, states, hyper: Hyperparams) -> np.ndarray:
    m = build_map(problem, states, hyper)
    mean, _ = predict_many(m, m.train_locations)
    return mean.reshape(-1, 3)
