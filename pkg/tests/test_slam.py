import dataclasses
import math

import numpy as np
import pytest
import scipy.sparse as sp

from helpers import fd_jacobian, random_problem, random_states, rel_err
from magslam.core_types import ImuRecord, MagRecord, NavState, NoiseParams, Quaternion
from magslam.kernels import FAMILIES, Hyperparams, Kernel
from magslam.simulator import (
    ScenarioConfig,
    SolverSetup,
    build_scenario,
    circular_poses,
    imu_from_poses,
    sample_field,
    scenario_problem,
)
from magslam.slam import (
    HyperMode,
    OdometryNoise,
    Problem,
    SolverDivergedError,
    SolverOptions,
    StatePrior,
    ZeroPositionPrior,
    align_epochs,
    build_residuals,
    levenberg_marquardt,
    solve,
)
from magslam.slam.report import evaluate, recover_biases
from magslam.slam.solver import continuation_schedule, initial_trajectory, objective
from magslam.strapdown import gravity_vector

H = Hyperparams(0.1, 0.1)


def perfect_full_problem(n=12):
    P, Q = circular_poses(0.5, n, 8)
    g = gravity_vector()
    recs, truth = imu_from_poses(P, Q, 0.1, gravity=g)
    field = sample_field(P, Kernel("se", H), 0)
    mag = [MagRecord(s.t, s.q.conjugate().rotate(f), 1e-3) for s, f in zip(truth, field)]
    prob = Problem(recs, mag, truth[0], HyperMode(H), noise=NoiseParams(1e-5, 1e-4, g))
    return prob, truth, field


# -- residual blocks


def test_perfect_data_zeroes_model_residuals():
    prob, truth, field = perfect_full_problem()
    rs = build_residuals(prob, truth, H, field=field)
    for name in ("prior", "odometry", "bias_walk", "mag"):
        assert np.max(np.abs(rs.block(name))) <= 1e-10, name


def test_zero_field_zeroes_gp_block():
    prob, truth, _ = perfect_full_problem()
    rs = build_residuals(prob, truth, H, field=np.zeros((len(prob.mag), 3)))
    np.testing.assert_array_equal(rs.block("gp"), 0.0)


def test_dimension_mismatch_names_block():
    prob, truth, field = perfect_full_problem()
    with pytest.raises(ValueError, match="state"):
        build_residuals(prob, truth[:-1], H)
    with pytest.raises(ValueError, match="field"):
        build_residuals(prob, truth, H, field=field[:-1])


@pytest.mark.parametrize("planar", [True, False])
@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("explicit", [False, True])
def test_jacobian_matches_finite_differences(planar, family, explicit):
    rng = np.random.default_rng(hash((planar, family, explicit)) % 2**32)
    for _ in range(3):
        prob = random_problem(rng, planar=planar, family=family, zero_position=True)
        states = random_states(rng, prob)
        field = rng.normal(0, 0.1, (len(prob.mag), 3)) if explicit else None
        rs = build_residuals(prob, states, prob.hyper_mode.hyper, field=field)
        J, g = fd_jacobian(prob, states, prob.hyper_mode.hyper, field)
        assert rel_err(rs.J.toarray(), J) <= 1e-5
        assert rel_err(rs.logdet_grad, g) <= 1e-5


def test_jacobian_is_sparse_outside_gp_block():
    rng = np.random.default_rng(2)
    prob = random_problem(rng, n_epochs=8)
    rs = build_residuals(prob, random_states(rng, prob), H)
    assert sp.issparse(rs.J)
    odo = rs.J[rs.blocks["odometry"]]
    # each odometry row touches two consecutive epochs at most
    assert odo.nnz <= odo.shape[0] * 30


def test_eliminated_field_equals_explicit_minimum():
    # minimizing the explicit objective over the field values gives the eliminated one
    rng = np.random.default_rng(4)
    prob = random_problem(rng, planar=True)
    states = random_states(rng, prob)
    elim = build_residuals(prob, states, H)
    X = np.array([states[e].p for e in prob.mag_epochs])
    Y = np.array([m.y for m in prob.mag])
    from magslam.kernels import cov_matrix

    K = cov_matrix(X, X, Kernel("se", H))
    C = np.diag([m.sigma**2 for m in prob.mag])
    m_star = K @ np.linalg.solve(K + C, Y)
    expl = build_residuals(prob, states, H, field=m_star)
    quad_e = float(elim.block("gp") @ elim.block("gp"))
    quad_x = float(expl.block("gp") @ expl.block("gp") + expl.block("mag") @ expl.block("mag"))
    assert quad_x == pytest.approx(quad_e, rel=1e-6)


# -- problem


def test_mag_alignment_rule():
    assert align_epochs([0.0, 0.1, 0.2], [0.1, 0.1], [0.04, 0.16, 0.26, 0.31]) == [0, 2, -1, -1]
    recs = [ImuRecord(0.1 * (k + 1), Quaternion.identity(), (0, 0, 0), 0.1) for k in range(3)]
    with pytest.raises(ValueError, match="magnetometer record 0"):
        Problem(recs, [MagRecord(1.0, (0, 0, 0), 0.1)], NavState(0.0), HyperMode(H))


# -- solver


def test_zero_noise_planar_scenario_is_exact():
    scn = build_scenario(ScenarioConfig(odom_sigma=0.0, odom_bias_x=0.0, odom_bias_y=0.0, mag_noise=0.0))
    sol = solve(scenario_problem(scn))
    assert evaluate(sol, scn.truth_positions)["rmse"] <= 1e-6


def test_default_scenario_improves():
    scn = build_scenario(ScenarioConfig(seed=1))
    sol = solve(scenario_problem(scn))
    assert evaluate(sol, scn.truth_positions)["rmse"] <= 0.01
    assert evaluate(sol.initial_states, scn.truth_positions)["rmse"] > 0.05


def test_cost_trace_is_non_increasing():
    scn = build_scenario(ScenarioConfig(seed=2, sigma_f=1.0))
    sol = solve(scenario_problem(scn), SolverOptions(max_iterations=300))
    assert np.all(np.diff(sol.cost_trace) <= 0)
    assert sol.iterations <= 300


def test_cost_is_translation_invariant():
    scn = build_scenario(ScenarioConfig(seed=3))
    prob = scenario_problem(scn)
    sol = solve(prob)
    shift = np.array([1.0, 0.0, 0.0])
    moved = [s.replace(p=s.p + shift) for s in sol.states]
    prob2 = dataclasses.replace(prob, initial_state=prob.initial_state.replace(p=prob.initial_state.p + shift))
    assert objective(prob2, moved, H) == pytest.approx(objective(prob, sol.states, H), abs=1e-8)


def test_estimated_and_fixed_hypers_agree():
    fixed, est = [], []
    for s in range(10):
        scn = build_scenario(ScenarioConfig(seed=s))
        fixed.append(evaluate(solve(scenario_problem(scn)), scn.truth_positions)["rmse"])
        setup = SolverSetup(sigma_f=0.05, length_scale=0.2, estimate_hypers=True)
        opts = SolverOptions(length_continuation=0.125)
        est.append(evaluate(solve(scenario_problem(scn, setup), opts), scn.truth_positions)["rmse"])
    a, b = np.median(fixed), np.median(est)
    assert max(a, b) <= 3 * min(a, b)


def test_length_scale_continuation_schedule():
    assert continuation_schedule(0.1, None) == []
    assert continuation_schedule(0.4, 0.125) == []
    assert continuation_schedule(0.005, 0.125) == pytest.approx([0.125, 0.0625, 0.03125, 0.015625, 0.0078125])


def test_zero_position_prior_pulls_in_the_start():
    scn = build_scenario(ScenarioConfig(seed=0))
    prob = dataclasses.replace(scenario_problem(scn), zero_position=ZeroPositionPrior(0.2, 1e-3))
    init = initial_trajectory(prob)
    assert max(np.linalg.norm(s.p) for s in init) < max(np.linalg.norm(p) for p in scn.truth_positions)


def test_full_mode_solve_reduces_error_and_finds_gyro_bias():
    T = 0.5
    P, Q = circular_poses(0.4, 32, 16)
    g = gravity_vector()
    recs, truth = imu_from_poses(P, Q, T, gravity=g)
    rng = np.random.default_rng(0)
    bg = np.array([0.0, 0.0, 0.002])
    noisy = [ImuRecord(r.t, r.dq * Quaternion.from_rotvec(bg * T), r.dv + rng.normal(0, 1e-4, 3), T) for r in recs]
    field = sample_field(P, Kernel("se", H), 1)
    mag = [MagRecord(s.t, s.q.conjugate().rotate(f) + rng.normal(0, 1e-3, 3), 1e-3) for s, f in zip(truth, field)]
    prob = Problem(noisy, mag, truth[0], HyperMode(H), odometry=OdometryNoise(1e-4, 2e-4, 2e-4),
                   noise=NoiseParams(1e-5, 1e-5, g), prior=StatePrior(1e-6, 1e-4, 1e-4, 1e-2, 1e-2))
    sol = solve(prob, SolverOptions(max_iterations=400))
    before, after = evaluate(sol.initial_states, truth)["rmse"], evaluate(sol, truth)["rmse"]
    assert after < 0.5 * before
    gz = [r for r in recover_biases(sol) if r["sensor"] == "gyro" and r["axis"] == "z"][0]
    assert gz["after"] == pytest.approx(0.002, rel=0.2)


def test_non_finite_cost_raises_with_last_iterate():
    with pytest.raises(Exception) as err:
        levenberg_marquardt(
            lambda x, jac: type("R", (), {"cost": math.nan})(), lambda x, d: x, np.zeros(2))
    assert hasattr(err.value, "last_x")


def test_solver_wraps_divergence():
    scn = build_scenario(ScenarioConfig(seed=0))
    prob = scenario_problem(scn)
    bad = [s.replace(p=(math.nan, 0.0, 0.0)) for s in initial_trajectory(prob)]
    with pytest.raises((SolverDivergedError, ValueError)):
        solve(prob, initial=bad)


def test_lm_solves_a_plain_least_squares_problem():
    # Rosenbrock as residuals
    class R:
        def __init__(self, x, jac):
            self.r = np.array([10 * (x[1] - x[0] ** 2), 1 - x[0]])
            self.J = sp.csr_matrix(np.array([[-20 * x[0], 10.0], [-1.0, 0.0]]))
            self.cost = float(self.r @ self.r)

        def gradient(self):
            return 2 * (self.J.T @ self.r)

    res = levenberg_marquardt(R, lambda x, d: x + d, np.array([-1.2, 1.0]), grad_tol=1e-12, rel_tol=0)
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-6)
    assert res.converged


# -- report


def test_evaluate_examples():
    P = np.random.default_rng(0).normal(size=(10, 3))
    assert evaluate(P, P) == {"rmse": 0.0, "max_error": 0.0}
    res = evaluate(P + [0.03, 0.04, 0.0], P)
    assert res["rmse"] == pytest.approx(0.05) and res["max_error"] == pytest.approx(0.05)
    Q = np.zeros((100, 3))
    E = Q.copy()
    E[7, 0] = 0.1
    res = evaluate(E, Q)
    assert res["rmse"] == pytest.approx(0.01) and res["max_error"] == pytest.approx(0.1)
    with pytest.raises(ValueError):
        evaluate(P[:5], P)


def test_bias_report_shape_and_zero_bias():
    scn = build_scenario(ScenarioConfig(odom_bias_x=0.0, odom_bias_y=0.0, seed=4))
    prob = scenario_problem(scn)
    rows = recover_biases(solve(prob))
    assert len(rows) == 6
    sigma = prob.prior.sigma_ba
    assert all(abs(r["after"]) <= 3 * sigma for r in rows)


def test_injected_bias_is_recovered():
    est = []
    for s in range(10):
        scn = build_scenario(ScenarioConfig(seed=s))
        rows = recover_biases(solve(scenario_problem(scn)))
        est.append([r["after"] for r in rows if r["sensor"] == "accel"][:2])
    np.testing.assert_allclose(np.median(est, axis=0), [0.005, 0.005], rtol=0.2)
