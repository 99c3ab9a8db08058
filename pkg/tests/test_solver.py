import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize as sp_minimize

from beltcodesign.model import TransmissionSpec
from beltcodesign.ocp import OcProblemSpec, Trajectory, build_nlp, initial_guess
from beltcodesign.solver import SimpleNlp, SolverConfig, box_qp, solve, solve_auglag, verify_by_rollout

G6 = TransmissionSpec([6, 3, 1, 1])


@pytest.fixture(scope="module")
def solved(model):
    out = {}
    for space in ("joint", "actuation"):
        spec = OcProblemSpec(space=space)
        nlp = build_nlp(model, G6, spec)
        out[space] = (nlp, solve(nlp, initial_guess(model, G6, spec, nlp)))
    return out


# --- toy problems with closed-form optima -----------------------------------


def test_equality_toy():
    # min |x|^2 s.t. x1 + x2 = 1  ->  (0.5, 0.5)
    nlp = SimpleNlp(
        lambda x: x @ x,
        lambda x: 2 * x,
        lambda x: x[0] + x[1] - 1,
        lambda x: [[1.0, 1.0]],
        [-np.inf, -np.inf],
        [np.inf, np.inf],
        hess=lambda x: 2 * np.eye(2),
    )
    res = solve(nlp, np.zeros(2))
    assert res.status == "converged"
    np.testing.assert_allclose(res.x, [0.5, 0.5], atol=1e-6)
    assert res.multipliers[0] == pytest.approx(-1.0, abs=1e-5)


def test_bound_toy():
    # min (x - 2)^2 s.t. x <= 1  ->  x = 1, no equality constraints
    nlp = SimpleNlp(
        lambda x: (x[0] - 2) ** 2,
        lambda x: [2 * (x[0] - 2)],
        lambda x: np.zeros(0),
        lambda x: np.zeros((0, 1)),
        [-np.inf],
        [1.0],
        hess=lambda x: [[2.0]],
    )
    res = solve(nlp, [0.0])
    assert res.status == "converged"
    assert res.x[0] == 1.0
    assert res.objective == pytest.approx(1.0)


def test_rosenbrock_on_circle_matches_scipy():
    # nonconvex objective on a nonlinear equality; oracle is scipy's SLSQP
    f = lambda x: (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2
    grad = lambda x: np.array([-2 * (1 - x[0]) - 400 * x[0] * (x[1] - x[0] ** 2), 200 * (x[1] - x[0] ** 2)])
    c = lambda x: x[0] ** 2 + x[1] ** 2 - 1.5
    hess = lambda x: [[2 - 400 * (x[1] - 3 * x[0] ** 2), -400 * x[0]], [-400 * x[0], 200.0]]
    nlp = SimpleNlp(f, grad, c, lambda x: [[2 * x[0], 2 * x[1]]], [-2, -2], [2, 2], hess=hess)
    res = solve(nlp, np.array([0.5, 0.5]), SolverConfig(max_inner_iters=500))
    ref = sp_minimize(f, [0.5, 0.5], jac=grad, constraints=[{"type": "eq", "fun": c}], bounds=[(-2, 2)] * 2, method="SLSQP", tol=1e-12)
    assert res.status == "converged"
    np.testing.assert_allclose(res.x, ref.x, atol=1e-4)


def test_inconsistent_constraints_reported_infeasible():
    # x = 0 and x = 1 cannot both hold
    nlp = SimpleNlp(
        lambda x: x @ x,
        lambda x: 2 * x,
        lambda x: np.array([x[0], x[0] - 1]),
        lambda x: [[1.0], [1.0]],
        [-np.inf],
        [np.inf],
    )
    res = solve(nlp, [0.3])
    assert res.status == "infeasible"
    assert res.constraint_violation == pytest.approx(0.5, abs=1e-3)


def test_numerical_failure_is_reported():
    nlp = SimpleNlp(
        lambda x: np.nan,
        lambda x: [np.nan],
        lambda x: x,
        lambda x: [[1.0]],
        [-1],
        [1],
    )
    res = solve(nlp, [0.5])
    assert res.status == "numerical_failure"


@pytest.mark.parametrize(
    "kw",
    [{"tol_constraint": 0}, {"penalty_growth": 1.0}, {"max_outer_iters": 0}, {"rollout_factor": 0}, {"rollout_factor": 11}],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SolverConfig(**kw)


def test_unknown_backend_rejected():
    nlp = SimpleNlp(lambda x: 0.0, lambda x: [0.0], lambda x: x, lambda x: [[1.0]], [-1], [1])
    with pytest.raises(ValueError, match="unknown solver"):
        solve(nlp, [0.0], method="ipopt")


# --- box-constrained QP subproblem -----------------------------------------


def test_box_qp_unconstrained_is_newton_step():
    B = sp.csc_matrix([[4.0, 1.0], [1.0, 3.0]])
    g = np.array([1.0, 2.0])
    d = box_qp(B, g, np.full(2, -10.0), np.full(2, 10.0))
    np.testing.assert_allclose(d, -np.linalg.solve(B.toarray(), g), atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_box_qp_satisfies_kkt(seed):
    rng = np.random.default_rng(seed)
    n = 6
    A = rng.normal(size=(n, n))
    B = A @ A.T + 0.1 * np.eye(n)
    g = rng.normal(size=n) * 3
    lo, hi = -rng.uniform(0, 1, n), rng.uniform(0, 1, n)
    d = box_qp(sp.csc_matrix(B), g, lo, hi)
    assert np.all(d >= lo) and np.all(d <= hi)
    grad = g + B @ d
    # KKT for a box: zero gradient off the bounds, outward-pointing on them
    free = (d > lo + 1e-9) & (d < hi - 1e-9)
    assert np.all(np.abs(grad[free]) < 1e-6)
    assert np.all(grad[d <= lo + 1e-9] > -1e-6)
    assert np.all(grad[d >= hi - 1e-9] < 1e-6)


def test_box_qp_respects_fixed_variables():
    B = sp.identity(3, format="csc")
    d = box_qp(B, np.ones(3), -np.ones(3), np.ones(3), fixed=np.array([False, True, False]))
    np.testing.assert_allclose(d, [-1.0, 0.0, -1.0])


# --- the motion problem -----------------------------------------------------


@pytest.mark.parametrize("space", ["joint", "actuation"])
def test_default_motion_converges(model, solved, space):
    nlp, res = solved[space]
    assert res.status == "converged"
    X, U = res.trajectory.states, res.trajectory.controls
    assert np.max(np.abs(X[-1] - nlp.x_final)) < 1e-6
    assert np.max(np.abs(X[0] - nlp.x_init)) < 1e-6
    assert np.all(U >= nlp.u_lo - 1e-8) and np.all(U <= nlp.u_hi + 1e-8)
    if space == "actuation":
        assert np.max(np.abs(U)) <= 1.7 + 1e-8
    rep = verify_by_rollout(model, G6, nlp.spec, res)
    assert rep.max_state_deviation < 1e-6
    assert rep.terminal_error < 1e-5


def test_rollout_detects_perturbed_controls(model, solved):
    nlp, res = solved["actuation"]
    traj = res.trajectory
    bumped = Trajectory(traj.space, traj.times, traj.states, traj.controls + 0.1, traj.spec)
    assert verify_by_rollout(model, G6, nlp.spec, bumped).max_state_deviation > 1e-3


def test_joint_solution_replays_in_actuation_space(model, solved):
    nlp, res = solved["joint"]
    traj = res.trajectory
    tau_u = traj.controls @ G6.G_inv
    spec = nlp.spec.with_space("actuation")
    joint_states = verify_by_rollout(model, G6, nlp.spec, traj).states
    replay = Trajectory("actuation", traj.times, joint_states, tau_u, spec)
    assert verify_by_rollout(model, G6, spec, replay).max_state_deviation < 1e-8


def test_merit_decreases_within_each_outer_iteration(solved):
    for _, res in solved.values():
        for hist in res.merit_history:
            assert np.all(np.diff(hist) <= 1e-12 * (1 + np.abs(np.asarray(hist[:-1]))))


def test_solve_is_deterministic(model, solved):
    nlp, res = solved["actuation"]
    again = solve(nlp, initial_guess(model, G6, nlp.spec, nlp))
    np.testing.assert_array_equal(again.x, res.x)
    assert again.iterations == res.iterations


def test_heavy_payload_in_joint_space_is_infeasible(model):
    m = model.with_payload(1.0)
    spec = OcProblemSpec(space="joint")
    nlp = build_nlp(m, G6, spec)
    res = solve(nlp, initial_guess(m, G6, spec, nlp))
    assert res.status == "infeasible"
    assert res.constraint_violation > 1e-3


def test_iteration_budget_reported(model):
    spec = OcProblemSpec()
    nlp = build_nlp(model, G6, spec)
    res = solve_auglag(nlp, initial_guess(model, G6, spec, nlp), SolverConfig(max_outer_iters=2, max_inner_iters=2))
    assert res.status == "max_iters"
    assert res.message
