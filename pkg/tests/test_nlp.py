import numpy as np
import pytest

from tdopf.nlp import NlpProblem, SolveOptions, check_derivatives, solve


def quad_bound_problem():
    # min x^2 s.t. x >= 1
    return NlpProblem(
        dimension=1,
        objective=lambda x: x[0] ** 2,
        gradient=lambda x: np.array([2 * x[0]]),
        inequalities=lambda x: np.array([x[0] - 1.0]),
        ineq_jacobian=lambda x: np.array([[1.0]]),
        lower=np.array([-np.inf]), upper=np.array([np.inf]),
        initial_point=np.array([3.0]))


def circle_problem():
    # min x+y s.t. x^2+y^2 = 2
    return NlpProblem(
        dimension=2,
        objective=lambda x: x[0] + x[1],
        gradient=lambda x: np.array([1.0, 1.0]),
        equalities=lambda x: np.array([x[0] ** 2 + x[1] ** 2 - 2.0]),
        eq_jacobian=lambda x: np.array([[2 * x[0], 2 * x[1]]]),
        lower=np.full(2, -np.inf), upper=np.full(2, np.inf),
        initial_point=np.array([0.5, -0.2]))


def rosenbrock_disk_problem():
    # min (1-x)^2 + 100(y-x^2)^2 s.t. x^2+y^2 <= 1
    return NlpProblem(
        dimension=2,
        objective=lambda x: (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2,
        gradient=lambda x: np.array([-2 * (1 - x[0]) - 400 * x[0] * (x[1] - x[0] ** 2),
                                     200 * (x[1] - x[0] ** 2)]),
        inequalities=lambda x: np.array([1.0 - x[0] ** 2 - x[1] ** 2]),
        ineq_jacobian=lambda x: np.array([[-2 * x[0], -2 * x[1]]]),
        lower=np.full(2, -np.inf), upper=np.full(2, np.inf),
        initial_point=np.array([0.0, 0.0]))


def test_quadratic_with_inequality_kkt_by_hand():
    sol = solve(quad_bound_problem())
    assert sol.status == "optimal"
    assert sol.x[0] == pytest.approx(1.0, abs=1e-5)
    assert sol.objective_value == pytest.approx(1.0, abs=1e-5)
    assert sol.ineq_multipliers[0] == pytest.approx(2.0, abs=1e-4)


def test_equality_constrained_lagrange_by_hand():
    sol = solve(circle_problem())
    assert sol.status == "optimal"
    assert sol.x == pytest.approx(np.array([-1.0, -1.0]), abs=1e-6)
    assert sol.objective_value == pytest.approx(-2.0, abs=1e-6)


def test_rosenbrock_on_disk_matches_grid_oracle():
    sol = solve(rosenbrock_disk_problem())
    assert sol.status == "optimal"
    # brute-force oracle: dense grid over the disk at resolution 1e-3
    t = np.arange(-1.0, 1.0 + 1e-3, 1e-3)
    gx, gy = np.meshgrid(t, t)
    f = (1 - gx) ** 2 + 100 * (gy - gx ** 2) ** 2
    f[gx ** 2 + gy ** 2 > 1.0] = np.inf
    assert sol.objective_value == pytest.approx(float(f.min()), abs=1e-3)


def test_optimal_status_implies_refeasibility():
    # re-check constraints at x independently of solver internals
    for prob in (quad_bound_problem(), circle_problem(), rosenbrock_disk_problem()):
        sol = solve(prob)
        assert sol.status == "optimal"
        assert sol.kkt_residual <= 1e-6
        if prob.equalities is not None:
            assert np.max(np.abs(prob.equalities(sol.x))) <= 1e-6
        if prob.inequalities is not None:
            assert np.min(prob.inequalities(sol.x)) >= -1e-6
            assert np.min(sol.ineq_multipliers) >= -1e-6


def test_local_optimality_spot_check():
    prob = rosenbrock_disk_problem()
    sol = solve(prob)
    rng = np.random.default_rng(0)
    f_star = sol.objective_value
    improved = 0
    for _ in range(1000):
        d = rng.standard_normal(2)
        d *= 1e-3 * rng.random() / np.linalg.norm(d)
        x = sol.x + d
        if prob.inequalities(x)[0] >= -1e-6 and prob.objective(x) < f_star - 1e-6:
            improved += 1
    assert improved == 0


def test_fixed_variables_keep_dimension():
    prob = NlpProblem(
        dimension=2,
        objective=lambda x: (x[0] - 1) ** 2 + (x[1] - 2) ** 2,
        gradient=lambda x: np.array([2 * (x[0] - 1), 2 * (x[1] - 2)]),
        lower=np.array([0.5, -np.inf]), upper=np.array([0.5, np.inf]),
        initial_point=np.array([0.0, 0.0]))
    sol = solve(prob)
    assert sol.status == "optimal"
    assert sol.x.shape == (2,)
    assert sol.x[0] == 0.5
    assert sol.x[1] == pytest.approx(2.0, abs=1e-6)


def test_infeasible_problem_detected():
    # x >= 2 and x <= 1 cannot hold together
    prob = NlpProblem(
        dimension=1,
        objective=lambda x: x[0] ** 2,
        gradient=lambda x: np.array([2 * x[0]]),
        inequalities=lambda x: np.array([x[0] - 2.0]),
        ineq_jacobian=lambda x: np.array([[1.0]]),
        lower=np.array([-np.inf]), upper=np.array([1.0]),
        initial_point=np.array([0.5]))
    sol = solve(prob)
    assert sol.status in ("infeasible", "iteration_limit")
    assert sol.status == "infeasible"


def test_iteration_limit_reported():
    prob = rosenbrock_disk_problem()
    sol = solve(prob, SolveOptions(max_iter=3))
    assert sol.status == "iteration_limit"
    assert sol.iterations == 3


def test_deterministic_iterate_sequence():
    a = solve(rosenbrock_disk_problem())
    b = solve(rosenbrock_disk_problem())
    assert len(a.trace) == len(b.trace)
    for ra, rb in zip(a.trace, b.trace):
        assert ra == rb  # bitwise-identical floats
    assert np.all(a.x == b.x)


def test_trace_file_dump(tmp_path):
    path = tmp_path / "trace.csv"
    solve(quad_bound_problem(), SolveOptions(trace_file=str(path)))
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration,mu,objective,feasibility,optimality"
    assert len(lines) > 2


# ---------------------------------------------------------------------------
# derivative checking
# ---------------------------------------------------------------------------

def test_check_derivatives_quadratic_exact():
    prob = NlpProblem(
        dimension=2,
        objective=lambda x: x[0] ** 2 + 3 * x[0] * x[1] + 2 * x[1] ** 2,
        gradient=lambda x: np.array([2 * x[0] + 3 * x[1], 3 * x[0] + 4 * x[1]]),
        lower=np.full(2, -np.inf), upper=np.full(2, np.inf),
        initial_point=np.zeros(2))
    report = check_derivatives(prob, np.array([0.3, -0.7]))
    assert report.objective_error <= 1e-7


def test_check_derivatives_flags_corrupted_jacobian():
    prob = NlpProblem(
        dimension=2,
        objective=lambda x: x[0] + x[1],
        gradient=lambda x: np.array([1.0, 1.0]),
        equalities=lambda x: np.array([x[0] * x[1] - 1.0]),
        eq_jacobian=lambda x: np.array([[x[1] + 0.1, x[0]]]),  # corrupted entry
        lower=np.full(2, -np.inf), upper=np.full(2, np.inf),
        initial_point=np.zeros(2))
    report = check_derivatives(prob, np.array([0.4, 0.6]))
    assert report.equality_error >= 1e-2
    assert report.worst_entries["equality"] == (0, 0)
