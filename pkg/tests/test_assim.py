import math

import numpy as np
import pytest
from scipy.optimize import minimize as scipy_minimize

from hydrocal import assim


def problem_for(evaluator, x0, y, bounds, b_diag=None, r_diag=None):
    x0 = np.asarray(x0, dtype=float)
    y = np.asarray(y, dtype=float)
    return assim.CalibrationProblem(
        x0=x0,
        b_diag=np.full(x0.size, 1e12) if b_diag is None else np.asarray(b_diag, float),
        y=y,
        r_diag=np.full(y.size, 0.5) if r_diag is None else np.asarray(r_diag, float),
        bounds=np.asarray(bounds, dtype=float),
        evaluator=evaluator,
    )


# -- covariances -----------------------------------------------------------------


def test_covariance_rules():
    r, b = assim.build_covariances(np.array([2.0, 4.0]), np.array([1.0]))
    assert r.tolist() == [0.2, 0.4]
    x0 = np.array([73.76, 83.62, 83.62, 0.9729, 0.8611])
    _, b = assim.build_covariances(np.array([1.0]), x0)
    assert b == pytest.approx(10.0 * x0, rel=1e-12)


def test_covariance_floor_guards():
    r, b = assim.build_covariances(np.array([0.0, -2.0]), np.array([0.0]))
    assert r.tolist() == [1e-6, 0.2]  # |.| and floor
    assert b.tolist() == [1e-6]


# -- cost ------------------------------------------------------------------------


def scalar_identity_problem():
    return problem_for(
        lambda x: np.array([x[0]]),
        x0=[0.0],
        y=[1.0],
        bounds=[[-10.0, 10.0]],
        b_diag=[1.0],
        r_diag=[1.0],
    )


def test_cost_hand_values():
    prob = scalar_identity_problem()
    assert assim.cost(prob, np.array([0.0])) == assim.CostParts(0.5, 0.0, 0.5)
    parts = assim.cost(prob, np.array([0.5]))
    assert (parts.j, parts.j_b, parts.j_obs) == (0.25, 0.125, 0.125)


def test_cost_zero_at_consistent_point():
    prob = problem_for(
        lambda x: x.copy(), x0=[1.0, 2.0], y=[1.0, 2.0], bounds=[[-5, 5]] * 2
    )
    assert assim.cost(prob, prob.x0).j == 0.0


def test_cost_decomposition_exact():
    rng = np.random.default_rng(0)
    prob = problem_for(
        lambda x: np.array([x[0] ** 2, x[1]]),
        x0=[1.0, 1.0],
        y=[0.5, 0.2],
        bounds=[[-5, 5]] * 2,
        b_diag=[2.0, 3.0],
        r_diag=[0.3, 0.7],
    )
    for _ in range(20):
        x = rng.uniform(-5, 5, 2)
        parts = assim.cost(prob, x)
        assert parts.j == parts.j_b + parts.j_obs  # exact by construction


def test_cost_bounds_and_evaluator_errors():
    prob = scalar_identity_problem()
    with pytest.raises(ValueError):
        assim.cost(prob, np.array([11.0]))

    def broken(x):
        raise RuntimeError("simulation exploded")

    bad = problem_for(broken, x0=[0.0], y=[1.0], bounds=[[-1, 1]])
    with pytest.raises(assim.EvaluatorError) as err:
        assim.cost(bad, np.array([0.5]))
    assert err.value.x is not None


# -- finite differences --------------------------------------------------------------


def test_forward_fd_exact_on_linear_cost():
    # G(X) = sqrt(2 (a.X + c)) with R = 1 makes J_obs = a.X + c, linear.
    a = np.array([2.0, -3.0])
    c = 20.0
    prob = problem_for(
        lambda x: np.array([-math.sqrt(2.0 * (a @ x + c))]),
        x0=[0.0, 0.0],
        y=[0.0],
        bounds=[[-2.0, 2.0]] * 2,
        b_diag=[1e30, 1e30],
        r_diag=[1.0],
    )
    grad = assim.fd_gradient(prob, np.array([0.3, -0.4]), 1e-4, space="raw")
    assert grad == pytest.approx(a, rel=1e-6)


def test_central_fd_on_quadratic():
    prob = scalar_identity_problem()  # J = (x-1)^2/2 + x^2/2 -> J'(1) = 1
    g = assim.fd_gradient(prob, np.array([1.0]), 1e-4, scheme="central", space="raw")
    assert g[0] == pytest.approx(1.0, abs=1e-8)


def test_gradient_near_zero_at_consistent_minimum():
    prob = problem_for(
        lambda x: x.copy(), x0=[1.0, -2.0], y=[1.0, -2.0], bounds=[[-5, 5]] * 2,
        b_diag=[1.0, 1.0], r_diag=[1.0, 1.0],
    )
    g = assim.fd_gradient(prob, prob.x0, 1e-4)
    assert np.abs(g).max() < 1e-2  # forward-difference bias only


def test_fd_one_sided_fallback_at_bound():
    prob = scalar_identity_problem()
    g = assim.fd_gradient(prob, np.array([10.0]), 1e-4)  # at the upper bound
    assert g[0] == pytest.approx(2.0 * 10.0 - 1.0, rel=1e-2)


def test_fd_reports_failing_component():
    def fragile(x):
        if x[1] > 0.51:
            raise RuntimeError("wet cell went dry")
        return np.array([x[0] + x[1]])

    prob = problem_for(fragile, x0=[0.0, 0.5], y=[0.5], bounds=[[-1, 1]] * 2)
    with pytest.raises(assim.EvaluatorError) as err:
        assim.fd_gradient(prob, np.array([0.0, 0.5099]), 1e-2, space="raw")
    assert err.value.component == 1


def test_fd_validation():
    prob = scalar_identity_problem()
    with pytest.raises(ValueError):
        assim.fd_gradient(prob, prob.x0, scheme="weird")
    with pytest.raises(ValueError):
        assim.fd_gradient(prob, prob.x0, space="hyperbolic")


# -- optimizer -------------------------------------------------------------------------


def quadratic_problem(bounds):
    return problem_for(
        lambda x: np.array([x[0]]),
        x0=[0.0],
        y=[3.0],
        bounds=[bounds],
        r_diag=[0.5],
    )


def test_bfgs_interior_quadratic():
    res = assim.bfgs_minimize(
        quadratic_problem([0.0, 10.0]), max_iter=100, grad_tol=1e-9, fd_scheme="central"
    )
    assert res.x_map[0] == pytest.approx(3.0, abs=1e-6)
    assert res.status == "converged"


def test_bfgs_respects_active_bound():
    res = assim.bfgs_minimize(quadratic_problem([0.0, 2.0]), max_iter=100, grad_tol=1e-9)
    assert res.x_map[0] == 2.0
    assert res.trace.rows[-1].active_bounds == (0,)


def test_bfgs_rosenbrock_matches_reference_optimizer():
    def forward(x):
        return np.array([1.0 - x[0], 10.0 * (x[1] - x[0] ** 2)])

    prob = problem_for(
        forward, x0=[-1.2, 1.0], y=[0.0, 0.0], bounds=[[-5.0, 5.0]] * 2,
        r_diag=[0.5, 0.5],
    )
    res = assim.bfgs_minimize(
        prob, max_iter=200, grad_tol=1e-7, fd_scheme="central", fd_space="raw"
    )
    assert res.x_map == pytest.approx([1.0, 1.0], abs=1e-4)
    assert res.n_iterations <= 200

    def rosen(x):
        return (1.0 - x[0]) ** 2 + 100.0 * (x[1] - x[0] ** 2) ** 2

    reference = scipy_minimize(
        rosen, [-1.2, 1.0], method="L-BFGS-B", bounds=[(-5, 5)] * 2
    )
    assert res.x_map == pytest.approx(reference.x, abs=1e-3)


def test_bfgs_linear_gaussian_posterior():
    rng = np.random.default_rng(3)
    q, m = 4, 15
    a = rng.normal(size=(m, q))
    b = rng.normal(size=m)
    y = a @ rng.uniform(-1, 1, q) + b + rng.normal(scale=0.1, size=m)
    x0 = np.zeros(q)
    r_diag, b_diag = assim.build_covariances(y, x0)
    prob = assim.CalibrationProblem(
        x0=x0,
        b_diag=b_diag,
        y=y,
        r_diag=r_diag,
        bounds=np.array([[-50.0, 50.0]] * q),
        evaluator=lambda x: a @ x + b,
    )

    def grad(x):
        return (x - x0) / b_diag - a.T @ ((y - (a @ x + b)) / r_diag)

    res = assim.bfgs_minimize(prob, max_iter=200, grad_tol=1e-9, gradient=grad)
    b_inv = np.diag(1.0 / b_diag)
    r_inv = np.diag(1.0 / r_diag)
    closed_form = x0 + np.linalg.solve(
        b_inv + a.T @ r_inv @ a, a.T @ r_inv @ (y - a @ x0 - b)
    )
    assert np.abs(res.x_map - closed_form).max() < 1e-6


def test_trace_invariants():
    def forward(x):
        return np.array([math.sin(x[0]) + x[1] ** 2, x[0] * x[1]])

    prob = problem_for(
        forward, x0=[0.5, 0.5], y=[1.2, 0.3], bounds=[[-2.0, 2.0]] * 2,
        b_diag=[4.0, 4.0], r_diag=[0.2, 0.2],
    )
    res = assim.bfgs_minimize(prob, max_iter=60, grad_tol=1e-8)
    rows = res.trace.rows
    assert len(rows) >= 2
    for row in rows:
        assert row.j == row.j_b + row.j_obs
        assert np.all(row.x >= -2.0) and np.all(row.x <= 2.0)
    values = [row.j for row in rows]
    assert all(later <= earlier for earlier, later in zip(values, values[1:]))
    arrays = res.trace.as_arrays()
    assert arrays["x"].shape == (len(rows), 2)


def test_bfgs_converges_instantly_at_minimum():
    prob = problem_for(
        lambda x: x.copy(), x0=[1.0], y=[1.0], bounds=[[0.0, 2.0]],
        b_diag=[1.0], r_diag=[1.0],
    )
    res = assim.bfgs_minimize(prob, max_iter=10, grad_tol=1e-3)
    assert res.status == "converged"
    assert res.n_iterations <= 2


# -- observation matching -----------------------------------------------------------


def test_match_observation_times_exact_and_nearest():
    records = np.array([60.0, 120.0, 180.0])
    idx = assim.match_observation_times(records, [60.0, 185.0, 95.0], 60.0)
    assert idx.tolist() == [0, 2, 1]


def test_match_observation_times_strict():
    records = np.array([60.0, 120.0])
    with pytest.raises(assim.ObservationGridError):
        assim.match_observation_times(records, [200.0], 60.0)
    with pytest.raises(assim.ObservationGridError):
        assim.match_observation_times(records, [10.0], 60.0)


# -- calibrate wrapper ---------------------------------------------------------------


def test_calibrate_wrapper_linear_case():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(30, 3))
    x_true = np.array([0.5, -0.4, 0.9])
    y = a @ x_true + rng.normal(scale=0.02, size=30) + 5.0
    report = assim.calibrate(
        lambda x: a @ x + 5.0,
        y,
        x0=np.array([0.1, 0.1, 0.1]),
        bounds=np.array([[-2.0, 2.0]] * 3),
        parameter_names=("p1", "p2", "p3"),
        max_iter=100,
        grad_tol=1e-8,
        fd_scheme="central",
    )
    assert report.x_map == pytest.approx(x_true, abs=0.05)
    assert report.parameter_names == ("p1", "p2", "p3")
    assert report.g_x0.shape == y.shape
    assert np.all(report.r_diag >= 1e-6)
