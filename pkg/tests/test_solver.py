import numpy as np
import pytest
from pydantic import ValidationError
from scipy.optimize import lsq_linear

from coop_mpc.solver import (
    NlpSpec,
    NonFiniteObjective,
    QpInfeasible,
    QpSpec,
    SolverConfig,
    finite_diff_gradient,
    solve_nlp,
    solve_qp,
)


def quadratic(H, f):
    H = np.asarray(H, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)

    def objective(z):
        return 0.5 * float(z @ H @ z) + float(f @ z), H @ z + f

    return objective


def test_box_qp_matches_bounded_least_squares():
    rng = np.random.default_rng(0)
    for _ in range(10):
        C = rng.normal(size=(5, 3))
        d = rng.normal(size=5)
        lb, ub = -0.3 * np.ones(3), 0.4 * np.ones(3)
        spec = QpSpec(
            H=2.0 * C.T @ C,
            f=-2.0 * C.T @ d,
            G=np.vstack([np.eye(3), -np.eye(3)]),
            h=np.concatenate([ub, -lb]),
        )
        expected = lsq_linear(C, d, bounds=(lb, ub), method="bvls").x
        assert np.allclose(solve_qp(spec), expected, atol=1e-7)


def test_qp_with_equality():
    # min |z|^2 s.t. z_0 + z_1 = 1, z_1 <= 0.2
    spec = QpSpec(
        H=2.0 * np.eye(2),
        f=np.zeros(2),
        A=np.array([[1.0, 1.0]]),
        b=np.array([1.0]),
        G=np.array([[0.0, 1.0]]),
        h=np.array([0.2]),
    )
    assert np.allclose(solve_qp(spec), [0.8, 0.2])


def test_qp_errors():
    with pytest.raises(QpInfeasible):
        solve_qp(
            QpSpec(
                H=np.eye(1),
                f=np.zeros(1),
                G=np.array([[1.0], [-1.0]]),
                h=np.array([-1.0, -1.0]),
            )
        )
    with pytest.raises(ValueError):
        QpSpec(H=np.diag([1.0, -1.0]), f=np.zeros(2))
    with pytest.raises(ValueError):
        QpSpec(H=np.eye(2), f=np.zeros(2), G=np.eye(2))


def test_nlp_unconstrained_quadratic():
    H = np.array([[3.0, 0.5], [0.5, 2.0]])
    f = np.array([-1.0, 2.0])
    result = solve_nlp(NlpSpec(dim=2, objective=quadratic(H, f)), np.zeros(2))
    assert result.status == "converged"
    assert np.allclose(result.x, np.linalg.solve(H, -f), atol=1e-5)
    x, status = result
    assert status == "converged"


def test_nlp_equality_constraint():
    def equality(z):
        return np.array([z[0] + z[1] - 1.0]), np.array([[1.0, 1.0]])

    spec = NlpSpec(dim=2, objective=quadratic(2.0 * np.eye(2), np.zeros(2)), equality=equality)
    result = solve_nlp(spec, np.array([3.0, -2.0]))
    assert result.violation <= 1e-6
    assert np.allclose(result.x, [0.5, 0.5], atol=1e-4)


def test_nlp_inequality_constraint():
    # min (x - 3)^2 + y^2 s.t. x <= 1
    def inequality(z):
        return np.array([z[0] - 1.0]), np.array([[1.0, 0.0]])

    spec = NlpSpec(
        dim=2,
        objective=quadratic(2.0 * np.eye(2), np.array([-6.0, 0.0])),
        inequality=inequality,
    )
    result = solve_nlp(spec, np.zeros(2))
    assert result.violation <= 1e-6
    assert np.allclose(result.x, [1.0, 0.0], atol=1e-4)


def test_nlp_matches_qp_on_random_box_qps():
    rng = np.random.default_rng(8)
    cfg = SolverConfig(gradient_tol=1e-9, max_inner_iterations=2000)
    for _ in range(200):
        dim = int(rng.integers(2, 5))
        M = rng.normal(size=(dim, dim))
        H = M @ M.T / dim + np.eye(dim)
        f = rng.normal(scale=2.0, size=dim)
        lb = rng.uniform(-1.0, -0.1, size=dim)
        ub = rng.uniform(0.1, 1.0, size=dim)
        G = np.vstack([np.eye(dim), -np.eye(dim)])
        h = np.concatenate([ub, -lb])

        def inequality(z, G=G, h=h):
            return G @ z - h, G

        expected = solve_qp(QpSpec(H=H, f=f, G=G, h=h))
        result = solve_nlp(
            NlpSpec(dim=dim, objective=quadratic(H, f), inequality=inequality), np.zeros(dim), cfg
        )
        value = 0.5 * expected @ H @ expected + f @ expected
        assert result.violation <= 1e-6
        assert result.objective == pytest.approx(value, abs=1e-5)


def test_nlp_projection():
    spec = NlpSpec(
        dim=2,
        objective=quadratic(2.0 * np.eye(2), np.array([-4.0, 2.0])),
        project=lambda z: np.clip(z, 0.0, 1.0),
    )
    result = solve_nlp(spec, np.array([0.5, 0.5]))
    assert np.allclose(result.x, [1.0, 0.0], atol=1e-8)


def test_nlp_is_deterministic():
    def equality(z):
        return np.array([z[0] ** 2 + z[1] ** 2 - 1.0]), np.array([[2.0 * z[0], 2.0 * z[1]]])

    spec = NlpSpec(
        dim=2, objective=quadratic(np.eye(2), np.array([1.0, -1.0])), equality=equality
    )
    first = solve_nlp(spec, np.array([0.3, 0.1]))
    second = solve_nlp(spec, np.array([0.3, 0.1]))
    assert np.array_equal(first.x, second.x)
    assert first.objective == second.objective
    assert np.allclose(first.x, [-np.sqrt(0.5), np.sqrt(0.5)], atol=1e-4)


def test_nlp_rejects_non_finite_objective():
    def objective(z):
        return float("nan"), np.zeros_like(z)

    with pytest.raises(NonFiniteObjective) as excinfo:
        solve_nlp(NlpSpec(dim=2, objective=objective), np.array([1.0, 2.0]))
    assert np.array_equal(excinfo.value.iterate, [1.0, 2.0])


def test_solver_config_validation():
    with pytest.raises(ValidationError):
        SolverConfig(min_step=1.0, max_step=0.5)
    with pytest.raises(ValidationError):
        SolverConfig(constraint_tol=0.0)
    with pytest.raises(ValidationError):
        SolverConfig(unknown=1)
    assert SolverConfig().constraint_tol == 1e-6


def test_finite_diff_gradient():
    def f(z):
        return float(np.sin(z[0]) * z[1] ** 2)

    z = np.array([0.3, -1.2])
    expected = [np.cos(0.3) * 1.44, 2.0 * np.sin(0.3) * -1.2]
    assert np.allclose(finite_diff_gradient(f, z), expected, atol=1e-8)
