import math
import warnings

import numpy as np
import pytest

import coop_mpc
from coop_mpc.dynamics import ConstraintSet
from coop_mpc.solver import finite_diff_gradient


def test_box_membership_and_projection():
    box = ConstraintSet.box([-1.0, -2.0], [1.0, 4.0])

    assert box.is_box
    assert box.contains([0.0, 0.0])
    assert box.contains([1.0, 4.0])
    assert not box.contains([1.0 + 1e-6, 0.0])
    assert box.contains([1.0 + 1e-7, 0.0], tol=1e-6)
    assert box.margin([0.0, 1.0]) == pytest.approx(1.0)
    assert np.array_equal(box.project([3.0, -5.0]), [1.0, -2.0])

    G, h = box.rows()
    assert G.shape == (4, 2)
    assert np.all(G @ np.array([0.5, 0.5]) <= h)


def test_polytope_projection_matches_closest_point():
    # triangle x >= 0, y >= 0, x + y <= 1
    triangle = ConstraintSet.polytope(
        [[-1.0, 0.0], [0.0, -1.0], [1.0, 1.0]], [0.0, 0.0, 1.0], interior_point=[0.2, 0.2]
    )
    assert not triangle.is_box
    assert np.allclose(triangle.project([1.0, 1.0]), [0.5, 0.5])
    assert np.allclose(triangle.project([2.0, -1.0]), [1.0, 0.0])
    inside = np.array([0.1, 0.3])
    assert np.array_equal(triangle.project(inside), inside)


def test_constraint_set_rejects_boundary_interior_point():
    with pytest.raises(ValueError):
        ConstraintSet.box([0.0], [1.0], interior_point=[1.0])
    with pytest.raises(ValueError):
        ConstraintSet.box([1.0], [0.0])


def test_check_membership():
    box = ConstraintSet.box([0.0], [1.0])
    assert coop_mpc.check_membership(box, [1.0 + 1e-9], 1e-8)
    assert not coop_mpc.check_membership(box, [1.1], 1e-8)
    with pytest.raises(ValueError):
        coop_mpc.check_membership(box, [0.5], -1.0)


def test_sample_stays_inside():
    model = coop_mpc.double_integrator_model("c")
    rng = np.random.default_rng(0)
    samples = model.output_set.sample(rng, 200)
    assert samples.shape == (200, 2)
    assert all(model.output_set.contains(s) for s in samples)


def test_double_integrator_regions():
    a = coop_mpc.double_integrator_model("a")
    b = coop_mpc.double_integrator_model("b")
    c = coop_mpc.double_integrator_model("c")

    assert np.allclose(a.output_set.lower, [-1.0, -2.0])
    assert np.allclose(a.output_set.upper, [1.0, 4.0])
    assert np.allclose(b.output_set.lower, [-1.0, -2.0])
    assert np.allclose(b.output_set.upper, [4.0, 2.0])

    # region c outputs are the diamond |z_1| + |z_2| <= 3
    for vertex in ([3.0, 0.0], [0.0, 3.0], [-3.0, 0.0], [0.0, -3.0]):
        assert c.output_set.contains(vertex, tol=1e-12)
        assert c.state_set.contains(vertex + [0.0, 0.0], tol=1e-12)
    assert not c.output_set.contains([1.6, 1.6])
    assert not c.output_set.contains([-1.6, -1.6])
    assert np.allclose(c.output_set.lower, [-3.0, -3.0])
    assert np.allclose(c.output_set.upper, [3.0, 3.0])
    assert c.output_set.margin([0.0, 0.0]) == pytest.approx(3.0 / math.sqrt(2.0))
    assert np.allclose(c.output_set.project([4.0, 0.0]), [3.0, 0.0], atol=1e-8)
    assert np.allclose(c.output_set.project([3.0, 3.0]), [1.5, 1.5], atol=1e-8)

    assert not a.state_set.contains([0.0, 0.0, 0.3, 0.0])
    assert not a.input_set.contains([0.0, -0.26])

    with pytest.raises(ValueError):
        coop_mpc.double_integrator_model("d")  # type: ignore[arg-type]


def test_double_integrator_step():
    model = coop_mpc.double_integrator_model("a")
    x = np.array([0.0, 0.0, 0.1, 0.2])
    u = np.array([0.1, 0.0])
    assert np.allclose(model.step(x, u), [0.1, 0.2, 0.2, 0.2])
    assert np.allclose(model.output(x, u), [0.0, 0.0])


MODELS = {
    "di_a": coop_mpc.double_integrator_model("a"),
    "di_b": coop_mpc.double_integrator_model("b"),
    "di_c": coop_mpc.double_integrator_model("c"),
    "quadcopter": coop_mpc.quadcopter_model(0.1),
}


@pytest.mark.parametrize("name", sorted(MODELS))
def test_equilibria_are_interior_fixed_points(name):
    model = MODELS[name]
    rng = np.random.default_rng(5)
    for y in model.output_set.sample(rng, 1000):
        x_c, u_c = model.equilibrium(y)
        assert np.max(np.abs(model.step(x_c, u_c) - x_c)) <= 1e-10
        assert np.allclose(model.output(x_c, u_c), y, rtol=0.0, atol=1e-12)
        assert model.margin(x_c, u_c) > 0.0, y


@pytest.mark.parametrize("name", ["di_b", "quadcopter"])
def test_rollout_composes(name):
    model = MODELS[name]
    rng = np.random.default_rng(6)
    nominal = model.g_u(np.zeros(model.output_dim))
    for _ in range(50):
        horizon = int(rng.integers(2, 9))
        split = int(rng.integers(1, horizon))
        x0 = model.g_x(model.output_set.sample(rng, 1)[0])
        inputs = nominal + rng.uniform(-0.2, 0.2, size=(horizon, model.input_dim))
        full = coop_mpc.rollout(model, x0, inputs)
        tail = coop_mpc.rollout(model, full[split], inputs[split:])
        assert np.array_equal(full[split:], tail)
    assert coop_mpc.rollout(model, x0, np.zeros((0, model.input_dim))).shape == (1, model.state_dim)


@pytest.mark.parametrize(
    "constraint_set",
    [
        ConstraintSet.box([-1.0, -2.0, 0.0], [1.0, 4.0, 0.5]),
        coop_mpc.double_integrator_model("c").output_set,
        coop_mpc.double_integrator_model("c").state_set,
    ],
    ids=["box", "diamond", "region_c_states"],
)
def test_projection_is_idempotent_and_nonexpansive(constraint_set):
    rng = np.random.default_rng(7)
    width = constraint_set.upper - constraint_set.lower
    points = rng.uniform(constraint_set.lower - width, constraint_set.upper + width, size=(200, constraint_set.dim))
    projected = np.array([constraint_set.project(z) for z in points])
    for z, p in zip(points, projected):
        assert constraint_set.contains(p, tol=1e-8)
        assert np.allclose(constraint_set.project(p), p, rtol=0.0, atol=1e-9)
        if constraint_set.contains(z):
            assert np.array_equal(p, z)
    for k in range(0, 200, 2):
        gap = np.linalg.norm(projected[k] - projected[k + 1])
        assert gap <= np.linalg.norm(points[k] - points[k + 1]) + 1e-9


def test_polytope_with_unbounded_sides_has_finite_interior_point():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        half = ConstraintSet.polytope(
            [[1.0, 1.0, 0.0]], [10.0], [0.0, -np.inf, -np.inf], [np.inf, 5.0, np.inf]
        )
        free = ConstraintSet.polytope([[1.0, 0.0]], [1.0])
    assert np.allclose(half.interior_point, [1.0, 4.0, 0.0])
    assert not half.contains([100.0, 0.0, 7.0])
    assert half.contains([5.0, -200.0, 7.0])
    assert np.array_equal(free.interior_point, [0.0, 0.0])


def test_quadcopter_hover_input():
    model = coop_mpc.quadcopter_model()
    assert np.allclose(model.g_u(np.zeros(3)), [0.0, 0.0, coop_mpc.GRAVITY / coop_mpc.THRUST_GAIN])
    rhs = coop_mpc.quadcopter_continuous(np.zeros(10), model.g_u(np.zeros(3)))
    assert np.allclose(rhs, 0.0)


def test_quadcopter_jacobians_match_finite_differences():
    model = coop_mpc.quadcopter_model(0.1)
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = rng.uniform(-0.5, 0.5, size=10)
        u = rng.uniform([-0.5, -0.5, 5.0], [0.5, 0.5, 15.0])
        A, B = model.jacobians(x, u)
        for k in range(10):
            fx = finite_diff_gradient(lambda z: model.step(z, u)[k], x)
            fu = finite_diff_gradient(lambda v: model.step(x, v)[k], u)
            assert np.allclose(A[k], fx, rtol=1e-5, atol=1e-7)
            assert np.allclose(B[k], fu, rtol=1e-5, atol=1e-7)


def test_quadcopter_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        coop_mpc.QuadcopterModel(h=0.0)


def test_rollout():
    model = coop_mpc.double_integrator_model("a")
    inputs = np.array([[0.1, 0.0], [0.0, -0.1], [0.0, 0.0]])
    states = coop_mpc.rollout(model, np.zeros(4), inputs)
    assert states.shape == (4, 4)
    assert np.allclose(states[-1], [0.2, -0.1, 0.1, -0.1])

    with pytest.raises(ValueError):
        coop_mpc.rollout(model, np.zeros(3), inputs)
    with pytest.raises(ValueError):
        coop_mpc.rollout(model, np.zeros(4), np.zeros((3, 3)))


def test_model_margin_combines_state_and_input():
    model = coop_mpc.double_integrator_model("a")
    assert model.margin(np.zeros(4), np.zeros(2)) == pytest.approx(0.25)
    assert model.margin(np.zeros(4), np.array([0.3, 0.0])) < 0
    assert not math.isinf(model.margin(np.zeros(4), np.zeros(2)))
