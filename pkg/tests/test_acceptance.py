import itertools

import numpy as np
import pytest

import coop_mpc
from coop_mpc.cli.runner import build_swarm, run_scenario
from coop_mpc.cli.scenarios import BUILTIN_SCENARIOS
from coop_mpc.cooperation import CooperationSetSpec, Graph
from coop_mpc.diagnostics import DiagnosticsRecorder
from coop_mpc.dynamics import ConstraintSet
from coop_mpc.ocp import LocalProblem
from coop_mpc.solver import SolverConfig, finite_diff_gradient

acceptance = pytest.mark.acceptance


def run_builtin(name):
    config = BUILTIN_SCENARIOS[name]()
    swarm, spec = build_swarm(config)
    recorder = DiagnosticsRecorder(spec, config.monitor)
    trace = coop_mpc.run(swarm, config.steps, recorder)
    return trace, recorder


@pytest.fixture(scope="module")
def consensus_run():
    return run_builtin("consensus-appendix-b")


@pytest.fixture(scope="module")
def formation_run():
    return run_builtin("formation-appendix-c")


@pytest.fixture(scope="module")
def stacked_run():
    return run_builtin("formation-v-b")


def assert_constraints_hold(trace):
    for swarm in trace:
        for i, x in swarm.states.items():
            model = swarm.agents[i].model
            assert model.margin(x, swarm.solutions[i].first_input) >= -1e-6, (swarm.time, i)


@acceptance
def test_consensus_converges(consensus_run):
    trace, _ = consensus_run
    final = trace[-1]
    assert final.time == 40
    outputs = final.outputs()
    for i, j in itertools.combinations(sorted(outputs), 2):
        assert np.max(np.abs(outputs[i] - outputs[j])) <= 0.02
    limit = np.mean(list(outputs.values()), axis=0)
    assert 0.2 <= limit[0] <= 0.4
    assert 0.2 <= limit[1] <= 0.3


@acceptance
def test_consensus_value_moves_after_join(consensus_run):
    trace, _ = consensus_run
    before = trace[19]
    assert before.joined == (5,)
    outputs = before.outputs()
    estimate = np.mean([outputs[i] for i in (1, 2, 3, 4)], axis=0)
    limit = np.mean(list(trace[-1].outputs().values()), axis=0)
    assert np.max(np.abs(estimate - limit)) >= 0.3


@acceptance
def test_consensus_constraints(consensus_run):
    assert_constraints_hold(consensus_run[0])


@acceptance
def test_consensus_value_function_decreases(consensus_run):
    _, recorder = consensus_run
    assert recorder.lyapunov_violations() == []
    assert recorder.bound_violations == []
    deltas = [r.lyapunov_delta for r in recorder.records if r.lyapunov_delta is not None]
    assert len(deltas) >= 38


@acceptance
def test_formation_converges(formation_run):
    trace, _ = formation_run
    outputs = trace[-1].outputs()
    for i, j in itertools.combinations(sorted(outputs), 2):
        assert abs(np.linalg.norm(outputs[i][:2] - outputs[j][:2]) - 1.0) <= 0.02
    altitudes = [y[2] for y in outputs.values()]
    assert max(altitudes) - min(altitudes) <= 0.02
    assert 1.95 <= np.mean(altitudes) <= 2.05


@acceptance
def test_formation_constraints(formation_run):
    assert_constraints_hold(formation_run[0])


@acceptance
def test_stacked_formation_escapes(stacked_run):
    trace, _ = stacked_run
    assert len(trace) == BUILTIN_SCENARIOS["formation-v-b"]().steps + 1
    assert min(s.cost.global_cost(s.coop_outputs) for s in trace) <= 1e-3


@acceptance
def test_stacked_formation_constraints(stacked_run):
    trace, _ = stacked_run
    assert_constraints_hold(trace)


@acceptance
@pytest.mark.parametrize("name", ["consensus-appendix-b", "formation-appendix-c"])
def test_parallel_traces_are_identical(name, tmp_path):
    config = BUILTIN_SCENARIOS[name]()
    sequential, parallel = tmp_path / "sequential", tmp_path / "parallel"
    assert run_scenario(config, str(sequential)) == 0
    assert run_scenario(config.model_copy(update={"parallel": True}), str(parallel)) == 0
    for file in ("trace.csv", "diagnostics.csv"):
        assert (sequential / file).read_bytes() == (parallel / file).read_bytes()


def grid_instances():
    box = ConstraintSet.box([-1.0, -1.0], [1.0, 1.0])
    triangle = ConstraintSet.polytope(
        [[-1.0, 0.0], [0.0, -1.0], [1.0, 1.0]], [0.0, 0.0, 1.0], [0.0, 0.0], [1.0, 1.0],
        interior_point=[0.2, 0.2],
    )
    rng = np.random.default_rng(12)
    for constraint_set, lower, upper in ((box, -1.0, 1.0), (triangle, 0.0, 1.0)):
        for _ in range(3):
            yield constraint_set, lower, upper, rng.uniform(-2.0, 2.0, size=(2, 2))


@acceptance
def test_projected_gradient_fixed_points_are_grid_minimisers():
    resolution = 1e-3
    for constraint_set, lower, upper, neighbors in grid_instances():
        graph = Graph([1, 2, 3], [(1, 2), (1, 3)])
        big = ConstraintSet.box([-5.0, -5.0], [5.0, 5.0])
        cost = coop_mpc.consensus_cost(graph, {1: constraint_set, 2: big, 3: big})
        values = {2: neighbors[0], 3: neighbors[1]}
        theta_tilde = 1.0 / cost.lipschitz(1)

        axis = np.arange(lower, upper + resolution / 2, resolution)
        gx, gy = np.meshgrid(axis, axis, indexing="ij")
        grid = np.column_stack([gx.ravel(), gy.ravel()])
        G, h = constraint_set.rows()
        grid = grid[np.all(grid @ G.T <= h + 1e-12, axis=1)]
        costs = sum(2.0 * np.sum((grid - v) ** 2, axis=1) for v in values.values())
        best = grid[np.argmin(costs)]

        # the exact minimiser is a fixed point and sits next to the grid minimiser
        exact = constraint_set.project(np.mean(neighbors, axis=0))
        step = coop_mpc.pg_update(cost, 1, exact, values, theta_tilde)
        assert np.linalg.norm(step - exact) <= 1e-8
        assert np.linalg.norm(exact - best) <= 2 * resolution

        # points clearly away from the grid minimiser are not fixed points
        far = grid[np.linalg.norm(grid - best, axis=1) > 10 * resolution]
        for y in far[:: max(1, far.shape[0] // 200)]:
            assert np.linalg.norm(coop_mpc.pg_update(cost, 1, y, values, theta_tilde) - y) > 1e-8


@acceptance
def test_projected_gradient_descent_inequality():
    graph = Graph([1, 2, 3, 4], [(1, 2), (1, 4), (3, 4)])
    sets = {
        1: coop_mpc.double_integrator_model("a").output_set,
        2: coop_mpc.double_integrator_model("b").output_set,
        3: coop_mpc.double_integrator_model("b").output_set,
        4: coop_mpc.double_integrator_model("c").output_set,
    }
    cost = coop_mpc.consensus_cost(graph, sets)
    rng = np.random.default_rng(21)
    draws = {i: s.sample(rng, 1000) for i, s in sets.items()}
    violations = 0
    for k in range(1000):
        y = {i: draws[i][k] for i in graph.nodes}
        for i in graph.nodes:
            neighbors = {j: y[j] for j in graph.neighbors(i)}
            L = cost.lipschitz(i)
            theta_tilde = rng.uniform(0.1, 1.0) / L
            theta = rng.uniform(0.01, 1.0)
            target = coop_mpc.pg_update(cost, i, y[i], neighbors, theta_tilde)
            moved = y[i] + theta * (target - y[i])
            kappa = (2 * theta - theta_tilde * L * theta**2) / (2 * theta_tilde)
            bound = cost.partial_cost(i, y[i], neighbors) - kappa * np.sum((target - y[i]) ** 2)
            if cost.partial_cost(i, moved, neighbors) > bound + 1e-10:
                violations += 1
    assert violations == 0


@acceptance
def test_quadratic_oracle_matches_solver():
    rng = np.random.default_rng(30)
    regions = ["a", "b", "c"]
    cfg = SolverConfig(gradient_tol=1e-9, max_inner_iterations=2000)
    for _ in range(50):
        model = coop_mpc.double_integrator_model(regions[rng.integers(3)])
        horizon = int(rng.integers(1, 4))
        graph = Graph([1, 2, 3], [(1, 2), (2, 3)])
        cost = coop_mpc.consensus_cost(graph, {i: model.output_set for i in graph.nodes})
        position = model.output_set.sample(rng, 1)[0] * 0.3
        state = np.r_[position, rng.uniform(-0.05, 0.05, size=2)]
        neighbors = {j: model.output_set.sample(rng, 1)[0] for j in (1, 3)}
        problem = LocalProblem(
            2, model, state, np.eye(4), np.eye(2), horizon, cost=cost, neighbor_values=neighbors
        )
        value, _, _ = coop_mpc.quadratic_oracle(problem)
        solution = coop_mpc.solve_local(problem, solver_cfg=cfg)
        assert solution.objective == pytest.approx(value, rel=1e-5, abs=1e-5)


@acceptance
@pytest.mark.parametrize("kind", ["consensus", "formation"])
def test_cooperation_gradients_on_many_samples(kind):
    graph = Graph.complete([1, 2, 3])
    sets = {i: ConstraintSet.box(-3.0 * np.ones(3), 3.0 * np.ones(3)) for i in graph.nodes}
    if kind == "consensus":
        cost = coop_mpc.consensus_cost(graph, sets)
    else:
        cost = coop_mpc.formation_cost(graph, CooperationSetSpec("formation"), sets)
    rng = np.random.default_rng(40)
    for _ in range(500):
        y = {i: rng.uniform(-3.0, 3.0, size=3) for i in graph.nodes}
        i = int(rng.integers(1, 4))
        neighbors = {j: y[j] for j in graph.neighbors(i)}
        analytic = cost.partial_gradient(i, y[i], neighbors)
        numeric = finite_diff_gradient(lambda z: cost.partial_cost(i, z, neighbors), y[i])
        assert np.allclose(analytic, numeric, rtol=1e-5, atol=1e-6)


@acceptance
@pytest.mark.parametrize("model_name", ["double_integrator", "quadcopter"])
def test_rollout_objective_gradients_on_many_samples(model_name):
    rng = np.random.default_rng(41)
    if model_name == "double_integrator":
        model = coop_mpc.double_integrator_model("b")
        nominal_input = np.zeros(2)
        spread = 0.25
    else:
        model = coop_mpc.quadcopter_model(0.1)
        nominal_input = model.g_u(np.zeros(3))
        spread = 0.3
    p = model.output_dim
    graph = Graph([1, 2], [(1, 2)])
    cost = coop_mpc.consensus_cost(graph, {1: model.output_set, 2: model.output_set})
    for _ in range(500):
        horizon = int(rng.integers(1, 4))
        state = model.g_x(rng.uniform(0.5, 1.5, size=p)) + rng.uniform(-0.1, 0.1, size=model.state_dim)
        problem = LocalProblem(
            1,
            model,
            state,
            np.eye(model.state_dim),
            np.eye(model.input_dim),
            horizon,
            cost=cost,
            neighbor_values={2: rng.uniform(0.5, 1.5, size=p)},
        )
        inputs = nominal_input + rng.uniform(-spread, spread, size=(horizon, model.input_dim))
        z = problem.pack(inputs, rng.uniform(0.5, 1.5, size=p))
        _, analytic = coop_mpc.objective_and_gradient(problem, z)
        numeric = finite_diff_gradient(lambda v: coop_mpc.objective_and_gradient(problem, v)[0], z)
        assert np.allclose(analytic, numeric, rtol=1e-5, atol=1e-6)
