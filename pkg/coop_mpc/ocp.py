"""Local optimal control problems of the agents.

Each agent minimises the cost of tracking an artificial equilibrium, whose
output `y_c` is itself a decision variable, plus the cooperation cost terms
it shares with its neighbours. The terminal state has to reach the
equilibrium exactly. Dynamics are eliminated by single shooting; the
decision vector is `z = [u_0, ..., u_{N-1}, y_c]`.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field

from ._logger import logger
from ._utils import ArrayLike, CoopMpcError, as_vector, check_positive_definite
from .cooperation import ConsensusCost, CooperationCost, pg_update
from .dynamics import AgentModel, LinearAgentModel
from .solver import (
    NlpSpec,
    NonFiniteObjective,
    QpSpec,
    SolverConfig,
    solve_nlp,
    solve_qp,
)

__all__ = [
    "Infeasible",
    "TrackingInfeasible",
    "CandidateConfig",
    "TerminalIngredient",
    "TerminalEquality",
    "LocalProblem",
    "LocalSolution",
    "Candidate",
    "tracking_cost",
    "objective",
    "objective_and_gradient",
    "evaluate_candidate",
    "solve_local",
    "solve_tracking",
    "shifted_candidate",
    "incremental_candidate",
    "default_theta_tilde",
    "quadratic_oracle",
]

Vector = npt.NDArray[np.float64]
Matrix = npt.NDArray[np.float64]
CandidateKind = Literal["shifted", "incremental", "perturbed", "equilibrium"]


class Infeasible(CoopMpcError):
    """No feasible point of an agent's local problem was found."""

    def __init__(self, agent: int, time: int, detail: str = ""):
        self.agent = agent
        self.time = time
        message = f"agent {agent} has no feasible solution at t={time}"
        super().__init__(f"{message}: {detail}" if detail else message)


class TrackingInfeasible(CoopMpcError):
    pass


class CandidateConfig(BaseModel):
    """Step sizes of the incremental candidate."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    theta: float = Field(
        default=1.0, gt=0, le=1, description="Fraction of the projected gradient step taken."
    )
    theta_tilde: Optional[float] = Field(
        default=None,
        gt=0,
        description="Projected gradient step size; min(0.1, 1/L_i) when unset.",
    )
    incremental: bool = Field(
        default=True, description="Build the incremental candidate as a second warm start."
    )


def default_theta_tilde(cost: Optional[CooperationCost], agent: int, cfg: CandidateConfig) -> float:
    if cfg.theta_tilde is not None:
        return cfg.theta_tilde
    lipschitz = cost.lipschitz(agent) if cost is not None and agent in cost.graph else 0.0
    return min(0.1, 1.0 / lipschitz) if lipschitz > 0 else 0.1


class TerminalIngredient(ABC):
    """Terminal cost and terminal constraint `r(x_N, y_c) = 0` of the local problems."""

    @abstractmethod
    def residual(self, model: AgentModel, x_N: Vector, y: Vector) -> Tuple[Vector, Matrix, Matrix]:
        """Return `(r, dr/dx_N, dr/dy)`."""
        raise NotImplementedError

    def cost(self, model: AgentModel, x_N: Vector, y: Vector) -> Tuple[float, Vector, Vector]:
        return 0.0, np.zeros_like(x_N), np.zeros_like(y)


class TerminalEquality(TerminalIngredient):
    """`x_N = g_x(y_c)` with zero terminal cost."""

    def residual(self, model, x_N, y):
        jgx, _ = model.equilibrium_jacobians(y)
        return x_N - model.g_x(y), np.eye(x_N.shape[0]), -jgx


@dataclass(frozen=True, eq=False)
class LocalProblem:
    """One agent's MPC problem at one time step."""

    agent: int
    model: AgentModel
    state: Vector
    Q: Matrix
    R: Matrix
    horizon: int
    cost: Optional[CooperationCost] = None
    neighbor_values: Mapping[int, Vector] = field(default_factory=dict)
    time: int = 0
    terminal_tol: float = 1e-6
    terminal: TerminalIngredient = field(default_factory=TerminalEquality)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"horizon must be at least 1, got {self.horizon}")
        object.__setattr__(
            self, "state", as_vector(self.state, self.model.state_dim, "state")
        )
        object.__setattr__(self, "Q", check_positive_definite(self.Q, "Q"))
        object.__setattr__(self, "R", check_positive_definite(self.R, "R"))
        if self.Q.shape[0] != self.model.state_dim or self.R.shape[0] != self.model.input_dim:
            raise ValueError("weight matrices do not match the model dimensions")
        values = {
            int(j): as_vector(v, self.model.output_dim, f"output of neighbour {j}")
            for j, v in self.neighbor_values.items()
        }
        missing = [j for j in self.neighbors if j not in values]
        if missing:
            raise ValueError(f"agent {self.agent} lacks values of neighbours {missing}")
        object.__setattr__(self, "neighbor_values", values)

    @property
    def neighbors(self) -> Tuple[int, ...]:
        if self.cost is None or self.agent not in self.cost.graph:
            return ()
        return self.cost.neighbors(self.agent)

    @property
    def decision_dim(self) -> int:
        return self.horizon * self.model.input_dim + self.model.output_dim

    def pack(self, inputs: ArrayLike, y_c: ArrayLike) -> Vector:
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.shape != (self.horizon, self.model.input_dim):
            raise ValueError(
                f"inputs have shape {inputs.shape}, expected {(self.horizon, self.model.input_dim)}"
            )
        return np.concatenate([inputs.reshape(-1), as_vector(y_c, self.model.output_dim)])

    def coupling(self, y_c: Vector) -> Tuple[float, Vector]:
        if not self.neighbors:
            return 0.0, np.zeros_like(y_c)
        assert self.cost is not None
        return (
            self.cost.partial_cost(self.agent, y_c, self.neighbor_values),
            self.cost.partial_gradient(self.agent, y_c, self.neighbor_values),
        )


@dataclass(frozen=True, eq=False)
class Candidate:
    kind: CandidateKind
    inputs: Matrix
    coop_output: Vector


@dataclass(frozen=True, eq=False)
class LocalSolution:
    inputs: Matrix
    coop_output: Vector
    states: Matrix
    objective: float
    tracking_cost: float
    coupling_cost: float
    status: str
    terminal_residual: float
    violation: float
    iterations: int = 0

    @property
    def first_input(self) -> Vector:
        return self.inputs[0]

    def feasible(self, problem: LocalProblem, constraint_tol: float) -> bool:
        return (
            self.terminal_residual <= problem.terminal_tol
            and self.violation <= constraint_tol
            and problem.model.output_set.contains(self.coop_output, 1e-9)
        )


@dataclass
class _Evaluation:
    states: Matrix
    tracking: float
    coupling: float
    gradient: Vector
    residual: Vector
    residual_jac: Matrix
    ineq: Vector
    ineq_jac: Matrix


class _ShootingProblem:
    """Single-shooting evaluation of a `LocalProblem`, optionally with `y_c` fixed."""

    def __init__(self, problem: LocalProblem, fixed_output: Optional[Vector] = None):
        self.problem = problem
        self.fixed_output = fixed_output
        model = problem.model
        self.N = problem.horizon
        self.n, self.q = model.state_dim, model.input_dim
        self.n_inputs = self.N * self.q
        self.dim = self.n_inputs + (0 if fixed_output is not None else model.output_dim)
        self._state_G, self._state_h = model.state_set.rows()
        self._input_G, self._input_h = model.input_set.A, model.input_set.b
        self._lower = np.tile(model.input_set.lower, self.N)
        self._upper = np.tile(model.input_set.upper, self.N)
        self._cache_key: Optional[bytes] = None
        self._cache: Optional[_Evaluation] = None

    def split(self, z: Vector) -> Tuple[Matrix, Vector]:
        inputs = z[: self.n_inputs].reshape(self.N, self.q)
        y = self.fixed_output if self.fixed_output is not None else z[self.n_inputs :]
        return inputs, y

    def project(self, z: Vector) -> Vector:
        out = np.empty_like(z)
        out[: self.n_inputs] = np.clip(z[: self.n_inputs], self._lower, self._upper)
        if self.fixed_output is None:
            out[self.n_inputs :] = self.problem.model.output_set.project(z[self.n_inputs :])
        return out

    def evaluate(self, z: Vector) -> _Evaluation:
        key = z.tobytes()
        if key == self._cache_key and self._cache is not None:
            return self._cache
        problem, model = self.problem, self.problem.model
        N, n, q = self.N, self.n, self.q
        inputs, y = self.split(z)
        x_c, u_c = model.g_x(y), model.g_u(y)
        jgx, jgu = model.equilibrium_jacobians(y)

        states = np.empty((N + 1, n))
        states[0] = problem.state
        A_list, B_list = [], []
        for k in range(N):
            A_k, B_k = model.jacobians(states[k], inputs[k])
            A_list.append(A_k)
            B_list.append(B_k)
            states[k + 1] = model.step(states[k], inputs[k])

        dx = states[:N] - x_c
        du = inputs - u_c
        tracking = float(np.einsum("ki,ij,kj->", dx, problem.Q, dx))
        tracking += float(np.einsum("ki,ij,kj->", du, problem.R, du))
        term_cost, term_dx, term_dy = problem.terminal.cost(model, states[N], y)
        tracking += term_cost

        # reverse accumulation through the rollout
        grad = np.zeros(self.dim)
        adjoint = term_dx.copy()
        for k in range(N - 1, -1, -1):
            grad[k * q : (k + 1) * q] = 2.0 * problem.R @ du[k] + B_list[k].T @ adjoint
            adjoint = 2.0 * problem.Q @ dx[k] + A_list[k].T @ adjoint

        coupling = 0.0
        if self.fixed_output is None:
            coupling, coupling_grad = problem.coupling(y)
            grad[self.n_inputs :] = (
                -2.0 * jgx.T @ problem.Q @ dx.sum(axis=0)
                - 2.0 * jgu.T @ problem.R @ du.sum(axis=0)
                + term_dy
                + coupling_grad
            )

        # forward sensitivities of the states with respect to the inputs
        sens = np.zeros((n, self.n_inputs))
        ineq_rows, ineq_jac = [], []
        for k in range(N):
            sens = A_list[k] @ sens
            sens[:, k * q : (k + 1) * q] += B_list[k]
            if k + 1 < N and self._state_h.size:
                ineq_rows.append(self._state_G @ states[k + 1] - self._state_h)
                ineq_jac.append(self._state_G @ sens)
        if self._input_h.size:
            for k in range(N):
                ineq_rows.append(self._input_G @ inputs[k] - self._input_h)
                jac = np.zeros((self._input_h.size, self.n_inputs))
                jac[:, k * q : (k + 1) * q] = self._input_G
                ineq_jac.append(jac)

        residual, dr_dx, dr_dy = problem.terminal.residual(model, states[N], y)
        residual_jac = np.zeros((residual.shape[0], self.dim))
        residual_jac[:, : self.n_inputs] = dr_dx @ sens
        if self.fixed_output is None:
            residual_jac[:, self.n_inputs :] = dr_dy

        pad = self.dim - self.n_inputs
        ineq = np.concatenate(ineq_rows) if ineq_rows else np.zeros(0)
        ineq_matrix = (
            np.hstack([np.vstack(ineq_jac), np.zeros((ineq.shape[0], pad))])
            if ineq_rows
            else np.zeros((0, self.dim))
        )
        self._cache_key = key
        self._cache = _Evaluation(
            states, tracking, coupling, grad, residual, residual_jac, ineq, ineq_matrix
        )
        return self._cache

    def objective(self, z: Vector) -> Tuple[float, Vector]:
        ev = self.evaluate(z)
        return ev.tracking + ev.coupling, ev.gradient

    def equality(self, z: Vector) -> Tuple[Vector, Matrix]:
        ev = self.evaluate(z)
        return ev.residual, ev.residual_jac

    def inequality(self, z: Vector) -> Tuple[Vector, Matrix]:
        ev = self.evaluate(z)
        return ev.ineq, ev.ineq_jac

    def has_inequalities(self) -> bool:
        return self.N > 1 and self._state_h.size > 0 or self._input_h.size > 0

    def nlp(self) -> NlpSpec:
        return NlpSpec(
            dim=self.dim,
            objective=self.objective,
            project=self.project,
            equality=self.equality,
            inequality=self.inequality if self.has_inequalities() else None,
        )

    def solution(self, z: Vector, status: str, iterations: int = 0) -> LocalSolution:
        ev = self.evaluate(z)
        inputs, y = self.split(z)
        input_violation = max(
            0.0,
            float(np.max(self._lower - z[: self.n_inputs], initial=-math.inf)),
            float(np.max(z[: self.n_inputs] - self._upper, initial=-math.inf)),
        )
        violation = max(float(np.max(ev.ineq, initial=0.0)), input_violation)
        return LocalSolution(
            inputs=inputs.copy(),
            coop_output=np.array(y, dtype=np.float64),
            states=ev.states.copy(),
            objective=ev.tracking + ev.coupling,
            tracking_cost=ev.tracking,
            coupling_cost=ev.coupling,
            status=status,
            terminal_residual=float(np.max(np.abs(ev.residual), initial=0.0)),
            violation=violation,
            iterations=iterations,
        )


def tracking_cost(problem: LocalProblem, states: ArrayLike, inputs: ArrayLike, y_c: ArrayLike) -> float:
    """Tracking cost of given state and input sequences; terminal cost included."""
    model = problem.model
    N = problem.horizon
    states = np.asarray(states, dtype=np.float64)
    inputs = np.asarray(inputs, dtype=np.float64)
    if states.shape not in ((N + 1, model.state_dim), (N, model.state_dim)):
        raise ValueError(f"states have shape {states.shape}, expected ({N} + 1, {model.state_dim})")
    if inputs.shape != (N, model.input_dim):
        raise ValueError(f"inputs have shape {inputs.shape}, expected {(N, model.input_dim)}")
    y_c = as_vector(y_c, model.output_dim, "cooperation output")
    x_c, u_c = model.g_x(y_c), model.g_u(y_c)
    total = 0.0
    for k in range(N):
        dx = states[k] - x_c
        du = inputs[k] - u_c
        total += float(dx @ problem.Q @ dx) + float(du @ problem.R @ du)
    if states.shape[0] == N + 1:
        total += problem.terminal.cost(model, states[N], y_c)[0]
    return total


def objective_and_gradient(problem: LocalProblem, z: ArrayLike) -> Tuple[float, Vector]:
    """Local objective and its gradient with respect to `[u_0, ..., u_{N-1}, y_c]`."""
    return _ShootingProblem(problem).objective(as_vector(z, problem.decision_dim))


def objective(problem: LocalProblem, inputs: ArrayLike, y_c: ArrayLike) -> float:
    return objective_and_gradient(problem, problem.pack(inputs, y_c))[0]


def evaluate_candidate(problem: LocalProblem, candidate: Candidate) -> LocalSolution:
    shooting = _ShootingProblem(problem)
    return shooting.solution(
        problem.pack(candidate.inputs, candidate.coop_output), f"candidate:{candidate.kind}"
    )


def _default_start(problem: LocalProblem) -> Candidate:
    model = problem.model
    guess = model.output_set.project(model.output(problem.state, model.input_set.interior_point))
    return Candidate("equilibrium", np.tile(model.g_u(guess), (problem.horizon, 1)), guess)


def solve_local(
    problem: LocalProblem,
    warm_start: Optional[Candidate] = None,
    solver_cfg: Optional[SolverConfig] = None,
    fallbacks: Sequence[Candidate] = (),
) -> LocalSolution:
    """Solve the agent's problem, never returning worse than a feasible candidate.

    The solver starts from `warm_start` (or the cheapest feasible candidate).
    Its result is kept only if it is feasible and no feasible candidate has a
    lower objective; otherwise the best feasible candidate is returned.
    """
    cfg = solver_cfg or SolverConfig()
    shooting = _ShootingProblem(problem)
    candidates = ([warm_start] if warm_start is not None else []) + list(fallbacks)
    evaluated = [
        shooting.solution(problem.pack(c.inputs, c.coop_output), f"candidate:{c.kind}")
        for c in candidates
    ]
    feasible = [sol for sol in evaluated if sol.feasible(problem, cfg.constraint_tol)]
    best = min(feasible, key=lambda s: s.objective) if feasible else None

    if warm_start is not None:
        start = problem.pack(warm_start.inputs, warm_start.coop_output)
    elif best is not None:
        start = problem.pack(best.inputs, best.coop_output)
    else:
        default = _default_start(problem)
        start = problem.pack(default.inputs, default.coop_output)

    solved: Optional[LocalSolution] = None
    try:
        result = solve_nlp(shooting.nlp(), start, cfg)
    except NonFiniteObjective as exc:
        logger.debug("agent %d at t=%d: %s", problem.agent, problem.time, exc)
    else:
        status = "optimal" if result.status == "converged" else "max_iterations"
        solved = shooting.solution(result.x, status, result.inner_iterations)
        if not solved.feasible(problem, cfg.constraint_tol):
            logger.debug(
                "agent %d at t=%d: solver point infeasible (residual %.2e, violation %.2e)",
                problem.agent,
                problem.time,
                solved.terminal_residual,
                solved.violation,
            )
            solved = None

    if solved is not None and (best is None or solved.objective <= best.objective):
        if solved.status == "max_iterations":
            logger.warning(
                "agent %d at t=%d: solver hit the iteration limit, keeping best feasible iterate",
                problem.agent,
                problem.time,
            )
        return solved
    if best is not None:
        logger.debug("agent %d at t=%d: falling back to %s", problem.agent, problem.time, best.status)
        return best
    raise Infeasible(problem.agent, problem.time, "solver found no feasible point")


def solve_tracking(
    problem: LocalProblem,
    y_c: ArrayLike,
    initial_inputs: Optional[ArrayLike] = None,
    solver_cfg: Optional[SolverConfig] = None,
) -> LocalSolution:
    """Auxiliary problem: track the equilibrium of a fixed cooperation output."""
    cfg = solver_cfg or SolverConfig()
    model = problem.model
    y_c = as_vector(y_c, model.output_dim, "cooperation output")
    shooting = _ShootingProblem(problem, fixed_output=y_c)
    if initial_inputs is None:
        initial_inputs = np.tile(model.g_u(y_c), (problem.horizon, 1))
    start = np.asarray(initial_inputs, dtype=np.float64).reshape(-1)
    try:
        result = solve_nlp(shooting.nlp(), start, cfg)
    except NonFiniteObjective as exc:
        raise TrackingInfeasible(str(exc)) from exc
    solution = shooting.solution(result.x, "tracking", result.inner_iterations)
    if not solution.feasible(problem, cfg.constraint_tol):
        raise TrackingInfeasible(
            f"agent {problem.agent}: no feasible tracker for output {y_c.tolist()}"
        )
    return solution


def shifted_candidate(prev: LocalSolution, model: AgentModel) -> Candidate:
    """Drop the applied input and append the equilibrium input of `y_c`."""
    inputs = np.vstack([prev.inputs[1:], model.g_u(prev.coop_output)[None, :]])
    return Candidate("shifted", inputs, prev.coop_output.copy())


def incremental_candidate(
    problem: LocalProblem,
    prev: LocalSolution,
    theta: float,
    theta_tilde: float,
    solver_cfg: Optional[SolverConfig] = None,
) -> Candidate:
    """Move `y_c` a fraction `theta` along the projected gradient step and track it.

    `problem` is the agent's problem at the new time step; its neighbour values
    define the gradient step.
    """
    if not 0 < theta <= 1:
        raise ValueError(f"theta must lie in (0, 1], got {theta}")
    if not theta_tilde > 0:
        raise ValueError(f"theta_tilde must be positive, got {theta_tilde}")
    model = problem.model
    y = prev.coop_output
    shifted = shifted_candidate(prev, model)
    if not problem.neighbors:
        return Candidate("incremental", shifted.inputs, y.copy())
    assert problem.cost is not None
    target = pg_update(problem.cost, problem.agent, y, problem.neighbor_values, theta_tilde)
    y_b = model.output_set.project(y + theta * (target - y))
    if np.array_equal(y_b, y):
        return Candidate("incremental", shifted.inputs, y_b)
    tracker = solve_tracking(problem, y_b, shifted.inputs, solver_cfg)
    return Candidate("incremental", tracker.inputs, y_b)


def quadratic_oracle(problem: LocalProblem) -> Tuple[float, Matrix, Vector]:
    """Reference optimum for linear models with consensus coupling, via one dense QP.

    Returns `(objective, inputs, y_c)`. Meant for short horizons only.
    """
    model = problem.model
    if not isinstance(model, LinearAgentModel):
        raise TypeError("the quadratic oracle needs a linear agent model")
    if problem.neighbors and not isinstance(problem.cost, ConsensusCost):
        raise TypeError("the quadratic oracle needs a consensus cooperation cost")
    if not isinstance(problem.terminal, TerminalEquality):
        raise TypeError("the quadratic oracle needs the terminal equality constraint")
    N, n, q, p = problem.horizon, model.state_dim, model.input_dim, model.output_dim
    dim = N * q + p
    Q, R = problem.Q, problem.R

    # x_k = F_k x0 + M_k u
    free = [problem.state.copy()]
    maps = [np.zeros((n, N * q))]
    for k in range(N):
        step_map = model.A @ maps[-1]
        step_map[:, k * q : (k + 1) * q] += model.B
        maps.append(step_map)
        free.append(model.A @ free[-1])

    y_sel = np.hstack([np.zeros((p, N * q)), np.eye(p)])
    H = np.zeros((dim, dim))
    f = np.zeros(dim)
    const = 0.0
    for k in range(N):
        P_k = np.hstack([maps[k], -model.Gx])
        E_k = np.zeros((q, dim))
        E_k[:, k * q : (k + 1) * q] = np.eye(q)
        E_k[:, N * q :] = -model.Gu
        H += 2.0 * (P_k.T @ Q @ P_k + E_k.T @ R @ E_k)
        f += 2.0 * (P_k.T @ Q @ free[k] - E_k.T @ R @ model.u0)
        const += float(free[k] @ Q @ free[k] + model.u0 @ R @ model.u0)
    neighbors = problem.neighbors
    if neighbors:
        total = sum(problem.neighbor_values[j] for j in neighbors)
        H += 4.0 * len(neighbors) * y_sel.T @ y_sel
        f += -4.0 * y_sel.T @ total
        const += 2.0 * sum(float(problem.neighbor_values[j] @ problem.neighbor_values[j]) for j in neighbors)

    A_eq = np.hstack([maps[N], -model.Gx])
    b_eq = -free[N]
    G_rows, h_rows = [], []
    state_G, state_h = model.state_set.rows()
    for k in range(1, N):
        G_rows.append(state_G @ np.hstack([maps[k], np.zeros((n, p))]))
        h_rows.append(state_h - state_G @ free[k])
    input_G, input_h = model.input_set.rows()
    for k in range(N):
        sel = np.zeros((q, dim))
        sel[:, k * q : (k + 1) * q] = np.eye(q)
        G_rows.append(input_G @ sel)
        h_rows.append(input_h)
    out_G, out_h = model.output_set.rows()
    G_rows.append(out_G @ y_sel)
    h_rows.append(out_h)
    z = solve_qp(
        QpSpec(H=H, f=f, A=A_eq, b=b_eq, G=np.vstack(G_rows), h=np.concatenate(h_rows))
    )
    value = 0.5 * float(z @ H @ z) + float(f @ z) + const
    return value, z[: N * q].reshape(N, q), z[N * q :]
