from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field

from ._logger import logger
from ._utils import ArrayLike, as_vector, check_positive_definite
from .cooperation import CooperationCost, Graph, GraphError
from .dynamics import AgentModel, ConstraintSet, rollout
from .ocp import (
    Candidate,
    CandidateConfig,
    Infeasible,
    LocalProblem,
    LocalSolution,
    TrackingInfeasible,
    default_theta_tilde,
    evaluate_candidate,
    incremental_candidate,
    shifted_candidate,
    solve_local,
)
from .solver import SolverConfig

__all__ = [
    "InitialInfeasible",
    "AgentSpec",
    "JoiningAgent",
    "TopologyEvent",
    "MailboxEntry",
    "Mailbox",
    "ClosedLoopConfig",
    "AgentStepInfo",
    "SwarmState",
    "Trace",
    "initialize",
    "step",
    "run",
    "parallel_groups",
]

Vector = npt.NDArray[np.float64]
CostFactory = Callable[[Graph, Mapping[int, ConstraintSet]], CooperationCost]
WarmStartHook = Callable[[int, int, Candidate, LocalProblem], Candidate]


class InitialInfeasible(Infeasible):
    """The first solve of an agent failed, so the initial state is not admissible."""


@dataclass(frozen=True, eq=False)
class AgentSpec:
    id: int
    model: AgentModel
    Q: npt.NDArray[np.float64]
    R: npt.NDArray[np.float64]

    def __post_init__(self):
        object.__setattr__(self, "Q", check_positive_definite(self.Q, f"Q of agent {self.id}"))
        object.__setattr__(self, "R", check_positive_definite(self.R, f"R of agent {self.id}"))

    @classmethod
    def scaled(cls, id: int, model: AgentModel, q_weight: float = 1.0, r_weight: float = 1.0):
        return cls(
            id,
            model,
            q_weight * np.eye(model.state_dim),
            r_weight * np.eye(model.input_dim),
        )


@dataclass(frozen=True, eq=False)
class JoiningAgent:
    agent: AgentSpec
    initial_state: Vector
    initial_coop_output: Optional[Vector] = None


@dataclass(frozen=True, eq=False)
class TopologyEvent:
    """At the end of step `time` the graph becomes `graph` and `joining` enter."""

    time: int
    graph: Graph
    joining: Tuple[JoiningAgent, ...] = ()


@dataclass(frozen=True)
class MailboxEntry:
    value: Vector
    time: int
    position: int


class Mailbox:
    """Latest published cooperation output of every agent."""

    def __init__(self, entries: Optional[Mapping[int, MailboxEntry]] = None):
        self._entries: Dict[int, MailboxEntry] = dict(entries or {})

    def publish(self, agent: int, value: ArrayLike, time: int, position: int) -> None:
        value = np.array(value, dtype=np.float64)
        value.setflags(write=False)
        self._entries[agent] = MailboxEntry(value, time, position)

    def read(self, agents: Sequence[int]) -> Dict[int, MailboxEntry]:
        return {j: self._entries[j] for j in agents}

    def snapshot(self) -> "Mailbox":
        return Mailbox(self._entries)

    def __contains__(self, agent: int) -> bool:
        return agent in self._entries

    def __getitem__(self, agent: int) -> MailboxEntry:
        return self._entries[agent]


class ClosedLoopConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    horizon: int = Field(default=10, ge=1, description="Prediction horizon N in steps.")
    terminal_tol: float = Field(
        default=1e-6, gt=0, description="Max-norm tolerance of the terminal equality."
    )
    solver: SolverConfig = Field(default_factory=SolverConfig)
    candidate: CandidateConfig = Field(default_factory=CandidateConfig)
    parallel: bool = Field(
        default=False, description="Solve non-adjacent agents concurrently."
    )
    max_workers: Optional[int] = Field(
        default=None, ge=1, description="Thread pool size in parallel mode."
    )


@dataclass(frozen=True, eq=False)
class AgentStepInfo:
    """What one agent saw and built while solving at `time`."""

    agent: int
    time: int
    neighbor_values: Mapping[int, Vector]
    neighbor_times: Mapping[int, int]
    candidates: Mapping[str, LocalSolution] = field(default_factory=dict)
    theta: float = 1.0
    theta_tilde: float = 0.1


@dataclass(frozen=True, eq=False)
class SwarmState:
    """Closed loop at time `time`: states, the solutions computed at `time`, the graph."""

    time: int
    graph: Graph
    agents: Mapping[int, AgentSpec]
    states: Mapping[int, Vector]
    solutions: Mapping[int, LocalSolution]
    mailbox: Mailbox
    cost: CooperationCost
    cost_factory: CostFactory
    config: ClosedLoopConfig
    events: Tuple[TopologyEvent, ...] = ()
    step_info: Mapping[int, AgentStepInfo] = field(default_factory=dict)
    topology_changed: bool = False
    joined: Tuple[int, ...] = ()
    warm_start_hook: Optional[WarmStartHook] = None

    @property
    def applied_inputs(self) -> Dict[int, Vector]:
        return {i: sol.first_input for i, sol in self.solutions.items()}

    @property
    def coop_outputs(self) -> Dict[int, Vector]:
        return {i: sol.coop_output for i, sol in self.solutions.items()}

    def outputs(self) -> Dict[int, Vector]:
        return {
            i: self.agents[i].model.output(self.states[i], self.solutions[i].first_input)
            for i in self.states
        }


Trace = List[SwarmState]


def parallel_groups(graph: Graph) -> List[List[int]]:
    """Greedy colouring in index order: an agent's colour is one above the highest
    colour among its lower-indexed neighbours.

    Processing the colour classes in ascending order gives every agent exactly
    the mailbox reads of the sequential order.
    """
    colour: Dict[int, int] = {}
    for i in graph.nodes:
        lower = [colour[j] for j in graph.neighbors(i) if j < i]
        colour[i] = 1 + max(lower) if lower else 0
    groups: Dict[int, List[int]] = {}
    for i in graph.nodes:
        groups.setdefault(colour[i], []).append(i)
    return [sorted(groups[c]) for c in sorted(groups)]


def _output_sets(agents: Mapping[int, AgentSpec]) -> Dict[int, ConstraintSet]:
    return {i: spec.model.output_set for i, spec in agents.items()}


def _check_read_rule(agent: int, time: int, reads: Mapping[int, MailboxEntry]) -> None:
    for j, entry in reads.items():
        expected = time if j < agent else time - 1
        if entry.time != expected:
            raise RuntimeError(
                f"agent {agent} at t={time} read y_c of agent {j} from t={entry.time}, "
                f"expected t={expected}"
            )


def _placeholder_solution(spec: AgentSpec, state: Vector, y: Vector, horizon: int) -> LocalSolution:
    """Equilibrium plan of an agent that joined without solving yet."""
    model = spec.model
    inputs = np.tile(model.g_u(y), (horizon, 1))
    states = rollout(model, state, inputs)
    residual = float(np.max(np.abs(states[-1] - model.g_x(y))))
    return LocalSolution(
        inputs=inputs,
        coop_output=y.copy(),
        states=states,
        objective=0.0,
        tracking_cost=0.0,
        coupling_cost=0.0,
        status="joined",
        terminal_residual=residual,
        violation=0.0,
    )


@dataclass(frozen=True, eq=False)
class _Round:
    """Everything an agent's solve at one time step depends on."""

    time: int
    graph: Graph
    agents: Mapping[int, AgentSpec]
    states: Mapping[int, Vector]
    previous: Optional[Mapping[int, LocalSolution]]
    initial_outputs: Mapping[int, Vector]
    cost: CooperationCost
    config: ClosedLoopConfig
    warm_start_hook: Optional[WarmStartHook]


def _solve_agent(rnd: _Round, i: int, mailbox: Mailbox) -> Tuple[LocalSolution, AgentStepInfo]:
    spec = rnd.agents[i]
    model = spec.model
    cfg = rnd.config
    neighbors = rnd.graph.neighbors(i)
    reads = mailbox.read(neighbors)
    _check_read_rule(i, rnd.time, reads)
    problem = LocalProblem(
        agent=i,
        model=model,
        state=rnd.states[i],
        Q=spec.Q,
        R=spec.R,
        horizon=cfg.horizon,
        cost=rnd.cost,
        neighbor_values={j: e.value for j, e in reads.items()},
        time=rnd.time,
        terminal_tol=cfg.terminal_tol,
    )
    theta = cfg.candidate.theta
    theta_tilde = default_theta_tilde(rnd.cost, i, cfg.candidate)
    info_candidates: Dict[str, LocalSolution] = {}
    warm: Optional[Candidate] = None
    fallbacks: List[Candidate] = []

    prev = rnd.previous.get(i) if rnd.previous is not None else None
    if prev is None:
        y0 = rnd.initial_outputs.get(i)
        if y0 is not None:
            y0 = model.output_set.project(y0)
            inputs = np.tile(model.g_u(y0), (cfg.horizon, 1))
            fallbacks.append(Candidate("equilibrium", inputs, y0))
    else:
        shifted = shifted_candidate(prev, model)
        fallbacks.append(shifted)
        if cfg.candidate.incremental:
            try:
                fallbacks.append(
                    incremental_candidate(problem, prev, theta, theta_tilde, cfg.solver)
                )
            except TrackingInfeasible as exc:
                logger.debug("agent %d at t=%d: no incremental candidate (%s)", i, rnd.time, exc)
        for candidate in fallbacks:
            info_candidates[candidate.kind] = evaluate_candidate(problem, candidate)
        tol = cfg.solver.constraint_tol
        feasible = [c for c in fallbacks if info_candidates[c.kind].feasible(problem, tol)]
        if feasible:
            warm = min(feasible, key=lambda c: info_candidates[c.kind].objective)
        else:
            warm = shifted
        if rnd.warm_start_hook is not None:
            warm = rnd.warm_start_hook(rnd.time, i, warm, problem)

    try:
        solution = solve_local(problem, warm, cfg.solver, fallbacks)
    except Infeasible as exc:
        if prev is None:
            raise InitialInfeasible(i, rnd.time, "initial state admits no feasible plan") from exc
        raise
    info = AgentStepInfo(
        agent=i,
        time=rnd.time,
        neighbor_values=problem.neighbor_values,
        neighbor_times={j: e.time for j, e in reads.items()},
        candidates=info_candidates,
        theta=theta,
        theta_tilde=theta_tilde,
    )
    return solution, info


def _solve_round(rnd: _Round, mailbox: Mailbox):
    """Agents solve in index order and publish as they go."""
    position = {i: k for k, i in enumerate(rnd.graph.nodes)}
    groups = parallel_groups(rnd.graph) if rnd.config.parallel else [[i] for i in rnd.graph.nodes]
    solutions: Dict[int, LocalSolution] = {}
    infos: Dict[int, AgentStepInfo] = {}
    executor = (
        ThreadPoolExecutor(max_workers=rnd.config.max_workers) if rnd.config.parallel else None
    )
    try:
        for group in groups:
            snapshot = mailbox.snapshot()
            if executor is not None and len(group) > 1:
                results = list(executor.map(lambda i: _solve_agent(rnd, i, snapshot), group))
            else:
                results = [_solve_agent(rnd, i, snapshot) for i in group]
            # publishes of a group become visible together
            for i, (solution, info) in zip(group, results):
                solutions[i] = solution
                infos[i] = info
                mailbox.publish(i, solution.coop_output, rnd.time, position[i])
    finally:
        if executor is not None:
            executor.shutdown()
    return solutions, infos


def _apply_events(swarm: SwarmState) -> SwarmState:
    due = [e for e in swarm.events if e.time == swarm.time]
    if not due:
        return swarm
    agents = dict(swarm.agents)
    states = dict(swarm.states)
    solutions = dict(swarm.solutions)
    mailbox = swarm.mailbox
    graph = swarm.graph
    joined: List[int] = []
    for event in due:
        for joining in event.joining:
            spec = joining.agent
            if spec.id in agents:
                raise GraphError(f"agent {spec.id} is already part of the swarm")
            model = spec.model
            state = as_vector(joining.initial_state, model.state_dim, f"state of agent {spec.id}")
            y0 = joining.initial_coop_output
            if y0 is None:
                y0 = model.output(state, model.input_set.interior_point)
            y0 = model.output_set.project(as_vector(y0, model.output_dim))
            agents[spec.id] = spec
            states[spec.id] = state
            solutions[spec.id] = _placeholder_solution(spec, state, y0, swarm.config.horizon)
            joined.append(spec.id)
        if set(event.graph.nodes) != set(agents):
            raise GraphError(
                f"graph after event at t={event.time} must contain exactly agents {sorted(agents)}"
            )
        graph = event.graph
    position = {i: k for k, i in enumerate(graph.nodes)}
    for i in joined:
        mailbox.publish(i, solutions[i].coop_output, swarm.time, position[i])
    logger.info("t=%d: topology change, %d agents, joined %s", swarm.time, len(graph), joined)
    return replace(
        swarm,
        graph=graph,
        agents=agents,
        states=states,
        solutions=solutions,
        cost=swarm.cost_factory(graph, _output_sets(agents)),
        events=tuple(e for e in swarm.events if e.time != swarm.time),
        topology_changed=True,
        joined=tuple(joined),
    )


def initialize(
    agents: Sequence[AgentSpec],
    graph: Graph,
    x0s: Mapping[int, ArrayLike],
    init_coop_outputs: Optional[Mapping[int, ArrayLike]] = None,
    *,
    cost_factory: CostFactory,
    config: Optional[ClosedLoopConfig] = None,
    events: Sequence[TopologyEvent] = (),
    warm_start_hook: Optional[WarmStartHook] = None,
) -> SwarmState:
    """Solve every agent's problem once at t=0.

    Neighbour values default to the neighbours' measured initial outputs.
    """
    config = config or ClosedLoopConfig()
    agent_map = {spec.id: spec for spec in agents}
    if set(agent_map) != set(graph.nodes):
        raise GraphError("graph vertices and agents differ")
    states = {
        i: as_vector(x0s[i], agent_map[i].model.state_dim, f"initial state of agent {i}")
        for i in graph.nodes
    }
    init_coop_outputs = {
        i: as_vector(v, agent_map[i].model.output_dim) for i, v in (init_coop_outputs or {}).items()
    }
    mailbox = Mailbox()
    for k, i in enumerate(graph.nodes):
        model = agent_map[i].model
        guess = init_coop_outputs.get(i)
        if guess is None:
            guess = model.output(states[i], model.input_set.interior_point)
        mailbox.publish(i, guess, -1, k)
    cost = cost_factory(graph, _output_sets(agent_map))
    rnd = _Round(0, graph, agent_map, states, None, init_coop_outputs, cost, config, warm_start_hook)
    solutions, infos = _solve_round(rnd, mailbox)
    swarm = SwarmState(
        time=0,
        graph=graph,
        agents=agent_map,
        states=states,
        solutions=solutions,
        mailbox=mailbox,
        cost=cost,
        cost_factory=cost_factory,
        config=config,
        events=tuple(sorted(events, key=lambda e: e.time)),
        step_info=infos,
        warm_start_hook=warm_start_hook,
    )
    return _apply_events(swarm)


def step(swarm: SwarmState) -> SwarmState:
    """Apply the first planned inputs, then let all agents solve at the new time."""
    time = swarm.time + 1
    states = {
        i: swarm.agents[i].model.step(x, swarm.solutions[i].first_input)
        for i, x in swarm.states.items()
    }
    mailbox = swarm.mailbox.snapshot()
    rnd = _Round(
        time,
        swarm.graph,
        swarm.agents,
        states,
        swarm.solutions,
        {},
        swarm.cost,
        swarm.config,
        swarm.warm_start_hook,
    )
    solutions, infos = _solve_round(rnd, mailbox)
    advanced = replace(
        swarm,
        time=time,
        states=states,
        solutions=solutions,
        mailbox=mailbox,
        step_info=infos,
        topology_changed=False,
        joined=(),
    )
    return _apply_events(advanced)


def run(
    swarm: SwarmState,
    T_steps: int,
    diagnostics_sink: Optional[Callable[[SwarmState], None]] = None,
) -> Trace:
    """Advance `T_steps` times; the trace holds the initial state and every step."""
    if T_steps < 0:
        raise ValueError("T_steps must be nonnegative")
    trace: Trace = [swarm]
    if diagnostics_sink is not None:
        diagnostics_sink(swarm)
    for _ in range(T_steps):
        swarm = step(swarm)
        trace.append(swarm)
        if diagnostics_sink is not None:
            diagnostics_sink(swarm)
        logger.info("t=%d solved for %d agents", swarm.time, len(swarm.solutions))
    return trace
