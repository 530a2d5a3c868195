from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from typing import IO, Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml
from pydantic import ValidationError

import coop_mpc
from coop_mpc._logger import logger
from coop_mpc._utils import agent_rng
from coop_mpc.cooperation import (
    CooperationSetSpec,
    Graph,
    consensus_cost,
    formation_cost,
)
from coop_mpc.diagnostics import DiagnosticsRecord, DiagnosticsRecorder, MonitorConstants
from coop_mpc.dynamics import AgentModel, QuadcopterModel, double_integrator_model
from coop_mpc.mpc_types import (
    DIAGNOSTICS_COLUMNS,
    TRACE_FIXED_COLUMNS,
    AgentConstants,
    FailureDump,
    RunHeader,
)
from coop_mpc.ocp import Candidate, Infeasible, LocalSolution, default_theta_tilde, shifted_candidate
from coop_mpc.orchestrator import (
    AgentSpec,
    ClosedLoopConfig,
    CostFactory,
    JoiningAgent,
    SwarmState,
    TopologyEvent,
    WarmStartHook,
    initialize,
    run,
)

from .errors import ExitStatus, ScenarioError, ScenarioParseError, ScenarioValidationError
from .scenarios import BUILTIN_SCENARIOS
from .settings import AgentConfig, ScenarioConfig

TRACE_FILE = "trace.csv"
DIAGNOSTICS_FILE = "diagnostics.csv"
HEADER_FILE = "run.json"
FAILURE_FILE = "failure.json"


def parse_scenario(text: str, source: str = "<string>") -> ScenarioConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line, column = (mark.line + 1, mark.column + 1) if mark is not None else (1, 1)
        raise ScenarioParseError(f"{source}: {exc.problem or exc}", line, column) from None
    except yaml.YAMLError as exc:
        raise ScenarioParseError(f"{source}: {exc}", 1, 1) from None
    if not isinstance(data, dict):
        raise ScenarioParseError(f"{source}: top level must be a mapping", 1, 1)
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        error = exc.errors()[0]
        field = ".".join(str(part) for part in error["loc"]) or "<scenario>"
        raise ScenarioValidationError(field, error["msg"]) from None


def load_scenario(source: str) -> ScenarioConfig:
    """Resolve a built-in scenario name or read a YAML (or JSON) scenario file."""
    if source in BUILTIN_SCENARIOS:
        return BUILTIN_SCENARIOS[source]()
    if not os.path.exists(source):
        raise ScenarioError(
            f"{source!r} is neither a file nor a built-in scenario "
            f"({', '.join(sorted(BUILTIN_SCENARIOS))})"
        )
    with open(source, "r", encoding="utf-8") as f:
        return parse_scenario(f.read(), source)


def serialize_scenario(config: ScenarioConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False)


def dump_scenario(config: ScenarioConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(serialize_scenario(config))


@dataclass(frozen=True, eq=False)
class ScenarioBuild:
    """Everything `initialize` needs, built from a scenario without solving."""

    agents: List[AgentSpec]
    graph: Graph
    x0s: Dict[int, np.ndarray]
    init_coop_outputs: Dict[int, np.ndarray]
    cooperation: CooperationSetSpec
    cost_factory: CostFactory
    config: ClosedLoopConfig
    events: List[TopologyEvent]
    warm_start_hook: Optional[WarmStartHook]

    @property
    def all_agents(self) -> List[AgentSpec]:
        return self.agents + [j.agent for e in self.events for j in e.joining]


def _model(agent: AgentConfig) -> AgentModel:
    if agent.model == "double_integrator":
        return double_integrator_model(agent.region or "a")
    return QuadcopterModel(agent.h)


def _agent_spec(agent: AgentConfig, config: ScenarioConfig) -> AgentSpec:
    q = agent.q_weight if agent.q_weight is not None else config.weights.q
    r = agent.r_weight if agent.r_weight is not None else config.weights.r
    return AgentSpec.scaled(agent.id, _model(agent), q, r)


def perturb_candidate(
    candidate: Candidate, model: AgentModel, magnitude: float, rng: np.random.Generator
) -> Candidate:
    """Shift the candidate's cooperation output by a random vector of max-norm `magnitude`."""
    if magnitude < 0:
        raise ValueError(f"magnitude must be nonnegative, got {magnitude}")
    if magnitude == 0:
        return candidate
    delta = rng.uniform(-1.0, 1.0, size=candidate.coop_output.shape[0])
    delta *= magnitude / np.max(np.abs(delta))
    y = model.output_set.project(candidate.coop_output + delta)
    return Candidate("perturbed", candidate.inputs.copy(), y)


def perturbed_warm_start(
    solution: LocalSolution,
    magnitude: float,
    seed: int,
    model: AgentModel,
    *,
    time: int = 0,
    agent: int = 0,
) -> Candidate:
    """Shifted candidate of `solution` with a seeded perturbation of its cooperation output."""
    return perturb_candidate(
        shifted_candidate(solution, model), model, magnitude, agent_rng(seed, time, agent)
    )


def _perturbation_hook(magnitude: float, seed: int) -> WarmStartHook:
    def hook(time, agent, warm, problem):
        return perturb_candidate(warm, problem.model, magnitude, agent_rng(seed, time, agent))

    return hook


def build_scenario(config: ScenarioConfig) -> ScenarioBuild:
    coop = config.cooperation
    spec = CooperationSetSpec(
        kind=coop.kind,
        default_distance=coop.distance,
        distances={tuple(d.edge): d.distance for d in coop.distances},
        altitude_consensus=coop.altitude_consensus,
    )
    if spec.kind == "consensus":
        cost_factory: CostFactory = consensus_cost
    else:

        def cost_factory(graph, output_sets):
            return formation_cost(graph, spec, output_sets)

    agents = [_agent_spec(a, config) for a in config.agents]
    graph = Graph([a.id for a in config.agents], config.edges)
    present = list(graph.nodes)
    events = []
    for event in config.events:
        joining = tuple(
            JoiningAgent(
                _agent_spec(a, config),
                np.asarray(a.initial_state, dtype=np.float64),
                None if a.initial_coop_output is None else np.asarray(a.initial_coop_output),
            )
            for a in event.joining
        )
        present += [a.id for a in event.joining]
        events.append(TopologyEvent(event.time, Graph(present, event.edges), joining))
    return ScenarioBuild(
        agents=agents,
        graph=graph,
        x0s={a.id: np.asarray(a.initial_state, dtype=np.float64) for a in config.agents},
        init_coop_outputs={
            a.id: np.asarray(a.initial_coop_output, dtype=np.float64)
            for a in config.agents
            if a.initial_coop_output is not None
        },
        cooperation=spec,
        cost_factory=cost_factory,
        config=ClosedLoopConfig(
            horizon=config.horizon,
            solver=config.solver,
            candidate=config.candidate,
            parallel=config.parallel,
        ),
        events=events,
        warm_start_hook=(
            _perturbation_hook(config.perturbation, config.seed) if config.perturbation > 0 else None
        ),
    )


def build_swarm(config: ScenarioConfig) -> Tuple[SwarmState, CooperationSetSpec]:
    build = build_scenario(config)
    swarm = initialize(
        build.agents,
        build.graph,
        build.x0s,
        build.init_coop_outputs,
        cost_factory=build.cost_factory,
        config=build.config,
        events=build.events,
        warm_start_hook=build.warm_start_hook,
    )
    return swarm, build.cooperation


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return value
    return repr(float(value))


def trace_columns(state_dim: int, input_dim: int, output_dim: int) -> List[str]:
    return (
        list(TRACE_FIXED_COLUMNS)
        + [f"x_{k + 1}" for k in range(state_dim)]
        + [f"u_{k + 1}" for k in range(input_dim)]
        + [f"y_{k + 1}" for k in range(output_dim)]
        + [f"yc_{k + 1}" for k in range(output_dim)]
        + ["status"]
    )


def _padded(values: np.ndarray, width: int) -> List[str]:
    out = [_fmt(v) for v in values]
    return out + [""] * (width - len(out))


class _RunSink:
    """Writes trace and diagnostics rows as the closed loop advances."""

    def __init__(
        self,
        trace_file: IO[str],
        diagnostics_file: IO[str],
        recorder: DiagnosticsRecorder,
        dims: Tuple[int, int, int],
    ):
        self.dims = dims
        self.trace = csv.writer(trace_file, lineterminator="\n")
        self.diagnostics = csv.writer(diagnostics_file, lineterminator="\n")
        self.recorder = recorder
        self.last: Optional[SwarmState] = None
        self.trace.writerow(trace_columns(*dims))
        self.diagnostics.writerow(DIAGNOSTICS_COLUMNS)

    def __call__(self, swarm: SwarmState) -> None:
        self.last = swarm
        n, q, p = self.dims
        for i in sorted(swarm.solutions):
            model = swarm.agents[i].model
            sol = swarm.solutions[i]
            x, u = swarm.states[i], sol.first_input
            self.trace.writerow(
                [_fmt(swarm.time), _fmt(i)]
                + _padded(x, n)
                + _padded(u, q)
                + _padded(model.output(x, u), p)
                + _padded(sol.coop_output, p)
                + [sol.status]
            )
        self.recorder(swarm)
        self._write_record(self.recorder.records[-1])

    def _write_record(self, rec: DiagnosticsRecord) -> None:
        for i in sorted(rec.tracking_costs):
            row = {
                "t": rec.time,
                "agent": i,
                "tracking_cost": rec.tracking_costs[i],
                "coupling_cost": rec.coupling_costs[i],
                "tracking_error": rec.tracking_errors[i],
                "pg_gap": rec.pg_gaps[i],
                "label": rec.labels.get(i, ""),
                "solver_iterations": rec.solver_iterations[i],
                "solver_status": rec.solver_status[i],
                "value": rec.value,
                "coop_cost": rec.coop_cost,
                "coop_distance": rec.coop_distance,
                "coop_distance_proxy": rec.coop_distance_proxy,
                "tracking_lower_bound": rec.tracking_lower_bound,
                "min_margin": rec.min_margin,
                "lyapunov_delta": rec.lyapunov_delta,
                "descent_bound": rec.descent_bound,
                "topology_changed": rec.topology_changed,
            }
            self.diagnostics.writerow([_fmt(row[c]) for c in DIAGNOSTICS_COLUMNS])


def _agent_constants(
    recorder: DiagnosticsRecorder, swarm: Optional[SwarmState], config: ScenarioConfig
) -> Dict[str, AgentConstants]:
    out: Dict[str, AgentConstants] = {}
    estimated: Dict[int, MonitorConstants] = recorder.constants
    for i, gamma in sorted(recorder.gammas.items()):
        if i in estimated:
            out[str(i)] = AgentConstants(**estimated[i].as_dict())  # type: ignore[misc]
            continue
        entry = AgentConstants(gamma=gamma)
        if swarm is not None and i in swarm.graph:
            theta = config.candidate.theta
            theta_tilde = default_theta_tilde(swarm.cost, i, config.candidate)
            lipschitz = swarm.cost.lipschitz(i)
            entry.update(
                theta=theta,
                theta_tilde=theta_tilde,
                lipschitz=lipschitz,
                kappa=(2 * theta - theta_tilde * lipschitz * theta**2) / (2 * theta_tilde),
            )
        out[str(i)] = entry
    return out


def _failure_dump(exc: Infeasible, swarm: Optional[SwarmState], x0s) -> FailureDump:
    if swarm is None:
        states = {str(i): np.asarray(x).tolist() for i, x in x0s.items()}
        outputs: Dict[str, List[float]] = {}
    else:
        states = {str(i): x.tolist() for i, x in swarm.states.items()}
        outputs = {str(i): y.tolist() for i, y in swarm.coop_outputs.items()}
    return FailureDump(
        time=exc.time, agent=exc.agent, message=str(exc), states=states, coop_outputs=outputs
    )


def _finite(value):
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, dict):
        return {k: _finite(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite(v) for v in value]
    return value


def _write_json(path: str, payload) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_finite(payload), f, indent=2, sort_keys=True, allow_nan=False)
        f.write("\n")


def run_scenario(config: ScenarioConfig, out_dir: str) -> int:
    """Run a scenario and write `trace.csv`, `diagnostics.csv` and `run.json` into `out_dir`.

    Returns the exit status; an infeasible local problem yields
    `ExitStatus.INFEASIBLE` together with `failure.json`.
    """
    os.makedirs(out_dir, exist_ok=True)
    build = build_scenario(config)
    every = build.all_agents
    dims = (
        max(a.model.state_dim for a in every),
        max(a.model.input_dim for a in every),
        max(a.model.output_dim for a in every),
    )
    recorder = DiagnosticsRecorder(build.cooperation, config.monitor)
    status = ExitStatus.OK
    with open(os.path.join(out_dir, TRACE_FILE), "w", encoding="utf-8", newline="") as trace_file, open(
        os.path.join(out_dir, DIAGNOSTICS_FILE), "w", encoding="utf-8", newline=""
    ) as diagnostics_file:
        sink = _RunSink(trace_file, diagnostics_file, recorder, dims)
        try:
            swarm = initialize(
                build.agents,
                build.graph,
                build.x0s,
                build.init_coop_outputs,
                cost_factory=build.cost_factory,
                config=build.config,
                events=build.events,
                warm_start_hook=build.warm_start_hook,
            )
            run(swarm, config.steps, sink)
        except Infeasible as exc:
            logger.error("run aborted: %s", exc)
            _write_json(
                os.path.join(out_dir, FAILURE_FILE), _failure_dump(exc, sink.last, build.x0s)
            )
            status = ExitStatus.INFEASIBLE
    header = RunHeader(
        version=coop_mpc.__version__,
        scenario=config.model_dump(mode="json"),
        steps=config.steps,
        seed=config.seed,
        status="ok" if status == ExitStatus.OK else "infeasible",
        constants=_agent_constants(recorder, sink.last, config),
        lyapunov_violations=[v.time for v in recorder.lyapunov_violations()],
        descent_bound_violations=list(recorder.bound_violations),
    )
    _write_json(os.path.join(out_dir, HEADER_FILE), header)
    return status


def describe(build: ScenarioBuild) -> Sequence[str]:
    """Human-readable summary printed by `validate`."""
    lines = [
        f"agents: {', '.join(f'{a.id} ({a.model.name})' for a in build.agents)}",
        f"graph: {list(build.graph.edges)}",
        f"cooperation: {build.cooperation.kind}",
        f"horizon: {build.config.horizon}",
    ]
    for event in build.events:
        joined = [j.agent.id for j in event.joining]
        lines.append(f"event t={event.time}: graph {list(event.graph.edges)}, joining {joined}")
    return lines
