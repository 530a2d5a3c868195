"""Runtime monitors for the closed loop.

Monitors observe accepted solutions and recompute every quantity they report
(rollouts, tracking costs, projected gradient steps) on their own. They never
influence control decisions.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Union

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field

from ._logger import logger
from ._utils import weighted_sq_norm
from .constants_cache import BaseConstantsCache, ConstantsDiskCache, ConstantsRAMCache
from .cooperation import (
    CooperationCost,
    CooperationSetSpec,
    EmptyIntersection,
    coop_set_distance,
    pg_update,
)
from .dynamics import rollout
from .ocp import (
    CandidateConfig,
    LocalProblem,
    LocalSolution,
    TrackingInfeasible,
    default_theta_tilde,
    solve_tracking,
    tracking_cost,
)
from .orchestrator import AgentSpec, SwarmState
from .solver import SolverConfig

__all__ = [
    "MonitorConfig",
    "MonitorConstants",
    "DiagnosticsRecord",
    "LyapunovViolation",
    "SandwichReport",
    "DiagnosticsRecorder",
    "value_function",
    "record",
    "lyapunov_check",
    "case_split",
    "sandwich_check",
    "descent_bound",
    "estimate_constants",
]

Vector = npt.NDArray[np.float64]
Label = Literal["a", "b"]


class MonitorConfig(BaseModel):
    """Settings of the runtime monitors."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    gamma: Optional[Union[float, Dict[int, float]]] = Field(
        default=None,
        description="Case-split constant, one value or one per agent; estimated when unset.",
    )
    lyapunov_slack: float = Field(
        default=1e-6, ge=0, description="Allowed increase of the value function per step."
    )
    lyapunov: bool = Field(default=True, description="Check the value function decrease.")
    descent_bound: bool = Field(
        default=True, description="Evaluate the per-step descent bound of the candidates."
    )
    case_split: bool = Field(default=True, description="Label agents by dominating error.")
    constant_samples: int = Field(
        default=2, ge=1, description="Samples per radius when estimating constants."
    )
    constant_radii: List[float] = Field(
        default_factory=lambda: [0.4, 0.2, 0.1, 0.05],
        description="Tracking ball radii, in the Q-norm, tried when estimating epsilon.",
    )
    cache_dir: Optional[str] = Field(
        default=None, description="Directory of an on-disk cache for estimated constants."
    )
    seed: int = Field(default=0, ge=0, description="Seed of the constant estimation.")

    def gamma_for(self, agent: int) -> Optional[float]:
        if self.gamma is None:
            return None
        if isinstance(self.gamma, dict):
            return self.gamma.get(agent)
        return float(self.gamma)


@dataclass
class MonitorConstants:
    lipschitz_gx: float
    c_Y: float
    c_u: float
    epsilon: float
    lipschitz: float
    theta: float
    theta_tilde: float
    kappa: float
    c_theta: float
    gamma: float

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass
class DiagnosticsRecord:
    time: int
    tracking_costs: Dict[int, float]
    coupling_costs: Dict[int, float]
    value: float
    coop_cost: float
    coop_distance: float
    coop_distance_proxy: bool
    tracking_errors: Dict[int, float]
    pg_gaps: Dict[int, float]
    labels: Dict[int, Label]
    min_margin: float
    solver_iterations: Dict[int, int]
    solver_status: Dict[int, str]
    tracking_lower_bound: float
    topology_changed: bool = False
    lyapunov_delta: Optional[float] = None
    descent_bound: Optional[float] = None


@dataclass(frozen=True)
class LyapunovViolation:
    time: int
    delta: float


@dataclass
class SandwichReport:
    lower_ratio: float
    upper_ratio: float
    violations: int
    samples: int
    upper_slack: float = 1.0


def _tracking(spec: AgentSpec, state: Vector, solution: LocalSolution) -> float:
    problem = LocalProblem(
        agent=spec.id,
        model=spec.model,
        state=state,
        Q=spec.Q,
        R=spec.R,
        horizon=solution.inputs.shape[0],
    )
    states = rollout(spec.model, state, solution.inputs)
    return tracking_cost(problem, states, solution.inputs, solution.coop_output)


def value_function(swarm: SwarmState, solutions: Optional[Mapping[int, LocalSolution]] = None) -> float:
    """Sum of optimal tracking costs plus the global cooperation cost."""
    solutions = swarm.solutions if solutions is None else solutions
    total = sum(_tracking(swarm.agents[i], swarm.states[i], solutions[i]) for i in solutions)
    return total + swarm.cost.global_cost({i: s.coop_output for i, s in solutions.items()})


def case_split(rec: DiagnosticsRecord, gamma: Union[float, Mapping[int, float]]) -> Dict[int, Label]:
    """Label `b` when the tracking error is dominated by the stationarity gap."""
    labels: Dict[int, Label] = {}
    for i, err in rec.tracking_errors.items():
        g = gamma[i] if isinstance(gamma, Mapping) else gamma
        labels[i] = "b" if err * err <= g * rec.pg_gaps[i] ** 2 else "a"
    return labels


def record(
    swarm: SwarmState,
    spec: CooperationSetSpec,
    gammas: Optional[Mapping[int, float]] = None,
) -> DiagnosticsRecord:
    y = {i: s.coop_output for i, s in swarm.solutions.items()}
    cost = swarm.cost
    tracking = {i: _tracking(swarm.agents[i], swarm.states[i], s) for i, s in swarm.solutions.items()}
    coupling = {i: cost.outgoing_cost(i, y) for i in y}
    coop_cost = cost.global_cost(y)
    try:
        distance = coop_set_distance(spec, cost.output_sets, y, cost)
        coop_distance, proxy = distance.value, distance.proxy
    except EmptyIntersection:
        coop_distance, proxy = math.nan, False
    errors: Dict[int, float] = {}
    gaps: Dict[int, float] = {}
    margin = math.inf
    for i, sol in swarm.solutions.items():
        agent = swarm.agents[i]
        dx = swarm.states[i] - agent.model.g_x(sol.coop_output)
        errors[i] = math.sqrt(weighted_sq_norm(dx, agent.Q))
        info = swarm.step_info.get(i)
        theta_tilde = (
            info.theta_tilde
            if info is not None
            else default_theta_tilde(cost, i, swarm.config.candidate)
        )
        neighbors = {j: y[j] for j in cost.neighbors(i)}
        gaps[i] = float(np.linalg.norm(pg_update(cost, i, y[i], neighbors, theta_tilde) - y[i]))
        margin = min(margin, agent.model.margin(swarm.states[i], sol.first_input))
    rec = DiagnosticsRecord(
        time=swarm.time,
        tracking_costs=tracking,
        coupling_costs=coupling,
        value=sum(tracking.values()) + coop_cost,
        coop_cost=coop_cost,
        coop_distance=coop_distance,
        coop_distance_proxy=proxy,
        tracking_errors=errors,
        pg_gaps=gaps,
        labels={},
        min_margin=margin,
        solver_iterations={i: s.iterations for i, s in swarm.solutions.items()},
        solver_status={i: s.status for i, s in swarm.solutions.items()},
        tracking_lower_bound=sum(e * e for e in errors.values()),
        topology_changed=swarm.topology_changed,
    )
    if gammas:
        rec.labels = case_split(rec, gammas)
    return rec


def lyapunov_check(trace: Sequence[DiagnosticsRecord], slack: float = 1e-6) -> List[LyapunovViolation]:
    """Steps whose value function increase exceeds `slack`.

    Transitions touching a topology change are skipped since the value
    function is defined for a fixed set of agents.
    """
    violations = []
    for before, after in zip(trace, trace[1:]):
        if before.topology_changed or after.topology_changed:
            continue
        delta = after.value - before.value
        if delta > slack:
            violations.append(LyapunovViolation(after.time, delta))
    return violations


def descent_bound(
    previous: SwarmState,
    current: SwarmState,
    gammas: Mapping[int, float],
) -> Optional[float]:
    """Right-hand side of the per-step value decrease bound built from the candidates.

    Agents labelled `b` contribute their incremental candidate's tracking cost
    minus their previous optimal tracking cost minus `kappa * gap^2`; all other
    agents contribute minus their first stage cost.
    """
    if previous.topology_changed or current.topology_changed:
        return None
    total = 0.0
    for i, prev in previous.solutions.items():
        agent = previous.agents[i]
        info = current.step_info[i]
        model = agent.model
        y = prev.coop_output
        x = previous.states[i]
        dx = x - model.g_x(y)
        du = prev.first_input - model.g_u(y)
        stage = weighted_sq_norm(dx, agent.Q) + weighted_sq_norm(du, agent.R)
        target = pg_update(current.cost, i, y, info.neighbor_values, info.theta_tilde)
        gap_sq = float(np.sum((target - y) ** 2))
        incremental = info.candidates.get("incremental")
        feasible = incremental is not None and incremental.feasible(
            LocalProblem(i, model, current.states[i], agent.Q, agent.R, prev.inputs.shape[0]),
            current.config.solver.constraint_tol,
        )
        label_b = weighted_sq_norm(dx, agent.Q) <= gammas.get(i, 0.0) * gap_sq
        if label_b and feasible:
            theta, theta_tilde = info.theta, info.theta_tilde
            kappa = (2 * theta - theta_tilde * current.cost.lipschitz(i) * theta**2) / (2 * theta_tilde)
            total += incremental.tracking_cost - _tracking(agent, x, prev) - kappa * gap_sq
        else:
            total -= stage
    return total


def sandwich_check(
    cost: CooperationCost,
    spec: CooperationSetSpec,
    samples: Sequence[Mapping[int, Vector]],
) -> SandwichReport:
    """Compare the consensus cost against Laplacian eigenvalue bounds in the set distance."""
    if spec.kind != "consensus":
        raise ValueError("the eigenvalue sandwich only applies to consensus")
    spectrum = cost.graph.laplacian_spectrum()
    lambda_2 = float(spectrum[1]) if spectrum.shape[0] > 1 else 0.0
    lambda_max = float(spectrum[-1])
    m = len(cost.graph)
    lower_ratio, upper_ratio = math.inf, 0.0
    violations = 0
    for y in samples:
        value = cost.global_cost(y)
        d_sq = coop_set_distance(spec, cost.output_sets, y).value ** 2
        lower, upper = lambda_2 * d_sq, lambda_max * m * d_sq
        if d_sq > 0:
            lower_ratio = min(lower_ratio, value / lower)
            upper_ratio = max(upper_ratio, value / upper)
        if value < lower - 1e-9 or value > upper + 1e-9:
            violations += 1
    return SandwichReport(lower_ratio, upper_ratio, violations, len(samples), float(m))


def _set_key(constraint_set) -> bytes:
    G, h = constraint_set.rows()
    return G.tobytes() + h.tobytes()


def _constants_key(
    agent: AgentSpec,
    cost: CooperationCost,
    horizon: int,
    candidate: CandidateConfig,
    cfg: MonitorConfig,
):
    neighbors = cost.neighbors(agent.id)
    return (
        agent.model.name,
        _set_key(agent.model.output_set),
        agent.Q.tobytes(),
        agent.R.tobytes(),
        horizon,
        type(cost).__name__,
        repr(getattr(cost, "spec", None)),
        tuple(_set_key(cost.output_set(j)) for j in neighbors),
        candidate.theta,
        candidate.theta_tilde,
        cfg.constant_samples,
        tuple(cfg.constant_radii),
        cfg.seed,
    )


def estimate_constants(
    agent: AgentSpec,
    cost: CooperationCost,
    horizon: int,
    candidate: Optional[CandidateConfig] = None,
    solver_cfg: Optional[SolverConfig] = None,
    config: Optional[MonitorConfig] = None,
    cache: Optional[BaseConstantsCache] = None,
) -> MonitorConstants:
    """Numerical estimates of the constants behind the case-split threshold `gamma`.

    `epsilon` is the largest tried radius (Q-norm) around sampled equilibria from
    which every sampled state can be steered back, `c_u` bounds the optimal
    tracking cost relative to the squared distance there.
    """
    candidate = candidate or CandidateConfig()
    config = config or MonitorConfig()
    key = _constants_key(agent, cost, horizon, candidate, config)
    if cache is not None and key in cache:
        return MonitorConstants(**cache[key])

    model = agent.model
    i = agent.id
    rng = np.random.default_rng([config.seed, i])
    Y = model.output_set
    n_samples = config.constant_samples

    pairs = Y.sample(rng, 2 * 16)
    lipschitz_gx = 0.0
    for a, b in zip(pairs[::2], pairs[1::2]):
        dist = float(np.linalg.norm(a - b))
        if dist > 0:
            lipschitz_gx = max(lipschitz_gx, float(np.linalg.norm(model.g_x(a) - model.g_x(b))) / dist)

    theta = candidate.theta
    theta_tilde = default_theta_tilde(cost, i, candidate)
    neighbors = cost.neighbors(i)
    c_Y = 0.0
    if neighbors:
        own = Y.sample(rng, 64)
        others = {j: cost.output_set(j).sample(rng, 64) for j in neighbors}
        for k in range(own.shape[0]):
            values = {j: others[j][k] for j in neighbors}
            c_Y = max(c_Y, float(np.sum((pg_update(cost, i, own[k], values, theta_tilde) - own[k]) ** 2)))

    epsilon, c_u = 0.0, 1.0
    q_chol = np.linalg.cholesky(agent.Q)
    for radius in sorted(config.constant_radii, reverse=True):
        ratios = []
        for y in Y.sample(rng, n_samples):
            direction = rng.standard_normal(model.state_dim)
            # scale so that |delta|_Q equals the radius
            delta = np.linalg.solve(q_chol.T, direction / np.linalg.norm(direction)) * radius
            x = model.g_x(y) + delta
            if not model.state_set.contains(x):
                break
            problem = LocalProblem(i, model, x, agent.Q, agent.R, horizon)
            try:
                tracker = solve_tracking(problem, y, solver_cfg=solver_cfg)
            except TrackingInfeasible:
                break
            ratios.append(tracker.tracking_cost / radius**2)
        if len(ratios) == n_samples:
            epsilon, c_u = radius, max(1.0, max(ratios))
            break
    if epsilon == 0.0:
        epsilon = 0.5 * min(config.constant_radii)
        logger.warning(
            "agent %d: no tracking ball verified, using epsilon=%g and c_u=%g", i, epsilon, c_u
        )

    lipschitz = cost.lipschitz(i)
    kappa = (2 * theta - theta_tilde * lipschitz * theta**2) / (2 * theta_tilde)
    lambda_q = float(np.linalg.eigvalsh(agent.Q).max())
    c_theta = kappa - 2 * theta**2 * lipschitz_gx**2 * lambda_q * c_u
    bounds = []
    if c_Y > 0:
        bounds += [epsilon**2 / c_Y, epsilon**2 / (4 * c_u * c_Y)]
    if c_theta > 0:
        bounds.append(c_theta / (4 * c_u**2))
    else:
        logger.warning("agent %d: c_theta=%.3g is not positive, gamma ignores it", i, c_theta)
    gamma = min(bounds) if bounds else 1.0
    constants = MonitorConstants(
        lipschitz_gx=lipschitz_gx,
        c_Y=c_Y,
        c_u=c_u,
        epsilon=epsilon,
        lipschitz=lipschitz,
        theta=theta,
        theta_tilde=theta_tilde,
        kappa=kappa,
        c_theta=c_theta,
        gamma=gamma,
    )
    if cache is not None:
        cache[key] = constants.as_dict()
    return constants


class DiagnosticsRecorder:
    """Sink for `orchestrator.run` that builds one record per step."""

    def __init__(
        self,
        spec: CooperationSetSpec,
        config: Optional[MonitorConfig] = None,
        cache: Optional[BaseConstantsCache] = None,
    ):
        self.spec = spec
        self.config = config or MonitorConfig()
        if cache is None:
            cache = (
                ConstantsDiskCache(self.config.cache_dir)
                if self.config.cache_dir is not None
                else ConstantsRAMCache()
            )
        self.cache = cache
        self.records: List[DiagnosticsRecord] = []
        self.constants: Dict[int, MonitorConstants] = {}
        self.gammas: Dict[int, float] = {}
        self.bound_violations: List[int] = []
        self._previous: Optional[SwarmState] = None

    def _gamma(self, swarm: SwarmState, i: int) -> float:
        if i not in self.gammas:
            fixed = self.config.gamma_for(i)
            if fixed is not None:
                self.gammas[i] = fixed
            else:
                constants = estimate_constants(
                    swarm.agents[i],
                    swarm.cost,
                    swarm.config.horizon,
                    swarm.config.candidate,
                    swarm.config.solver,
                    self.config,
                    self.cache,
                )
                self.constants[i] = constants
                self.gammas[i] = constants.gamma
        return self.gammas[i]

    def __call__(self, swarm: SwarmState) -> None:
        gammas = (
            {i: self._gamma(swarm, i) for i in swarm.solutions} if self.config.case_split else None
        )
        rec = record(swarm, self.spec, gammas)
        previous = self.records[-1] if self.records else None
        if previous is not None and not (previous.topology_changed or rec.topology_changed):
            rec.lyapunov_delta = rec.value - previous.value
            if self.config.lyapunov and rec.lyapunov_delta > self.config.lyapunov_slack:
                log = logger.warning if swarm.cost.convex else logger.debug
                log("t=%d: value function increased by %.3e", rec.time, rec.lyapunov_delta)
        if self.config.descent_bound and self._previous is not None and gammas is not None:
            rec.descent_bound = descent_bound(self._previous, swarm, self.gammas)
            if (
                rec.descent_bound is not None
                and rec.lyapunov_delta is not None
                and rec.lyapunov_delta > rec.descent_bound + self.config.lyapunov_slack
            ):
                self.bound_violations.append(rec.time)
                logger.warning(
                    "t=%d: value decrease %.3e exceeds candidate bound %.3e",
                    rec.time,
                    rec.lyapunov_delta,
                    rec.descent_bound,
                )
        self.records.append(rec)
        self._previous = swarm

    def lyapunov_violations(self) -> List[LyapunovViolation]:
        return lyapunov_check(self.records, self.config.lyapunov_slack)
