from __future__ import annotations

from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict
from typing_extensions import Self

from coop_mpc.cooperation import Graph
from coop_mpc.diagnostics import MonitorConfig
from coop_mpc.ocp import CandidateConfig
from coop_mpc.solver import SolverConfig

Edge = Tuple[int, int]

STATE_DIMS = {"double_integrator": 4, "quadcopter": 10}
OUTPUT_DIMS = {"double_integrator": 2, "quadcopter": 3}


class AgentConfig(BaseModel):
    """One agent of a scenario."""

    model_config = ConfigDict(extra="forbid")

    id: int = Field(ge=1, description="Agent index; agents solve in ascending order.")
    model: Literal["double_integrator", "quadcopter"] = Field(description="Agent dynamics.")
    region: Optional[Literal["a", "b", "c"]] = Field(
        default=None, description="Position region of a double integrator (default: a)."
    )
    h: float = Field(default=0.1, gt=0, description="Quadcopter discretisation step in seconds.")
    initial_state: List[float] = Field(description="Initial state x_i(0).")
    initial_coop_output: Optional[List[float]] = Field(
        default=None,
        description="Initial cooperation output; the measured output when unset.",
    )
    q_weight: Optional[float] = Field(
        default=None, gt=0, description="Overrides the scenario's state weight."
    )
    r_weight: Optional[float] = Field(
        default=None, gt=0, description="Overrides the scenario's input weight."
    )

    @model_validator(mode="after")
    def check_dimensions(self) -> Self:
        if self.region is not None and self.model != "double_integrator":
            raise ValueError("region only applies to double integrators")
        if len(self.initial_state) != STATE_DIMS[self.model]:
            raise ValueError(
                f"initial_state of agent {self.id} has {len(self.initial_state)} entries, "
                f"a {self.model} has {STATE_DIMS[self.model]}"
            )
        if (
            self.initial_coop_output is not None
            and len(self.initial_coop_output) != OUTPUT_DIMS[self.model]
        ):
            raise ValueError(
                f"initial_coop_output of agent {self.id} must have {OUTPUT_DIMS[self.model]} entries"
            )
        return self


class EdgeDistance(BaseModel):
    model_config = ConfigDict(extra="forbid")

    edge: Edge
    distance: float = Field(gt=0)


class CooperationConfig(BaseModel):
    """Cooperation goal: output consensus or a distance formation."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["consensus", "formation"] = Field(description="Cooperation goal.")
    distance: float = Field(
        default=1.0, gt=0, description="Planar distance between formation neighbours."
    )
    distances: List[EdgeDistance] = Field(
        default_factory=list, description="Per-edge overrides of `distance`."
    )
    altitude_consensus: bool = Field(
        default=True, description="Formations also agree on the third output."
    )


class WeightsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    q: float = Field(default=1.0, gt=0, description="State weight, Q_i = q I.")
    r: float = Field(default=1.0, gt=0, description="Input weight, R_i = r I.")


class EventConfig(BaseModel):
    """After all agents solved at `time`, the graph becomes `edges` and `joining` enter."""

    model_config = ConfigDict(extra="forbid")

    time: int = Field(ge=0)
    edges: List[Edge]
    joining: List[AgentConfig] = Field(default_factory=list)


class ScenarioConfig(BaseModel):
    """A complete closed-loop experiment."""

    model_config = ConfigDict(extra="forbid")

    name: str = Field(description="Scenario name, used for the default output directory.")
    description: str = ""
    agents: List[AgentConfig] = Field(min_length=1)
    edges: List[Edge]
    cooperation: CooperationConfig
    horizon: int = Field(default=10, ge=1, description="Prediction horizon N.")
    weights: WeightsConfig = Field(default_factory=WeightsConfig)
    steps: int = Field(default=40, ge=0, description="Closed-loop steps T.")
    solver: SolverConfig = Field(default_factory=SolverConfig)
    candidate: CandidateConfig = Field(default_factory=CandidateConfig)
    monitor: MonitorConfig = Field(default_factory=MonitorConfig)
    events: List[EventConfig] = Field(default_factory=list)
    perturbation: float = Field(
        default=0.0,
        ge=0,
        description="Max-norm of the seeded perturbation of warm-start cooperation outputs.",
    )
    seed: int = Field(default=0, ge=0, description="Seed of the warm-start perturbation.")
    parallel: bool = Field(default=False, description="Solve non-adjacent agents concurrently.")

    @model_validator(mode="after")
    def check_topology(self) -> Self:
        ids = [a.id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ValueError(f"agent ids must be unique, got {ids}")
        kinds = {a.model for a in self.agents}
        Graph(ids, self.edges)
        present = set(ids)
        last_time = -1
        for event in self.events:
            if event.time <= last_time:
                raise ValueError("events must have strictly increasing times")
            last_time = event.time
            for joining in event.joining:
                if joining.id in present:
                    raise ValueError(f"joining agent {joining.id} already exists")
                present.add(joining.id)
                kinds.add(joining.model)
            Graph(sorted(present), event.edges)
        dims = {OUTPUT_DIMS[k] for k in kinds}
        if len(dims) != 1:
            raise ValueError("all agents must share one output dimension")
        if self.cooperation.kind == "formation" and dims != {3}:
            raise ValueError("formations need three outputs (planar position and altitude)")
        return self


class RunSettings(BaseSettings):
    """Knobs of one `run` invocation; also read from `COOP_MPC_*` variables."""

    model_config = SettingsConfigDict(env_prefix="COOP_MPC_")

    out: Optional[str] = Field(
        default=None, description="Output directory (default: runs/<scenario name>)."
    )
    steps: Optional[int] = Field(default=None, ge=0, description="Override the scenario's steps.")
    seed: Optional[int] = Field(default=None, ge=0, description="Override the scenario's seed.")
    parallel: bool = Field(default=False, description="Solve non-adjacent agents concurrently.")
    verbose: bool = Field(default=False, description="Log solver details to stderr.")
