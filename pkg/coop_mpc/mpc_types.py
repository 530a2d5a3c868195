"""Row and header schemas of the files written by a run.

Column order of the CSV files is part of the public interface; see
`TRACE_FIXED_COLUMNS` and `DIAGNOSTICS_COLUMNS`.
"""

from typing import Dict, List, Optional

from typing_extensions import Literal, TypedDict

JsonScalar = Optional[float]


class TraceRow(TypedDict):
    t: int
    agent: int
    x: List[float]
    u: List[float]
    y: List[float]
    y_c: List[float]
    status: str


class DiagnosticsRow(TypedDict):
    t: int
    agent: int
    tracking_cost: float
    coupling_cost: float
    tracking_error: float
    pg_gap: float
    label: Literal["a", "b", ""]
    solver_iterations: int
    solver_status: str
    value: float
    coop_cost: float
    coop_distance: float
    coop_distance_proxy: bool
    tracking_lower_bound: float
    min_margin: float
    lyapunov_delta: JsonScalar
    descent_bound: JsonScalar
    topology_changed: bool


class AgentConstants(TypedDict, total=False):
    gamma: float
    lipschitz: float
    kappa: float
    theta: float
    theta_tilde: float
    lipschitz_gx: float
    c_Y: float
    c_u: float
    epsilon: float
    c_theta: float


class RunHeader(TypedDict):
    version: str
    scenario: Dict[str, object]
    steps: int
    seed: int
    status: Literal["ok", "infeasible"]
    constants: Dict[str, AgentConstants]
    lyapunov_violations: List[int]
    descent_bound_violations: List[int]


class FailureDump(TypedDict):
    time: int
    agent: Optional[int]
    message: str
    states: Dict[str, List[float]]
    coop_outputs: Dict[str, List[float]]


TRACE_FIXED_COLUMNS = ("t", "agent")
DIAGNOSTICS_COLUMNS = tuple(DiagnosticsRow.__annotations__)
