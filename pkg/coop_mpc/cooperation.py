from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, Iterable, Literal, Mapping, NamedTuple, Optional, Tuple

import networkx as nx
import numpy as np
import numpy.typing as npt

from ._utils import ArrayLike, CoopMpcError, as_vector
from .dynamics import ConstraintSet
from .solver import QpInfeasible, QpSpec, solve_qp

__all__ = [
    "GraphError",
    "EmptyIntersection",
    "Graph",
    "CooperationSetSpec",
    "CooperationCost",
    "ConsensusCost",
    "FormationCost",
    "CoopSetDistance",
    "consensus_cost",
    "formation_cost",
    "project_Y",
    "pg_update",
    "coop_set_distance",
]

Vector = npt.NDArray[np.float64]
Outputs = Mapping[int, Vector]


class GraphError(CoopMpcError, ValueError):
    pass


class EmptyIntersection(CoopMpcError):
    pass


class Graph:
    """Undirected, hence bilateral, connected communication graph without self-loops."""

    def __init__(self, nodes: Iterable[int], edges: Iterable[Tuple[int, int]]):
        graph = nx.Graph()
        graph.add_nodes_from(int(i) for i in nodes)
        for i, j in edges:
            i, j = int(i), int(j)
            if i == j:
                raise GraphError(f"self-loop at agent {i}")
            if i not in graph or j not in graph:
                raise GraphError(f"edge ({i}, {j}) references an unknown agent")
            graph.add_edge(i, j)
        if graph.number_of_nodes() == 0:
            raise GraphError("graph has no agents")
        if not nx.is_connected(graph):
            components = [sorted(c) for c in nx.connected_components(graph)]
            raise GraphError(f"graph is not connected, components: {components}")
        self._graph = graph
        self.nodes: Tuple[int, ...] = tuple(sorted(graph.nodes))
        self.edges: Tuple[Tuple[int, int], ...] = tuple(
            sorted((min(i, j), max(i, j)) for i, j in graph.edges)
        )
        self._neighbors: Dict[int, Tuple[int, ...]] = {
            i: tuple(sorted(graph.neighbors(i))) for i in self.nodes
        }

    @classmethod
    def complete(cls, nodes: Iterable[int]) -> "Graph":
        nodes = sorted(nodes)
        return cls(nodes, [(i, j) for k, i in enumerate(nodes) for j in nodes[k + 1 :]])

    @property
    def nx_graph(self) -> nx.Graph:
        return self._graph.copy()

    def neighbors(self, i: int) -> Tuple[int, ...]:
        return self._neighbors[i]

    def has_edge(self, i: int, j: int) -> bool:
        return self._graph.has_edge(i, j)

    def __contains__(self, i: int) -> bool:
        return i in self._neighbors

    def __len__(self) -> int:
        return len(self.nodes)

    def laplacian(self) -> npt.NDArray[np.float64]:
        adjacency = nx.to_numpy_array(self._graph, nodelist=list(self.nodes))
        return np.diag(adjacency.sum(axis=1)) - adjacency

    def laplacian_spectrum(self) -> Vector:
        return np.sort(np.linalg.eigvalsh(self.laplacian()))

    def __eq__(self, other) -> bool:
        return isinstance(other, Graph) and (self.nodes, self.edges) == (other.nodes, other.edges)

    def __repr__(self) -> str:
        return f"Graph(nodes={list(self.nodes)}, edges={list(self.edges)})"


@dataclass(frozen=True)
class CooperationSetSpec:
    """Which cooperation set the agents should reach.

    For formations, `distances` overrides `default_distance` per undirected edge.
    """

    kind: Literal["consensus", "formation"]
    default_distance: float = 1.0
    distances: Mapping[Tuple[int, int], float] = field(default_factory=dict)
    altitude_consensus: bool = True

    def __post_init__(self):
        if self.kind not in ("consensus", "formation"):
            raise ValueError(f"unknown cooperation kind {self.kind!r}")
        if self.default_distance <= 0:
            raise ValueError("formation distances must be positive")
        normalized: Dict[Tuple[int, int], float] = {}
        for (i, j), d in self.distances.items():
            key = (min(i, j), max(i, j))
            if d <= 0:
                raise ValueError(f"distance for edge {key} must be positive")
            if key in normalized and normalized[key] != d:
                raise ValueError(f"asymmetric distance for edge {key}")
            normalized[key] = float(d)
        object.__setattr__(self, "distances", normalized)

    def distance(self, i: int, j: int) -> float:
        return self.distances.get((min(i, j), max(i, j)), self.default_distance)


class CooperationCost(ABC):
    """Separable cost `V^c(y) = sum_i sum_{j in N_i} V_ij(y_i, y_j)`."""

    convex: bool = False

    def __init__(self, graph: Graph, output_sets: Mapping[int, ConstraintSet]):
        missing = set(graph.nodes) - set(output_sets)
        if missing:
            raise ValueError(f"no admissible output set for agents {sorted(missing)}")
        self.graph = graph
        self.output_sets = dict(output_sets)

    @abstractmethod
    def pair_cost(self, i: int, j: int, y_i: Vector, y_j: Vector) -> float:
        raise NotImplementedError

    @abstractmethod
    def pair_gradient(self, i: int, j: int, y_i: Vector, y_j: Vector) -> Tuple[Vector, Vector]:
        """Gradient of `V_ij` with respect to `y_i` and `y_j`."""
        raise NotImplementedError

    @abstractmethod
    def lipschitz(self, i: int) -> float:
        """Lipschitz constant of the partial gradient of agent `i` on its output set."""
        raise NotImplementedError

    def neighbors(self, i: int) -> Tuple[int, ...]:
        return self.graph.neighbors(i)

    def output_set(self, i: int) -> ConstraintSet:
        return self.output_sets[i]

    def partial_cost(self, i: int, y_i: ArrayLike, neighbor_values: Outputs) -> float:
        """Terms of `V^c` that involve `y_i`, with neighbours frozen at `neighbor_values`."""
        y_i = np.asarray(y_i, dtype=np.float64)
        total = 0.0
        for j in self.neighbors(i):
            y_j = neighbor_values[j]
            total += self.pair_cost(i, j, y_i, y_j) + self.pair_cost(j, i, y_j, y_i)
        return total

    def partial_gradient(self, i: int, y_i: ArrayLike, neighbor_values: Outputs) -> Vector:
        y_i = np.asarray(y_i, dtype=np.float64)
        grad = np.zeros_like(y_i)
        for j in self.neighbors(i):
            y_j = neighbor_values[j]
            grad += self.pair_gradient(i, j, y_i, y_j)[0]
            grad += self.pair_gradient(j, i, y_j, y_i)[1]
        return grad

    def global_cost(self, y: Outputs) -> float:
        return sum(
            self.pair_cost(i, j, y[i], y[j]) for i in self.graph.nodes for j in self.neighbors(i)
        )

    def outgoing_cost(self, i: int, y: Outputs) -> float:
        """Agent `i`'s share of `V^c`: its outgoing directed edges."""
        return sum(self.pair_cost(i, j, y[i], y[j]) for j in self.neighbors(i))


class ConsensusCost(CooperationCost):
    convex = True

    def pair_cost(self, i, j, y_i, y_j):
        diff = y_i - y_j
        return float(diff @ diff)

    def pair_gradient(self, i, j, y_i, y_j):
        diff = 2.0 * (y_i - y_j)
        return diff, -diff

    def lipschitz(self, i):
        return 4.0 * len(self.neighbors(i))


class FormationCost(CooperationCost):
    """Planar distance keeping plus optional altitude consensus.

    `V_ij = (|p_i - p_j|^2 - d_ij^2)^2 + (a_i - a_j)^2` with planar position `p`
    and altitude `a` (third output).
    """

    convex = False
    _lipschitz_samples = 64

    def __init__(
        self,
        graph: Graph,
        spec: CooperationSetSpec,
        output_sets: Mapping[int, ConstraintSet],
    ):
        if spec.kind != "formation":
            raise ValueError("formation_cost needs a formation cooperation spec")
        super().__init__(graph, output_sets)
        self.spec = spec
        self._altitude_weight = 1.0 if spec.altitude_consensus else 0.0
        self._lipschitz: Dict[int, float] = {}

    def pair_cost(self, i, j, y_i, y_j):
        planar = y_i[:2] - y_j[:2]
        gap = float(planar @ planar) - self.spec.distance(i, j) ** 2
        altitude = float(y_i[2] - y_j[2])
        return gap * gap + self._altitude_weight * altitude * altitude

    def pair_gradient(self, i, j, y_i, y_j):
        planar = y_i[:2] - y_j[:2]
        gap = float(planar @ planar) - self.spec.distance(i, j) ** 2
        grad = np.zeros_like(y_i, dtype=np.float64)
        grad[:2] = 4.0 * gap * planar
        grad[2] = 2.0 * self._altitude_weight * (y_i[2] - y_j[2])
        return grad, -grad

    def lipschitz(self, i):
        # sampled norm of a finite-difference Hessian, used by diagnostics only
        if i not in self._lipschitz:
            self._lipschitz[i] = self._sampled_lipschitz(i)
        return self._lipschitz[i]

    def _sampled_lipschitz(self, i: int) -> float:
        neighbors = self.neighbors(i)
        if not neighbors:
            return 0.0
        rng = np.random.default_rng(i)
        own = self.output_set(i).sample(rng, self._lipschitz_samples)
        others = {j: self.output_set(j).sample(rng, self._lipschitz_samples) for j in neighbors}
        worst = 0.0
        eye = np.eye(own.shape[1])
        for k in range(self._lipschitz_samples):
            values = {j: others[j][k] for j in neighbors}
            step = 1e-5 * (1.0 + np.abs(own[k]))
            hessian = np.column_stack(
                [
                    (
                        self.partial_gradient(i, own[k] + step[c] * eye[c], values)
                        - self.partial_gradient(i, own[k] - step[c] * eye[c], values)
                    )
                    / (2.0 * step[c])
                    for c in range(own.shape[1])
                ]
            )
            worst = max(worst, float(np.linalg.norm(0.5 * (hessian + hessian.T), 2)))
        return worst


def consensus_cost(graph: Graph, Y_sets: Mapping[int, ConstraintSet]) -> ConsensusCost:
    return ConsensusCost(graph, Y_sets)


def formation_cost(
    graph: Graph, spec: CooperationSetSpec, Y_sets: Mapping[int, ConstraintSet]
) -> FormationCost:
    return FormationCost(graph, spec, Y_sets)


def project_Y(Y_i: ConstraintSet, y: ArrayLike) -> Vector:
    return Y_i.project(y)


def pg_update(
    cost: CooperationCost,
    i: int,
    y_i: ArrayLike,
    neighbor_values: Outputs,
    step: float,
) -> Vector:
    """One projected gradient step on agent `i`'s partial cooperation cost."""
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    y_i = as_vector(y_i, cost.output_set(i).dim, "cooperation output")
    return cost.output_set(i).project(y_i - step * cost.partial_gradient(i, y_i, neighbor_values))


class CoopSetDistance(NamedTuple):
    value: float
    proxy: bool


def coop_set_distance(
    spec: CooperationSetSpec,
    Y_sets: Mapping[int, ConstraintSet],
    y: Outputs,
    cost: Optional[CooperationCost] = None,
) -> CoopSetDistance:
    """Distance of stacked outputs to the cooperation set.

    Exact for consensus; for formations the cooperation cost is returned instead
    and flagged as a proxy.
    """
    if spec.kind == "formation":
        if cost is None:
            raise ValueError("formation distance proxy needs the cooperation cost")
        return CoopSetDistance(cost.global_cost(y), True)
    agents = sorted(y)
    stacked = np.stack([np.asarray(y[i], dtype=np.float64) for i in agents])
    dim = stacked.shape[1]
    rows = [Y_sets[i].rows() for i in agents]
    G = np.vstack([r[0] for r in rows])
    h = np.concatenate([r[1] for r in rows])
    try:
        center = solve_qp(
            QpSpec(
                H=2.0 * len(agents) * np.eye(dim),
                f=-2.0 * stacked.sum(axis=0),
                G=G,
                h=h,
            )
        )
    except QpInfeasible:
        raise EmptyIntersection("admissible output sets have no common point") from None
    return CoopSetDistance(float(np.sqrt(np.sum((stacked - center) ** 2))), False)
