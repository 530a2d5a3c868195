from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Literal, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from ._utils import ArrayLike, as_matrix, as_vector

__all__ = [
    "ConstraintSet",
    "AgentModel",
    "LinearAgentModel",
    "QuadcopterModel",
    "double_integrator_model",
    "quadcopter_model",
    "quadcopter_continuous",
    "rollout",
    "check_membership",
    "GRAVITY",
    "THRUST_GAIN",
]

GRAVITY = 9.81
THRUST_GAIN = 0.91


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    """Intersection of one box and finitely many half-spaces `A z <= b`.

    A strictly interior point is stored so that emptiness is ruled out at
    construction time.
    """

    lower: npt.NDArray[np.float64]
    upper: npt.NDArray[np.float64]
    A: npt.NDArray[np.float64]
    b: npt.NDArray[np.float64]
    interior_point: npt.NDArray[np.float64]

    def __post_init__(self):
        dim = self.lower.shape[0]
        if self.upper.shape != (dim,) or self.interior_point.shape != (dim,):
            raise ValueError("box bounds and interior point must share one dimension")
        if self.A.shape != (self.b.shape[0], dim):
            raise ValueError(
                f"half-space matrix has shape {self.A.shape}, expected {(self.b.shape[0], dim)}"
            )
        if np.any(self.lower >= self.upper):
            raise ValueError("box lower bounds must be strictly below upper bounds")
        if self.margin(self.interior_point) <= 0.0:
            raise ValueError(
                f"point {self.interior_point.tolist()} is not strictly inside the set"
            )

    @classmethod
    def box(
        cls,
        lower: ArrayLike,
        upper: ArrayLike,
        interior_point: Optional[ArrayLike] = None,
    ) -> "ConstraintSet":
        lower = as_vector(lower, name="lower")
        upper = as_vector(upper, lower.shape[0], name="upper")
        return cls.polytope(
            np.zeros((0, lower.shape[0])), np.zeros(0), lower, upper, interior_point
        )

    @classmethod
    def polytope(
        cls,
        A: ArrayLike,
        b: ArrayLike,
        lower: Optional[ArrayLike] = None,
        upper: Optional[ArrayLike] = None,
        interior_point: Optional[ArrayLike] = None,
    ) -> "ConstraintSet":
        b = as_vector(b, name="b")
        A = np.asarray(A, dtype=np.float64)
        if A.size == 0 and lower is not None:
            A = A.reshape(0, as_vector(lower).shape[0])
        if A.ndim != 2 or A.shape[0] != b.shape[0]:
            raise ValueError(f"half-space matrix of shape {A.shape} does not match b")
        dim = A.shape[1]
        lower = (
            np.full(dim, -np.inf) if lower is None else as_vector(lower, dim, "lower")
        )
        upper = np.full(dim, np.inf) if upper is None else as_vector(upper, dim, "upper")
        if interior_point is None:
            low_ok, up_ok = np.isfinite(lower), np.isfinite(upper)
            center = np.zeros(dim)
            both = low_ok & up_ok
            center[both] = 0.5 * (lower[both] + upper[both])
            center[low_ok & ~up_ok] = lower[low_ok & ~up_ok] + 1.0
            center[~low_ok & up_ok] = upper[~low_ok & up_ok] - 1.0
            interior_point = center
        return cls(lower, upper, A, b, as_vector(interior_point, dim, "interior_point"))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def is_box(self) -> bool:
        return self.b.shape[0] == 0

    def rows(self) -> Tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
        """Return the whole set as stacked half-spaces `G z <= h`."""
        eye = np.eye(self.dim)
        upper = np.isfinite(self.upper)
        lower = np.isfinite(self.lower)
        G = np.vstack([self.A, eye[upper], -eye[lower]])
        h = np.concatenate([self.b, self.upper[upper], -self.lower[lower]])
        return G, h

    def margin(self, z: ArrayLike) -> float:
        """Smallest slack over all constraints; negative when `z` is outside."""
        z = np.asarray(z, dtype=np.float64)
        G, h = self.rows()
        if h.shape[0] == 0:
            return math.inf
        return float(np.min(h - G @ z))

    def contains(self, z: ArrayLike, tol: float = 0.0) -> bool:
        return self.margin(z) >= -tol

    def project(self, z: ArrayLike) -> npt.NDArray[np.float64]:
        """Euclidean projection; clipping for boxes, a small QP otherwise."""
        z = as_vector(z, self.dim)
        if self.is_box:
            return np.clip(z, self.lower, self.upper)
        if self.contains(z):
            return z.copy()
        from .solver import QpSpec, solve_qp

        G, h = self.rows()
        return solve_qp(QpSpec(H=np.eye(self.dim), f=-z, G=G, h=h))

    def sample(self, rng: np.random.Generator, count: int) -> npt.NDArray[np.float64]:
        """Uniform samples by rejection inside the finite bounding box."""
        if not (np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper))):
            raise ValueError("sampling requires finite box bounds")
        out = np.empty((count, self.dim))
        filled = 0
        while filled < count:
            batch = rng.uniform(self.lower, self.upper, size=(2 * count, self.dim))
            if not self.is_box:
                batch = batch[np.all(batch @ self.A.T <= self.b, axis=1)]
            take = min(count - filled, batch.shape[0])
            out[filled : filled + take] = batch[:take]
            filled += take
        return out


def check_membership(constraint_set: ConstraintSet, z: ArrayLike, tol: float) -> bool:
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    return constraint_set.contains(as_vector(z, constraint_set.dim), tol)


class AgentModel(ABC):
    """Discrete-time agent `x+ = f(x, u)`, `y = h(x, u)` with constraint sets and
    the equilibrium maps `g_x`, `g_u` onto its admissible steady states."""

    def __init__(
        self,
        name: str,
        state_set: ConstraintSet,
        input_set: ConstraintSet,
        output_set: ConstraintSet,
    ):
        self.name = name
        self.state_set = state_set
        self.input_set = input_set
        self.output_set = output_set

    @property
    def state_dim(self) -> int:
        return self.state_set.dim

    @property
    def input_dim(self) -> int:
        return self.input_set.dim

    @property
    def output_dim(self) -> int:
        return self.output_set.dim

    @abstractmethod
    def step(self, x: npt.NDArray[np.float64], u: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
        raise NotImplementedError

    @abstractmethod
    def output(self, x: npt.NDArray[np.float64], u: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
        raise NotImplementedError

    @abstractmethod
    def jacobians(
        self, x: npt.NDArray[np.float64], u: npt.NDArray[np.float64]
    ) -> Tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
        """Return `(df/dx, df/du)` at `(x, u)`."""
        raise NotImplementedError

    @abstractmethod
    def g_x(self, y: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
        raise NotImplementedError

    @abstractmethod
    def g_u(self, y: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
        raise NotImplementedError

    @abstractmethod
    def equilibrium_jacobians(
        self, y: npt.NDArray[np.float64]
    ) -> Tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
        """Return `(dg_x/dy, dg_u/dy)`."""
        raise NotImplementedError

    def equilibrium(self, y: ArrayLike):
        y = as_vector(y, self.output_dim, "cooperation output")
        return self.g_x(y), self.g_u(y)

    def margin(self, x: ArrayLike, u: ArrayLike) -> float:
        return min(self.state_set.margin(x), self.input_set.margin(u))

    def contains(self, x: ArrayLike, u: ArrayLike, tol: float = 0.0) -> bool:
        return self.margin(x, u) >= -tol

    def __repr__(self) -> str:
        return (
            f"{type(self).__name__}(name={self.name!r}, n={self.state_dim}, "
            f"q={self.input_dim}, p={self.output_dim})"
        )


class LinearAgentModel(AgentModel):
    """`x+ = A x + B u`, `y = C x`, with affine equilibrium maps
    `g_x(y) = Gx y` and `g_u(y) = Gu y + u0`."""

    def __init__(
        self,
        name: str,
        A: ArrayLike,
        B: ArrayLike,
        C: ArrayLike,
        Gx: ArrayLike,
        Gu: ArrayLike,
        u0: ArrayLike,
        state_set: ConstraintSet,
        input_set: ConstraintSet,
        output_set: ConstraintSet,
    ):
        super().__init__(name, state_set, input_set, output_set)
        n, q, p = self.state_dim, self.input_dim, self.output_dim
        self.A = as_matrix(A, n, n, "A")
        self.B = as_matrix(B, n, q, "B")
        self.C = as_matrix(C, p, n, "C")
        self.Gx = as_matrix(Gx, n, p, "Gx")
        self.Gu = as_matrix(Gu, q, p, "Gu")
        self.u0 = as_vector(u0, q, "u0")

    def step(self, x, u):
        return self.A @ x + self.B @ u

    def output(self, x, u):
        return self.C @ x

    def jacobians(self, x, u):
        return self.A, self.B

    def g_x(self, y):
        return self.Gx @ y

    def g_u(self, y):
        return self.Gu @ y + self.u0

    def equilibrium_jacobians(self, y):
        return self.Gx, self.Gu


def _planar_facets(vertices: Sequence[Tuple[float, float]]):
    """Half-space form of a convex polygon given counter-clockwise, with unit normals."""
    verts = np.asarray(vertices, dtype=np.float64)
    edges = np.roll(verts, -1, axis=0) - verts
    normals = np.column_stack([edges[:, 1], -edges[:, 0]])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    offsets = np.einsum("ij,ij->i", normals, verts)
    return normals, offsets


_REGIONS = {
    "a": [(1.1, -2.1), (1.1, 4.1), (-1.1, 4.1), (-1.1, -2.1)],
    "b": [(4.1, -2.1), (4.1, 2.1), (-1.1, 2.1), (-1.1, -2.1)],
    "c": [(3.1, -0.1), (-0.1, 3.1), (-3.1, -0.1), (-0.1, -3.1)],
}
_RECTANGULAR_REGIONS = {"a", "b"}
_OUTPUT_TIGHTENING = 0.1
_VELOCITY_BOUND = 0.25
_INPUT_BOUND = 0.25


def _tightened(vertices: Sequence[Tuple[float, float]]) -> npt.NDArray[np.float64]:
    """Move every vertex coordinate 0.1 towards zero, so 3.1 becomes 3.0 and -0.1 becomes 0.0."""
    verts = np.asarray(vertices, dtype=np.float64)
    return np.sign(verts) * (np.abs(verts) - _OUTPUT_TIGHTENING)


def double_integrator_model(region: Literal["a", "b", "c"] = "a") -> LinearAgentModel:
    """Planar double integrator with unit sampling time.

    `region` selects the position polygon the agent has to stay in. Velocities
    and inputs are bounded by 0.25 in the max-norm. Admissible cooperation
    outputs are the polygon whose vertex coordinates are pulled 0.1 towards
    zero; for region c this is the diamond `|z_1| + |z_2| <= 3`.
    """
    if region not in _REGIONS:
        raise ValueError(f"unknown region {region!r}, expected one of {sorted(_REGIONS)}")
    A = np.array(
        [[1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 1.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]
    )
    B = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    C = np.eye(2, 4)
    verts = np.asarray(_REGIONS[region])
    pos_lower, pos_upper = verts.min(axis=0), verts.max(axis=0)
    out_verts = _tightened(_REGIONS[region])
    out_lower, out_upper = out_verts.min(axis=0), out_verts.max(axis=0)
    vel = np.full(2, _VELOCITY_BOUND)
    state_lower = np.concatenate([pos_lower, -vel])
    state_upper = np.concatenate([pos_upper, vel])
    input_set = ConstraintSet.box(-np.full(2, _INPUT_BOUND), np.full(2, _INPUT_BOUND))
    if region in _RECTANGULAR_REGIONS:
        state_set = ConstraintSet.box(state_lower, state_upper)
        output_set = ConstraintSet.box(out_lower, out_upper)
    else:
        normals, offsets = _planar_facets(_REGIONS[region])
        state_set = ConstraintSet.polytope(
            np.hstack([normals, np.zeros_like(normals)]),
            offsets,
            state_lower,
            state_upper,
            interior_point=np.zeros(4),
        )
        out_normals, out_offsets = _planar_facets(out_verts)
        output_set = ConstraintSet.polytope(
            out_normals,
            out_offsets,
            out_lower,
            out_upper,
            interior_point=np.zeros(2),
        )
    return LinearAgentModel(
        name=f"double_integrator_{region}",
        A=A,
        B=B,
        C=C,
        Gx=np.eye(4, 2),
        Gu=np.zeros((2, 2)),
        u0=np.zeros(2),
        state_set=state_set,
        input_set=input_set,
        output_set=output_set,
    )


def quadcopter_continuous(x: ArrayLike, u: ArrayLike) -> npt.NDArray[np.float64]:
    """Right-hand side of the linearised-attitude quadcopter ODE."""
    x = as_vector(x, 10, "state")
    u = as_vector(u, 3, "input")
    return np.array(
        [
            x[3],
            x[4],
            x[5],
            GRAVITY * math.tan(x[6]),
            GRAVITY * math.tan(x[7]),
            -GRAVITY + THRUST_GAIN * u[2],
            -8.0 * x[6] + x[8],
            -8.0 * x[7] + x[9],
            10.0 * (-x[6] + u[0]),
            10.0 * (-x[7] + u[1]),
        ]
    )


class QuadcopterModel(AgentModel):
    """Quadcopter discretised with an explicit Euler step of length `h`."""

    def __init__(self, h: float = 0.1):
        if not h > 0:
            raise ValueError(f"time step must be positive, got {h}")
        self.h = float(h)
        state_set = ConstraintSet.box(-np.full(10, 10.0), np.full(10, 10.0))
        input_set = ConstraintSet.box(
            [-math.pi / 2, -math.pi / 2, 0.0], [math.pi / 2, math.pi / 2, 2 * GRAVITY]
        )
        output_set = ConstraintSet.box([-8.0, -8.0, 0.0], [8.0, 8.0, 8.0])
        super().__init__(f"quadcopter_h{self.h:g}", state_set, input_set, output_set)
        self._hover = np.array([0.0, 0.0, GRAVITY / THRUST_GAIN])

    def step(self, x, u):
        return x + self.h * quadcopter_continuous(x, u)

    def output(self, x, u):
        return x[:3].copy()

    def jacobians(self, x, u):
        jx = np.zeros((10, 10))
        jx[0, 3] = jx[1, 4] = jx[2, 5] = 1.0
        jx[3, 6] = GRAVITY / math.cos(x[6]) ** 2
        jx[4, 7] = GRAVITY / math.cos(x[7]) ** 2
        jx[6, 6] = jx[7, 7] = -8.0
        jx[6, 8] = jx[7, 9] = 1.0
        jx[8, 6] = jx[9, 7] = -10.0
        ju = np.zeros((10, 3))
        ju[8, 0] = ju[9, 1] = 10.0
        ju[5, 2] = THRUST_GAIN
        return np.eye(10) + self.h * jx, self.h * ju

    def g_x(self, y):
        x = np.zeros(10)
        x[:3] = y
        return x

    def g_u(self, y):
        return self._hover.copy()

    def equilibrium_jacobians(self, y):
        return np.eye(10, 3), np.zeros((3, 3))


def quadcopter_model(h: float = 0.1) -> QuadcopterModel:
    return QuadcopterModel(h)


def rollout(model: AgentModel, x0: ArrayLike, inputs: ArrayLike) -> npt.NDArray[np.float64]:
    """Simulate `model` from `x0`; returns an `(N + 1, n)` array of states."""
    x0 = as_vector(x0, model.state_dim, "initial state")
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.size == 0:
        inputs = inputs.reshape(0, model.input_dim)
    if inputs.ndim != 2 or inputs.shape[1] != model.input_dim:
        raise ValueError(
            f"inputs have shape {inputs.shape}, expected (N, {model.input_dim})"
        )
    states = np.empty((inputs.shape[0] + 1, model.state_dim))
    states[0] = x0
    for k, u in enumerate(inputs):
        states[k + 1] = model.step(states[k], u)
    return states
