"""Small dense optimisers used by the local MPC problems.

`solve_nlp` is an augmented Lagrangian method whose inner loop is a projected
gradient method with Barzilai-Borwein steps and Armijo backtracking. Simple
sets (input boxes, admissible cooperation outputs) are handled by projection,
everything else through multipliers. `solve_qp` enumerates active sets of a
small strictly convex QP and is exact up to linear algebra round-off.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional, Tuple

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing_extensions import Self

from ._logger import logger
from ._utils import CoopMpcError

__all__ = [
    "SolverError",
    "NonFiniteObjective",
    "QpInfeasible",
    "SolverConfig",
    "NlpSpec",
    "NlpResult",
    "QpSpec",
    "solve_nlp",
    "solve_qp",
    "finite_diff_gradient",
]

Vector = npt.NDArray[np.float64]
Matrix = npt.NDArray[np.float64]
SolverStatus = Literal["converged", "max_iterations"]


class SolverError(CoopMpcError):
    pass


class NonFiniteObjective(SolverError):
    """The objective or its gradient evaluated to NaN or inf at `iterate`."""

    def __init__(self, iterate: Vector):
        self.iterate = np.array(iterate, copy=True)
        super().__init__(f"non-finite objective at iterate {self.iterate.tolist()}")


class QpInfeasible(SolverError):
    pass


class SolverConfig(BaseModel):
    """Settings of the augmented Lagrangian / projected gradient solver."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    max_outer_iterations: int = Field(
        default=30, ge=1, description="Maximum number of multiplier updates."
    )
    max_inner_iterations: int = Field(
        default=400, ge=1, description="Maximum projected gradient steps per subproblem."
    )
    initial_penalty: float = Field(
        default=10.0, gt=0, description="Initial augmented Lagrangian penalty."
    )
    penalty_growth: float = Field(
        default=10.0, gt=1, description="Penalty multiplier when violation stalls."
    )
    max_penalty: float = Field(default=1e8, gt=0, description="Upper bound on the penalty.")
    constraint_tol: float = Field(
        default=1e-6, gt=0, description="Max-norm tolerance on constraint violation."
    )
    gradient_tol: float = Field(
        default=1e-6,
        gt=0,
        description="Projected gradient tolerance, relative to the initial gradient scale.",
    )
    armijo: float = Field(
        default=1e-4, gt=0, lt=1, description="Sufficient decrease parameter."
    )
    backtrack: float = Field(
        default=0.5, gt=0, lt=1, description="Step shrink factor in the line search."
    )
    min_step: float = Field(default=1e-12, gt=0, description="Smallest trial step.")
    max_step: float = Field(default=1e6, gt=0, description="Largest Barzilai-Borwein step.")
    max_restoration_iterations: int = Field(
        default=25,
        ge=0,
        description="Gauss-Newton feasibility restoration steps after the outer loop.",
    )
    debug: bool = Field(
        default=False, description="Assert monotone inner iterations."
    )

    @model_validator(mode="after")
    def _check_steps(self) -> Self:
        if self.min_step >= self.max_step:
            raise ValueError("min_step must be smaller than max_step")
        return self


ObjectiveFn = Callable[[Vector], Tuple[float, Vector]]
ConstraintFn = Callable[[Vector], Tuple[Vector, Matrix]]


def _identity(z: Vector) -> Vector:
    return z


@dataclass(frozen=True)
class NlpSpec:
    """`min f(z)` s.t. `c(z) = 0`, `g(z) <= 0`, `z` in a projectable set.

    Evaluators return values together with gradients / Jacobians.
    """

    dim: int
    objective: ObjectiveFn
    project: Callable[[Vector], Vector] = _identity
    equality: Optional[ConstraintFn] = None
    inequality: Optional[ConstraintFn] = None


@dataclass
class NlpResult:
    x: Vector
    status: SolverStatus
    objective: float
    violation: float
    outer_iterations: int = 0
    inner_iterations: int = 0

    def __iter__(self):
        return iter((self.x, self.status))


@dataclass(frozen=True)
class QpSpec:
    """`min 0.5 z'Hz + f'z` s.t. `A z = b`, `G z <= h`."""

    H: Matrix
    f: Vector
    A: Optional[Matrix] = None
    b: Optional[Vector] = None
    G: Optional[Matrix] = None
    h: Optional[Vector] = None
    _chol: Matrix = field(init=False, repr=False)

    def __post_init__(self):
        H = np.asarray(self.H, dtype=np.float64)
        dim = H.shape[0]
        if H.shape != (dim, dim) or np.asarray(self.f).shape != (dim,):
            raise ValueError("Hessian and linear term have inconsistent shapes")
        try:
            chol = np.linalg.cholesky(0.5 * (H + H.T))
        except np.linalg.LinAlgError:
            raise ValueError("QP Hessian must be positive definite") from None
        object.__setattr__(self, "_chol", chol)
        for mat, vec, name in ((self.A, self.b, "equality"), (self.G, self.h, "inequality")):
            if (mat is None) != (vec is None):
                raise ValueError(f"{name} matrix and right-hand side must be given together")
            if mat is not None and np.asarray(mat).shape != (np.asarray(vec).shape[0], dim):
                raise ValueError(f"{name} rows are inconsistent with the decision dimension")


def _violation(c: Optional[Vector], g: Optional[Vector]) -> float:
    worst = 0.0
    if c is not None and c.size:
        worst = max(worst, float(np.max(np.abs(c))))
    if g is not None and g.size:
        worst = max(worst, float(np.max(g)))
    return worst


class _AugmentedLagrangian:
    """PHR augmented Lagrangian of an `NlpSpec` for fixed multipliers."""

    def __init__(self, spec: NlpSpec):
        self.spec = spec
        self.lam: Optional[Vector] = None
        self.mu: Optional[Vector] = None
        self.rho = 1.0

    def constraints(self, z: Vector):
        eq = self.spec.equality(z) if self.spec.equality is not None else (None, None)
        ineq = self.spec.inequality(z) if self.spec.inequality is not None else (None, None)
        return eq, ineq

    def __call__(self, z: Vector) -> Tuple[float, Vector]:
        f, grad = self.spec.objective(z)
        value = float(f)
        grad = np.array(grad, dtype=np.float64)
        (c, jc), (g, jg) = self.constraints(z)
        if c is not None:
            if self.lam is None:
                self.lam = np.zeros_like(c)
            shifted = self.lam + self.rho * c
            value += float(self.lam @ c) + 0.5 * self.rho * float(c @ c)
            grad += jc.T @ shifted
        if g is not None:
            if self.mu is None:
                self.mu = np.zeros_like(g)
            active = np.maximum(0.0, self.mu + self.rho * g)
            value += float(active @ active - self.mu @ self.mu) / (2.0 * self.rho)
            grad += jg.T @ active
        return value, grad

    def update_multipliers(self, z: Vector):
        (c, _), (g, _) = self.constraints(z)
        if c is not None:
            self.lam = (self.lam if self.lam is not None else 0.0) + self.rho * c
        if g is not None:
            self.mu = np.maximum(0.0, (self.mu if self.mu is not None else 0.0) + self.rho * g)


def _projected_gradient(
    merit: Callable[[Vector], Tuple[float, Vector]],
    project: Callable[[Vector], Vector],
    z: Vector,
    tol: float,
    max_iter: int,
    cfg: SolverConfig,
) -> Tuple[Vector, bool, int]:
    f, g = merit(z)
    if not (math.isfinite(f) and np.all(np.isfinite(g))):
        raise NonFiniteObjective(z)
    alpha = 1.0 / max(1.0, float(np.max(np.abs(g))) if g.size else 1.0)
    z_prev: Optional[Vector] = None
    g_prev: Optional[Vector] = None
    for it in range(max_iter):
        if float(np.max(np.abs(z - project(z - g)), initial=0.0)) <= tol:
            return z, True, it
        if z_prev is not None and g_prev is not None:
            s = z - z_prev
            y = g - g_prev
            sy = float(s @ y)
            if sy > 0:
                alpha = min(max(float(s @ s) / sy, cfg.min_step), cfg.max_step)
            else:
                alpha = min(2.0 * alpha, cfg.max_step)
        while True:
            z_new = project(z - alpha * g)
            step = z_new - z
            f_new, g_new = merit(z_new)
            finite = math.isfinite(f_new) and bool(np.all(np.isfinite(g_new)))
            if finite and f_new <= f + cfg.armijo * float(g @ step):
                break
            alpha *= cfg.backtrack
            if alpha < cfg.min_step:
                return z, False, it
        if cfg.debug:
            assert f_new <= f, "projected gradient step increased the merit function"
        z_prev, g_prev = z, g
        z, f, g = z_new, f_new, g_new
    return z, False, max_iter


def _restore(spec: NlpSpec, z: Vector, cfg: SolverConfig, lagrangian: _AugmentedLagrangian) -> Vector:
    """Gauss-Newton minimum-norm corrections on equality and violated inequality rows."""
    frozen = np.zeros(spec.dim, dtype=bool)
    (c, jc), (g, jg) = lagrangian.constraints(z)
    current = _violation(c, g)
    for _ in range(cfg.max_restoration_iterations):
        if current <= 1e-12:
            break
        rows, targets = [], []
        if c is not None:
            rows.append(jc)
            targets.append(-c)
        if g is not None:
            violated = g > 0.0
            rows.append(jg[violated])
            targets.append(-g[violated])
        jac = np.vstack(rows)
        free = ~frozen
        if not np.any(free):
            break
        delta = np.zeros(spec.dim)
        delta[free] = np.linalg.lstsq(jac[:, free], np.concatenate(targets), rcond=None)[0]
        trial = z + delta
        projected = spec.project(trial)
        moved = np.abs(projected - trial) > 1e-12
        (c_new, jc_new), (g_new, jg_new) = lagrangian.constraints(projected)
        candidate = _violation(c_new, g_new)
        if candidate < current:
            z, c, jc, g, jg, current = projected, c_new, jc_new, g_new, jg_new, candidate
        elif not np.any(moved & free):
            break
        frozen |= moved
    return z


def solve_nlp(spec: NlpSpec, x0: Vector, cfg: Optional[SolverConfig] = None) -> NlpResult:
    """Minimise `spec` from `x0`. Deterministic for fixed inputs."""
    cfg = cfg or SolverConfig()
    z = spec.project(np.array(x0, dtype=np.float64))
    lagrangian = _AugmentedLagrangian(spec)
    lagrangian.rho = cfg.initial_penalty

    f0, g0 = spec.objective(z)
    if not (math.isfinite(f0) and np.all(np.isfinite(g0))):
        raise NonFiniteObjective(z)
    scale = max(1.0, float(np.max(np.abs(g0), initial=0.0)))
    gtol = cfg.gradient_tol * scale
    constrained = spec.equality is not None or spec.inequality is not None
    inner_tol = max(gtol, 1e-2 * scale) if constrained else gtol

    best: Optional[Tuple[float, Vector]] = None
    prev_violation = math.inf
    status: SolverStatus = "max_iterations"
    inner_total = 0
    outer = 0
    for outer in range(1, cfg.max_outer_iterations + 1):
        z, inner_ok, used = _projected_gradient(
            lagrangian, spec.project, z, inner_tol, cfg.max_inner_iterations, cfg
        )
        inner_total += used
        (c, _), (g, _) = lagrangian.constraints(z)
        violation = _violation(c, g)
        f = float(spec.objective(z)[0])
        if violation <= cfg.constraint_tol and (best is None or f < best[0]):
            best = (f, z.copy())
        logger.debug(
            "outer %d: objective=%.6e violation=%.3e rho=%.1e inner=%d",
            outer,
            f,
            violation,
            lagrangian.rho,
            used,
        )
        if violation <= cfg.constraint_tol and inner_ok and inner_tol <= gtol:
            status = "converged"
            break
        lagrangian.update_multipliers(z)
        if violation > 0.25 * prev_violation:
            lagrangian.rho = min(lagrangian.rho * cfg.penalty_growth, cfg.max_penalty)
        prev_violation = violation
        inner_tol = max(gtol, 0.1 * inner_tol)

    z = _restore(spec, z, cfg, lagrangian)
    (c, _), (g, _) = lagrangian.constraints(z)
    violation = _violation(c, g)
    f = float(spec.objective(z)[0])
    if violation > cfg.constraint_tol or (best is not None and best[0] < f and status != "converged"):
        if best is not None:
            f, z = best
            (c, _), (g, _) = lagrangian.constraints(z)
            violation = _violation(c, g)
    if status != "converged":
        logger.debug("solver stopped after %d outer iterations, violation %.3e", outer, violation)
    return NlpResult(
        x=z,
        status=status,
        objective=f,
        violation=violation,
        outer_iterations=outer,
        inner_iterations=inner_total,
    )


def _kkt_solve(H: Matrix, f: Vector, A: Matrix, b: Vector) -> Optional[Tuple[Vector, Vector]]:
    dim = H.shape[0]
    rows = A.shape[0]
    if rows == 0:
        return np.linalg.solve(H, -f), np.zeros(0)
    if rows > dim or np.linalg.matrix_rank(A) < rows:
        return None
    kkt = np.block([[H, A.T], [A, np.zeros((rows, rows))]])
    sol = np.linalg.solve(kkt, np.concatenate([-f, b]))
    return sol[:dim], sol[dim:]


def solve_qp(spec: QpSpec, tol: float = 1e-9) -> Vector:
    """Solve a small strictly convex QP by enumerating active sets of growing size."""
    H = 0.5 * (np.asarray(spec.H, dtype=np.float64) + np.asarray(spec.H, dtype=np.float64).T)
    f = np.asarray(spec.f, dtype=np.float64)
    dim = H.shape[0]
    A = np.zeros((0, dim)) if spec.A is None else np.asarray(spec.A, dtype=np.float64)
    b = np.zeros(0) if spec.b is None else np.asarray(spec.b, dtype=np.float64)
    G = np.zeros((0, dim)) if spec.G is None else np.asarray(spec.G, dtype=np.float64)
    h = np.zeros(0) if spec.h is None else np.asarray(spec.h, dtype=np.float64)

    scale = 1.0 + float(np.max(np.abs(h), initial=0.0))
    max_active = min(G.shape[0], dim - A.shape[0])
    for size in range(0, max_active + 1):
        for active in itertools.combinations(range(G.shape[0]), size):
            idx = list(active)
            solved = _kkt_solve(H, f, np.vstack([A, G[idx]]), np.concatenate([b, h[idx]]))
            if solved is None:
                continue
            z, mult = solved
            if A.shape[0] and np.max(np.abs(A @ z - b)) > tol * scale:
                continue
            if G.shape[0] and np.max(G @ z - h) > tol * scale:
                continue
            if size and np.min(mult[A.shape[0] :]) < -tol * scale:
                continue
            assert np.all(np.isfinite(z)), "strictly convex QP cannot be unbounded"
            return z
    raise QpInfeasible("no active set yields a feasible KKT point")


def finite_diff_gradient(
    f: Callable[[Vector], float], z: Vector, h: Optional[float] = None
) -> Vector:
    """Central differences with per-coordinate step `h * (1 + |z_k|)`, `h` defaulting to 1e-6."""
    base = 1e-6 if h is None else h
    z = np.asarray(z, dtype=np.float64)
    grad = np.empty_like(z)
    for k in range(z.shape[0]):
        step = base * (1.0 + abs(z[k]))
        up = z.copy()
        down = z.copy()
        up[k] += step
        down[k] -= step
        grad[k] = (f(up) - f(down)) / (up[k] - down[k])
    return grad
