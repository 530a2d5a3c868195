from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np
import numpy.typing as npt

ArrayLike = Union[Sequence[float], npt.NDArray[np.float64]]


def as_vector(value: ArrayLike, dim: Optional[int] = None, name: str = "vector"):
    """Return `value` as a 1-D float array, checking its length when `dim` is given."""
    arr = np.asarray(value, dtype=np.float64).reshape(-1)
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"{name} has dimension {arr.shape[0]}, expected {dim}")
    return arr


def as_matrix(value, rows: int, cols: int, name: str = "matrix"):
    arr = np.atleast_2d(np.asarray(value, dtype=np.float64))
    if arr.shape != (rows, cols):
        raise ValueError(f"{name} has shape {arr.shape}, expected {(rows, cols)}")
    return arr


def check_positive_definite(matrix, name: str, floor: float = 1e-12):
    """Raise ValueError unless `matrix` is symmetric with eigenvalues above `floor`."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"{name} must be square, got shape {matrix.shape}")
    if not np.allclose(matrix, matrix.T, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(matrix).min() <= floor:
        raise ValueError(f"{name} must be positive definite")
    return matrix


def weighted_sq_norm(vec, weight) -> float:
    return float(vec @ weight @ vec)


def agent_rng(seed: int, time: int, agent: int) -> np.random.Generator:
    """Generator keyed by (seed, time, agent) so draws do not depend on call order."""
    return np.random.default_rng([seed, time, agent])


class CoopMpcError(Exception):
    """Base class for errors raised by this package."""
