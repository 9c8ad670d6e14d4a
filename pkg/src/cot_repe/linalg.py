"""
Dense linear algebra used to turn neural populations into reading vectors.

Vectors are 1-D `float64` arrays and sample matrices are 2-D `float64` arrays with one sample per
row. Every function is pure: inputs are never modified in place.

"""

import math
from collections.abc import Sequence
from typing import NamedTuple

import numpy as np

from cot_repe.exceptions import DegenerateInput, DimensionMismatch, NonFiniteValues, ZeroVector

__all__ = [
    "EigenPair",
    "as_sample_matrix",
    "as_vector",
    "cosine",
    "covariance",
    "dot",
    "jacobi_eigh",
    "leading_eigenpair",
    "power_iteration",
    "principal_component",
    "unit",
]

JACOBI_TOLERANCE = 1e-12
JACOBI_MAX_SWEEPS = 100


class EigenPair(NamedTuple):
    """Leading eigenpair of a covariance matrix, plus its trace."""

    vector: np.ndarray
    value: float
    trace: float

    @property
    def explained_share(self) -> float:
        return self.value / self.trace if self.trace > 0 else 0.0


def as_vector(values: Sequence[float] | np.ndarray) -> np.ndarray:
    """
    Coerces the provided values into a finite, nonempty `float64` vector.

    Args:
        values (Sequence[float] | np.ndarray): The values to coerce.

    Returns:
        np.ndarray: A 1-D `float64` array.

    Raises:
        DimensionMismatch: If the values are empty or not one-dimensional.
        NonFiniteValues: If any entry is NaN or infinite.

    """
    vector = np.asarray(values, dtype=np.float64)
    if vector.ndim != 1 or vector.size == 0:
        raise DimensionMismatch(f"Expected a nonempty 1-D vector, got shape {vector.shape}")
    if not np.all(np.isfinite(vector)):
        raise NonFiniteValues
    return vector


def as_sample_matrix(rows: Sequence[Sequence[float]] | np.ndarray) -> np.ndarray:
    """
    Coerces the provided rows into a finite `float64` sample matrix.

    Args:
        rows (Sequence[Sequence[float]] | np.ndarray): One sample per row.

    Returns:
        np.ndarray: A 2-D `float64` array of shape (row_count, dimension).

    Raises:
        DimensionMismatch: If rows differ in length, or there are no rows.
        NonFiniteValues: If any entry is NaN or infinite.

    """
    if not isinstance(rows, np.ndarray):
        lengths = {len(row) for row in rows}
        if len(lengths) > 1:
            raise DimensionMismatch(f"Rows differ in length: {sorted(lengths)}")
    matrix = np.asarray(rows, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] == 0 or matrix.shape[1] == 0:
        raise DimensionMismatch(f"Expected a nonempty 2-D sample matrix, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise NonFiniteValues
    return matrix


def covariance(samples: np.ndarray, center: bool = True) -> np.ndarray:
    """
    Computes the sample covariance (when centered) or the second-moment matrix (when not).

    Args:
        samples (np.ndarray): Sample matrix, one sample per row.
        center (bool): Whether to subtract the column means first.

    Returns:
        np.ndarray: Symmetric (dimension, dimension) matrix.

    """
    samples = as_sample_matrix(samples)
    if center:
        deviations = samples - samples.mean(axis=0)
        denominator = samples.shape[0] - 1
    else:
        deviations = samples
        denominator = samples.shape[0]
    matrix = deviations.T @ deviations / max(denominator, 1)
    return (matrix + matrix.T) / 2.0


def jacobi_eigh(
    matrix: np.ndarray,
    tolerance: float = JACOBI_TOLERANCE,
    max_sweeps: int = JACOBI_MAX_SWEEPS,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps stop once the off-diagonal Frobenius norm falls below `tolerance` times the trace, or
    after `max_sweeps` sweeps.

    Args:
        matrix (np.ndarray): Symmetric square matrix.
        tolerance (float): Relative convergence threshold.
        max_sweeps (int): Maximum number of full sweeps over the upper triangle.

    Returns:
        tuple[np.ndarray, np.ndarray]: Eigenvalues, and eigenvectors as the columns of a matrix,
            in the solver's (unsorted) order.

    """
    a = np.array(matrix, dtype=np.float64, copy=True)
    n = a.shape[0]
    v = np.eye(n)
    scale = abs(float(np.trace(a))) or float(np.abs(a).sum())

    for _ in range(max_sweeps):
        off_diagonal = math.sqrt(max(float((a**2).sum() - (np.diag(a) ** 2).sum()), 0.0))
        if off_diagonal < tolerance * scale:
            break

        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue

                gap = a[q, q] - a[p, p]
                if abs(gap) + 100.0 * abs(apq) == abs(gap):
                    # apq is negligible next to the gap; theta would overflow
                    t = apq / gap
                else:
                    theta = gap / (2.0 * apq)
                    t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c

                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q

                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0

                vec_p, vec_q = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q

    return np.diag(a).copy(), v


def power_iteration(
    matrix: np.ndarray,
    max_iter: int = 10_000,
    tolerance: float = 1e-14,
    seed: int = 0,
) -> tuple[float, np.ndarray]:
    """
    Dominant eigenpair of a symmetric positive semi-definite matrix via power iteration.

    Uses the residual ||A x - lambda x|| as the stopping test. Kept as a cross-check for
    `jacobi_eigh`; convergence slows when the two leading eigenvalues are close.

    Args:
        matrix (np.ndarray): Symmetric square matrix.
        max_iter (int): Maximum number of iterations.
        tolerance (float): Residual threshold, relative to the matrix trace.
        seed (int): Seed of the random starting vector.

    Returns:
        tuple[float, np.ndarray]: The dominant eigenvalue and its unit eigenvector.

    """
    a = np.asarray(matrix, dtype=np.float64)
    rng = np.random.default_rng(seed)
    x = unit(rng.normal(size=a.shape[0]))
    scale = max(abs(float(np.trace(a))), 1.0)

    value = 0.0
    for _ in range(max_iter):
        y = a @ x
        y_norm = float(np.linalg.norm(y))
        if y_norm == 0.0:
            x = unit(rng.normal(size=a.shape[0]))
            continue

        value = float(x @ y)
        x = y / y_norm
        if float(np.linalg.norm(a @ x - value * x)) < tolerance * scale:
            break

    return value, x


def leading_eigenpair(samples: Sequence[Sequence[float]] | np.ndarray, center: bool = True) -> EigenPair:
    """
    Finds the leading eigenvector of the sample covariance.

    Args:
        samples (Sequence[Sequence[float]] | np.ndarray): Sample matrix, one sample per row.
        center (bool): Whether to mean-center the samples first.

    Returns:
        EigenPair: Unit eigenvector, its eigenvalue, and the covariance trace.

    Raises:
        DegenerateInput: If there are fewer than two rows, or the covariance is zero.

    """
    samples = as_sample_matrix(samples)
    if samples.shape[0] < 2:
        raise DegenerateInput("At least two rows are required.")

    matrix = covariance(samples, center=center)
    trace = float(np.trace(matrix))
    if not trace > 0.0:
        raise DegenerateInput

    values, vectors = jacobi_eigh(matrix)
    # argmax takes the lowest index among ties
    idx = int(np.argmax(values))
    return EigenPair(vector=unit(vectors[:, idx]), value=float(values[idx]), trace=trace)


def principal_component(samples: Sequence[Sequence[float]] | np.ndarray, center: bool = True) -> np.ndarray:
    """
    Returns the unit-norm eigenvector of the sample covariance with the largest eigenvalue.

    The sign is whatever the solver produces, deterministically for a fixed input.

    Args:
        samples (Sequence[Sequence[float]] | np.ndarray): Sample matrix, one sample per row.
        center (bool): Whether to mean-center the samples first.

    Returns:
        np.ndarray: The principal direction.

    """
    return leading_eigenpair(samples, center=center).vector


def unit(vector: Sequence[float] | np.ndarray) -> np.ndarray:
    """Scales a nonzero vector to unit L2 norm."""
    vector = as_vector(vector)
    norm = float(np.linalg.norm(vector))
    if norm == 0.0:
        raise ZeroVector
    return vector / norm


def dot(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    """
    Computes the inner product of two vectors.

    Products are summed with `math.fsum`, so the result is the correctly rounded sum of the
    elementwise products and independent of platform summation order.

    Args:
        a (Sequence[float] | np.ndarray): First vector.
        b (Sequence[float] | np.ndarray): Second vector.

    Returns:
        float: The inner product.

    Raises:
        DimensionMismatch: If the vectors differ in length.

    """
    a, b = as_vector(a), as_vector(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"Cannot take the dot product of lengths {a.size} and {b.size}")
    return math.fsum(np.multiply(a, b).tolist())


def cosine(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    """
    Computes the cosine similarity of two nonzero vectors, clipped to [-1, 1].

    Raises:
        ZeroVector: If either vector has zero norm.
        DimensionMismatch: If the vectors differ in length.

    """
    a, b = as_vector(a), as_vector(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"Cannot compare vectors of lengths {a.size} and {b.size}")
    norm_a, norm_b = math.sqrt(dot(a, a)), math.sqrt(dot(b, b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroVector
    return max(-1.0, min(1.0, dot(a, b) / (norm_a * norm_b)))
