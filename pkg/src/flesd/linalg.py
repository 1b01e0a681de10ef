"""Dense matrix helpers on float64 numpy arrays.

A "matrix" throughout this package is a 2-D float64 ``numpy.ndarray`` in
row-major order. numpy owns the storage and the inner loops; the wrappers
here add the shape and validity checks the rest of the simulator relies on.
All operations are deterministic for identical inputs: shapes are fixed,
summation order inside a product never changes between runs.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, ParameterError, ShapeError


def as_matrix(x) -> np.ndarray:
    """Coerce ``x`` to a 2-D float64 array (no copy if already one)."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={a.ndim}")
    return a


def check_finite(a: np.ndarray, what: str = "matrix") -> np.ndarray:
    if not np.isfinite(a).all():
        raise DegenerateInputError(f"{what} contains NaN or Inf entries")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product with explicit shape checking."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul result")


def l2_normalize_columns(a) -> np.ndarray:
    """Scale every column to unit Euclidean norm.

    Zero-norm columns raise instead of silently producing NaN; a collapsed
    representation is a bug upstream, not something to smooth over.
    """
    a = as_matrix(a)
    norms = np.sqrt((a * a).sum(axis=0, keepdims=True))
    if (norms == 0.0).any():
        j = int(np.flatnonzero(norms[0] == 0.0)[0])
        raise DegenerateInputError(f"column {j} has zero norm, cannot normalize")
    return a / norms


def l2_normalize_rows(a) -> np.ndarray:
    """Row-wise counterpart of :func:`l2_normalize_columns`."""
    a = as_matrix(a)
    norms = np.sqrt((a * a).sum(axis=1, keepdims=True))
    if (norms == 0.0).any():
        i = int(np.flatnonzero(norms[:, 0] == 0.0)[0])
        raise DegenerateInputError(f"row {i} has zero norm, cannot normalize")
    return a / norms


def softmax_rows(logits, temperature: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``logits / temperature``.

    The row maximum is subtracted before exponentiation so the result is
    stable for logit magnitudes far beyond anything the encoders emit.
    """
    if temperature <= 0.0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    z = as_matrix(logits) / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
