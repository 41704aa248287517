"""Fixed orthonormal basis construction.

The shared basis is a tall matrix whose d columns are orthonormalized with
modified Gram-Schmidt (plus one re-orthogonalization sweep, which tightens
the Gram matrix to machine precision for well-conditioned inputs). The basis
is built once in float64 and is never trained; only the elementwise gain and
bias that rescale it are learnable (see :mod:`radgen.aligner`).
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateBasisError, ShapeError

DEFAULT_BASIS_ROWS = 2048
_RESIDUAL_FLOOR = 1e-10


def gram_schmidt(seed_matrix: np.ndarray) -> np.ndarray:
    """Orthonormalize the columns of ``seed_matrix`` (rows x d, d <= rows).

    Returns a new float64 matrix whose columns span the same subspace and are
    mutually orthonormal. Raises DegenerateBasisError when a column is
    (numerically) linearly dependent on the previous ones.
    """
    a = np.asarray(seed_matrix, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    rows, cols = a.shape
    if cols > rows:
        raise ShapeError(f"cannot orthonormalize {cols} columns in {rows} rows")

    q = a.copy()
    for _sweep in range(2):
        for k in range(cols):
            v = q[:, k]
            if k > 0:
                coeffs = q[:, :k].T @ v
                v = v - q[:, :k] @ coeffs
            norm = np.linalg.norm(v)
            if norm < _RESIDUAL_FLOOR:
                raise DegenerateBasisError(
                    f"column {k} is linearly dependent (residual norm {norm:.3e})"
                )
            q[:, k] = v / norm
    return q


def orthonormality_error(basis: np.ndarray) -> float:
    """max |B^T B - I| over all entries."""
    b = np.asarray(basis, dtype=np.float64)
    gram = b.T @ b
    return float(np.max(np.abs(gram - np.eye(b.shape[1]))))


def random_orthonormal_basis(
    dim: int, rows: int = DEFAULT_BASIS_ROWS, seed: int = 0
) -> np.ndarray:
    """Orthonormal basis from a seeded standard-normal matrix."""
    rng = np.random.default_rng(seed)
    return gram_schmidt(rng.standard_normal((rows, dim)))
