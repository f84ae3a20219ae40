"""Direct sparse solves with a residual check.

SuperLU (through :mod:`scipy.sparse.linalg`) factorises the system.  The
residual tolerance is a verification threshold on the computed solution; a
failed factorisation, a vanishing pivot or a residual above the tolerance
raises :class:`SingularMatrixError`.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvalidArgumentError, SingularMatrixError

# pivots smaller than this relative to the largest are treated as zero
PIVOT_RTOL = 1e-13


@dataclass(frozen=True)
class SolveReport:
    residual: float  # ||b - Ax|| / ||b||
    n: int
    nnz: int
    nnz_lu: int
    pivot_ratio: float
    method: str = "superlu"


def as_csr(A) -> sp.csr_matrix:
    """Canonical CSR copy: sorted, duplicate-free column indices."""
    A = sp.csr_matrix(A, dtype=float)
    A.sum_duplicates()
    A.sort_indices()
    return A


def solve(A, b, tol: float = 1e-10):
    """Solve ``A x = b``; returns ``(x, SolveReport)``."""
    A = as_csr(A)
    b = np.asarray(b, float)
    n = A.shape[0]
    if A.shape[0] != A.shape[1]:
        raise InvalidArgumentError(f"matrix must be square, got {A.shape}")
    if b.shape != (n,):
        raise InvalidArgumentError(f"right-hand side has shape {b.shape}, expected ({n},)")
    if not np.isfinite(A.data).all() or not np.isfinite(b).all():
        raise InvalidArgumentError("non-finite entries in the system")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", spla.MatrixRankWarning)
            lu = spla.splu(A.tocsc(), permc_spec="COLAMD")
    except (RuntimeError, spla.MatrixRankWarning) as exc:
        raise SingularMatrixError(f"factorisation failed: {exc}") from exc
    d = np.abs(lu.U.diagonal())
    ratio = float(d.min() / d.max()) if n and d.max() > 0 else 0.0
    if ratio < PIVOT_RTOL:
        raise SingularMatrixError(f"matrix is numerically singular (pivot ratio {ratio:.2e})")
    x = lu.solve(b)
    nb = np.linalg.norm(b)
    r = np.linalg.norm(b - A @ x)
    res = float(r / nb) if nb > 0 else float(r)
    report = SolveReport(res, n, A.nnz, lu.L.nnz + lu.U.nnz, ratio)
    if not np.isfinite(x).all() or not res <= tol:
        raise SingularMatrixError(f"relative residual {res:.2e} exceeds {tol:.1e}")
    return x, report
