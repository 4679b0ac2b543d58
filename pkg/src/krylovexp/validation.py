"""Input checks shared by the estimator layer and the command line."""
from __future__ import annotations

import math

import numpy as np
import scipy.sparse

from .la_core import ContractError, CsrMatrix


def check_operator(A) -> CsrMatrix:
    """Coerce ``A`` (CsrMatrix, scipy sparse or dense array) to a square CsrMatrix."""
    if isinstance(A, CsrMatrix):
        out = A
    elif scipy.sparse.issparse(A):
        out = CsrMatrix.from_scipy(A)
    else:
        arr = np.asarray(A, dtype=np.float64)
        if arr.ndim != 2:
            raise ContractError(f"operator must be 2-D, got {arr.ndim}-D")
        out = CsrMatrix.from_dense(arr)
    if out.n_rows != out.n_cols:
        raise ContractError(f"operator must be square, got {out.shape}")
    if not np.all(np.isfinite(out.values)):
        raise ContractError("operator has non-finite entries")
    return out


def check_vector(x, n: int | None = None, name: str = "vector") -> np.ndarray:
    """1-D finite float64 copy of ``x``, optionally of length ``n``."""
    arr = np.array(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ContractError(f"{name} must be 1-D, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise ContractError(f"{name} has length {arr.shape[0]}, expected {n}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} has non-finite entries")
    return arr


def check_positive(value, name: str) -> float:
    value = float(value)
    if not (value > 0 and math.isfinite(value)):
        raise ContractError(f"{name} must be positive and finite, got {value}")
    return value


def check_count(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or int(value) != value:
        raise ContractError(f"{name} must be an integer, got {value!r}")
    value = int(value)
    if value < minimum:
        raise ContractError(f"{name} must be at least {minimum}, got {value}")
    return value


def check_choice(value, choices, name: str):
    if value not in choices:
        raise ContractError(f"{name} must be one of {tuple(choices)}, got {value!r}")
    return value


def check_snapshots(S, n_rows: int | None = None) -> np.ndarray:
    """Snapshot matrix ``N x n_s`` with at least two columns."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[1] < 2:
        raise ContractError(f"snapshots must be N x n_s with n_s >= 2, got shape {S.shape}")
    if n_rows is not None and S.shape[0] != n_rows:
        raise ContractError(f"snapshots have {S.shape[0]} rows, expected {n_rows}")
    if not np.all(np.isfinite(S)):
        raise ContractError("snapshots have non-finite entries")
    return S
