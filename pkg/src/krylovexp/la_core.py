"""Dense and sparse linear-algebra kernels.

Sparse operators live in :class:`CsrMatrix`; dense matrices are plain 2-D
``numpy`` arrays.  Everything here is a pure function of its inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

SMALL_MATRIX_CAP = 4096

# Pade(13,13) numerator coefficients and the 1-norm bound below which it is
# accurate to double precision (Higham 2005).
_PADE13 = (
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
)
_THETA13 = 5.371920351148152

PHI_TAYLOR_SWITCH = 1e-2
_PHI_TAYLOR_TERMS = 8


class ContractError(ValueError):
    """An operation was called with arguments violating its preconditions."""


class SolverError(RuntimeError):
    """An iterative solver did not reach the requested tolerance.

    Attributes
    ----------
    best_residual : float
        Smallest relative residual norm seen before giving up.
    iterations : int
        Inner iterations spent.
    """

    def __init__(self, message, best_residual=math.nan, iterations=0):
        super().__init__(message)
        self.best_residual = best_residual
        self.iterations = iterations


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    """Immutable sparse matrix in compressed sparse row storage."""

    n_rows: int
    n_cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    _sp: sp.csr_array = field(init=False, repr=False)

    def __post_init__(self):
        row_ptr = np.ascontiguousarray(self.row_ptr, dtype=np.int64)
        col_idx = np.ascontiguousarray(self.col_idx, dtype=np.int64)
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        n_rows, n_cols = int(self.n_rows), int(self.n_cols)
        if row_ptr.shape != (n_rows + 1,):
            raise ContractError("row_ptr must have length n_rows + 1")
        if row_ptr[0] != 0 or row_ptr[-1] != len(values) or len(col_idx) != len(values):
            raise ContractError("row_ptr[0] must be 0 and row_ptr[-1] == nnz")
        if np.any(np.diff(row_ptr) < 0):
            raise ContractError("row_ptr must be nondecreasing")
        if len(col_idx) and (col_idx.min() < 0 or col_idx.max() >= n_cols):
            raise ContractError("column index out of range")
        # strictly increasing columns inside every row
        step = np.diff(col_idx)
        row_starts = np.zeros(len(col_idx), dtype=bool)
        row_starts[row_ptr[1:-1][row_ptr[1:-1] < len(col_idx)]] = True
        if len(step) and np.any((step <= 0) & ~row_starts[1:]):
            raise ContractError("column indices must be strictly increasing within a row")
        for name, arr in (("row_ptr", row_ptr), ("col_idx", col_idx), ("values", values)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "n_rows", n_rows)
        object.__setattr__(self, "n_cols", n_cols)
        mat = sp.csr_array((values, col_idx, row_ptr), shape=(n_rows, n_cols))
        mat.has_sorted_indices = True
        object.__setattr__(self, "_sp", mat)

    @classmethod
    def from_scipy(cls, mat) -> "CsrMatrix":
        mat = sp.csr_array(mat, dtype=np.float64)
        mat.sum_duplicates()
        mat.sort_indices()
        return cls(mat.shape[0], mat.shape[1], mat.indptr, mat.indices, mat.data)

    @classmethod
    def from_dense(cls, arr) -> "CsrMatrix":
        return cls.from_scipy(sp.csr_array(np.atleast_2d(np.asarray(arr, dtype=float))))

    @classmethod
    def identity(cls, n: int) -> "CsrMatrix":
        return cls.from_scipy(sp.identity(n, format="csr"))

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return len(self.values)

    @property
    def T(self) -> "CsrMatrix":
        return CsrMatrix.from_scipy(self._sp.T)

    def to_scipy(self) -> sp.csr_array:
        return self._sp.copy()

    def to_dense(self) -> np.ndarray:
        return self._sp.toarray()

    def norm1(self) -> float:
        if self.nnz == 0:
            return 0.0
        return float(np.max(np.abs(self._sp).sum(axis=0)))

    def norm_inf(self) -> float:
        if self.nnz == 0:
            return 0.0
        return float(np.max(np.abs(self._sp).sum(axis=1)))

    def diagonal(self) -> np.ndarray:
        return self._sp.diagonal()

    def __matmul__(self, x):
        return spmv(self, x)


class SvdResult(NamedTuple):
    left: np.ndarray
    singular_values: np.ndarray
    right: np.ndarray


def spmv(A: CsrMatrix, x) -> np.ndarray:
    """Return ``A @ x``; rows are accumulated left to right."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != A.n_cols:
        raise ContractError(f"dimension mismatch: A has {A.n_cols} columns, x has {x.shape[0]} rows")
    return A._sp @ x


def asymmetry_ratio(A: CsrMatrix) -> float:
    """``||A - A^T||_1 / ||A + A^T||_1``."""
    S = A._sp
    num = abs(S - S.T).sum(axis=0).max()
    den = abs(S + S.T).sum(axis=0).max()
    return float(num / den)


def _as_square(H) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ContractError(f"expected a square matrix, got shape {H.shape}")
    return H


def expm_dense(H, cap: int = SMALL_MATRIX_CAP) -> np.ndarray:
    """Matrix exponential by scaling and squaring with a degree-13 Pade approximant.

    The input is scaled by ``2**-s`` so that its 1-norm is at most 5.37, the
    approximant is evaluated, and the result is squared ``s`` times.
    """
    H = _as_square(H)
    n = H.shape[0]
    if n > cap:
        raise ContractError(f"matrix dimension {n} exceeds small-matrix cap {cap}")
    if n == 0:
        return np.zeros((0, 0))
    norm = np.abs(H).sum(axis=0).max()
    if not np.isfinite(norm):
        raise ContractError("matrix has non-finite entries")
    s = 0
    if norm > _THETA13:
        s = int(math.ceil(math.log2(norm / _THETA13)))
    X = H / 2.0**s if s else H
    b = _PADE13
    ident = np.eye(n)
    X2 = X @ X
    X4 = X2 @ X2
    X6 = X4 @ X2
    U = X @ (X6 @ (b[13] * X6 + b[11] * X4 + b[9] * X2) + b[7] * X6 + b[5] * X4 + b[3] * X2 + b[1] * ident)
    V = X6 @ (b[12] * X6 + b[10] * X4 + b[8] * X2) + b[6] * X6 + b[4] * X4 + b[2] * X2 + b[0] * ident
    R = np.linalg.solve(V - U, V + U)
    for _ in range(s):
        R = R @ R
    return R


def phi_scalar(z: float) -> float:
    """``(exp(z) - 1) / z`` with the removable singularity filled in."""
    z = float(z)
    if abs(z) < PHI_TAYLOR_SWITCH:
        # Horner form of sum_{k<8} z^k / (k+1)!
        acc = 0.0
        for k in range(_PHI_TAYLOR_TERMS, 0, -1):
            acc = 1.0 + acc * z / (k + 1)
        return acc
    return math.expm1(z) / z


def phi_action_dense(H, b, t: float) -> np.ndarray:
    """Return ``t * phi(-t H) @ b`` from one exponential of an augmented matrix."""
    H = _as_square(H)
    b = np.asarray(b, dtype=np.float64)
    n = H.shape[0]
    if b.shape != (n,):
        raise ContractError(f"vector length {b.shape} does not match matrix dimension {n}")
    if t == 0.0:
        return np.zeros(n)
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = -t * H
    aug[:n, n] = t * b
    return expm_dense(aug)[:n, n]


def thin_svd(S) -> SvdResult:
    """Economy SVD of a tall matrix, singular values nonincreasing."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2:
        raise ContractError("thin_svd expects a 2-D array")
    if S.shape[0] < S.shape[1]:
        raise ContractError(f"thin_svd expects a tall matrix, got shape {S.shape}")
    left, sigma, right_t = np.linalg.svd(S, full_matrices=False)
    return SvdResult(left, sigma, right_t.T)


@dataclass(frozen=True)
class ShiftedOperator:
    """The matrix ``shift * I + scale * A`` without forming it eagerly."""

    A: CsrMatrix
    shift: float = 0.0
    scale: float = 1.0

    @property
    def n(self) -> int:
        return self.A.n_rows

    def matvec(self, x) -> np.ndarray:
        y = self.scale * spmv(self.A, x)
        if self.shift:
            y += self.shift * np.asarray(x, dtype=np.float64)
        return y

    def assemble(self) -> sp.csc_array:
        mat = self.scale * self.A._sp
        if self.shift:
            mat = mat + self.shift * sp.identity(self.n, format="csr")
        return sp.csc_array(mat)


class IncompleteLU:
    """Incomplete LU preconditioner handle for a :class:`ShiftedOperator`.

    Backed by SuperLU's threshold ILU.  ``drop_tol=0`` with ``fill_factor=1``
    keeps the factor close to the original sparsity pattern.
    """

    def __init__(self, op: ShiftedOperator, drop_tol: float = 1e-4, fill_factor: float = 10.0):
        self.op = op
        self.drop_tol = drop_tol
        self.fill_factor = fill_factor
        self._ilu = spla.spilu(op.assemble(), drop_tol=drop_tol, fill_factor=fill_factor)

    def solve(self, r) -> np.ndarray:
        return self._ilu.solve(np.asarray(r, dtype=np.float64))

    def as_linear_operator(self) -> spla.LinearOperator:
        n = self.op.n
        return spla.LinearOperator((n, n), matvec=self.solve, dtype=np.float64)


def gmres_solve(M: ShiftedOperator, b, tol: float = 1e-10, restart: int = 50,
                precond: IncompleteLU | None = None, maxiter: int = 2000, x0=None,
                residual_history: list | None = None):
    """Solve ``M x = b`` by restarted GMRES.

    Returns
    -------
    x : ndarray
    iterations : int
        Total inner GMRES iterations.

    Raises
    ------
    SolverError
        If the true relative residual stays above ``tol`` after ``maxiter``
        inner iterations.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (M.n,):
        raise ContractError("right-hand side length does not match operator")
    if not np.all(np.isfinite(b)):
        raise ContractError("right-hand side must be finite")
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), 0
    lin = spla.LinearOperator((M.n, M.n), matvec=M.matvec, dtype=np.float64)
    prec = precond.as_linear_operator() if precond is not None else None
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    iterations = 0
    best = math.inf

    def count(prnorm):
        nonlocal iterations
        iterations += 1
        if residual_history is not None:
            residual_history.append(float(prnorm))

    # scipy's stopping test uses the preconditioned residual; loop on the true one
    rtol = tol
    while True:
        res = np.linalg.norm(b - M.matvec(x)) / bnorm
        best = min(best, res)
        if res <= tol:
            return x, iterations
        if iterations >= maxiter:
            raise SolverError(f"GMRES did not converge: relative residual {best:.3e} > {tol:.1e}",
                              best_residual=best, iterations=iterations)
        budget = max(1, (maxiter - iterations + restart - 1) // restart)
        x, _ = spla.gmres(lin, b, x0=x, rtol=rtol, atol=0.0, restart=restart,
                          maxiter=budget, M=prec, callback=count, callback_type="pr_norm")
        if not np.all(np.isfinite(x)):
            raise SolverError("GMRES produced non-finite iterate", best_residual=best,
                              iterations=iterations)
        rtol = max(rtol * 0.1, 1e-16)


def read_matrix_market(path) -> CsrMatrix:
    return CsrMatrix.from_scipy(sp.csr_array(scipy.io.mmread(str(path))))


def write_matrix_market(path, A: CsrMatrix, comment: str = "") -> None:
    scipy.io.mmwrite(str(path), sp.coo_array(A._sp), comment=comment, field="real",
                     symmetry="general", precision=17)


def write_vector(path, x, binary: bool = False) -> None:
    """Dump a vector as text (length line, then values) or as binary.

    The binary layout is a little-endian uint64 length followed by
    little-endian float64 values.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    path = Path(path)
    if binary:
        with path.open("wb") as fh:
            fh.write(np.uint64(len(x)).astype("<u8").tobytes())
            fh.write(x.astype("<f8").tobytes())
    else:
        with path.open("w") as fh:
            fh.write(f"{len(x)}\n")
            for v in x:
                fh.write(f"{float(v)!r}\n")


def read_vector(path, binary: bool = False) -> np.ndarray:
    path = Path(path)
    if binary:
        raw = path.read_bytes()
        n = int(np.frombuffer(raw[:8], dtype="<u8")[0])
        x = np.frombuffer(raw[8:], dtype="<f8")
        if len(x) != n:
            raise ValueError(f"{path}: header says {n} values, found {len(x)}")
        return x.astype(np.float64)
    lines = path.read_text().split()
    n = int(lines[0])
    x = np.array([float(v) for v in lines[1:]], dtype=np.float64)
    if len(x) != n:
        raise ValueError(f"{path}: header says {n} values, found {len(x)}")
    return x
