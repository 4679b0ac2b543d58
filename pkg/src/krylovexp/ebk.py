"""Exponential block Krylov (EBK) solver for ``y' = -Ay + g(t)`` on ``[0, T]``.

The source is compressed to ``g(t) ~ U p(t)`` from time snapshots, the
problem is projected once onto ``span(U, AU, ..., A^{k-1} U)`` and the small
projected problem is integrated exactly over the whole interval with
piecewise-polynomial ``p``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg
from scipy.interpolate import CubicSpline

from .la_core import ContractError, CsrMatrix, expm_dense, spmv, thin_svd

DEFLATION_TOL = 1e-12
INTERPOLATIONS = ("linear", "cubic")


class EbkConvergenceError(RuntimeError):
    """``k_max`` block iterations did not bring the residual below tolerance."""

    def __init__(self, message, residual_profile):
        super().__init__(message)
        self.residual_profile = residual_profile


@dataclass(frozen=True, eq=False)
class SourceApprox:
    """Low-rank model ``g(t) ~ U p(t)`` built from uniform snapshots."""

    U: np.ndarray
    snapshot_times: np.ndarray
    coeffs: np.ndarray
    singular_values: np.ndarray
    snapshots: np.ndarray
    interpolation: str = "linear"

    @property
    def m(self) -> int:
        return self.U.shape[1]

    @property
    def n_s(self) -> int:
        return len(self.snapshot_times)

    @property
    def truncation_bound(self) -> float:
        """``sigma_{m+1}``, the snapshot truncation error bound."""
        s = self.singular_values
        return float(s[self.m]) if self.m < len(s) else 0.0

    def segment_polynomials(self) -> np.ndarray:
        """Coefficients ``c[i, j, :]`` with ``p(t_i + theta h) = sum_j c[i, j] theta^j``."""
        t = self.snapshot_times
        h = np.diff(t)
        if self.interpolation == "linear":
            c = np.empty((len(h), 2, self.m))
            c[:, 0] = self.coeffs[:, :-1].T
            c[:, 1] = (self.coeffs[:, 1:] - self.coeffs[:, :-1]).T
            return c
        spline = CubicSpline(t, self.coeffs.T, axis=0)
        # spline.c[q, i] multiplies (t - t_i)^(3 - q)
        c = np.empty((len(h), 4, self.m))
        for j in range(4):
            c[:, j] = spline.c[3 - j] * (h ** j)[:, None]
        return c

    def p(self, t) -> np.ndarray:
        """Interpolated coefficients at time(s) ``t``; shape ``(m,)`` or ``(len(t), m)``."""
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        times = self.snapshot_times
        if self.interpolation == "linear":
            out = np.stack([np.interp(t_arr, times, row) for row in self.coeffs], axis=-1)
        else:
            out = CubicSpline(times, self.coeffs.T, axis=0)(t_arr)
        return out[0] if np.ndim(t) == 0 else out

    def evaluate(self, t) -> np.ndarray:
        """``U p(t)``."""
        return self.U @ self.p(t).T

    def shifted(self, shift) -> "SourceApprox":
        """Approximation of ``g(t) - shift`` with the same rank and interpolation."""
        return _from_snapshots(self.snapshots - np.asarray(shift)[:, None], self.snapshot_times,
                               self.m, self.interpolation)

    def a_posteriori_error(self, g_sampler: Callable, refine: int = 10, shift=None) -> dict:
        """Measured ``||g - U p||`` on a grid ``refine`` times finer than the snapshots.

        Returns the maximum error, the trapezoidal ratio
        ``int ||g - U p|| / int ||g||`` and ``sigma_{m+1}``.
        """
        times = self.snapshot_times
        fine = np.linspace(times[0], times[-1], refine * (len(times) - 1) + 1)
        err = np.empty(len(fine))
        mag = np.empty(len(fine))
        approx = self.evaluate(fine)
        for i, t in enumerate(fine):
            g = np.asarray(g_sampler(t), dtype=float)
            if shift is not None:
                g = g - shift
            err[i] = np.linalg.norm(g - approx[:, i])
            mag[i] = np.linalg.norm(g)
        return {
            "n_s": self.n_s,
            "m": self.m,
            "max_error": float(err.max()),
            "relative_integral_error": float(np.trapezoid(err, fine) / np.trapezoid(mag, fine)),
            "sigma_next": self.truncation_bound,
        }


def source_approx_from_snapshots(S, times, m: int, interpolation: str = "linear") -> SourceApprox:
    """Rank-``m`` approximation from a given ``N x n_s`` snapshot matrix."""
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[1] != len(times):
        raise ContractError("snapshot matrix must have one column per snapshot time")
    if not 1 <= m <= min(S.shape):
        raise ContractError(f"rank m={m} out of range for snapshots of shape {S.shape}")
    if interpolation not in INTERPOLATIONS:
        raise ContractError(f"interpolation must be one of {INTERPOLATIONS}")
    return _from_snapshots(S, times, m, interpolation)


def _from_snapshots(S, times, m, interpolation) -> SourceApprox:
    svd = thin_svd(S)
    U = np.ascontiguousarray(svd.left[:, :m])
    return SourceApprox(U=U, snapshot_times=np.asarray(times, dtype=float), coeffs=U.T @ S,
                        singular_values=svd.singular_values, snapshots=S,
                        interpolation=interpolation)


def build_source_approx(g_sampler: Callable, T: float, n_s: int, m: int,
                        interpolation: str = "linear") -> SourceApprox:
    """Sample ``g`` at ``n_s`` uniform times on ``[0, T]`` and truncate its SVD to rank ``m``."""
    if m < 1 or n_s < m:
        raise ContractError(f"need n_s >= m >= 1, got n_s={n_s}, m={m}")
    if n_s < 2:
        raise ContractError("need at least two snapshots")
    if interpolation not in INTERPOLATIONS:
        raise ContractError(f"interpolation must be one of {INTERPOLATIONS}")
    times = np.linspace(0.0, T, n_s)
    S = np.column_stack([np.asarray(g_sampler(t), dtype=float) for t in times])
    if S.shape[0] < n_s:
        raise ContractError("more snapshots than unknowns")
    return _from_snapshots(S, times, m, interpolation)


@dataclass(frozen=True, eq=False)
class BlockKrylovBasis:
    """Block Arnoldi basis of ``span(U, AU, ..., A^k U)`` with deflation.

    ``block_sizes[j]`` is the width of block ``j``; widths shrink when new
    directions become linearly dependent.  Storage is shared between
    successive bases as in :class:`~krylovexp.phi_krylov.KrylovBasis`.
    """

    _V: np.ndarray
    _H: np.ndarray
    block_sizes: tuple
    anorm: float
    breakdown: bool = False

    @property
    def k(self) -> int:
        """Completed block iterations."""
        return len(self.block_sizes) - 1 if not self.breakdown else len(self.block_sizes)

    @property
    def m(self) -> int:
        return self.block_sizes[0]

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.block_sizes)))

    @property
    def dim(self) -> int:
        """Columns in the projection space ``V_k``."""
        return int(self.offsets[self.k])

    @property
    def Vk(self) -> np.ndarray:
        return self._V[:, :self.dim]

    @property
    def V(self) -> np.ndarray:
        return self._V[:, :int(self.offsets[-1])]

    @property
    def H(self) -> np.ndarray:
        """Rectangular block Hessenberg matrix (all rows, ``dim`` columns)."""
        return self._H[:int(self.offsets[-1]), :self.dim]

    @property
    def H_square(self) -> np.ndarray:
        d = self.dim
        return self._H[:d, :d]

    @property
    def subdiagonal_block(self) -> np.ndarray:
        """``H_{k+1,k}``: couples the last block of ``V_k`` to the next block."""
        off = self.offsets
        if self.breakdown:
            return np.zeros((0, self.block_sizes[self.k - 1]))
        return self._H[off[self.k]:off[self.k + 1], off[self.k - 1]:off[self.k]]

    @property
    def E1(self) -> np.ndarray:
        e = np.zeros((self.dim, self.m))
        e[:self.m, :self.m] = np.eye(self.m)
        return e


def start_block_basis(A: CsrMatrix, U, max_cols: int) -> BlockKrylovBasis:
    U = np.asarray(U, dtype=float)
    N, m = U.shape
    cap = min(max_cols, N) + m
    V = np.zeros((N, cap), order="F")
    V[:, :m] = U
    return BlockKrylovBasis(V, np.zeros((cap, cap)), (m,), A.norm1())


def block_arnoldi_extend(A: CsrMatrix, basis: BlockKrylovBasis):
    """One block Arnoldi step.

    Returns the extended basis and the number of products with ``A`` spent
    (the width of the block that was multiplied).
    """
    if basis.breakdown:
        raise ContractError("block basis already broke down")
    V, H = basis._V, basis._H
    off = basis.offsets
    lo, hi = int(off[-2]), int(off[-1])
    width = hi - lo
    W = np.column_stack([spmv(A, V[:, j]) for j in range(lo, hi)])
    for _ in range(2):
        for b in range(len(basis.block_sizes)):
            blk = V[:, off[b]:off[b + 1]]
            C = blk.T @ W
            H[off[b]:off[b + 1], lo:hi] += C
            W -= blk @ C
    Q, R, perm = scipy.linalg.qr(W, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > DEFLATION_TOL * max(basis.anorm, np.finfo(float).tiny)))
    if rank == 0:
        return BlockKrylovBasis(V, H, basis.block_sizes, basis.anorm, breakdown=True), width
    if hi + rank > V.shape[1]:
        raise ContractError("block basis capacity exhausted")
    V[:, hi:hi + rank] = Q[:, :rank]
    Rp = np.empty_like(R[:rank])
    Rp[:, perm] = R[:rank]
    H[hi:hi + rank, lo:hi] = Rp
    return BlockKrylovBasis(V, H, basis.block_sizes + (rank,), basis.anorm), width


def project_ivp_advance(H_square, u0, w0, w1, s: float) -> np.ndarray:
    """Exact ``u(s)`` for ``u' = -H u + w0 + (sigma/s)(w1 - w0)``, ``u(0) = u0``.

    Uses one exponential of ``[[-sH, s(w1-w0), s(w0-H u0)], [0, 0, 1], [0, 0, 0]]``,
    whose last column carries ``s phi_2 (w1 - w0) + s phi_1 (w0 - H u0)``.
    """
    H = np.asarray(H_square, dtype=float)
    u0, w0, w1 = (np.asarray(a, dtype=float) for a in (u0, w0, w1))
    n = H.shape[0]
    if not s > 0:
        raise ContractError("s must be positive")
    aug = np.zeros((n + 2, n + 2))
    aug[:n, :n] = -s * H
    aug[:n, n] = s * (w1 - w0)
    aug[:n, n + 1] = s * (w0 - H @ u0)
    aug[n, n + 1] = 1.0
    return u0 + expm_dense(aug)[:n, n + 1]


def _phi_blocks(H, E, s, degree):
    """``[s phi_1(-sH) E, ..., s phi_{d+1}(-sH) E]`` and ``exp(-sH)`` from one exponential."""
    n, m = E.shape
    d1 = degree + 1
    size = n + d1 * m
    aug = np.zeros((size, size))
    aug[:n, :n] = -s * H
    aug[:n, n:n + m] = s * E
    for j in range(degree):
        a = n + j * m
        aug[a:a + m, a + m:a + 2 * m] = np.eye(m)
    F = expm_dense(aug)
    blocks = [F[:n, n + j * m:n + (j + 1) * m] for j in range(d1)]
    return F[:n, :n], blocks


def _advance_poly(H, E, u0, coeffs, s):
    """Exact advance over ``[0, s]`` with forcing ``E sum_j coeffs[j] (sigma/s)^j``."""
    degree = coeffs.shape[0] - 1
    P, blocks = _phi_blocks(H, E, s, degree)
    u = P @ u0
    for j, blk in enumerate(blocks):
        u += math.factorial(j) * (blk @ coeffs[j])
    return u


@dataclass
class EbkReport:
    matvecs: int = 0
    k_final: int = 0
    residual_max: float = math.inf
    residual_profile: list = field(default_factory=list)
    block_sizes: tuple = ()


@dataclass(eq=False)
class EbkSolution:
    """Evaluator of the EBK approximation on ``[0, T]``."""

    v: np.ndarray
    basis: BlockKrylovBasis | None
    src: SourceApprox
    u_grid: np.ndarray
    report: EbkReport

    @property
    def T(self) -> float:
        return float(self.src.snapshot_times[-1])

    @property
    def y_final(self) -> np.ndarray:
        return self(self.T)

    def coefficients(self, t: float) -> np.ndarray:
        times = self.src.snapshot_times
        if not times[0] <= t <= times[-1]:
            raise ContractError(f"t={t} outside [0, {self.T}]")
        if self.basis is None:
            return np.zeros(0)
        i = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2))
        sigma = t - times[i]
        if sigma == 0.0:
            return self.u_grid[i].copy()
        h = times[i + 1] - times[i]
        poly = self.src.segment_polynomials()[i]
        scale = (sigma / h) ** np.arange(poly.shape[0])
        return _advance_poly(self.basis.H_square, self.basis.E1, self.u_grid[i],
                             poly * scale[:, None], sigma)

    def __call__(self, t: float) -> np.ndarray:
        if self.basis is None:
            return self.v.copy()
        return self.v + self.basis.Vk @ self.coefficients(t)

    def residual_norms(self) -> np.ndarray:
        """Block residual ``||H_{k+1,k} u_last(t_i)||`` on the snapshot grid."""
        if self.basis is None:
            return np.zeros(len(self.u_grid))
        return _grid_residuals(self.basis, self.u_grid)


def _grid_residuals(basis: BlockKrylovBasis, u_grid) -> np.ndarray:
    if basis.breakdown:
        return np.zeros(len(u_grid))
    sub = basis.subdiagonal_block
    last = u_grid[:, basis.dim - sub.shape[1]:]
    return np.linalg.norm(last @ sub.T, axis=1)


def _propagate(basis: BlockKrylovBasis, src: SourceApprox, polys) -> np.ndarray:
    H = basis.H_square
    E = basis.E1
    times = src.snapshot_times
    steps = np.diff(times)
    u = np.zeros((len(times), basis.dim))
    uniform = np.allclose(steps, steps[0], rtol=1e-12, atol=0.0)
    if uniform:
        P, blocks = _phi_blocks(H, E, steps[0], polys.shape[1] - 1)
        weights = [math.factorial(j) * blk for j, blk in enumerate(blocks)]
    for i, h in enumerate(steps):
        if uniform:
            nxt = P @ u[i]
            for j, wblk in enumerate(weights):
                nxt += wblk @ polys[i, j]
            u[i + 1] = nxt
        else:
            u[i + 1] = _advance_poly(H, E, u[i], polys[i], h)
    return u


def ebk_solve(A: CsrMatrix, v, src: SourceApprox, T: float, tol: float,
              k_max: int = 50) -> EbkSolution:
    """Solve ``y' = -A y + g(t)``, ``y(0) = v`` on ``[0, T]`` by block Krylov projection.

    ``src`` approximates ``g``.  A nonzero ``v`` is handled by solving for
    ``y - v`` with source ``g - A v``, re-compressed at the same rank.
    Block iterations stop once the residual on the snapshot grid is below
    ``tol * max_i ||g(t_i) - A v||``.

    Raises
    ------
    EbkConvergenceError
        When ``k_max`` block iterations do not suffice.
    """
    if not tol > 0:
        raise ContractError("tol must be positive")
    times = src.snapshot_times
    if not (math.isclose(times[0], 0.0, abs_tol=1e-14) and math.isclose(times[-1], T, rel_tol=1e-12)):
        raise ContractError("snapshot times must span [0, T]")
    v = np.asarray(v, dtype=float)
    report = EbkReport()
    if np.any(v):
        src = src.shifted(spmv(A, v))
        report.matvecs += 1
    scale = float(np.max(np.linalg.norm(src.snapshots, axis=0)))
    polys = src.segment_polynomials()
    if scale == 0.0:
        report.residual_max = 0.0
        return EbkSolution(v, None, src, np.zeros((len(times), 0)), report)
    target = tol * scale
    max_cols = k_max * src.m + src.m
    basis = start_block_basis(A, src.U, max_cols)
    for _ in range(k_max):
        basis, spent = block_arnoldi_extend(A, basis)
        report.matvecs += spent
        u = _propagate(basis, src, polys)
        res = float(np.max(_grid_residuals(basis, u)))
        report.residual_profile.append(res)
        if res <= target or basis.breakdown:
            report.k_final = basis.k
            report.residual_max = res
            report.block_sizes = basis.block_sizes
            return EbkSolution(v, basis, src, u, report)
    raise EbkConvergenceError(
        f"EBK did not converge in {k_max} block iterations: residual {min(report.residual_profile):.3e} "
        f"> {target:.3e}", report.residual_profile)


def write_spectrum_csv(path, src: SourceApprox) -> None:
    with open(path, "w") as fh:
        fh.write("index,singular_value\n")
        for i, s in enumerate(src.singular_values, start=1):
            fh.write(f"{i},{float(s)!r}\n")


def write_residual_profile_csv(path, report: EbkReport) -> None:
    with open(path, "w") as fh:
        fh.write("k,residual_max\n")
        for k, r in enumerate(report.residual_profile, start=1):
            fh.write(f"{k},{float(r)!r}\n")
