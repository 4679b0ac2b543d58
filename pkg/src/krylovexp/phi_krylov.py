"""Arnoldi evaluation of ``y(t) = v + t phi(-tA)(g - Av)``.

Two restarting strategies are provided: residual-time restarting
(:func:`phiv_rt`), which controls the exponential residual of the Galerkin
solution, and EXPOKIT-style substepping (:func:`phiv_expokit`), which
advances over adaptive substeps using an a-posteriori error estimate.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .la_core import ContractError, CsrMatrix, expm_dense, phi_action_dense, spmv

BREAKDOWN_TOL = 1e-14
RT_GRID_POINTS = 64
RT_GRID_OCTAVES = 20


class RestartStagnationError(RuntimeError):
    """No backtracked time on the RT grid satisfies the residual test."""

    def __init__(self, message, smallest_residual):
        super().__init__(message)
        self.smallest_residual = smallest_residual


class StepUnderflowError(RuntimeError):
    """The EXPOKIT-style substep size dropped below the underflow floor."""


@dataclass(frozen=True, eq=False)
class KrylovBasis:
    """Arnoldi basis of ``span(r, Ar, ..., A^{k-1} r)``.

    Storage is preallocated and shared between successive bases: a basis
    only ever reads the first ``k + 1`` columns, which later extensions do
    not touch.
    """

    _V: np.ndarray
    _H: np.ndarray
    k: int
    beta: float
    anorm: float
    breakdown: bool = False

    @property
    def capacity(self) -> int:
        return self._H.shape[1]

    @property
    def Vk(self) -> np.ndarray:
        """Orthonormal basis, ``N x k``."""
        return self._V[:, :self.k]

    @property
    def V(self) -> np.ndarray:
        """``V_{k+1}``: basis plus the next Arnoldi vector (``V_k`` after breakdown)."""
        return self._V[:, :self.k if self.breakdown else self.k + 1]

    @property
    def H(self) -> np.ndarray:
        """Rectangular ``(k+1) x k`` Hessenberg matrix."""
        return self._H[:self.k + 1, :self.k]

    @property
    def H_square(self) -> np.ndarray:
        return self._H[:self.k, :self.k]

    @property
    def h_next(self) -> float:
        return 0.0 if self.breakdown or self.k == 0 else float(self._H[self.k, self.k - 1])


def start_basis(A: CsrMatrix, r, capacity: int) -> KrylovBasis:
    """Empty basis (``k = 0``) seeded with ``r / ||r||``."""
    r = np.asarray(r, dtype=np.float64)
    beta = float(np.linalg.norm(r))
    if beta == 0.0:
        raise ContractError("cannot start a Krylov basis from the zero vector")
    capacity = min(capacity, A.n_rows)
    V = np.zeros((A.n_rows, capacity + 1), order="F")
    V[:, 0] = r / beta
    return KrylovBasis(V, np.zeros((capacity + 1, capacity)), 0, beta, A.norm1())


def arnoldi_extend(A: CsrMatrix, basis: KrylovBasis) -> KrylovBasis:
    """One Arnoldi step, Gram-Schmidt applied twice against the whole basis.

    Costs exactly one product with ``A``.  A happy breakdown is returned as
    ``breakdown=True`` and the basis is not extended past it.
    """
    k = basis.k
    if basis.breakdown:
        raise ContractError("basis already broke down")
    if k >= basis.capacity:
        raise ContractError(f"basis capacity {basis.capacity} exhausted")
    V, H = basis._V, basis._H
    w = spmv(A, V[:, k])
    Q = V[:, :k + 1]
    for _ in range(2):
        c = Q.T @ w
        H[:k + 1, k] += c
        w -= Q @ c
    h = float(np.linalg.norm(w))
    H[k + 1, k] = h
    if h <= BREAKDOWN_TOL * max(basis.anorm, np.finfo(float).tiny):
        H[k + 1, k] = 0.0
        return KrylovBasis(V, H, k + 1, basis.beta, basis.anorm, breakdown=True)
    if k + 1 < V.shape[1]:
        V[:, k + 1] = w / h
    return KrylovBasis(V, H, k + 1, basis.beta, basis.anorm)


def galerkin_solution(basis: KrylovBasis, t: float, v=None, u0=None):
    """Solve the projected problem ``u' = -H_k u + beta e_1`` exactly.

    Returns
    -------
    u : ndarray
        Coefficients ``u(t)`` in the basis ``V_k``.
    y_eval : callable
        ``s -> v + V_k u(s)``; ``v`` defaults to zero.
    """
    H = basis.H_square
    k = basis.k
    e1 = np.zeros(k)
    e1[0] = basis.beta
    u0 = np.zeros(k) if u0 is None else np.asarray(u0, dtype=np.float64)

    def coeffs(s):
        if s == 0.0:
            return u0.copy()
        return u0 + phi_action_dense(H, e1 - H @ u0, s)

    def y_eval(s):
        y = basis.Vk @ coeffs(s)
        return y if v is None else v + y

    return coeffs(t), y_eval


def exp_residual_norm(basis: KrylovBasis, u) -> float:
    """``||r_k(t)|| = h_{k+1,k} |u_k(t)|``."""
    if basis.k == 0:
        raise ContractError("empty basis")
    return basis.h_next * abs(float(u[-1]))


def direct_residual(A: CsrMatrix, basis: KrylovBasis, u, g, v) -> np.ndarray:
    """``-A y_k + g - y_k'`` assembled with real matrix products (for checking)."""
    H = basis.H_square
    e1 = np.zeros(basis.k)
    e1[0] = basis.beta
    y = v + basis.Vk @ u
    dy = basis.Vk @ (e1 - H @ u)
    return -spmv(A, y) + g - dy


@dataclass
class PhiEvalReport:
    """Work tally of one phi evaluation.

    ``matvecs`` counts Arnoldi extensions only; products needed to form
    starting residuals or error estimates go to ``setup_matvecs``.
    """

    matvecs: int = 0
    setup_matvecs: int = 0
    restarts: int = 0
    substeps: int = 0
    final_residual_norm: float = 0.0

    @property
    def total_matvecs(self) -> int:
        return self.matvecs + self.setup_matvecs


def _rt_grid(t: float) -> np.ndarray:
    return t * 2.0 ** (-RT_GRID_OCTAVES * np.arange(RT_GRID_POINTS) / (RT_GRID_POINTS - 1))


def phiv_rt(A: CsrMatrix, v, g, t_end: float, tol: float, m_max: int = 100,
            trace: list | None = None):
    """``y(t_end)`` for ``y' = -Ay + g, y(0) = v`` with residual-time restarting.

    The Arnoldi process runs until ``||r_k(t_end)|| <= tol * ||g - A v||``.
    If ``m_max`` steps do not suffice, the solution is advanced to the
    largest time on a geometric grid where the residual test holds and the
    process restarts from there.

    Parameters
    ----------
    A : CsrMatrix
    v, g : ndarray
        Initial value and constant source.
    t_end : float
    tol : float
        Residual tolerance relative to ``||g - A v||`` of each (sub)problem.
    m_max : int
        Maximum Krylov dimension before restarting.
    trace : list, optional
        Receives ``(restart, k, delta, residual)`` per accepted segment.

    Returns
    -------
    y : ndarray
    report : PhiEvalReport
    """
    if not tol > 0:
        raise ContractError("tol must be positive")
    if m_max < 2:
        raise ContractError("m_max must be at least 2")
    if t_end < 0:
        raise ContractError("t_end must be nonnegative")
    v = np.asarray(v, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    y = v.copy()
    report = PhiEvalReport()
    if t_end == 0.0:
        return y, report
    r = g - spmv(A, v)
    report.setup_matvecs += 1
    t_left = float(t_end)

    while t_left > 0.0:
        beta = float(np.linalg.norm(r))
        if beta == 0.0:
            break
        target = tol * beta
        basis = start_basis(A, r, m_max)
        while True:
            basis = arnoldi_extend(A, basis)
            report.matvecs += 1
            u, _ = galerkin_solution(basis, t_left)
            res = exp_residual_norm(basis, u)
            if res <= target or basis.breakdown or basis.k == basis.capacity:
                break
        if res <= target or basis.breakdown:
            y += basis.Vk @ u
            report.final_residual_norm = res / beta
            if trace is not None:
                trace.append((report.restarts, basis.k, t_left, res))
            break
        smallest = res
        for delta in _rt_grid(t_left)[1:]:
            u, _ = galerkin_solution(basis, delta)
            res = exp_residual_norm(basis, u)
            smallest = min(smallest, res)
            if res <= target:
                break
        else:
            raise RestartStagnationError(
                f"no restart time satisfies the residual test (smallest {smallest:.3e}, "
                f"target {target:.3e})", smallest)
        y += basis.Vk @ u
        # g - A y_new without a product: A V_k = V_{k+1} H
        r = r - basis.V @ (basis.H @ u)
        if trace is not None:
            trace.append((report.restarts, basis.k, delta, res))
        report.restarts += 1
        report.final_residual_norm = res / beta
        t_left -= delta
    return y, report


def phiv_expokit(A: CsrMatrix, v, g, t_end: float, tol: float, m: int = 30,
                 trace: list | None = None):
    """``y(t_end)`` by EXPOKIT-style substepping with fresh ``m``-dimensional bases.

    Each substep builds a basis for the current ``g - A w``, estimates the
    local error from the two-term a-posteriori formula of EXPOKIT's
    ``phiv`` and accepts when it is below ``1.2 * tau * tol * ||g - A v|| / t_end``.
    Step sizes follow ``0.9 tau (tau tol / err)^(1/m)``, limited to
    ``[0.5 tau, 2 tau]`` and rounded to two significant digits.
    """
    if not tol > 0:
        raise ContractError("tol must be positive")
    if m < 2:
        raise ContractError("m must be at least 2")
    if t_end < 0:
        raise ContractError("t_end must be nonnegative")
    v = np.asarray(v, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    w = v.copy()
    report = PhiEvalReport()
    if t_end == 0.0:
        return w, report

    gamma, delta = 0.9, 1.2
    t_out = float(t_end)
    t_now = 0.0
    anorm = max(A.norm_inf(), np.finfo(float).tiny)
    floor = 1e-12 * t_out
    m = min(m, A.n_rows)

    p = g - spmv(A, w)
    report.setup_matvecs += 1
    beta0 = float(np.linalg.norm(p))
    if beta0 == 0.0:
        return w, report
    tol_rate = tol * beta0 / t_out

    xm = 1.0 / m
    fact = ((m + 1) / math.e) ** (m + 1) * math.sqrt(2.0 * math.pi * (m + 1))
    with np.errstate(over="ignore"):
        t_new = (1.0 / anorm) * ((fact * tol_rate) / (4.0 * beta0 * anorm)) ** xm
    # a (near) zero operator gives an infinite first guess: take the whole interval
    t_new = _round_up_2digits(min(t_new, t_out)) if math.isfinite(t_new) else t_out
    worst = 0.0
    first = True

    while t_now < t_out:
        if not first:
            p = g - spmv(A, w)
            report.setup_matvecs += 1
        first = False
        beta = float(np.linalg.norm(p))
        if beta == 0.0:
            break
        t_step = min(t_out - t_now, t_new)
        basis = start_basis(A, p, m)
        while basis.k < m:
            basis = arnoldi_extend(A, basis)
            report.matvecs += 1
            if basis.breakdown:
                break
        mb = basis.k
        Hs = -basis.H_square
        if basis.breakdown:
            t_step = t_out - t_now
            aug = np.zeros((mb + 1, mb + 1))
            aug[:mb, :mb] = Hs
            aug[0, mb] = 1.0
            F = expm_dense(t_step * aug)
            w = w + basis.Vk @ (beta * F[:mb, mb])
            t_now += t_step
            report.substeps += 1
            if trace is not None:
                trace.append((report.substeps, mb, t_step, 0.0))
            break

        h = basis.h_next
        avnorm = float(np.linalg.norm(spmv(A, basis._V[:, mb])))
        report.setup_matvecs += 1
        aug = np.zeros((mb + 3, mb + 3))
        aug[:mb, :mb] = Hs
        aug[0, mb] = 1.0
        aug[mb, mb + 1] = 1.0
        aug[mb + 1, mb + 2] = 1.0
        while True:
            F = expm_dense(t_step * aug)
            p1 = abs(beta * h * F[mb - 1, mb + 1])
            p2 = abs(beta * h * F[mb - 1, mb + 2] * avnorm)
            if p1 > 10.0 * p2:
                err_loc, xm = p2, 1.0 / mb
            elif p1 > p2:
                err_loc, xm = p1 * p2 / (p1 - p2), 1.0 / mb
            else:
                err_loc, xm = p1, 1.0 / max(mb - 1, 1)
            if err_loc <= delta * t_step * tol_rate:
                break
            shrink = gamma * (t_step * tol_rate / err_loc) ** xm
            t_step = _round_up_2digits(t_step * min(max(shrink, 0.5), 2.0))
            if t_step < floor:
                raise StepUnderflowError(f"substep {t_step:.3e} below {floor:.3e}")
        w = w + basis.Vk @ (beta * F[:mb, mb])
        t_now += t_step
        report.substeps += 1
        worst = max(worst, err_loc / (delta * t_step * tol_rate) * tol)
        if trace is not None:
            trace.append((report.substeps, mb, t_step, err_loc))
        grow = gamma * (t_step * tol_rate / max(err_loc, np.finfo(float).tiny)) ** xm
        t_new = _round_up_2digits(t_step * min(max(grow, 0.5), 2.0))
        if t_new < floor:
            raise StepUnderflowError(f"substep {t_new:.3e} below {floor:.3e}")
    report.restarts = max(report.substeps - 1, 0)
    report.final_residual_norm = worst
    return w, report


def _round_up_2digits(x: float) -> float:
    if x <= 0 or not math.isfinite(x):
        return x
    s = 10.0 ** (math.floor(math.log10(x)) - 1)
    return math.ceil(x / s) * s


def write_trace_csv(path, trace, header=("restart", "k", "delta", "residual")) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(trace)


PHI_ENGINES: dict[str, Callable] = {"rt": phiv_rt, "expokit": phiv_expokit}
