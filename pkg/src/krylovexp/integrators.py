"""Time stepping for ``y' = -A y + g(t)``: exponential Euler, EE2 and ROS2."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .la_core import ContractError, CsrMatrix, IncompleteLU, ShiftedOperator, SolverError, gmres_solve, spmv
from .phi_krylov import PHI_ENGINES


class IntegrationError(RuntimeError):
    """A time-stepping run aborted; ``step`` is the failing step index."""

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    dt: float

    def __post_init__(self):
        if not self.dt > 0 or not self.T > self.t0:
            raise ContractError("need dt > 0 and T > t0")
        n = (self.T - self.t0) / self.dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ContractError(f"dt={self.dt} does not divide [{self.t0}, {self.T}]")

    @classmethod
    def uniform(cls, T: float, dt: float, t0: float = 0.0) -> "TimeGrid":
        return cls(float(t0), float(T), float(dt))

    @property
    def n_steps(self) -> int:
        return int(round((self.T - self.t0) / self.dt))

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.t0, self.T, self.dt / factor)


@dataclass
class RunReport:
    """Outcome of one integration run; counts are exact tallies."""

    y_final: np.ndarray
    fevals: int = 0
    linear_solves: int = 0
    wall_seconds: float = 0.0
    error: float = math.nan
    gmres_iterations: int = 0
    step_errors: list = field(default_factory=list)


def _engine(phi_engine) -> Callable:
    if callable(phi_engine):
        return phi_engine
    try:
        return PHI_ENGINES[phi_engine]
    except KeyError:
        raise ContractError(f"unknown phi engine {phi_engine!r}; choose from {sorted(PHI_ENGINES)}") from None


def exp_euler_step(A: CsrMatrix, y_n, g_n, dt: float, phi_engine="rt", tol: float = 1e-6,
                   **engine_kw):
    """``y_n + dt phi(-dt A)(g_n - A y_n)``; exact for constant ``g``.

    Returns the new state and the engine's :class:`PhiEvalReport`.
    """
    if not dt > 0:
        raise ContractError("dt must be positive")
    return _engine(phi_engine)(A, y_n, g_n, dt, tol, **engine_kw)


def exp_euler_solve(A: CsrMatrix, v, g_sampler: Callable, grid: TimeGrid, phi_engine="rt",
                    tol: float = 1e-6, exact: Callable | None = None, **engine_kw) -> RunReport:
    """Exponential Euler with ``g`` frozen at each step's left endpoint."""
    start = time.perf_counter()
    y = np.array(v, dtype=np.float64)
    fevals = 0
    errors = []
    for n, t in enumerate(grid.times()[:-1]):
        y, rep = exp_euler_step(A, y, g_sampler(t), grid.dt, phi_engine, tol, **engine_kw)
        fevals += rep.total_matvecs
        if not np.all(np.isfinite(y)):
            raise IntegrationError(f"non-finite state at step {n}", n)
        if exact is not None:
            ref = exact(t + grid.dt)
            errors.append(np.linalg.norm(y - ref) / np.linalg.norm(ref))
    return RunReport(y, fevals=fevals, wall_seconds=time.perf_counter() - start, step_errors=errors)


def ee2_solve(A: CsrMatrix, v, g_sampler: Callable, grid: TimeGrid, phi_engine="rt",
              tol: float = 1e-6, **engine_kw) -> RunReport:
    """Globally extrapolated exponential Euler: ``2 y_{dt/2}(T) - y_{dt}(T)``."""
    start = time.perf_counter()
    coarse = exp_euler_solve(A, v, g_sampler, grid, phi_engine, tol, **engine_kw)
    fine = exp_euler_solve(A, v, g_sampler, grid.refined(2), phi_engine, tol, **engine_kw)
    y = 2.0 * fine.y_final - coarse.y_final
    return RunReport(y, fevals=coarse.fevals + fine.fevals,
                     wall_seconds=time.perf_counter() - start)


class ShiftedSolver:
    """Repeated solves with ``I + gamma dt A_hat``; the preconditioner is built once."""

    def __init__(self, A_hat: CsrMatrix, dt: float, gamma: float = 1.0, tol: float = 1e-10,
                 restart: int = 50, maxiter: int = 2000, drop_tol: float = 1e-4,
                 fill_factor: float = 10.0):
        self.op = ShiftedOperator(A_hat, shift=1.0, scale=gamma * dt)
        self.precond = IncompleteLU(self.op, drop_tol=drop_tol, fill_factor=fill_factor)
        self.tol = tol
        self.restart = restart
        self.maxiter = maxiter
        self.solves = 0
        self.iterations = 0

    def __call__(self, b, x0=None) -> np.ndarray:
        x, its = gmres_solve(self.op, b, tol=self.tol, restart=self.restart, precond=self.precond,
                             maxiter=self.maxiter, x0=x0)
        self.solves += 1
        self.iterations += its
        return x


ROS2_JACOBIANS = ("full", "diffusion")


def _check_stage(f, step):
    # an overflowing stage vector means the run has already diverged
    if not (np.all(np.isfinite(f)) and np.isfinite(np.linalg.norm(f))):
        raise IntegrationError(f"non-finite stage vector at step {step}", step)


def ros2_solve(A: CsrMatrix, v, g_sampler: Callable, grid: TimeGrid, A_hat: CsrMatrix | None = None,
               linear_solver: ShiftedSolver | None = None, gamma: float = 1.0,
               solver_tol: float = 1e-10, exact: Callable | None = None) -> RunReport:
    """Two-stage Rosenbrock scheme with ``gamma = 1``.

    ``f(t, y) = -A y + g(t)``.  Both stages solve with ``I + gamma dt A_hat``
    where ``A_hat`` approximates ``A`` (the negated Jacobian); pass the
    diffusion-only operator to treat advection explicitly.
    """
    start = time.perf_counter()
    A_hat = A if A_hat is None else A_hat
    dt = grid.dt
    solve = linear_solver or ShiftedSolver(A_hat, dt, gamma=gamma, tol=solver_tol)
    solves0, iters0 = solve.solves, solve.iterations
    y = np.array(v, dtype=np.float64)
    fevals = 0
    errors = []
    k1 = k2 = None
    times = grid.times()
    for n in range(grid.n_steps):
        t, t_next = times[n], times[n + 1]
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                f1 = -spmv(A, y) + g_sampler(t)
                _check_stage(f1, n)
                k1 = solve(f1, x0=k1)
                f2 = -spmv(A, y + dt * k1) + g_sampler(t_next) - 2.0 * k1
                _check_stage(f2, n)
                k2 = solve(f2, x0=k2)
        except SolverError as exc:
            raise IntegrationError(f"linear solve failed at step {n}: {exc}", n) from exc
        fevals += 2
        y = y + 1.5 * dt * k1 + 0.5 * dt * k2
        if not np.all(np.isfinite(y)):
            raise IntegrationError(f"non-finite state at step {n}", n)
        if exact is not None:
            ref = exact(t_next)
            errors.append(np.linalg.norm(y - ref) / np.linalg.norm(ref))
    return RunReport(y, fevals=fevals, linear_solves=solve.solves - solves0,
                     wall_seconds=time.perf_counter() - start,
                     gmres_iterations=solve.iterations - iters0, step_errors=errors)
