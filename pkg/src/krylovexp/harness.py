"""Benchmark problems, reference solutions and the method x parameter runner."""
from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse

from .ebk import EbkConvergenceError, build_source_approx, ebk_solve
from .integrators import IntegrationError, ShiftedSolver, TimeGrid, ee2_solve, exp_euler_solve, ros2_solve
from .la_core import ContractError, CsrMatrix, IncompleteLU, ShiftedOperator, SolverError, gmres_solve, spmv
from .mesh_fem import DiscreteOperator, assemble_operator, build_stretched_grid, calibrated_stretch_ratio
from .phi_krylov import RestartStagnationError, StepUnderflowError, phiv_expokit, phiv_rt

log = logging.getLogger(__name__)

DEFAULT_NU = 1.0 / 6400.0
DEFAULT_T = 1000.0
METHODS = ("ebk", "ee2-rt", "ee2-expokit", "expeuler", "ros2", "ros2-diff")
CSV_COLUMNS = ("method", "dt", "tol", "ns", "m", "cpu_s", "fevals", "lss", "error")


class ReferenceMismatchError(RuntimeError):
    """Two independent reference computations disagree."""


def alpha(t: float):
    """``alpha(t) = 1 - exp(-t/300) + exp(-t/100)`` and its derivative."""
    a = 1.0 - math.exp(-t / 300.0) + math.exp(-t / 100.0)
    da = math.exp(-t / 300.0) / 300.0 - math.exp(-t / 100.0) / 100.0
    return a, da


def _alpha_modes(g0, g300, g100):
    """Source ``g0 + exp(-t/300) g300 + exp(-t/100) g100`` as ``(rate, vector)`` pairs."""
    return [(0.0, g0), (1.0 / 300.0, g300), (1.0 / 100.0, g100)]


def relative_error(y, y_star) -> float:
    y = np.asarray(y, dtype=float)
    y_star = np.asarray(y_star, dtype=float)
    if y.shape != y_star.shape:
        raise ContractError("vectors differ in length")
    ref = np.linalg.norm(y_star)
    if ref == 0.0:
        raise ContractError("reference vector has zero norm")
    return float(np.linalg.norm(y - y_star) / ref)


@dataclass(eq=False)
class TestProblem:
    """``y' = -A y + g(t)``, ``y(0) = v`` on ``[0, T]`` with a way to measure error."""

    __test__ = False  # not a pytest class

    op: DiscreteOperator
    v: np.ndarray
    g_sampler: Callable
    T: float
    name: str = ""
    exact_final: np.ndarray | None = None
    reference_final: np.ndarray | None = None
    exact: Callable | None = None
    extras: dict = field(default_factory=dict)

    @property
    def A(self):
        return self.op.A

    @property
    def target(self) -> np.ndarray:
        if self.exact_final is not None:
            return self.exact_final
        if self.reference_final is None:
            self.reference_final = reference_solution(self)
        return self.reference_final


def steady_state(op: DiscreteOperator, tol: float = 1e-12) -> np.ndarray:
    """``A^{-1} g_bc`` by preconditioned GMRES."""
    M = ShiftedOperator(op.A, shift=0.0, scale=1.0)
    x, _ = gmres_solve(M, op.g_bc, tol=tol, restart=100, precond=IncompleteLU(M, drop_tol=1e-5),
                       maxiter=5000)
    return x


def peak_response(op: DiscreteOperator, T: float, tol: float = 1e-10) -> np.ndarray:
    """``T phi(-T A) g_peak``."""
    y, _ = phiv_rt(op.A, np.zeros(op.n), op.g_peak, T, tol, m_max=30)
    return y


def build_test1(op: DiscreteOperator, T: float = DEFAULT_T, tol_setup: float = 1e-10) -> TestProblem:
    """Manufactured problem with exact solution ``alpha(t) w``.

    ``w = A^{-1} g_bc + T phi(-T A) g_peak`` and ``g = alpha' w + alpha A w``.
    """
    try:
        w = steady_state(op) + peak_response(op, T, tol_setup)
    except (SolverError, RestartStagnationError) as exc:
        raise RuntimeError(f"Test 1 setup failed: {exc}") from exc
    Aw = spmv(op.A, w)

    def g(t):
        a, da = alpha(t)
        return da * w + a * Aw

    def exact(t):
        return alpha(t)[0] * w

    return TestProblem(op=op, v=alpha(0.0)[0] * w, g_sampler=g, T=T, name="test1",
                       exact_final=exact(T), exact=exact,
                       extras={"w": w, "Aw": Aw, "source_modes": _alpha_modes(Aw, w / 300.0 - Aw, Aw - w / 100.0)})


def build_test2(op: DiscreteOperator, T: float = DEFAULT_T, tol_setup: float = 1e-10) -> TestProblem:
    """Time-dependent boundary data ``g = alpha(t) g_bc`` from ``v = -T phi(-T A) g_peak``."""
    try:
        v = -peak_response(op, T, tol_setup)
    except RestartStagnationError as exc:
        raise RuntimeError(f"Test 2 setup failed: {exc}") from exc
    g_bc = op.g_bc

    def g(t):
        return alpha(t)[0] * g_bc

    return TestProblem(op=op, v=v, g_sampler=g, T=T, name="test2",
                       extras={"source_modes": _alpha_modes(g_bc, -g_bc, g_bc)})


def augmented_system(A: CsrMatrix, v, modes):
    """Autonomous form of ``y' = -A y + sum_i exp(-c_i t) g_i``.

    The exponential factors become extra states ``s_i' = -c_i s_i``,
    ``s_i(0) = 1``; modes with ``c_i = 0`` stay in the constant source.

    Returns
    -------
    A_aug : CsrMatrix
    z0, g_aug : ndarray
        Initial state and constant source of the augmented system.
    """
    const = [g for c, g in modes if c == 0.0]
    decaying = [(c, g) for c, g in modes if c != 0.0]
    n = A.n_rows
    p = len(decaying)
    G = np.column_stack([g for _, g in decaying]) if p else np.zeros((n, 0))
    block = scipy.sparse.bmat([[A.to_scipy(), scipy.sparse.csr_array(-G)],
                               [None, scipy.sparse.diags_array([c for c, _ in decaying])]],
                              format="csr")
    A_aug = CsrMatrix.from_scipy(block)
    z0 = np.concatenate([np.asarray(v, dtype=float), np.ones(p)])
    g_aug = np.concatenate([sum(const) if const else np.zeros(n), np.zeros(p)])
    return A_aug, z0, g_aug


def reference_solution(problem: TestProblem, tol: float = 1e-10, check_tol: float = 1e-7) -> np.ndarray:
    """Time-exact ``y(T)`` from the augmented autonomous system.

    Both test sources are sums of decaying exponentials, so ``y(T)`` is one
    ``phi`` evaluation of a slightly larger matrix; only Krylov error
    remains.  The residual-time result is accepted only if the EXPOKIT-style
    evaluation of the same system agrees to ``check_tol``.

    Raises
    ------
    ReferenceMismatchError
        If the two evaluations differ by more than ``check_tol`` (relative).
    """
    modes = problem.extras.get("source_modes")
    if modes is None:
        raise ContractError("problem has no exponential-sum source description")
    A_aug, z0, g_aug = augmented_system(problem.A, problem.v, modes)
    n = problem.A.n_rows
    y_rt = phiv_rt(A_aug, z0, g_aug, problem.T, tol, m_max=30)[0][:n]
    y_ek = phiv_expokit(A_aug, z0, g_aug, problem.T, tol)[0][:n]
    gap = relative_error(y_ek, y_rt)
    problem.extras["reference_gap"] = gap
    if gap > check_tol:
        raise ReferenceMismatchError(f"reference evaluations differ by {gap:.2e} > {check_tol:.0e}")
    return y_rt


@lru_cache(maxsize=8)
def benchmark_operator(n: int = 64, nu: float = DEFAULT_NU, with_supg: bool = True) -> DiscreteOperator:
    """Operator on the calibrated ``n x n`` stretched grid (cached)."""
    mesh = build_stretched_grid(n, calibrated_stretch_ratio(n))
    return assemble_operator(mesh, nu, with_supg=with_supg)


def build_problem(test: int, n: int = 64, nu: float = DEFAULT_NU, T: float = DEFAULT_T) -> TestProblem:
    op = benchmark_operator(n, nu)
    if test == 1:
        return build_test1(op, T)
    if test == 2:
        return build_test2(op, T)
    raise ContractError(f"unknown test {test}")


@dataclass
class BenchRow:
    method: str
    dt: float = math.nan
    tol: float = math.nan
    ns: int = 0
    m: int = 0
    cpu_s: float = math.nan
    fevals: int = 0
    lss: int = 0
    error: float = math.nan
    note: str = ""

    @property
    def failed(self) -> bool:
        return bool(self.note)

    def label(self) -> str:
        parts = [self.method.upper()]
        if not math.isnan(self.dt):
            parts.append(f"dt={self.dt:g}")
        if not math.isnan(self.tol) and not self.method.startswith("ros2"):
            parts.append(f"tol={self.tol:.0e}")
        if self.ns:
            parts.append(f"n_s={self.ns}")
        return ", ".join(parts)


@dataclass
class BenchConfig:
    test: int = 1
    mesh: int = 64
    nu: float = DEFAULT_NU
    T: float = DEFAULT_T
    methods: tuple = ()
    dts: tuple = (20.0, 10.0, 5.0)
    tols: tuple = (1e-4,)
    ns: tuple = (120,)
    m: int = 2
    jobs: int = 1
    trace_dir: str | None = None
    interpolation: str = "cubic"
    expokit_m: int = 30
    source_study: bool = False


def _run_one(problem: TestProblem, method: str, dt: float, tol: float, ns: int, m: int,
             cfg: BenchConfig) -> BenchRow:
    row = BenchRow(method, dt=dt, tol=tol, ns=ns, m=m)
    A = problem.A
    trace = [] if cfg.trace_dir else None
    start = time.perf_counter()
    try:
        if method == "ebk":
            src = build_source_approx(problem.g_sampler, problem.T, ns, m, cfg.interpolation)
            try:
                sol = ebk_solve(A, problem.v, src, problem.T, tol)
            except EbkConvergenceError as exc:
                if trace is not None:
                    trace.extend(exc.residual_profile)
                raise
            if trace is not None:
                trace.extend(sol.report.residual_profile)
            y, row.fevals = sol.y_final, sol.report.matvecs
        elif method in ("ee2-rt", "ee2-expokit", "expeuler"):
            grid = TimeGrid.uniform(problem.T, dt)
            engine = "expokit" if method == "ee2-expokit" else "rt"
            kw = {"m": cfg.expokit_m} if engine == "expokit" else {}
            if trace is not None:
                kw["trace"] = trace
            runner = exp_euler_solve if method == "expeuler" else ee2_solve
            rep = runner(A, problem.v, problem.g_sampler, grid, engine, tol, **kw)
            y, row.fevals = rep.y_final, rep.fevals
        elif method in ("ros2", "ros2-diff"):
            grid = TimeGrid.uniform(problem.T, dt)
            A_hat = problem.op.A_diff if method == "ros2-diff" else A
            solver_tol = 1e-10 if math.isnan(tol) else tol
            rep = ros2_solve(A, problem.v, problem.g_sampler, grid, A_hat=A_hat, solver_tol=solver_tol)
            y, row.fevals, row.lss = rep.y_final, rep.fevals, rep.linear_solves
        else:
            raise ContractError(f"unknown method {method!r}")
        row.cpu_s = time.perf_counter() - start
        row.error = relative_error(y, problem.target)
        if not math.isfinite(row.error):
            row.note = "non-finite solution"
    except (IntegrationError, EbkConvergenceError, RestartStagnationError, StepUnderflowError,
            SolverError, FloatingPointError) as exc:
        row.cpu_s = time.perf_counter() - start
        row.error = math.nan
        row.note = f"{type(exc).__name__}: {exc}"
        log.warning("%s failed: %s", row.label(), exc)
    if trace:
        _write_trace(cfg.trace_dir, row, trace)
    return row


def trace_path(trace_dir, row: BenchRow) -> Path:
    stem = f"trace_{row.method}"
    if not math.isnan(row.dt):
        stem += f"_dt{row.dt:g}"
    if not math.isnan(row.tol):
        stem += f"_tol{row.tol:.0e}"
    if row.ns:
        stem += f"_ns{row.ns}"
    return Path(trace_dir) / f"{stem}.csv"


def _write_trace(trace_dir, row: BenchRow, trace: list) -> None:
    path = trace_path(trace_dir, row)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        if row.method == "ebk":
            writer.writerow(["k", "residual_max"])
            writer.writerows((k, repr(float(r))) for k, r in enumerate(trace, start=1))
        else:
            writer.writerow(["restart", "k", "delta", "residual"])
            writer.writerows(trace)


def expand_runs(cfg: BenchConfig):
    """The (method, dt, tol, ns) combinations requested by ``cfg``."""
    runs = []
    for method in cfg.methods:
        if method not in METHODS:
            raise ContractError(f"unknown method {method!r}; choose from {METHODS}")
        if method == "ebk":
            runs += [(method, math.nan, tol, ns) for tol in cfg.tols for ns in cfg.ns]
        elif method.startswith("ros2"):
            runs += [(method, dt, 1e-10, 0) for dt in cfg.dts]
        else:
            runs += [(method, dt, tol, 0) for dt in cfg.dts for tol in cfg.tols]
    return runs


def run_benchmark(cfg: BenchConfig, problem: TestProblem | None = None) -> list[BenchRow]:
    """Run every requested combination; failures become rows with a note."""
    runs = expand_runs(cfg)
    if not runs:
        return []
    if problem is None:
        problem = build_problem(cfg.test, cfg.mesh, cfg.nu, cfg.T)
    _ = problem.target  # settle the reference before fanning out

    def job(spec):
        method, dt, tol, ns = spec
        m = cfg.m if method == "ebk" else 0
        return _run_one(problem, method, dt, tol, ns, m, cfg)

    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            return list(pool.map(job, runs))
    return [job(spec) for spec in runs]


@dataclass
class SourceStudyRow:
    n_s: int
    max_error: float
    relative_integral_error: float
    ebk_error: float


def source_approx_study(problem: TestProblem, ns_values=(30, 60, 120), m: int = 2,
                        tol: float = 1e-6, interpolation: str = "cubic") -> list[SourceStudyRow]:
    """Approximation error of ``g ~ U p`` and the resulting EBK error for several ``n_s``.

    An EBK run that does not converge is recorded with ``ebk_error = nan``.
    """
    rows = []
    for ns in ns_values:
        src = build_source_approx(problem.g_sampler, problem.T, ns, m, interpolation)
        check = src.a_posteriori_error(problem.g_sampler, refine=10)
        try:
            sol = ebk_solve(problem.A, problem.v, src, problem.T, tol)
            err = relative_error(sol.y_final, problem.target)
        except EbkConvergenceError as exc:
            log.warning("EBK with n_s=%d failed: %s", ns, exc)
            err = math.nan
        rows.append(SourceStudyRow(ns, check["max_error"], check["relative_integral_error"], err))
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.3g}" if abs(v) >= 1e-2 or v == 0 else f"{v:.3e}"
    return str(v)


def write_csv(path, rows: list[BenchRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in rows:
            d = asdict(r)
            writer.writerow([repr(float(d[c])) if isinstance(d[c], float) else d[c] for c in CSV_COLUMNS])


def read_csv(path) -> list[BenchRow]:
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            out.append(BenchRow(method=rec["method"], dt=float(rec["dt"]), tol=float(rec["tol"]),
                                ns=int(rec["ns"]), m=int(rec["m"]), cpu_s=float(rec["cpu_s"]),
                                fevals=int(rec["fevals"]), lss=int(rec["lss"]), error=float(rec["error"])))
    return out


def format_table(rows: list[BenchRow]) -> str:
    header = ("method", "CPU time, s", "fevals, l.s.s.", "error")
    body = []
    for r in rows:
        work = f"{r.fevals}, {r.lss if r.lss else '---'}"
        body.append((r.label(), f"{r.cpu_s:.2f}", work, _fmt(r.error) + (f"  [{r.note}]" if r.note else "")))
    widths = [max(len(x[i]) for x in [header] + body) for i in range(4)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("-" * len(lines[0]))
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in body]
    return "\n".join(lines)


def format_source_study(rows: list[SourceStudyRow]) -> str:
    lines = [f"{'n_s':>5}  {'max ||g-Up||':>13}  {'rel. integral':>13}  {'EBK error':>10}"]
    for r in rows:
        lines.append(f"{r.n_s:>5}  {r.max_error:13.3e}  {r.relative_integral_error:13.3e}  {r.ebk_error:10.3e}")
    return "\n".join(lines)


def write_source_study_csv(path, rows: list[SourceStudyRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f.name for f in fields(SourceStudyRow)])
        for r in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in asdict(r).values()])
