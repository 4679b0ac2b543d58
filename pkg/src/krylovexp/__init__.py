"""Krylov exponential integrators for advection-diffusion problems.

Modules
-------
la_core       sparse matrices, dense matrix exponential, GMRES, I/O
mesh_fem      stretched grids and SUPG finite-element assembly
phi_krylov    Arnoldi-based phi evaluation (residual-time and EXPOKIT restarting)
ebk           exponential block Krylov solver with low-rank source approximation
integrators   exponential Euler, EE2 and ROS2 time stepping
harness       test problems, reference solutions and benchmark tables
estimators    fit/predict wrappers around the integrators
"""
from .ebk import SourceApprox, build_source_approx, ebk_solve
from .estimators import EBKIntegrator, EE2Integrator, ROS2Integrator, SourceApproxTransformer
from .integrators import TimeGrid, ee2_solve, exp_euler_solve, ros2_solve
from .la_core import ContractError, CsrMatrix, SolverError
from .phi_krylov import phiv_expokit, phiv_rt

__all__ = [
    "ContractError",
    "CsrMatrix",
    "EBKIntegrator",
    "EE2Integrator",
    "ROS2Integrator",
    "SolverError",
    "SourceApprox",
    "SourceApproxTransformer",
    "TimeGrid",
    "build_source_approx",
    "ebk_solve",
    "ee2_solve",
    "exp_euler_solve",
    "phiv_expokit",
    "phiv_rt",
    "ros2_solve",
]

__version__ = "0.1.0"
