"""Estimator-style wrappers around the integrators.

Each integrator is configured through constructor parameters (so
``get_params`` / ``set_params`` / ``clone`` work as usual) and run with
``fit(problem)``.  A *problem* is any object with attributes ``A``, ``v``,
``g_sampler`` and ``T``; :class:`~krylovexp.harness.TestProblem` qualifies.
Results land in trailing-underscore attributes.

>>> from krylovexp.estimators import ROS2Integrator
>>> est = ROS2Integrator(dt=10.0).fit(problem)            # doctest: +SKIP
>>> est.y_final_, est.report_.linear_solves               # doctest: +SKIP
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .ebk import INTERPOLATIONS, build_source_approx, ebk_solve, source_approx_from_snapshots
from .integrators import ROS2_JACOBIANS, TimeGrid, ee2_solve, exp_euler_solve, ros2_solve
from .la_core import ContractError
from .phi_krylov import PHI_ENGINES
from .validation import (check_choice, check_count, check_operator, check_positive, check_snapshots,
                         check_vector)


def _unpack(problem):
    try:
        A, v, g, T = problem.A, problem.v, problem.g_sampler, problem.T
    except AttributeError as exc:
        raise ContractError(f"problem lacks a required attribute: {exc}") from None
    A = check_operator(A)
    return A, check_vector(v, A.n_rows, "v"), g, check_positive(T, "T")


class _IntegratorBase(BaseEstimator):
    """Shared ``score``: negative relative error at ``T`` against ``problem.target``."""

    def score(self, problem) -> float:
        check_is_fitted(self, "y_final_")
        target = np.asarray(problem.target, dtype=float)
        return -float(np.linalg.norm(self.y_final_ - target) / np.linalg.norm(target))


class SourceApproxTransformer(TransformerMixin, BaseEstimator):
    """Low-rank compression of source snapshots, ``g(t) ~ U p(t)``.

    Rows of ``X`` are snapshots ``g(t_i)`` (shape ``n_s x N``), in keeping
    with the samples-by-features convention.

    Parameters
    ----------
    n_components : int
        Rank ``m`` of the basis ``U``.
    interpolation : {"linear", "cubic"}
        How ``p(t)`` is interpolated between snapshot times.

    Attributes
    ----------
    components_ : ndarray of shape (m, N)
        ``U`` transposed.
    singular_values_ : ndarray
        All singular values of the snapshot matrix.
    approx_ : krylovexp.ebk.SourceApprox
        The underlying approximation; needs ``times`` in ``fit``.
    """

    def __init__(self, n_components: int = 2, interpolation: str = "linear"):
        self.n_components = n_components
        self.interpolation = interpolation

    def fit(self, X, y=None, times=None):
        m = check_count(self.n_components, "n_components")
        check_choice(self.interpolation, INTERPOLATIONS, "interpolation")
        S = check_snapshots(np.asarray(X, dtype=float).T)
        if times is None:
            times = np.arange(S.shape[1], dtype=float)
        self.approx_ = source_approx_from_snapshots(S, np.asarray(times, dtype=float), m,
                                                    self.interpolation)
        self.components_ = self.approx_.U.T
        self.singular_values_ = self.approx_.singular_values
        self.n_features_in_ = S.shape[0]
        return self

    def transform(self, X) -> np.ndarray:
        """Coefficients ``U^T g`` for each row of ``X``; shape ``(n, m)``."""
        check_is_fitted(self, "components_")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features_in_:
            raise ContractError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X @ self.components_.T

    def inverse_transform(self, P) -> np.ndarray:
        check_is_fitted(self, "components_")
        return np.atleast_2d(np.asarray(P, dtype=float)) @ self.components_

    def predict(self, t) -> np.ndarray:
        """Interpolated source ``U p(t)``; rows follow ``t``."""
        check_is_fitted(self, "approx_")
        return np.atleast_2d(self.approx_.evaluate(np.atleast_1d(t)).T)


class EBKIntegrator(_IntegratorBase):
    """Exponential block Krylov solve of the whole interval.

    Parameters
    ----------
    tol : float
        Relative residual tolerance of the block iteration.
    n_snapshots, n_components : int
        Source sampling and rank.
    interpolation : {"linear", "cubic"}
    k_max : int
        Cap on block iterations.
    """

    def __init__(self, tol: float = 1e-6, n_snapshots: int = 120, n_components: int = 2,
                 interpolation: str = "cubic", k_max: int = 50):
        self.tol = tol
        self.n_snapshots = n_snapshots
        self.n_components = n_components
        self.interpolation = interpolation
        self.k_max = k_max

    def fit(self, problem, y=None):
        A, v, g, T = _unpack(problem)
        check_positive(self.tol, "tol")
        check_choice(self.interpolation, INTERPOLATIONS, "interpolation")
        src = build_source_approx(g, T, check_count(self.n_snapshots, "n_snapshots", 2),
                                  check_count(self.n_components, "n_components"), self.interpolation)
        self.solution_ = ebk_solve(A, v, src, T, self.tol, k_max=check_count(self.k_max, "k_max"))
        self.report_ = self.solution_.report
        self.y_final_ = self.solution_.y_final
        return self

    def predict(self, t) -> np.ndarray:
        """Approximate ``y(t)``; an array of times gives one row per time."""
        check_is_fitted(self, "solution_")
        if np.ndim(t) == 0:
            return self.solution_(float(t))
        return np.stack([self.solution_(float(s)) for s in t])


class EE2Integrator(_IntegratorBase):
    """Exponential Euler, globally extrapolated unless ``extrapolate=False``.

    Parameters
    ----------
    dt : float
    tol : float
        Tolerance of each phi evaluation.
    engine : {"rt", "expokit"}
    krylov_dim : int or None
        ``m_max`` for the residual-time engine, ``m`` for the EXPOKIT one.
    extrapolate : bool
    """

    def __init__(self, dt: float = 10.0, tol: float = 1e-4, engine: str = "rt",
                 krylov_dim: int | None = None, extrapolate: bool = True):
        self.dt = dt
        self.tol = tol
        self.engine = engine
        self.krylov_dim = krylov_dim
        self.extrapolate = extrapolate

    def fit(self, problem, y=None):
        A, v, g, T = _unpack(problem)
        check_choice(self.engine, tuple(PHI_ENGINES), "engine")
        kw = {}
        if self.krylov_dim is not None:
            kw["m_max" if self.engine == "rt" else "m"] = check_count(self.krylov_dim, "krylov_dim", 2)
        grid = TimeGrid.uniform(T, check_positive(self.dt, "dt"))
        runner = ee2_solve if self.extrapolate else exp_euler_solve
        self.report_ = runner(A, v, g, grid, self.engine, check_positive(self.tol, "tol"), **kw)
        self.y_final_ = self.report_.y_final
        return self


class ROS2Integrator(_IntegratorBase):
    """Two-stage Rosenbrock scheme.

    Parameters
    ----------
    dt : float
    jacobian : {"full", "diffusion"}
        ``"diffusion"`` solves with the diffusion-only operator
        (``problem.op.A_diff`` or ``problem.A_diff``).
    solver_tol : float
        Relative GMRES tolerance of the stage solves.
    """

    def __init__(self, dt: float = 10.0, jacobian: str = "full", solver_tol: float = 1e-10):
        self.dt = dt
        self.jacobian = jacobian
        self.solver_tol = solver_tol

    def fit(self, problem, y=None):
        A, v, g, T = _unpack(problem)
        check_choice(self.jacobian, ROS2_JACOBIANS, "jacobian")
        A_hat = None
        if self.jacobian == "diffusion":
            owner = getattr(problem, "op", problem)
            if not hasattr(owner, "A_diff"):
                raise ContractError("problem provides no diffusion-only operator")
            A_hat = check_operator(owner.A_diff)
        grid = TimeGrid.uniform(T, check_positive(self.dt, "dt"))
        self.report_ = ros2_solve(A, v, g, grid, A_hat=A_hat,
                                  solver_tol=check_positive(self.solver_tol, "solver_tol"))
        self.y_final_ = self.report_.y_final
        return self
