import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given
from hypothesis import strategies as st

from krylovexp.ebk import (EbkConvergenceError, block_arnoldi_extend, build_source_approx, ebk_solve,
                           project_ivp_advance, source_approx_from_snapshots, start_block_basis,
                           write_residual_profile_csv, write_spectrum_csv)
from krylovexp.la_core import ContractError, CsrMatrix

from conftest import random_stable


def polynomial_oracle(A, v, U, coeffs, t):
    """Exact ``y(t)`` for ``y' = -Ay + U sum_j coeffs[j] s^j`` via an augmented exponential.

    The clock states ``z_j = s^j / j!`` obey ``z_0' = 0``, ``z_j' = z_{j-1}``.
    """
    A = np.asarray(A, dtype=float)
    n, m = U.shape
    d = len(coeffs)
    M = np.zeros((n + d, n + d))
    M[:n, :n] = -A
    for j, c in enumerate(coeffs):
        M[:n, n + j] = math.factorial(j) * (U @ np.atleast_1d(c))
        if j:
            M[n + j, n + j - 1] = 1.0
    z0 = np.concatenate([v, [1.0], np.zeros(d - 1)])
    return (scipy.linalg.expm(t * M) @ z0)[:n]


def poly_sampler(U, coeffs):
    def g(t):
        return U @ sum(np.atleast_1d(c) * t**j for j, c in enumerate(coeffs))
    return g


class TestSourceApprox:
    def test_exact_rank_is_recovered(self, rng):
        U0 = rng.standard_normal((40, 2))
        g = poly_sampler(U0, [np.array([1.0, 0.0]), np.array([0.0, 0.5])])
        src = build_source_approx(g, 4.0, 9, 2)
        assert src.truncation_bound <= 1e-12 * src.singular_values[0]
        for t in src.snapshot_times:
            np.testing.assert_allclose(src.evaluate(t), g(t), atol=1e-12)

    def test_linear_interpolation_exact_for_linear_source(self, rng):
        U0 = rng.standard_normal((30, 1))
        g = poly_sampler(U0, [2.0, -0.3])
        src = build_source_approx(g, 5.0, 6, 1)
        err = src.a_posteriori_error(g)
        assert err["max_error"] <= 1e-12 * np.linalg.norm(g(0.0))
        assert err["relative_integral_error"] <= 1e-13

    def test_cubic_interpolation_exact_for_cubic_source(self, rng):
        U0 = rng.standard_normal((30, 1))
        g = poly_sampler(U0, [1.0, 0.2, -0.4, 0.05])
        src = build_source_approx(g, 3.0, 7, 1, interpolation="cubic")
        for t in np.linspace(0.0, 3.0, 41):
            np.testing.assert_allclose(src.evaluate(t), g(t), rtol=1e-11, atol=1e-11)
        lin = build_source_approx(g, 3.0, 7, 1, interpolation="linear")
        assert lin.a_posteriori_error(g)["max_error"] > 1e-3

    @pytest.mark.parametrize("interp", ["linear", "cubic"])
    def test_segment_polynomials_reproduce_p(self, rng, interp):
        S = rng.standard_normal((20, 8))
        src = source_approx_from_snapshots(S, np.linspace(0, 7, 8) ** 1.2, 3, interp)
        c = src.segment_polynomials()
        t = src.snapshot_times
        for i in range(len(t) - 1):
            for theta in (0.0, 0.3, 1.0):
                val = sum(c[i, j] * theta**j for j in range(c.shape[1]))
                np.testing.assert_allclose(val, src.p(t[i] + theta * (t[i + 1] - t[i])), atol=1e-10)

    def test_truncation_bound_is_next_singular_value(self, rng):
        S = rng.standard_normal((15, 6))
        src = source_approx_from_snapshots(S, np.arange(6.0), 2)
        s = np.linalg.svd(S, compute_uv=False)
        assert src.truncation_bound == pytest.approx(s[2], rel=1e-12)
        # best rank-2 error on the snapshots equals sigma_3
        resid = S - src.U @ src.coeffs
        assert np.linalg.norm(resid, 2) == pytest.approx(s[2], rel=1e-10)

    @given(st.integers(0, 2**32 - 1), st.integers(1, 5))
    def test_projection_is_orthogonal(self, seed, m):
        rng = np.random.default_rng(seed)
        S = rng.standard_normal((25, 7))
        src = source_approx_from_snapshots(S, np.arange(7.0), m)
        np.testing.assert_allclose(src.U.T @ src.U, np.eye(m), atol=1e-12)
        np.testing.assert_allclose(src.coeffs, src.U.T @ S, atol=1e-12)

    def test_shift(self, rng):
        S = rng.standard_normal((10, 4))
        w = rng.standard_normal(10)
        src = source_approx_from_snapshots(S, np.arange(4.0), 4).shifted(w)
        np.testing.assert_allclose(src.U @ src.coeffs, S - w[:, None], atol=1e-12)

    def test_validation(self, rng):
        with pytest.raises(ContractError):
            build_source_approx(lambda t: np.ones(5), 1.0, 2, 3)
        with pytest.raises(ContractError):
            build_source_approx(lambda t: np.ones(3), 1.0, 5, 1)
        with pytest.raises(ContractError):
            build_source_approx(lambda t: np.ones(5), 1.0, 3, 1, interpolation="spline")
        with pytest.raises(ContractError):
            source_approx_from_snapshots(np.ones((5, 3)), [0.0, 1.0], 1)
        with pytest.raises(ContractError):
            source_approx_from_snapshots(np.ones((5, 3)), [0.0, 1.0, 2.0], 4)


class TestBlockArnoldi:
    def build(self, A, U, k):
        basis = start_block_basis(A, U, k * U.shape[1])
        spent = 0
        for _ in range(k):
            basis, w = block_arnoldi_extend(A, basis)
            spent += w
            if basis.breakdown:
                break
        return basis, spent

    @given(st.integers(0, 2**32 - 1), st.integers(1, 3))
    def test_block_arnoldi_relation(self, seed, m):
        rng = np.random.default_rng(seed)
        D = random_stable(30, rng)
        U, _ = np.linalg.qr(rng.standard_normal((30, m)))
        basis, spent = self.build(CsrMatrix.from_dense(D), U, 4)
        V = basis.V
        np.testing.assert_allclose(V.T @ V, np.eye(V.shape[1]), atol=1e-12)
        np.testing.assert_allclose(D @ basis.Vk, V @ basis.H, atol=1e-10 * np.abs(D).max())
        assert spent == 4 * m
        assert basis.k == 4 and basis.dim == 4 * m

    def test_deflation_of_dependent_directions(self):
        # two start columns inside one invariant 2-D subspace: the second block is empty
        D = np.diag([1.0, 2.0, 3.0, 4.0, 5.0])
        U = np.zeros((5, 2))
        U[0, 0] = U[1, 1] = 1.0
        basis, _ = self.build(CsrMatrix.from_dense(D), U, 3)
        assert basis.breakdown and basis.k == 1
        np.testing.assert_allclose(basis.H_square, np.diag([1.0, 2.0]), atol=1e-14)

    def test_partial_deflation_shrinks_block(self):
        D = np.diag([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
        U = np.zeros((6, 2))
        U[0, 0] = 1.0                       # eigenvector: A u0 adds nothing new
        U[1, 1] = U[2, 1] = 1 / np.sqrt(2)  # mixes two eigenvectors: one new direction
        basis, _ = self.build(CsrMatrix.from_dense(D), U, 1)
        assert basis.block_sizes == (2, 1)

    def test_capacity_is_enforced_after_breakdown(self):
        basis, _ = self.build(CsrMatrix.identity(4), np.eye(4)[:, :1], 2)
        with pytest.raises(ContractError):
            block_arnoldi_extend(CsrMatrix.identity(4), basis)


class TestProjectedAdvance:
    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 3.0))
    def test_matches_augmented_oracle(self, seed, s):
        rng = np.random.default_rng(seed)
        H = random_stable(5, rng)
        u0, w0, w1 = rng.standard_normal((3, 5))
        # forcing w0 + (sigma/s)(w1 - w0) is linear in sigma
        ref = polynomial_oracle(H, u0, np.eye(5), [w0, (w1 - w0) / s], s)
        np.testing.assert_allclose(project_ivp_advance(H, u0, w0, w1, s), ref, rtol=1e-9, atol=1e-11)

    def test_rejects_nonpositive_step(self):
        with pytest.raises(ContractError):
            project_ivp_advance(np.eye(2), np.zeros(2), np.zeros(2), np.zeros(2), 0.0)


class TestEbkSolve:
    @pytest.mark.parametrize("interp,coeffs", [
        ("linear", [np.array([1.0, 0.5]), np.array([-0.2, 0.1])]),
        ("cubic", [np.array([1.0, 0.0]), np.array([0.3, -0.2]), np.array([0.0, 0.05]),
                   np.array([-0.01, 0.0])]),
    ])
    def test_exact_for_representable_source(self, rng, interp, coeffs):
        n, T = 40, 2.0
        D = random_stable(n, rng)
        U0, _ = np.linalg.qr(rng.standard_normal((n, 2)))
        # A v inside span(U0) keeps the shifted source at rank 2
        v = np.linalg.solve(D, U0 @ np.array([0.7, -1.1]))
        g = poly_sampler(U0, coeffs)
        src = build_source_approx(g, T, 9, 2, interpolation=interp)
        sol = ebk_solve(CsrMatrix.from_dense(D), v, src, T, 1e-10, k_max=40)
        for t in (0.0, 0.7, T):
            ref = polynomial_oracle(D, v, U0, coeffs, t)
            assert np.linalg.norm(sol(t) - ref) <= 1e-8 * np.linalg.norm(ref)

    def test_full_space_breakdown_gives_exact_projection(self, rng):
        n = 6
        D = random_stable(n, rng)
        U0 = rng.standard_normal((n, 1))
        g = poly_sampler(U0, [1.0, 0.25])
        src = build_source_approx(g, 1.0, 4, 1)
        sol = ebk_solve(CsrMatrix.from_dense(D), np.zeros(n), src, 1.0, 1e-300, k_max=20)
        assert sol.report.residual_max <= 1e-12
        np.testing.assert_allclose(sol.y_final, polynomial_oracle(D, np.zeros(n), U0, [1.0, 0.25], 1.0),
                                   rtol=1e-9)

    def test_zero_source_returns_initial_value(self, rng):
        v = np.zeros(5)
        src = build_source_approx(lambda t: np.zeros(5), 1.0, 3, 1)
        sol = ebk_solve(CsrMatrix.identity(5), v, src, 1.0, 1e-6)
        assert sol.report.matvecs == 0 and sol.basis is None
        np.testing.assert_array_equal(sol(0.5), v)
        assert not sol.residual_norms().any()

    def test_residual_profile_and_accounting(self, rng):
        n = 50
        D = random_stable(n, rng, spread=100.0)
        U0 = rng.standard_normal((n, 1))
        src = build_source_approx(poly_sampler(U0, [1.0]), 1.0, 5, 1)
        sol = ebk_solve(CsrMatrix.from_dense(D), np.zeros(n), src, 1.0, 1e-8, k_max=40)
        rep = sol.report
        assert rep.matvecs == rep.k_final * src.m
        assert len(rep.residual_profile) == rep.k_final
        assert rep.residual_profile[-1] == rep.residual_max
        assert rep.residual_max <= 1e-8 * np.linalg.norm(U0)
        np.testing.assert_allclose(np.max(sol.residual_norms()), rep.residual_max, rtol=1e-12)

    def test_nonzero_initial_value_costs_one_product(self, rng):
        n = 30
        D = random_stable(n, rng)
        U0 = rng.standard_normal((n, 1))
        src = build_source_approx(poly_sampler(U0, [1.0]), 1.0, 5, 1)
        sol0 = ebk_solve(CsrMatrix.from_dense(D), np.zeros(n), src, 1.0, 1e-8)
        sol1 = ebk_solve(CsrMatrix.from_dense(D), rng.standard_normal(n), src, 1.0, 1e-8)
        # the shifted source has rank 2 data compressed to rank 1: still one start column
        assert sol1.report.matvecs == 1 + sol1.report.k_final
        assert sol0.report.matvecs == sol0.report.k_final

    def test_convergence_failure_is_reported(self, rng):
        n = 80
        D = random_stable(n, rng, spread=1000.0)
        src = build_source_approx(lambda t: np.cos(t) * np.ones(n) + t * np.arange(n), 5.0, 11, 1)
        with pytest.raises(EbkConvergenceError) as info:
            ebk_solve(CsrMatrix.from_dense(D), np.zeros(n), src, 5.0, 1e-14, k_max=3)
        assert len(info.value.residual_profile) == 3

    def test_time_outside_interval(self, rng):
        src = build_source_approx(lambda t: np.ones(4), 1.0, 3, 1)
        sol = ebk_solve(CsrMatrix.from_dense(np.diag([1.0, 2.0, 3.0, 4.0])), np.zeros(4), src, 1.0, 1e-8)
        with pytest.raises(ContractError):
            sol(1.5)

    def test_snapshot_span_checked(self):
        src = build_source_approx(lambda t: np.ones(4), 2.0, 3, 1)
        with pytest.raises(ContractError):
            ebk_solve(CsrMatrix.identity(4), np.zeros(4), src, 1.0, 1e-8)
        with pytest.raises(ContractError):
            ebk_solve(CsrMatrix.identity(4), np.zeros(4), src, 2.0, 0.0)

    def test_benchmark_problem_small_mesh(self, problem1_16):
        # Test 1 on a 16 x 16 grid: compare with the exact reference
        p = problem1_16
        src = build_source_approx(p.g_sampler, p.T, 120, 2, interpolation="cubic")
        sol = ebk_solve(p.A, p.v, src, p.T, 1e-6)
        err = np.linalg.norm(sol.y_final - p.target) / np.linalg.norm(p.target)
        assert err < 1e-6


class TestWriters:
    def test_spectrum_and_profile_csv(self, tmp_path, rng):
        src = source_approx_from_snapshots(rng.standard_normal((8, 4)), np.arange(4.0), 2)
        write_spectrum_csv(tmp_path / "s.csv", src)
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "index,singular_value" and len(lines) == 5
        assert float(lines[1].split(",")[1]) == src.singular_values[0]

        class Rep:
            residual_profile = [1.0, 0.5]
        write_residual_profile_csv(tmp_path / "r.csv", Rep())
        assert (tmp_path / "r.csv").read_text().splitlines()[1:] == ["1,1.0", "2,0.5"]
