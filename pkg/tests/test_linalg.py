import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from ddpgd import linalg
from ddpgd.linalg import (
    ConvergenceError,
    FactorizationError,
    GmresConfig,
    SparseMatrix,
    SpdFactor,
    gmres,
    spd_solve,
)


def laplace_1d(n):
    return sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1]).tocsr()


def test_sparse_matrix_round_trip():
    A = laplace_1d(6)
    S = SparseMatrix.from_scipy(A, symmetric=True)
    assert S.shape == (6, 6)
    np.testing.assert_array_equal(S.toarray(), A.toarray())
    x = np.arange(6.0)
    np.testing.assert_allclose(S @ x, A @ x)
    assert S.is_symmetric()
    np.testing.assert_allclose((S + S.scaled(2.0)).toarray(), 3 * A.toarray())


def test_sparse_matrix_rejects_bad_offsets():
    with pytest.raises(ValueError):
        SparseMatrix(2, 2, np.array([0, 2, 1]), np.array([0, 1]), np.array([1.0, 2.0]))


def test_spd_factor_matches_dense_solve():
    rng = np.random.default_rng(0)
    B = rng.standard_normal((8, 8))
    A = B @ B.T + 8 * np.eye(8)
    b = rng.standard_normal(8)
    np.testing.assert_allclose(SpdFactor(sp.csr_matrix(A)).solve(b), np.linalg.solve(A, b), rtol=1e-12)
    np.testing.assert_allclose(spd_solve(SparseMatrix.from_dense(A), b), np.linalg.solve(A, b), rtol=1e-12)


def test_spd_factor_counts_factorizations():
    before = linalg.counters["factorizations"]
    SpdFactor(laplace_1d(4))
    assert linalg.counters["factorizations"] == before + 1


def test_indefinite_matrix_is_rejected():
    A = sp.csr_matrix(np.diag([1.0, -1.0, 2.0]))
    with pytest.raises(FactorizationError):
        SpdFactor(A)


def test_cg_option_agrees_with_direct():
    A = laplace_1d(30)
    b = np.ones(30)
    np.testing.assert_allclose(spd_solve(A, b, method="cg", tol=1e-12), spd_solve(A, b), rtol=1e-8)


def test_gmres_solves_nonsymmetric_system():
    rng = np.random.default_rng(1)
    A = np.eye(20) + 0.1 * rng.standard_normal((20, 20))
    b = rng.standard_normal(20)
    res = gmres(lambda v: A @ v, b, GmresConfig(rel_tol=1e-10, max_iters=100))
    assert res.converged and res.status == "converged"
    np.testing.assert_allclose(res.x, np.linalg.solve(A, b), atol=1e-8)
    assert len(res.residual_history) == res.iters
    hist = np.array(res.residual_history)
    assert np.all(np.diff(hist) <= 1e-14)


def test_gmres_identity_converges_in_one_step():
    x, iters, hist = gmres(lambda v: v, np.ones(5), GmresConfig(rel_tol=1e-12))
    assert iters == 1
    np.testing.assert_allclose(x, np.ones(5))


def test_gmres_zero_rhs():
    res = gmres(lambda v: 2 * v, np.zeros(4))
    assert res.converged and res.iters == 0
    np.testing.assert_array_equal(res.x, 0.0)


def test_gmres_reports_max_iters():
    A = laplace_1d(50).toarray()
    res = gmres(lambda v: A @ v, np.ones(50), GmresConfig(rel_tol=1e-12, max_iters=3))
    assert res.status == "max_iters" and not res.converged
    assert res.iters == 3


def test_gmres_breakdown_is_distinct():
    # nilpotent shift: the Krylov space collapses before the residual vanishes
    A = np.diag(np.ones(3), -1)
    b = np.array([0.0, 0.0, 0.0, 1.0])
    res = gmres(lambda v: A @ v, b, GmresConfig(rel_tol=1e-10, max_iters=10))
    assert res.status == "breakdown"


def test_gmres_restart_reaches_same_solution():
    rng = np.random.default_rng(2)
    A = np.eye(40) + 0.05 * rng.standard_normal((40, 40))
    b = rng.standard_normal(40)
    full = gmres(lambda v: A @ v, b, GmresConfig(rel_tol=1e-10))
    rest = gmres(lambda v: A @ v, b, GmresConfig(rel_tol=1e-10, max_iters=400, restart=5))
    assert rest.converged
    np.testing.assert_allclose(rest.x, full.x, atol=1e-8)


def test_gmres_config_validation():
    with pytest.raises(ValueError):
        GmresConfig(rel_tol=0.0)
    with pytest.raises(ValueError):
        GmresConfig(max_iters=0)


def test_convergence_error_carries_result():
    err = ConvergenceError("stopped", result="r")
    assert err.result == "r"


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10_000))
def test_gmres_residual_is_monotone(n, seed):
    rng = np.random.default_rng(seed)
    A = np.eye(n) * n + rng.standard_normal((n, n))
    b = rng.standard_normal(n)
    res = gmres(lambda v: A @ v, b, GmresConfig(rel_tol=1e-10, max_iters=3 * n))
    hist = np.array(res.residual_history)
    assert np.all(np.diff(hist) <= 1e-12)
    if res.converged:
        assert np.linalg.norm(A @ res.x - b) <= 1e-8 * np.linalg.norm(b)


def test_identity_system():
    np.testing.assert_allclose(spd_solve(sp.identity(5, format="csr"), np.ones(5)), np.ones(5))


def test_tridiagonal_hand_elimination():
    np.testing.assert_allclose(spd_solve(laplace_1d(3), np.ones(3)), [1.5, 2.0, 1.5], rtol=1e-14)


def test_q1_system_matches_dense_solve():
    from ddpgd.mesh import ScalarField, StructuredMesh, assemble_load, assemble_stiffness

    m = StructuredMesh((0.0, 0.0), (1.0, 1.0), 2, 2)
    K = assemble_stiffness(m, ScalarField.constant(1.0)).toarray() + np.eye(m.n_nodes)
    F = assemble_load(m, ScalarField.constant(1.0))
    np.testing.assert_allclose(spd_solve(K, F), np.linalg.solve(K, F), atol=1e-10)


def test_gmres_diagonal_closed_form():
    d = np.arange(1.0, 11.0)
    res = gmres(lambda v: d * v, np.ones(10), GmresConfig(rel_tol=1e-10))
    np.testing.assert_allclose(res.x, 1.0 / d, atol=1e-9)
