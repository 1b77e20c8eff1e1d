import numpy as np
import pytest

from ddpgd.mesh import ScalarField, StructuredMesh
from ddpgd.pgd import PgdConfig, SeparatedProblem, SeparatedTerm, amplitude, pgd_solve
from ddpgd.separated import ParamAxis, ParamGrid

MESH = StructuredMesh((0.0, 0.0), (1.0, 1.0), 8, 8)
ONE = ScalarField.constant(1.0)


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def affine_problem(grid, **kw):
    diffusion = [SeparatedTerm(ONE), SeparatedTerm(ScalarField(lambda x, y: x), {"mu": lambda m: m})]
    return SeparatedProblem(MESH, grid, diffusion, fixed_zero_nodes=MESH.dirichlet_nodes(), **kw)


def test_amplitude_examples():
    assert amplitude(np.zeros(3), [np.ones(4)]) == 0.0
    assert amplitude(np.eye(3)[1], [np.ones(4)]) == 1.0
    v = np.array([3.0, 4.0])
    assert amplitude(2 * v, [np.array([0.5, -1.0])]) == pytest.approx(2 * amplitude(v, [np.array([0.5, -1.0])]))


def test_zero_data_gives_zero_modes():
    grid = ParamGrid([ParamAxis("mu", 1.0, 2.0, 0.1)])
    t = pgd_solve(affine_problem(grid))
    assert t.n_modes == 0
    np.testing.assert_array_equal(t.evaluate(1.5), 0.0)


def test_parameter_free_problem_is_rank_one_and_exact():
    grid = ParamGrid([ParamAxis("mu", 0.0, 1.0, 0.25)])
    p = SeparatedProblem(MESH, grid, [SeparatedTerm(ONE)], [SeparatedTerm(ONE)], fixed_zero_nodes=MESH.dirichlet_nodes())
    t, info = pgd_solve(p, return_info=True)
    assert t.n_modes == 1
    direct = p.direct_solve(0.5)
    for mu in (0.0, 0.5, 1.0):
        np.testing.assert_allclose(t.evaluate(mu), direct, atol=1e-10 * np.abs(direct).max())


def test_affine_problem_matches_direct_solves():
    grid = ParamGrid([ParamAxis("mu", 1.0, 50.0, 0.05)])
    src = [SeparatedTerm(ONE), SeparatedTerm(ScalarField(lambda x, y: x * y), {"mu": lambda m: m})]
    p = affine_problem(grid, source_terms=src)
    t, info = pgd_solve(p, PgdConfig(enrich_tol=1e-6), return_info=True)
    assert info["n_modes"] == t.n_modes > 1
    for mu in (1.0, 7.3, 25.0, 50.0):
        assert rel(t.evaluate(mu), p.direct_solve(mu)) < 1e-4
    for f in t.parametric:
        np.testing.assert_allclose(np.abs(f).max(axis=1), 1.0)


def test_two_axes():
    grid = ParamGrid([ParamAxis("a", 0.5, 2.0, 0.1), ParamAxis("b", 0.5, 2.0, 0.1)])
    left = ScalarField(lambda x, y: (x < 0.5) * 1.0)
    right = ScalarField(lambda x, y: (x >= 0.5) * 1.0)
    diffusion = [SeparatedTerm(left, {"a": lambda v: v}), SeparatedTerm(right, {"b": lambda v: v})]
    p = SeparatedProblem(MESH, grid, diffusion, [SeparatedTerm(ONE)], fixed_zero_nodes=MESH.dirichlet_nodes())
    t = pgd_solve(p, PgdConfig(enrich_tol=1e-6, fp_tol=1e-6, fp_max_iters=60))
    for mu in [(0.5, 2.0), (1.3, 0.7), (2.0, 2.0)]:
        assert rel(t.evaluate(mu), p.direct_solve(mu)) < 1e-3


def test_dirichlet_lift_problem():
    grid = ParamGrid([ParamAxis("mu", 1.0, 10.0, 0.1)])
    fixed = MESH.dirichlet_nodes()
    node = MESH.node(8, 4)
    lift = np.zeros(MESH.n_nodes)
    lift[node] = 1.0
    p = affine_problem(grid, dirichlet_lift=(lift, [np.ones(grid.axes[0].size)]))
    t = pgd_solve(p, PgdConfig(enrich_tol=1e-6))
    for mu in (1.0, 4.4, 10.0):
        full = lift + t.evaluate(mu)
        assert rel(full, p.direct_solve(mu)) < 1e-4
        np.testing.assert_array_equal(t.evaluate(mu)[fixed], 0.0)


def test_seed_determinism():
    grid = ParamGrid([ParamAxis("mu", 1.0, 5.0, 0.1)])
    p = affine_problem(grid, source_terms=[SeparatedTerm(ONE)])
    a, b = pgd_solve(p, seed=7), pgd_solve(p, seed=7)
    np.testing.assert_array_equal(a.spatial, b.spatial)
    np.testing.assert_array_equal(a.parametric[0], b.parametric[0])


def test_config_and_problem_validation():
    with pytest.raises(ValueError):
        PgdConfig(enrich_tol=0.0)
    with pytest.raises(ValueError):
        SeparatedProblem(MESH, ParamGrid([ParamAxis("mu", 0, 1, 0.5)]), [])
