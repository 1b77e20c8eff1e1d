import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddpgd.config import Expression, TermSpec
from ddpgd.experiments import to_term
from ddpgd.linalg import ConvergenceError, GmresConfig
from ddpgd.mesh import StructuredMesh
from ddpgd.offline import Subdomain, SubdomainData, build_surrogate
from ddpgd.online import (
    InterfaceMapError,
    SchwarzProblem,
    assemble_global,
    build_interface_maps,
    interface_matvec,
    interface_rhs,
    local_fields,
    pgd_operator_apply,
    read_field_csv,
    reconstruct_global,
    solve_interface,
    write_field_csv,
)
from ddpgd.pgd import PgdConfig
from ddpgd.separated import ParamAxis, ParamGrid

from .conftest import local_direct_solve


@pytest.fixture(scope="module")
def sp3(bidomain_models):
    models, _, _ = bidomain_models
    return SchwarzProblem.build(models, {"mu": 3.0}, GmresConfig(1e-6))


def test_interface_maps_match_coordinates(bidomain):
    maps = build_interface_maps(bidomain.subdomains)
    by_id = {sd.id: sd for sd in bidomain.subdomains}
    assert len(maps) == 2
    for m in maps:
        tgt, src = by_id[m.target], by_id[m.source]
        a = tgt.mesh.node_coords[tgt.all_interface_nodes[m.positions]]
        b = src.mesh.node_coords[m.source_nodes]
        assert np.abs(a - b).max() <= 1e-9 * tgt.mesh.h
        assert sorted(m.positions.tolist()) == list(range(19))


def test_interface_map_requires_matching_nodes():
    left = Subdomain.from_mesh("a", StructuredMesh((0, 0), (1.0, 1.0), 4, 4, sides={"right": "interface"}), {"right": "b"})
    right = Subdomain.from_mesh("b", StructuredMesh((0.5, 0), (1.5, 1.0), 3, 3, sides={"left": "interface"}), {"left": "a"})
    with pytest.raises(InterfaceMapError):
        build_interface_maps([left, right])
    with pytest.raises(InterfaceMapError):
        build_interface_maps([left])


def test_operator_apply_basis_cases(sp3):
    j = "omega1"
    U = sp3.uq_at_mu[j]
    np.testing.assert_array_equal(pgd_operator_apply(sp3, j, np.zeros(19)), 0.0)
    np.testing.assert_array_equal(pgd_operator_apply(sp3, j, np.eye(19)[4]), U[:, 4])
    lam = np.random.default_rng(0).standard_normal(19)
    dense = np.array([[sum(U[i, q] * lam[q] for q in range(19))] for i in range(U.shape[0])])[:, 0]
    np.testing.assert_allclose(pgd_operator_apply(sp3, j, lam), dense, rtol=0, atol=1e-13)
    with pytest.raises(ValueError):
        pgd_operator_apply(sp3, j, np.zeros(3))


def test_cached_evaluations_are_exact(sp3):
    for m in sp3.models:
        sid = m.subdomain.id
        np.testing.assert_array_equal(sp3.u0_at_mu[sid], m.u0.evaluate(3.0))
        np.testing.assert_array_equal(sp3.uq_at_mu[sid][:, 7], m.uq[7].evaluate(3.0))


def test_matvec_against_dense_assembly(sp3):
    # explicit block matrix from the cached vectors
    n1 = 19
    A = np.eye(2 * n1)
    for mp in sp3.maps:
        a, _ = sp3.offsets[mp.target]
        b, _ = sp3.offsets[mp.source]
        U = sp3.uq_at_mu[mp.source]
        for k, (node, pos) in enumerate(mp.pairs):
            A[a + pos, b : b + n1] -= U[node, :]
    lam = np.random.default_rng(1).standard_normal(2 * n1)
    np.testing.assert_allclose(interface_matvec(sp3, lam), A @ lam, atol=1e-12)
    np.testing.assert_array_equal(interface_matvec(sp3, np.zeros(2 * n1)), 0.0)


def test_rhs_matches_direct_source_solve(bidomain, sp3):
    rhs = interface_rhs(sp3)
    direct = {
        sd.id: local_direct_solve(sd, bidomain.data[sd.id], {"mu": 3.0}, np.zeros(sd.n_interface))
        for sd in bidomain.subdomains
    }
    ref = np.zeros_like(rhs)
    for mp in sp3.maps:
        a, _ = sp3.offsets[mp.target]
        ref[a + mp.positions] = direct[mp.source][mp.source_nodes]
    assert np.abs(rhs - ref).max() <= 10 * 1e-4


def test_solve_interface_at_mu3(sp3):
    lam, iters, hist = solve_interface(sp3)
    assert iters <= 15
    rhs = interface_rhs(sp3)
    assert np.linalg.norm(interface_matvec(sp3, lam) - rhs) <= 1e-6 * np.linalg.norm(rhs)
    assert np.all(np.diff(hist) <= 0)


def test_restart_does_not_change_the_solution(bidomain_models):
    models, _, _ = bidomain_models
    full = solve_interface(SchwarzProblem.build(models, {"mu": 30.0}, GmresConfig(1e-6)))[0]
    rest = solve_interface(SchwarzProblem.build(models, {"mu": 30.0}, GmresConfig(1e-6, 200, restart=3)))[0]
    assert np.linalg.norm(rest - full) <= 10 * 1e-6 * np.linalg.norm(full)


def test_gmres_exhaustion_raises(bidomain_models):
    models, _, _ = bidomain_models
    sp = SchwarzProblem.build(models, {"mu": 3.0}, GmresConfig(1e-12, max_iters=2))
    with pytest.raises(ConvergenceError) as err:
        solve_interface(sp)
    assert err.value.result.status == "max_iters"


def test_decoupled_problem_is_identity(sp3):
    n = sp3.size
    zero = SchwarzProblem(sp3.models, sp3.maps, sp3.mu, sp3.gmres, dict(sp3.u0_at_mu),
                          {k: np.zeros_like(v) for k, v in sp3.uq_at_mu.items()}, sp3.offsets, n)
    lam = np.random.default_rng(2).standard_normal(n)
    np.testing.assert_array_equal(interface_matvec(zero, lam), lam)
    x, iters, _ = solve_interface(zero)
    assert iters == 1
    np.testing.assert_allclose(x, interface_rhs(zero))


def test_single_subdomain_without_interfaces():
    m = StructuredMesh((0.0, 0.0), (1.0, 1.0), 4, 4)
    sd = Subdomain.from_mesh("only", m, {})
    grid = ParamGrid([ParamAxis("mu", 1.0, 2.0, 0.5)])
    nu = to_term(TermSpec(Expression("1", ("x", "y")), {}))
    model, _ = build_surrogate(sd, SubdomainData(grid, [nu]), PgdConfig(), 1e-3, 0)
    sp = SchwarzProblem.build([model], {"mu": 1.5})
    assert sp.size == 0 and len(interface_rhs(sp)) == 0


def test_constant_fields_glue_to_constant(bidomain):
    fields = {sd.id: np.full(sd.mesh.n_nodes, 2.5) for sd in bidomain.subdomains}
    g = assemble_global(bidomain.subdomains, fields, bidomain.global_mesh)
    np.testing.assert_array_equal(g.values, 2.5)
    assert g.overlap_mismatch == 0.0
    # first-listed subdomain owns the overlap
    x = g.mesh.node_coords[:, 0]
    assert np.all(g.owner[(x > 0.95) & (x < 1.05)] == 0)


def test_overlap_mismatch_of_converged_solve(sp3):
    lam, _, _ = solve_interface(sp3)
    g = reconstruct_global(sp3, lam)
    assert g.overlap_mismatch <= 1e-4


def test_local_fields_hit_interface_values(sp3):
    lam, _, _ = solve_interface(sp3)
    fields = local_fields(sp3, lam)
    for m in sp3.models:
        sd = m.subdomain
        np.testing.assert_allclose(fields[sd.id][sd.all_interface_nodes], sp3.block(lam, sd.id), atol=1e-12)


def test_field_csv_round_trip(tmp_path):
    coords = np.array([[0.0, 0.1], [1.0 / 3.0, 2.0]])
    vals = np.array([np.pi, -1e-300])
    write_field_csv(tmp_path / "f.csv", coords, vals)
    assert (tmp_path / "f.csv").read_text().splitlines()[0] == "x,y,value"
    c, v = read_field_csv(tmp_path / "f.csv")
    np.testing.assert_array_equal(c, coords)
    np.testing.assert_array_equal(v, vals)


@settings(max_examples=100, deadline=None)
@given(
    st.integers(0, 2**32 - 1),
    st.floats(-1e3, 1e3, allow_nan=False),
    st.floats(-1e3, 1e3, allow_nan=False),
)
def test_operator_apply_is_exactly_linear(sp3, seed, alpha, beta):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1e3, 1e3, 19)
    b = rng.uniform(-1e3, 1e3, 19)
    lhs = pgd_operator_apply(sp3, "omega2", alpha * a + beta * b)
    ra, rb = pgd_operator_apply(sp3, "omega2", a), pgd_operator_apply(sp3, "omega2", b)
    rhs = alpha * ra + beta * rb
    scale = max(np.abs(alpha * ra).max() + np.abs(beta * rb).max(), 1e-300)
    assert np.abs(lhs - rhs).max() <= 1e-13 * scale
