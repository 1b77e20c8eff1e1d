"""Full-order oracles: monolithic FEM, classical alternating Schwarz, error norms."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Optional

import numpy as np

from .linalg import SpdFactor
from .mesh import StructuredMesh, _shape, assemble_load, assemble_neumann, assemble_stiffness
from .online import build_interface_maps


@dataclass
class GlobalProblem:
    """Affine data over the global domain; terms are ``SeparatedTerm`` objects."""

    mesh: StructuredMesh
    diffusion: list
    source: list = None
    neumann: list = None
    exact: Optional[Callable] = None  # exact(mu) -> closure (x, y)

    def __post_init__(self):
        self.source = self.source or []
        self.neumann = self.neumann or []


def assemble_affine(mesh: StructuredMesh, diffusion, source, neumann, mu: Mapping[str, float]):
    """Matrix and load at ``mu`` over all nodes of ``mesh``; terms absent from the mesh add nothing."""
    K = sum(t.coefficient(mu) * assemble_stiffness(mesh, t.spatial).tocsr() for t in diffusion)
    F = np.zeros(mesh.n_nodes)
    for t in source:
        F += t.coefficient(mu) * assemble_load(mesh, t.spatial)
    for t in neumann:
        if mesh.edges_with_tag(t.tag):
            F += t.coefficient(mu) * assemble_neumann(mesh, t.spatial, t.tag)
    return K, F


def _dirichlet_solve(K, F, fixed, values, n):
    mask = np.ones(n, dtype=bool)
    mask[fixed] = False
    free = np.flatnonzero(mask)
    u = np.zeros(n)
    u[fixed] = values
    Kf = K[free]
    u[free] = SpdFactor(Kf[:, free]).solve(F[free] - Kf[:, fixed] @ u[fixed])
    return u


def full_order_solve(gp: GlobalProblem, mu: Mapping[str, float]) -> np.ndarray:
    K, F = assemble_affine(gp.mesh, gp.diffusion, gp.source, gp.neumann, mu)
    fixed = gp.mesh.dirichlet_nodes()
    return _dirichlet_solve(K, F, fixed, np.zeros(len(fixed)), gp.mesh.n_nodes)


@dataclass
class SchwarzResult:
    fields: dict
    iters: int
    converged: bool
    traces: np.ndarray  # stacked interface values in the online ordering
    history: list


class _LocalSolver:
    def __init__(self, sd, K, F):
        self.sd = sd
        self.fixed = sd.fixed_nodes()
        n = sd.mesh.n_nodes
        mask = np.ones(n, dtype=bool)
        mask[self.fixed] = False
        self.free = np.flatnonzero(mask)
        Kf = K[self.free]
        self.K_fd = Kf[:, self.fixed]
        self.F = F[self.free]
        self.factor = SpdFactor(Kf[:, self.free])
        self.n = n

    def solve(self, trace_nodes, trace_values):
        u = np.zeros(self.n)
        u[trace_nodes] = trace_values
        u[self.free] = self.factor.solve(self.F - self.K_fd @ u[self.fixed])
        return u


def alternating_schwarz(
    subdomains,
    data: Mapping,
    mu: Mapping[str, float],
    tol: float = 1e-8,
    max_iters: int = 1000,
    initial_traces: Optional[Mapping] = None,
) -> SchwarzResult:
    """Multiplicative (Gauss-Seidel) Schwarz sweeps with direct local solves.

    ``data[id]`` supplies ``diffusion``, ``source`` and ``neumann`` term lists
    for each subdomain. Stops when the largest nodal jump between a
    subdomain's interface values and its neighbor's field drops below ``tol``.
    ``initial_traces[id]`` optionally gives the stacked starting trace.
    """
    maps = build_interface_maps(subdomains)
    solvers = {}
    for sd in subdomains:
        d = data[sd.id]
        K, F = assemble_affine(sd.mesh, d.diffusion, d.source, d.neumann, mu)
        solvers[sd.id] = _LocalSolver(sd, K, F)
    incoming = {sd.id: [m for m in maps if m.target == sd.id] for sd in subdomains}
    traces = {
        sd.id: np.zeros(sd.n_interface) if initial_traces is None else np.asarray(initial_traces[sd.id], float)
        for sd in subdomains
    }
    fields: dict = {}
    history = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        for sd in subdomains:
            for m in incoming[sd.id]:
                if m.source in fields:
                    traces[sd.id][m.positions] = fields[m.source][m.source_nodes]
            fields[sd.id] = solvers[sd.id].solve(sd.all_interface_nodes, traces[sd.id])
        jump = 0.0
        for m in maps:
            tgt = next(s for s in subdomains if s.id == m.target)
            own = fields[m.target][tgt.all_interface_nodes[m.positions]]
            jump = max(jump, float(np.abs(own - fields[m.source][m.source_nodes]).max(initial=0.0)))
        history.append(jump)
        if jump < tol:
            converged = True
            break
    stacked = np.concatenate(
        [fields[sd.id][sd.all_interface_nodes] for sd in subdomains]
    ) if subdomains else np.zeros(0)
    return SchwarzResult(fields, it, converged, stacked, history)


_GAUSS4 = np.polynomial.legendre.leggauss(4)


def rel_l2_error(field, exact: Callable, mesh: StructuredMesh) -> float:
    """``||u_h - u|| / ||u||`` in L2, Q1 interpolant of ``field`` vs the closure (4x4 Gauss)."""
    pts, wts = _GAUSS4
    gx, gy = np.meshgrid(pts, pts, indexing="ij")
    gw = np.outer(wts, wts).ravel()
    gx, gy = gx.ravel(), gy.ravel()
    conn = mesh.element_connectivity
    x0 = mesh.node_coords[conn[:, 0]]
    N = np.array([_shape(a, b) for a, b in zip(gx, gy)])  # (Q, 4)
    uh = np.asarray(field, float)[conn] @ N.T  # (E, Q)
    px = x0[:, [0]] + 0.5 * (gx + 1.0) * mesh.hx
    py = x0[:, [1]] + 0.5 * (gy + 1.0) * mesh.hy
    ue = np.broadcast_to(exact(px, py), px.shape)
    jac = 0.25 * mesh.hx * mesh.hy
    err = np.sum((uh - ue) ** 2 * gw) * jac
    ref = np.sum(ue ** 2 * gw) * jac
    return float(np.sqrt(err / ref))


def rel_linf_error(field_a, field_b) -> float:
    """``max|a - b| / max|b|`` over shared nodes."""
    a = np.asarray(field_a, float)
    b = np.asarray(field_b, float)
    return float(np.abs(a - b).max() / np.abs(b).max())
