"""Structured Q1 meshes on rectangles and finite element assembly."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .linalg import SparseMatrix

EXTERIOR_DIRICHLET = "exterior_dirichlet"
EXTERIOR_NEUMANN = "exterior_neumann"
INTERFACE = "interface"
EDGE_KINDS = (EXTERIOR_DIRICHLET, EXTERIOR_NEUMANN, INTERFACE)
SIDES = ("left", "right", "bottom", "top")

_GAUSS = np.array([-1.0, 1.0]) / np.sqrt(3.0)


# Incremented by every assembly routine; lets callers prove a phase assembled nothing.
counters = {"assemblies": 0}


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ScalarField:
    """Spatial function ``f(x, y)``; ``eval`` must accept numpy arrays."""

    eval: Callable
    description: str = ""

    def __call__(self, x, y):
        out = self.eval(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        return np.broadcast_to(np.asarray(out, dtype=float), np.shape(x)).copy()

    @classmethod
    def constant(cls, c: float) -> "ScalarField":
        return cls(lambda x, y: np.full(np.shape(x), float(c)), repr(float(c)))

    @classmethod
    def box_indicator(cls, xmin, xmax, ymin=-np.inf, ymax=np.inf) -> "ScalarField":
        def f(x, y):
            return ((x > xmin) & (x < xmax) & (y > ymin) & (y < ymax)).astype(float)

        return cls(f, f"1[{xmin}<x<{xmax}, {ymin}<y<{ymax}]")

    def __add__(self, other: "ScalarField") -> "ScalarField":
        return ScalarField(
            lambda x, y: self(x, y) + other(x, y),
            f"({self.description}) + ({other.description})",
        )


@dataclass(frozen=True)
class BoundaryCondition:
    kind: str  # dirichlet_zero | dirichlet_trace | neumann_flux
    tag: str
    data: ScalarField | None = None


@dataclass
class StructuredMesh:
    """Uniform ``nx`` by ``ny`` grid of bilinear quadrilaterals.

    ``sides`` maps each of left/right/bottom/top to an edge kind;
    ``labels`` optionally gives a side an extra name (e.g. ``"in"``).
    Node ``(i, j)`` has index ``j * (nx + 1) + i``.
    """

    origin: tuple
    extent: tuple
    nx: int
    ny: int
    sides: dict = field(default_factory=dict)
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        self.origin = (float(self.origin[0]), float(self.origin[1]))
        self.extent = (float(self.extent[0]), float(self.extent[1]))
        if self.nx < 1 or self.ny < 1:
            raise ConfigurationError("mesh needs at least one element per direction")
        if self.extent[0] <= 0 or self.extent[1] <= 0:
            raise ConfigurationError("mesh extent must be positive")
        sides = {s: EXTERIOR_DIRICHLET for s in SIDES}
        sides.update(self.sides)
        for s, kind in sides.items():
            if s not in SIDES:
                raise ConfigurationError(f"unknown side {s!r}")
            if kind not in EDGE_KINDS:
                raise ConfigurationError(f"unknown edge kind {kind!r} on side {s}")
        self.sides = sides
        ii, jj = np.meshgrid(np.arange(self.nx + 1), np.arange(self.ny + 1))
        xs = self.origin[0] + ii.ravel() * self.hx
        ys = self.origin[1] + jj.ravel() * self.hy
        self.node_coords = np.column_stack([xs, ys])
        ei, ej = np.meshgrid(np.arange(self.nx), np.arange(self.ny))
        n0 = (ej * (self.nx + 1) + ei).ravel()
        # counter-clockwise: (0,0) (1,0) (1,1) (0,1)
        self.element_connectivity = np.column_stack(
            [n0, n0 + 1, n0 + self.nx + 2, n0 + self.nx + 1]
        )
        self.boundary_edges = self._boundary_edges()

    @property
    def hx(self) -> float:
        return self.extent[0] / self.nx

    @property
    def hy(self) -> float:
        return self.extent[1] / self.ny

    @property
    def h(self) -> float:
        return max(self.hx, self.hy)

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_elements(self) -> int:
        return self.nx * self.ny

    @property
    def bounds(self):
        (x0, y0), (lx, ly) = self.origin, self.extent
        return (x0, x0 + lx, y0, y0 + ly)

    def node(self, i: int, j: int) -> int:
        return j * (self.nx + 1) + i

    def side_nodes(self, side: str) -> np.ndarray:
        nx, ny = self.nx, self.ny
        if side == "left":
            return np.array([self.node(0, j) for j in range(ny + 1)])
        if side == "right":
            return np.array([self.node(nx, j) for j in range(ny + 1)])
        if side == "bottom":
            return np.array([self.node(i, 0) for i in range(nx + 1)])
        if side == "top":
            return np.array([self.node(i, ny) for i in range(nx + 1)])
        raise ConfigurationError(f"unknown side {side!r}")

    def _boundary_edges(self):
        edges = []
        for side in SIDES:
            nodes = self.side_nodes(side)
            for a, b in zip(nodes[:-1], nodes[1:]):
                edges.append((int(a), int(b), side, self.sides[side]))
        return edges

    def edges_with_tag(self, tag: str):
        out = [
            e
            for e in self.boundary_edges
            if tag in (e[2], e[3]) or self.labels.get(e[2]) == tag
        ]
        return out

    def nodes_of_kind(self, kind: str) -> np.ndarray:
        nodes = set()
        for a, b, _, k in self.boundary_edges:
            if k == kind:
                nodes.update((a, b))
        return np.array(sorted(nodes), dtype=np.int64)

    def dirichlet_nodes(self) -> np.ndarray:
        return self.nodes_of_kind(EXTERIOR_DIRICHLET)

    def locate(self, points, tol=None) -> np.ndarray:
        """Node index for each point, or -1 where no node is within ``tol``."""
        tol = 1e-9 * self.h if tol is None else tol
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        fi = (pts[:, 0] - self.origin[0]) / self.hx
        fj = (pts[:, 1] - self.origin[1]) / self.hy
        i = np.rint(fi).astype(np.int64)
        j = np.rint(fj).astype(np.int64)
        ok = (i >= 0) & (i <= self.nx) & (j >= 0) & (j <= self.ny)
        idx = np.where(ok, j * (self.nx + 1) + i, 0)
        dist = np.linalg.norm(self.node_coords[idx] - pts, axis=1)
        return np.where(ok & (dist <= tol), idx, -1)


def interface_nodes(mesh: StructuredMesh, tag: str = INTERFACE) -> np.ndarray:
    """Interface nodes ordered by ascending (x, y), exterior-Dirichlet nodes excluded."""
    nodes = set()
    for a, b, side, kind in mesh.boundary_edges:
        if kind == INTERFACE and tag in (INTERFACE, side, mesh.labels.get(side)):
            nodes.update((a, b))
    nodes -= set(mesh.dirichlet_nodes().tolist())
    if not nodes:
        return np.zeros(0, dtype=np.int64)
    idx = np.array(sorted(nodes), dtype=np.int64)
    xy = mesh.node_coords[idx]
    return idx[np.lexsort((xy[:, 1], xy[:, 0]))]


def _element_quadrature(mesh: StructuredMesh):
    """Physical quadrature points (E, 4, 2) and weight per point (scalar)."""
    gx, gy = np.meshgrid(_GAUSS, _GAUSS, indexing="ij")
    gx, gy = gx.ravel(), gy.ravel()
    x0 = mesh.node_coords[mesh.element_connectivity[:, 0]]
    px = x0[:, [0]] + 0.5 * (gx[None, :] + 1.0) * mesh.hx
    py = x0[:, [1]] + 0.5 * (gy[None, :] + 1.0) * mesh.hy
    weight = 0.25 * mesh.hx * mesh.hy
    return np.stack([px, py], axis=-1), gx, gy, weight


def _shape(xi, eta):
    # matches element_connectivity ordering
    return 0.25 * np.array(
        [(1 - xi) * (1 - eta), (1 + xi) * (1 - eta), (1 + xi) * (1 + eta), (1 - xi) * (1 + eta)]
    )


def _shape_grad(xi, eta):
    dxi = 0.25 * np.array([-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)])
    deta = 0.25 * np.array([-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)])
    return dxi, deta


def _to_sparse(mesh, local) -> SparseMatrix:
    conn = mesh.element_connectivity
    rows = np.repeat(conn, 4, axis=1).ravel()
    cols = np.tile(conn, (1, 4)).ravel()
    mat = sp.coo_matrix(
        (local.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes)
    ).tocsr()
    return SparseMatrix.from_scipy(mat, symmetric=True)


def assemble_stiffness(mesh: StructuredMesh, a: ScalarField) -> SparseMatrix:
    """Matrix of ``∫ a ∇φ_p · ∇φ_q`` with 2x2 Gauss quadrature per element."""
    counters["assemblies"] += 1
    pts, gx, gy, w = _element_quadrature(mesh)
    coef = a(pts[..., 0], pts[..., 1])  # (E, 4)
    local = np.zeros((mesh.n_elements, 4, 4))
    for k in range(4):
        dxi, deta = _shape_grad(gx[k], gy[k])
        gxp = dxi * (2.0 / mesh.hx)
        gyp = deta * (2.0 / mesh.hy)
        kern = np.outer(gxp, gxp) + np.outer(gyp, gyp)
        local += (coef[:, k] * w)[:, None, None] * kern[None]
    return _to_sparse(mesh, local)


def assemble_mass(mesh: StructuredMesh, c: ScalarField | None = None) -> SparseMatrix:
    counters["assemblies"] += 1
    pts, gx, gy, w = _element_quadrature(mesh)
    coef = np.ones(pts.shape[:2]) if c is None else c(pts[..., 0], pts[..., 1])
    local = np.zeros((mesh.n_elements, 4, 4))
    for k in range(4):
        N = _shape(gx[k], gy[k])
        local += (coef[:, k] * w)[:, None, None] * np.outer(N, N)[None]
    return _to_sparse(mesh, local)


def assemble_load(mesh: StructuredMesh, f: ScalarField) -> np.ndarray:
    counters["assemblies"] += 1
    pts, gx, gy, w = _element_quadrature(mesh)
    vals = f(pts[..., 0], pts[..., 1])
    local = np.zeros((mesh.n_elements, 4))
    for k in range(4):
        local += (vals[:, k] * w)[:, None] * _shape(gx[k], gy[k])[None]
    out = np.zeros(mesh.n_nodes)
    np.add.at(out, mesh.element_connectivity.ravel(), local.ravel())
    return out


def assemble_neumann(mesh: StructuredMesh, g: ScalarField, tag: str) -> np.ndarray:
    """Edge integral ``∫_Γ g φ_p`` over boundary edges matching ``tag``."""
    counters["assemblies"] += 1
    edges = mesh.edges_with_tag(tag)
    if not edges:
        raise ConfigurationError(f"no boundary edges tagged {tag!r}")
    out = np.zeros(mesh.n_nodes)
    a = np.array([e[0] for e in edges])
    b = np.array([e[1] for e in edges])
    pa, pb = mesh.node_coords[a], mesh.node_coords[b]
    length = np.linalg.norm(pb - pa, axis=1)
    for t in _GAUSS:
        s = 0.5 * (t + 1.0)
        p = pa + s * (pb - pa)
        val = g(p[:, 0], p[:, 1]) * 0.5 * length
        np.add.at(out, a, val * (1.0 - s))
        np.add.at(out, b, val * s)
    return out


@dataclass
class ReducedSystem:
    """Free-node system after eliminating prescribed nodal values.

    ``coupling`` is the free-rows by fixed-columns block of the original
    matrix, already moved to the right-hand side for ``fixed_values``.
    """

    matrix: SparseMatrix
    rhs: np.ndarray
    coupling: SparseMatrix
    free: np.ndarray
    fixed: np.ndarray

    def __iter__(self):
        return iter((self.matrix, self.rhs))

    def expand(self, x_free, fixed_values) -> np.ndarray:
        out = np.zeros(len(self.free) + len(self.fixed))
        out[self.free] = x_free
        out[self.fixed] = fixed_values
        return out


def eliminate_dirichlet(A: SparseMatrix, b, fixed_nodes, fixed_values=None) -> ReducedSystem:
    n = A.shape[0]
    fixed = np.asarray(fixed_nodes, dtype=np.int64)
    if len(np.unique(fixed)) != len(fixed):
        raise ValueError("fixed nodes must be distinct")
    if len(fixed) and (fixed.min() < 0 or fixed.max() >= n):
        raise ValueError("fixed node out of range")
    vals = np.zeros(len(fixed)) if fixed_values is None else np.asarray(fixed_values, float)
    mask = np.ones(n, dtype=bool)
    mask[fixed] = False
    free = np.flatnonzero(mask)
    csr = A.tocsr()
    a_ff = csr[free][:, free]
    a_fd = csr[free][:, fixed]
    rhs = np.asarray(b, dtype=float)[free] - a_fd @ vals
    return ReducedSystem(
        SparseMatrix.from_scipy(a_ff, symmetric=A.symmetric),
        rhs,
        SparseMatrix.from_scipy(a_fd),
        free,
        fixed,
    )
