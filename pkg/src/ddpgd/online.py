"""Online phase: PGD interface operator, GMRES coupling, global reconstruction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .linalg import ConvergenceError, GmresConfig, gmres
from .mesh import StructuredMesh


class InterfaceMapError(ValueError):
    pass


@dataclass(frozen=True)
class InterfaceMap:
    """Restriction of the source subdomain's field onto one interface block of the target.

    ``source_nodes[k]`` (a node of the source mesh) feeds ``positions[k]``
    of the target's stacked trace vector.
    """

    source: str
    target: str
    source_nodes: np.ndarray
    positions: np.ndarray

    @property
    def pairs(self):
        return list(zip(self.source_nodes.tolist(), self.positions.tolist()))


def build_interface_maps(subdomains) -> list:
    """Coordinate matching (tolerance 1e-9 h) of every interface node in its neighbor's mesh."""
    by_id = {sd.id: sd for sd in subdomains}
    maps = []
    for sd in subdomains:
        for itf, off in zip(sd.interfaces, sd.block_offsets()):
            if itf.neighbor not in by_id:
                raise InterfaceMapError(f"{sd.id}: unknown neighbor {itf.neighbor!r}")
            nb = by_id[itf.neighbor]
            pts = sd.mesh.node_coords[itf.nodes]
            src = nb.mesh.locate(pts, tol=1e-9 * min(sd.mesh.h, nb.mesh.h))
            if np.any(src < 0):
                bad = pts[np.argmax(src < 0)]
                raise InterfaceMapError(
                    f"{sd.id}: interface node at {tuple(bad)} has no matching node in {nb.id}"
                )
            maps.append(InterfaceMap(nb.id, sd.id, src, off + np.arange(len(itf.nodes))))
    return maps


@dataclass
class SchwarzProblem:
    """Online coupling at a fixed parameter point; immutable after ``build``."""

    models: list
    maps: list
    mu: dict
    gmres: GmresConfig
    u0_at_mu: dict = field(default_factory=dict)
    uq_at_mu: dict = field(default_factory=dict)  # id -> (n_nodes, N_Gamma) array
    offsets: dict = field(default_factory=dict)
    size: int = 0

    @classmethod
    def build(cls, models, mu: Mapping[str, float], gmres_cfg: GmresConfig = GmresConfig()):
        maps = build_interface_maps([m.subdomain for m in models])
        sp = cls(list(models), maps, dict(mu), gmres_cfg)
        k = 0
        for m in sp.models:
            sid = m.subdomain.id
            sp.u0_at_mu[sid] = m.u0.evaluate(mu)
            n = m.subdomain.mesh.n_nodes
            U = np.zeros((n, m.n_interface))
            for q, t in enumerate(m.uq):
                U[:, q] = t.evaluate(mu)
            sp.uq_at_mu[sid] = U
            sp.offsets[sid] = (k, k + m.n_interface)
            k += m.n_interface
        sp.size = k
        return sp

    @property
    def ids(self):
        return [m.subdomain.id for m in self.models]

    def block(self, stacked, sid):
        a, b = self.offsets[sid]
        return stacked[a:b]


def pgd_operator_apply(sp: SchwarzProblem, j: str, Lambda_j) -> np.ndarray:
    """Nodal field on subdomain ``j`` for trace coefficients ``Lambda_j`` (no source part)."""
    U = sp.uq_at_mu[j]
    Lambda_j = np.asarray(Lambda_j, dtype=float)
    if Lambda_j.shape != (U.shape[1],):
        raise ValueError(f"{j}: expected {U.shape[1]} coefficients, got {Lambda_j.shape}")
    return U @ Lambda_j


def interface_matvec(sp: SchwarzProblem, Lambda) -> np.ndarray:
    Lambda = np.asarray(Lambda, dtype=float)
    out = Lambda.copy()
    fields = {}
    for mp in sp.maps:
        if mp.source not in fields:
            fields[mp.source] = pgd_operator_apply(sp, mp.source, sp.block(Lambda, mp.source))
        a, _ = sp.offsets[mp.target]
        out[a + mp.positions] -= fields[mp.source][mp.source_nodes]
    return out


def interface_rhs(sp: SchwarzProblem) -> np.ndarray:
    out = np.zeros(sp.size)
    for mp in sp.maps:
        a, _ = sp.offsets[mp.target]
        out[a + mp.positions] = sp.u0_at_mu[mp.source][mp.source_nodes]
    return out


def solve_interface(sp: SchwarzProblem):
    """GMRES on the interface system; returns ``(Lambda, iters, history)``."""
    res = gmres(lambda v: interface_matvec(sp, v), interface_rhs(sp), sp.gmres)
    if not res.converged:
        raise ConvergenceError(
            f"interface GMRES stopped ({res.status}) after {res.iters} iterations, "
            f"relative residual {res.residual_history[-1] if res.residual_history else float('nan'):.3e}",
            res,
        )
    return res.x, res.iters, res.residual_history


def local_fields(sp: SchwarzProblem, Lambda) -> dict:
    return {
        m.subdomain.id: sp.u0_at_mu[m.subdomain.id] + pgd_operator_apply(sp, m.subdomain.id, sp.block(Lambda, m.subdomain.id))
        for m in sp.models
    }


@dataclass
class GlobalField:
    mesh: StructuredMesh
    values: np.ndarray
    owner: np.ndarray  # index into the subdomain list per global node
    local: dict  # subdomain id -> nodal field
    node_maps: dict  # subdomain id -> global index of each local node
    overlap_mismatch: float

    def to_csv(self, path) -> None:
        write_field_csv(path, self.mesh.node_coords, self.values)


def union_mesh(subdomains) -> StructuredMesh:
    x0 = min(sd.mesh.bounds[0] for sd in subdomains)
    x1 = max(sd.mesh.bounds[1] for sd in subdomains)
    y0 = min(sd.mesh.bounds[2] for sd in subdomains)
    y1 = max(sd.mesh.bounds[3] for sd in subdomains)
    m0 = subdomains[0].mesh
    return StructuredMesh(
        (x0, y0), (x1 - x0, y1 - y0), int(round((x1 - x0) / m0.hx)), int(round((y1 - y0) / m0.hy))
    )


def global_node_maps(subdomains, gmesh: StructuredMesh) -> dict:
    out = {}
    for sd in subdomains:
        idx = gmesh.locate(sd.mesh.node_coords)
        if np.any(idx < 0):
            raise InterfaceMapError(f"{sd.id}: local mesh does not coincide with the global mesh")
        out[sd.id] = idx
    return out


def assemble_global(subdomains, fields: dict, gmesh: StructuredMesh | None = None) -> GlobalField:
    """Glue local fields; in overlaps the first-listed subdomain wins."""
    gmesh = gmesh or union_mesh(subdomains)
    maps = global_node_maps(subdomains, gmesh)
    values = np.full(gmesh.n_nodes, np.nan)
    owner = np.full(gmesh.n_nodes, -1)
    first_val = np.full(gmesh.n_nodes, np.nan)
    mismatch = 0.0
    for k, sd in enumerate(subdomains):
        idx, u = maps[sd.id], fields[sd.id]
        seen = owner[idx] >= 0
        if np.any(seen):
            mismatch = max(mismatch, float(np.abs(u[seen] - first_val[idx[seen]]).max()))
        fresh = ~seen
        values[idx[fresh]] = u[fresh]
        first_val[idx[fresh]] = u[fresh]
        owner[idx[fresh]] = k
    if np.any(owner < 0):
        raise InterfaceMapError("subdomains do not cover the global mesh")
    return GlobalField(gmesh, values, owner, dict(fields), maps, mismatch)


def reconstruct_global(sp: SchwarzProblem, Lambda_star, gmesh: StructuredMesh | None = None) -> GlobalField:
    subs = [m.subdomain for m in sp.models]
    return assemble_global(subs, local_fields(sp, Lambda_star), gmesh)


def write_field_csv(path, coords, values) -> None:
    with open(path, "w") as fh:
        fh.write("x,y,value\n")
        for (x, y), v in zip(coords, values):
            fh.write(f"{float(x)!r},{float(y)!r},{float(v)!r}\n")


def read_field_csv(path):
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return arr[:, :2], arr[:, 2]
