"""Offline phase: trace bases and per-subdomain PGD surrogate models."""
from __future__ import annotations

import json
import logging
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import mesh as fem
from .mesh import StructuredMesh, interface_nodes
from .pgd import PgdConfig, SeparatedProblem, pgd_solve
from .separated import (
    ParamGrid,
    SeparatedTensor,
    add,
    compress,
    read_container,
    tensor_arrays,
    tensor_from_arrays,
    tensor_header,
    write_container,
)

log = logging.getLogger(__name__)

MODEL_KIND = "ddpgd-surrogate"


class ModelValidationError(ValueError):
    pass


class GridMismatchError(ValueError):
    pass


class SubproblemError(RuntimeError):
    def __init__(self, index, cause):
        super().__init__(f"offline subproblem {index} failed: {cause}")
        self.index = index


@dataclass(frozen=True)
class Interface:
    neighbor: str
    side: str
    nodes: np.ndarray


@dataclass
class Subdomain:
    """Overlapping subdomain; ``interfaces`` fixes the block order of Λ."""

    id: str
    mesh: StructuredMesh
    interfaces: list = field(default_factory=list)

    def __post_init__(self):
        dn = set(self.exterior_dirichlet_nodes.tolist())
        for itf in self.interfaces:
            if dn.intersection(np.asarray(itf.nodes).tolist()):
                raise ValueError(f"{self.id}: interface nodes overlap exterior Dirichlet nodes")

    @classmethod
    def from_mesh(cls, id: str, mesh: StructuredMesh, neighbors: dict) -> "Subdomain":
        """``neighbors`` maps each interface side to the neighbor id across it."""
        itfs = []
        for side in fem.SIDES:
            if mesh.sides[side] != fem.INTERFACE:
                continue
            if side not in neighbors:
                raise ValueError(f"{id}: no neighbor given for interface side {side!r}")
            itfs.append(Interface(neighbors[side], side, interface_nodes(mesh, side)))
        return cls(id, mesh, itfs)

    @property
    def exterior_dirichlet_nodes(self) -> np.ndarray:
        return self.mesh.dirichlet_nodes()

    @property
    def all_interface_nodes(self) -> np.ndarray:
        if not self.interfaces:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.asarray(i.nodes, dtype=np.int64) for i in self.interfaces])

    @property
    def n_interface(self) -> int:
        return len(self.all_interface_nodes)

    def block_offsets(self) -> list:
        offs, k = [], 0
        for itf in self.interfaces:
            offs.append(k)
            k += len(itf.nodes)
        return offs

    def fixed_nodes(self) -> np.ndarray:
        return np.union1d(self.exterior_dirichlet_nodes, self.all_interface_nodes)

    def to_dict(self) -> dict:
        m = self.mesh
        return {
            "id": self.id,
            "origin": list(m.origin),
            "extent": list(m.extent),
            "nx": m.nx,
            "ny": m.ny,
            "sides": dict(m.sides),
            "labels": dict(m.labels),
            "interfaces": [
                {"neighbor": i.neighbor, "side": i.side, "nodes": [int(v) for v in i.nodes]}
                for i in self.interfaces
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Subdomain":
        m = StructuredMesh(tuple(d["origin"]), tuple(d["extent"]), d["nx"], d["ny"], d["sides"], d.get("labels", {}))
        itfs = [Interface(i["neighbor"], i["side"], np.asarray(i["nodes"], dtype=np.int64)) for i in d["interfaces"]]
        return cls(d["id"], m, itfs)


@dataclass(frozen=True)
class TraceBasis:
    """Restrictions of the nodal hat functions to the interface."""

    mesh: StructuredMesh
    nodes: np.ndarray

    def __len__(self):
        return len(self.nodes)

    def evaluate(self, points) -> np.ndarray:
        """Values of every basis function at ``points``; shape (n_points, n_basis)."""
        pts = np.atleast_2d(np.asarray(points, float))
        xy = self.mesh.node_coords[self.nodes]
        hx = np.clip(1.0 - np.abs(pts[:, [0]] - xy[None, :, 0]) / self.mesh.hx, 0.0, None)
        hy = np.clip(1.0 - np.abs(pts[:, [1]] - xy[None, :, 1]) / self.mesh.hy, 0.0, None)
        return hx * hy

    def at_nodes(self) -> np.ndarray:
        return self.evaluate(self.mesh.node_coords[self.nodes])


def build_trace_basis(sd: Subdomain) -> TraceBasis:
    return TraceBasis(sd.mesh, sd.all_interface_nodes)


@dataclass
class SubdomainData:
    """Separated-form data restricted to one subdomain."""

    grid: ParamGrid
    diffusion: list
    source: list = field(default_factory=list)
    neumann: list = field(default_factory=list)


@dataclass
class SurrogateModel:
    subdomain: Subdomain
    grid: ParamGrid
    u0: SeparatedTensor
    uq: list
    metadata: dict = field(default_factory=dict)

    @property
    def n_interface(self) -> int:
        return len(self.uq)

    def evaluate(self, mu, Lambda=None) -> np.ndarray:
        out = self.u0.evaluate(mu)
        if Lambda is not None:
            Lambda = np.asarray(Lambda, float)
            if len(Lambda) != self.n_interface:
                raise ValueError(f"expected {self.n_interface} trace coefficients, got {len(Lambda)}")
            for c, t in zip(Lambda, self.uq):
                if c != 0.0:
                    out = out + c * t.evaluate(mu)
        return out

    def check_grid(self, grid: ParamGrid) -> None:
        if grid != self.grid:
            raise GridMismatchError(f"model {self.subdomain.id!r} was built on a different parameter grid")

    def total_modes(self) -> int:
        return self.u0.n_modes + sum(t.n_modes for t in self.uq)

    def validate(self, n_samples: int = 3, tol: float = 1e-8) -> None:
        """Kronecker trace property and zero-trace source part at sampled grid points."""
        sd = self.subdomain
        if len(self.uq) != sd.n_interface:
            raise ModelValidationError("number of trace tensors does not match interface size")
        nodes = sd.all_interface_nodes
        dn = sd.exterior_dirichlet_nodes
        rng = np.random.default_rng(12345)
        for _ in range(n_samples):
            mu = [ax.points[rng.integers(ax.size)] for ax in self.grid.axes]
            u0 = self.u0.evaluate(mu)
            if np.abs(u0[nodes]).max(initial=0) > tol or np.abs(u0[dn]).max(initial=0) > tol:
                raise ModelValidationError("source tensor does not vanish on the boundary")
            for q, t in enumerate(self.uq):
                v = t.evaluate(mu)
                target = np.zeros(len(nodes))
                target[q] = 1.0
                if np.abs(v[nodes] - target).max() > tol or np.abs(v[dn]).max(initial=0) > tol:
                    raise ModelValidationError(f"trace tensor {q} violates the Kronecker property")


def subproblem_seed(base_seed: int, subdomain_id: str, q: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(base_seed), zlib.crc32(subdomain_id.encode()), int(q)])


def build_surrogate(
    sd: Subdomain,
    data: SubdomainData,
    cfg: PgdConfig = PgdConfig(),
    compress_tol: float = 1e-3,
    seed: int = 0,
    workers: int = 1,
):
    """Solve the source problem and one trace problem per interface node.

    Returns ``(model, report)``; the report carries timings and per-problem
    mode counts and is kept out of the model file so that files are
    reproducible byte for byte.
    """
    grid = data.grid
    fixed = sd.fixed_nodes()
    base = SeparatedProblem(
        sd.mesh, grid, data.diffusion, fixed_zero_nodes=fixed
    )
    base.stiffness_terms()  # assemble once, shared by all subproblems
    ones = [np.ones(ax.size) for ax in grid.axes]
    nodes = sd.all_interface_nodes

    def problem(q):
        if q == 0:
            return SeparatedProblem(
                sd.mesh, grid, data.diffusion, data.source, data.neumann,
                None, fixed, base.cache,
            )
        lift = np.zeros(sd.mesh.n_nodes)
        lift[nodes[q - 1]] = 1.0
        return SeparatedProblem(sd.mesh, grid, data.diffusion, [], [], (lift, ones), fixed, base.cache)

    def run(q):
        t0 = time.perf_counter()
        try:
            p = problem(q)
            v, pinfo = pgd_solve(p, cfg, seed=subproblem_seed(seed, sd.id, q), return_info=True)
            vc, cinfo = compress(v, compress_tol, return_info=True)
        except Exception as exc:  # noqa: BLE001 - re-raised with the index
            raise SubproblemError(q, exc) from exc
        if q == 0:
            tensor = vc
        else:
            tensor = add(SeparatedTensor.rank_one(p.dirichlet_lift[0], ones, grid), vc)
        rec = {
            "problem": q,
            "kind": "source" if q == 0 else "trace",
            "modes_before_compression": v.n_modes,
            "modes_after_compression": vc.n_modes,
            "compression_error": float(cinfo["error"]),
            "fp_unconverged": pinfo["fp_unconverged"],
            "seconds": time.perf_counter() - t0,
        }
        log.info("%s problem %d: %d -> %d modes", sd.id, q, v.n_modes, vc.n_modes)
        return tensor, rec

    t0 = time.perf_counter()
    qs = list(range(len(nodes) + 1))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run, qs))
    else:
        results = [run(q) for q in qs]
    tensors = [r[0] for r in results]
    records = [r[1] for r in results]
    meta = {
        "enrich_tol": cfg.enrich_tol,
        "compress_tol": compress_tol,
        "fp_tol": cfg.fp_tol,
        "fp_max_iters": cfg.fp_max_iters,
        "max_modes": cfg.max_modes,
        "seed": int(seed),
        "n_problems": len(qs),
        "modes_before_compression": [r["modes_before_compression"] for r in records],
        "modes_after_compression": [r["modes_after_compression"] for r in records],
    }
    model = SurrogateModel(sd, grid, tensors[0], tensors[1:], meta)
    report = {
        "subdomain": sd.id,
        "n_interface_nodes": len(nodes),
        "n_problems": len(qs),
        "total_modes_before_compression": sum(meta["modes_before_compression"]),
        "total_modes_after_compression": sum(meta["modes_after_compression"]),
        "wall_seconds": time.perf_counter() - t0,
        "problems": records,
    }
    return model, report


def save_model(m: SurrogateModel, path) -> None:
    manifest = {
        "kind": MODEL_KIND,
        "subdomain": m.subdomain.to_dict(),
        "grid": m.grid.to_list(),
        "metadata": m.metadata,
        "tensors": {"u0": tensor_header(m.u0), "uq": [tensor_header(t) for t in m.uq]},
    }
    arrays = dict(tensor_arrays(m.u0, "u0:"))
    for q, t in enumerate(m.uq):
        arrays.update(tensor_arrays(t, f"uq{q}:"))
    with open(path, "wb") as fh:
        write_container(fh, manifest, arrays)


def load_model(path, validate: bool = True) -> SurrogateModel:
    with open(path, "rb") as fh:
        manifest, arrays = read_container(fh)
    if manifest.get("kind") != MODEL_KIND:
        raise ModelValidationError(f"{path}: not a surrogate model file")
    sd = Subdomain.from_dict(manifest["subdomain"])
    grid = ParamGrid.from_list(manifest["grid"])
    u0 = tensor_from_arrays(manifest["tensors"]["u0"], arrays, "u0:")
    uq = [tensor_from_arrays(h, arrays, f"uq{q}:") for q, h in enumerate(manifest["tensors"]["uq"])]
    model = SurrogateModel(sd, grid, u0, uq, manifest.get("metadata", {}))
    if validate:
        model.validate()
    return model


def write_report(report, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True))
