"""Built-in experiments and the translation from config to discrete objects."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import mesh as fem
from .config import ExperimentConfig, TermSpec
from .mesh import ScalarField, StructuredMesh
from .offline import Subdomain, SubdomainData
from .pgd import PgdConfig, SeparatedTerm
from .separated import ParamAxis, ParamGrid

# Manufactured source for nu = 1 + mu*x and
# u = sin(2 pi x) sin(2 pi y) + mu/2 * x y (y-1) (x-2), grouped by powers of mu.
BIDOMAIN_EXACT = "sin(2*pi*x)*sin(2*pi*y) + mu/2*x*y*(y-1)*(x-2)"
BIDOMAIN_SOURCE = [
    ("8*pi^2*sin(2*pi*x)*sin(2*pi*y)", None),
    (
        "8*pi^2*x*sin(2*pi*x)*sin(2*pi*y) - 2*pi*cos(2*pi*x)*sin(2*pi*y)"
        " - (y^2 - y) - (x^2 - 2*x)",
        "mu",
    ),
    ("-x*(y^2 - y + x^2 - 2*x) - (x - 1)*(y^2 - y)", "mu^2"),
]


def bidomain() -> dict:
    return {
        "name": "bidomain",
        "mesh": {"h": 0.05},
        "domain": {"x": [0.0, 2.0], "y": [0.0, 1.0]},
        "subdomains": [
            {"id": "omega1", "x": [0.0, 1.05]},
            {"id": "omega2", "x": [0.95, 2.0]},
        ],
        "parameters": [{"name": "mu", "lower": 1.0, "upper": 50.0, "step": 1e-3}],
        "diffusion": [{"space": "1"}, {"space": "x", "param": {"mu": "mu"}}],
        "source": [
            {"space": s} if p is None else {"space": s, "param": {"mu": p}}
            for s, p in BIDOMAIN_SOURCE
        ],
        "exact": BIDOMAIN_EXACT,
        "tolerances": {"enrich": 1e-4, "compress": 1e-3, "gmres": 1e-6},
    }


def chain9(n_blocks: int = 9, h: float = 0.05) -> dict:
    """Row of unit blocks with per-block diffusion; inflow left, outflow right.

    Diffusion is ``mu_i`` in the core of block ``i`` and 1 in strips of
    half-width ``2h`` around the block junctions, so every subdomain
    depends on its own parameter only.
    """
    w = 2 * h
    cores = []
    for i in range(1, n_blocks + 1):
        lo = i - 1 + (w if i > 1 else -1.0)
        hi = i - (w if i < n_blocks else -1.0)
        cores.append({"space": f"(x > {lo:.6g})*(x < {hi:.6g})", "param": {f"mu{i}": f"mu{i}"}})
    strips = " + ".join(f"(x > {k - w:.6g})*(x < {k + w:.6g})" for k in range(1, n_blocks))
    subs = []
    for i in range(1, n_blocks + 1):
        a = max(0.0, i - 1 - h)
        b = min(float(n_blocks), i + h)
        subs.append({"id": f"omega{i}", "x": [round(a, 10), round(b, 10)]})
    return {
        "name": f"chain{n_blocks}",
        "mesh": {"h": h},
        "domain": {
            "x": [0.0, float(n_blocks)],
            "y": [0.0, 1.0],
            "boundary": {"left": "neumann", "right": "dirichlet", "bottom": "neumann", "top": "neumann"},
            "labels": {"left": "in", "right": "out"},
        },
        "subdomains": subs,
        "parameters": [
            {"name": f"mu{i}", "lower": 0.05, "upper": 10.0, "step": 1e-3} for i in range(1, n_blocks + 1)
        ],
        "diffusion": cores + [{"space": strips}],
        "neumann": [{"space": "1", "tag": "in"}],
        "tolerances": {"enrich": 1e-4, "compress": 1e-3, "gmres": 1e-6},
    }


BUILTINS = {"bidomain": bidomain, "chain9": chain9}

# chain9 parameter sets: one spread over [0.1, 6.4], one clustered near 5.
CHAIN9_TEST1 = (0.1, 0.2, 0.4, 0.8, 1.6, 3.2, 6.4, 0.1, 0.2)
CHAIN9_TEST2 = (4.9, 4.7, 4.8, 5.2, 5.0, 4.9, 5.5, 5.3, 5.1)


def to_term(spec: TermSpec) -> SeparatedTerm:
    expr = spec.space
    field = ScalarField(lambda x, y, e=expr: e(x=x, y=y), expr.source)
    factors = {name: (lambda v, e=e, n=name: e(**{n: v})) for name, e in spec.param.items()}
    return SeparatedTerm(field, factors, spec.tag)


@dataclass
class Experiment:
    config: ExperimentConfig
    global_mesh: StructuredMesh
    subdomains: list
    data: dict  # subdomain id -> SubdomainData
    diffusion: list
    source: list
    neumann: list

    @property
    def axes(self):
        return {p[0]: ParamAxis(*p) for p in self.config.parameters}

    def exact(self, mu):
        if self.config.exact is None:
            return None
        e = self.config.exact
        return lambda x, y: np.broadcast_to(e(x=x, y=y, **mu), np.shape(x))

    def pgd_config(self) -> PgdConfig:
        c = self.config
        return PgdConfig(c.enrich_tol, c.max_modes, c.fp_tol, c.fp_max_iters)


_KIND = {"dirichlet": fem.EXTERIOR_DIRICHLET, "neumann": fem.EXTERIOR_NEUMANN}


def _n_cells(length, h):
    return int(round(length / h))


def _touches(field: ScalarField, mesh: StructuredMesh) -> bool:
    pts, *_ = fem._element_quadrature(mesh)
    return bool(np.any(field(pts[..., 0], pts[..., 1]) != 0.0))


def build_experiment(cfg: ExperimentConfig) -> Experiment:
    h = cfg.h
    (x0, x1), (y0, y1) = cfg.domain_x, cfg.domain_y
    ny = _n_cells(y1 - y0, h)
    sides = {s: _KIND[k] for s, k in cfg.boundary.items()}
    gmesh = StructuredMesh((x0, y0), (x1 - x0, y1 - y0), _n_cells(x1 - x0, h), ny, sides, cfg.labels)
    diffusion = [to_term(t) for t in cfg.diffusion]
    source = [to_term(t) for t in cfg.source]
    neumann = [to_term(t) for t in cfg.neumann]
    axes = {p[0]: ParamAxis(*p) for p in cfg.parameters}

    subdomains, data = [], {}
    for spec in cfg.subdomains:
        a, b = spec.x
        s_sides = dict(sides)
        s_labels = {}
        neighbors = {}
        for side, coord in (("left", a), ("right", b)):
            if abs(coord - (x0 if side == "left" else x1)) < 1e-12:
                if side in cfg.labels:
                    s_labels[side] = cfg.labels[side]
                continue
            s_sides[side] = fem.INTERFACE
            owners = [o.id for o in cfg.subdomains if o is not spec and o.x[0] < coord < o.x[1]]
            neighbors[side] = owners[0]
        for side in ("bottom", "top"):
            if side in cfg.labels:
                s_labels[side] = cfg.labels[side]
        m = StructuredMesh((a, y0), (b - a, y1 - y0), _n_cells(b - a, h), ny, s_sides, s_labels)
        sd = Subdomain.from_mesh(spec.id, m, neighbors)
        subdomains.append(sd)

        keep_d = [t for t in diffusion if _touches(t.spatial, m)]
        keep_s = [t for t in source if _touches(t.spatial, m)]
        keep_n = [t for t in neumann if m.edges_with_tag(t.tag)]
        used = {n for t in keep_d + keep_s + keep_n for n in t.factors}
        names = [n for n in cfg.param_names if n in used] or [cfg.param_names[0]]
        grid = ParamGrid([axes[n] for n in names])
        data[spec.id] = SubdomainData(grid, keep_d, keep_s, keep_n)
    return Experiment(cfg, gmesh, subdomains, data, diffusion, source, neumann)
