"""Experiment configuration: TOML files, expression terms, validation."""
from __future__ import annotations

import ast
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .mesh import ConfigurationError

_FUNCS = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp, "log": np.log,
    "sqrt": np.sqrt, "abs": np.abs, "tanh": np.tanh, "sinh": np.sinh, "cosh": np.cosh,
}
_CONSTS = {"pi": np.pi, "e": np.e}
_ALLOWED = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.Add, ast.Sub, ast.Mult, ast.Div,
    ast.Pow, ast.USub, ast.UAdd, ast.Constant, ast.Name, ast.Load, ast.Call,
    ast.Compare, ast.Lt, ast.LtE, ast.Gt, ast.GtE,
)


class _Indicators(ast.NodeTransformer):
    # comparisons evaluate to 0.0/1.0 so they can be multiplied and subtracted
    def visit_Compare(self, node):
        self.generic_visit(node)
        return ast.copy_location(
            ast.Call(func=ast.Name(id="_ind", ctx=ast.Load()), args=[node], keywords=[]), node
        )


@dataclass(frozen=True)
class Expression:
    """Arithmetic expression over named variables, evaluated with numpy."""

    source: str
    variables: tuple

    def __post_init__(self):
        try:
            tree = ast.parse(self.source.replace("^", "**"), mode="eval")
        except SyntaxError as exc:
            raise ConfigurationError(f"cannot parse expression {self.source!r}: {exc.msg}") from None
        for node in ast.walk(tree):
            if not isinstance(node, _ALLOWED):
                raise ConfigurationError(
                    f"expression {self.source!r}: {type(node).__name__} is not allowed"
                )
            if isinstance(node, ast.Constant) and not isinstance(node.value, (int, float)):
                raise ConfigurationError(f"expression {self.source!r}: only numeric constants")
            if isinstance(node, ast.Call) and not (
                isinstance(node.func, ast.Name) and node.func.id in _FUNCS and len(node.args) == 1
            ):
                raise ConfigurationError(f"expression {self.source!r}: unknown function")
            if isinstance(node, ast.Name) and node.id not in _FUNCS and node.id not in _CONSTS \
                    and node.id not in self.variables:
                raise ConfigurationError(
                    f"expression {self.source!r}: unknown name {node.id!r} "
                    f"(allowed: {', '.join(self.variables)})"
                )
        tree = ast.fix_missing_locations(_Indicators().visit(tree))
        object.__setattr__(self, "_code", compile(tree, "<expr>", "eval"))

    def __call__(self, **values):
        ns = {"_ind": lambda b: np.asarray(b, dtype=float), **_FUNCS, **_CONSTS}
        ns.update(values)
        return np.asarray(eval(self._code, {"__builtins__": {}}, ns), dtype=float)

    def is_constant_zero(self) -> bool:
        return self.source.strip() in ("0", "0.0")


@dataclass
class TermSpec:
    space: Expression
    param: dict  # axis name -> Expression in that axis
    tag: str | None = None


@dataclass
class SubdomainSpec:
    id: str
    x: tuple


@dataclass
class ExperimentConfig:
    name: str
    h: float
    domain_x: tuple
    domain_y: tuple
    boundary: dict  # side -> "dirichlet" | "neumann"
    labels: dict
    subdomains: list
    parameters: list  # (name, lower, upper, step)
    diffusion: list
    source: list = field(default_factory=list)
    neumann: list = field(default_factory=list)
    exact: Expression | None = None
    enrich_tol: float = 1e-4
    compress_tol: float = 1e-3
    gmres_tol: float = 1e-6
    gmres_max_iters: int = 1000
    gmres_restart: int | None = None
    fp_tol: float = 1e-3
    fp_max_iters: int = 25
    max_modes: int = 60
    seed: int = 0
    workers: int = 1
    output_dir: str | None = None
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def param_names(self):
        return [p[0] for p in self.parameters]

    def mu_from_values(self, values) -> dict:
        values = list(values)
        if len(values) != len(self.parameters):
            raise ConfigurationError(
                f"expected {len(self.parameters)} parameter values ({', '.join(self.param_names)}), got {len(values)}"
            )
        return dict(zip(self.param_names, map(float, values)))


def _need(d, key, where):
    if key not in d:
        raise ConfigurationError(f"{where}: missing field {key!r}")
    return d[key]


def _interval(v, where):
    if not (isinstance(v, (list, tuple)) and len(v) == 2):
        raise ConfigurationError(f"{where}: expected [lower, upper]")
    a, b = float(v[0]), float(v[1])
    if not b > a:
        raise ConfigurationError(f"{where}: degenerate interval [{a}, {b}]")
    return (a, b)


def _positive(v, where):
    v = float(v)
    if not v > 0:
        raise ConfigurationError(f"{where}: must be positive, got {v}")
    return v


def _terms(items, kind, param_names, need_tag=False):
    out = []
    for k, item in enumerate(items or []):
        where = f"{kind}[{k}]"
        if not isinstance(item, dict):
            raise ConfigurationError(f"{where}: expected a table")
        space = Expression(str(_need(item, "space", where)), ("x", "y"))
        param = {}
        for name, src in (item.get("param") or {}).items():
            if name not in param_names:
                raise ConfigurationError(f"{where}.param: unknown parameter {name!r}")
            param[name] = Expression(str(src), (name,))
        tag = item.get("tag")
        if need_tag and not tag:
            raise ConfigurationError(f"{where}: Neumann terms need a 'tag'")
        out.append(TermSpec(space, param, tag))
    return out


def config_from_dict(d: dict) -> ExperimentConfig:
    name = str(d.get("name", "experiment"))
    mesh = _need(d, "mesh", "config")
    h = _positive(_need(mesh, "h", "mesh"), "mesh.h")
    dom = _need(d, "domain", "config")
    dx = _interval(_need(dom, "x", "domain"), "domain.x")
    dy = _interval(_need(dom, "y", "domain"), "domain.y")
    boundary = {"left": "dirichlet", "right": "dirichlet", "bottom": "dirichlet", "top": "dirichlet"}
    for side, kind in (dom.get("boundary") or {}).items():
        if side not in boundary:
            raise ConfigurationError(f"domain.boundary: unknown side {side!r}")
        if kind not in ("dirichlet", "neumann"):
            raise ConfigurationError(f"domain.boundary.{side}: expected 'dirichlet' or 'neumann'")
        boundary[side] = kind
    labels = dict(dom.get("labels") or {})

    params = []
    for k, p in enumerate(_need(d, "parameters", "config")):
        where = f"parameters[{k}]"
        lo, hi = _interval([_need(p, "lower", where), _need(p, "upper", where)], where)
        params.append((str(_need(p, "name", where)), lo, hi, _positive(_need(p, "step", where), where + ".step")))
    if not params:
        raise ConfigurationError("config: at least one parameter is required")
    pnames = [p[0] for p in params]

    subs = []
    for k, s in enumerate(_need(d, "subdomains", "config")):
        where = f"subdomains[{k}]"
        subs.append(SubdomainSpec(str(_need(s, "id", where)), _interval(_need(s, "x", where), where + ".x")))
    if len({s.id for s in subs}) != len(subs):
        raise ConfigurationError("subdomains: ids must be unique")

    diffusion = _terms(_need(d, "diffusion", "config"), "diffusion", pnames)
    if not diffusion:
        raise ConfigurationError("diffusion: at least one term is required")
    tol = d.get("tolerances") or {}
    gm = d.get("gmres") or {}
    out = d.get("output") or {}
    cfg = ExperimentConfig(
        name=name,
        h=h,
        domain_x=dx,
        domain_y=dy,
        boundary=boundary,
        labels=labels,
        subdomains=subs,
        parameters=params,
        diffusion=diffusion,
        source=_terms(d.get("source"), "source", pnames),
        neumann=_terms(d.get("neumann"), "neumann", pnames, need_tag=True),
        exact=Expression(str(d["exact"]), ("x", "y", *pnames)) if d.get("exact") else None,
        enrich_tol=_positive(tol.get("enrich", 1e-4), "tolerances.enrich"),
        compress_tol=_positive(tol.get("compress", 1e-3), "tolerances.compress"),
        gmres_tol=_positive(tol.get("gmres", 1e-6), "tolerances.gmres"),
        fp_tol=_positive(tol.get("fixed_point", 1e-3), "tolerances.fixed_point"),
        fp_max_iters=int(_positive(tol.get("fixed_point_iters", 25), "tolerances.fixed_point_iters")),
        max_modes=int(_positive(tol.get("max_modes", 60), "tolerances.max_modes")),
        gmres_max_iters=int(_positive(gm.get("max_iters", 1000), "gmres.max_iters")),
        gmres_restart=int(gm["restart"]) if gm.get("restart") else None,
        seed=int(d.get("seed", 0)),
        workers=int(_positive(d.get("workers", 1), "workers")),
        output_dir=out.get("dir"),
        raw=d,
    )
    _validate_geometry(cfg)
    return cfg


def _on_grid(v, origin, h):
    n = (v - origin) / h
    return abs(n - round(n)) < 1e-8


def _validate_geometry(cfg: ExperimentConfig) -> None:
    x0, x1 = cfg.domain_x
    y0, y1 = cfg.domain_y
    if not (_on_grid(x1, x0, cfg.h) and _on_grid(y1, y0, cfg.h)):
        raise ConfigurationError("domain: extents must be multiples of mesh.h")
    subs = sorted(cfg.subdomains, key=lambda s: s.x[0])
    for s in subs:
        a, b = s.x
        if a < x0 - 1e-12 or b > x1 + 1e-12:
            raise ConfigurationError(f"subdomain {s.id!r}: outside the domain")
        if not (_on_grid(a, x0, cfg.h) and _on_grid(b, x0, cfg.h)):
            raise ConfigurationError(f"subdomain {s.id!r}: bounds must lie on the mesh grid (h={cfg.h})")
    if abs(subs[0].x[0] - x0) > 1e-12 or abs(subs[-1].x[1] - x1) > 1e-12:
        raise ConfigurationError("subdomains: union must cover the domain")
    for left, right in zip(subs, subs[1:]):
        width = left.x[1] - right.x[0]
        if width <= 1e-12:
            raise ConfigurationError(
                f"subdomains {left.id!r} and {right.id!r}: overlap width {width:g} must be positive"
            )
    for s in subs:
        for t in subs:
            if s is not t and t.x[0] <= s.x[0] and t.x[1] >= s.x[1]:
                raise ConfigurationError(f"subdomain {s.id!r} is contained in {t.id!r}")
    for a, b, c in zip(subs, subs[1:], subs[2:]):
        if a.x[1] > c.x[0]:
            raise ConfigurationError(
                f"subdomains {a.id!r} and {c.id!r} overlap: interfaces would meet more than one neighbor"
            )


def resolve_config(ref) -> ExperimentConfig:
    """Load a config from a TOML path or a built-in experiment name."""
    from .experiments import BUILTINS

    if isinstance(ref, dict):
        return config_from_dict(ref)
    ref = str(ref)
    if ref in BUILTINS and not os.path.exists(ref):
        return config_from_dict(BUILTINS[ref]())
    path = Path(ref)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {ref!r}: {exc.strerror}") from None
    try:
        d = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{ref}: {exc}") from None
    if "builtin" in d:
        name = d.pop("builtin")
        if name not in BUILTINS:
            raise ConfigurationError(f"{ref}: unknown builtin {name!r}")
        base = BUILTINS[name]()
        _merge(base, d)
        d = base
    try:
        return config_from_dict(d)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{ref}: {exc}") from None


def _merge(base: dict, over: dict) -> None:
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v
