"""Greedy rank-one PGD solver for affine parametric elliptic problems."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .linalg import SpdFactor
from .mesh import StructuredMesh, ScalarField, assemble_load, assemble_neumann, assemble_stiffness
from .separated import ParamGrid, SeparatedTensor

log = logging.getLogger(__name__)


class PgdError(RuntimeError):
    pass


@dataclass(frozen=True)
class SeparatedTerm:
    """``spatial(x) * prod_axis factors[axis](mu_axis)``; axes not listed contribute 1.

    ``tag`` selects boundary edges for Neumann terms.
    """

    spatial: ScalarField
    factors: Mapping[str, Callable] = field(default_factory=dict)
    tag: Optional[str] = None

    def factor_vectors(self, grid: ParamGrid):
        out = []
        for ax in grid.axes:
            f = self.factors.get(ax.name)
            pts = ax.points
            out.append(np.ones(ax.size) if f is None else np.broadcast_to(np.asarray(f(pts), float), pts.shape).copy())
        return out

    def coefficient(self, mu: Mapping[str, float]) -> float:
        c = 1.0
        for name, f in self.factors.items():
            c *= float(f(np.float64(mu[name])))
        return c


@dataclass(frozen=True)
class PgdConfig:
    enrich_tol: float = 1e-4
    max_modes: int = 60
    fp_tol: float = 1e-3
    fp_max_iters: int = 25

    def __post_init__(self):
        if min(self.enrich_tol, self.fp_tol) <= 0 or min(self.max_modes, self.fp_max_iters) < 1:
            raise ValueError("PGD settings must be positive")


@dataclass
class SeparatedProblem:
    """``-div(sum_k nu_k grad u) = sum_l s_l`` plus Neumann terms, in separated form.

    The unknown is the homogeneous part ``v``; the full field is
    ``dirichlet_lift + v`` and ``v`` vanishes at ``fixed_zero_nodes``.
    """

    mesh: StructuredMesh
    grid: ParamGrid
    diffusion_terms: list
    source_terms: list = field(default_factory=list)
    neumann_terms: list = field(default_factory=list)
    dirichlet_lift: Optional[tuple] = None  # (nodal vector, per-axis vectors)
    fixed_zero_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.diffusion_terms:
            raise ValueError("at least one diffusion term is required")
        self.fixed_zero_nodes = np.asarray(self.fixed_zero_nodes, dtype=np.int64)
        if self.dirichlet_lift is not None:
            g = np.asarray(self.dirichlet_lift[0], float)
            if len(g) != self.mesh.n_nodes:
                raise ValueError("lift must be a nodal vector")

    def stiffness_terms(self):
        """Assembled stiffness per diffusion term and its factor vectors (cached)."""
        if "stiffness" not in self.cache:
            self.cache["stiffness"] = [
                (assemble_stiffness(self.mesh, t.spatial).tocsr(), t.factor_vectors(self.grid))
                for t in self.diffusion_terms
            ]
            self.cache["n_assemblies"] = self.cache.get("n_assemblies", 0) + len(self.diffusion_terms)
        return self.cache["stiffness"]

    def load_terms(self):
        """Nodal right-hand side terms (source, Neumann, lifted Dirichlet)."""
        out = []
        for t in self.source_terms:
            out.append((assemble_load(self.mesh, t.spatial), t.factor_vectors(self.grid)))
        for t in self.neumann_terms:
            out.append((assemble_neumann(self.mesh, t.spatial, t.tag), t.factor_vectors(self.grid)))
        if self.dirichlet_lift is not None:
            g, gf = self.dirichlet_lift
            g = np.asarray(g, float)
            for K, af in self.stiffness_terms():
                out.append((-(K @ g), [a * np.asarray(b, float) for a, b in zip(af, gf)]))
        return out

    def free_nodes(self) -> np.ndarray:
        mask = np.ones(self.mesh.n_nodes, dtype=bool)
        mask[self.fixed_zero_nodes] = False
        return np.flatnonzero(mask)

    def assemble_at(self, mu):
        """Full-node matrix and load at one parameter point (no BCs applied)."""
        mu = dict(zip(self.grid.names, self.grid.values(mu)))
        K = sum(t.coefficient(mu) * k for t, (k, _) in zip(self.diffusion_terms, self.stiffness_terms()))
        F = np.zeros(self.mesh.n_nodes)
        for t in self.source_terms:
            F += t.coefficient(mu) * assemble_load(self.mesh, t.spatial)
        for t in self.neumann_terms:
            F += t.coefficient(mu) * assemble_neumann(self.mesh, t.spatial, t.tag)
        return K, F

    def lift_at(self, mu) -> np.ndarray:
        if self.dirichlet_lift is None:
            return np.zeros(self.mesh.n_nodes)
        g, gf = self.dirichlet_lift
        c = 1.0
        for ax, v, f in zip(self.grid.axes, self.grid.values(mu), gf):
            i, t = ax.locate(v)
            f = np.asarray(f, float)
            c *= f[i] if t == 0.0 else (1 - t) * f[i] + t * f[i + 1]
        return c * np.asarray(g, float)

    def direct_solve(self, mu) -> np.ndarray:
        """Full-order solution (lift included) at one parameter point."""
        K, F = self.assemble_at(mu)
        free = self.free_nodes()
        u = self.lift_at(mu)
        rhs = F[free] - K[free] @ u
        u[free] = SpdFactor(K[free][:, free]).solve(rhs)
        return u


def amplitude(spatial, parametric=()) -> float:
    """L2 norm of the spatial vector times the max-norms of the parametric factors."""
    a = float(np.linalg.norm(spatial))
    for p in parametric:
        a *= float(np.abs(p).max()) if len(p) else 0.0
    return a


def _winner(vecs, weights):
    """<prod of vecs>_w for one axis."""
    out = weights.copy()
    for v in vecs:
        out = out * v
    return out.sum()


def pgd_solve(
    p: SeparatedProblem,
    cfg: PgdConfig = PgdConfig(),
    seed=0,
    return_info: bool = False,
):
    """Greedy rank-one PGD for the homogeneous part of ``p``.

    Each new mode is found by an alternating fixed point: a reduced SPD
    spatial solve with parametrically weighted stiffness, then a pointwise
    algebraic update of every parametric factor at its collocation points.
    Enrichment stops when a new mode's amplitude falls below
    ``enrich_tol`` times the first one.
    """
    grid = p.grid
    D = len(grid)
    W = [ax.weights for ax in grid.axes]
    free = p.free_nodes()
    n = p.mesh.n_nodes
    rng = np.random.default_rng(seed)
    info = {"amplitudes": [], "fp_iters": [], "fp_unconverged": 0}

    Ks = [(K[free][:, free].tocsr(), af) for K, af in p.stiffness_terms()]
    Fs = [(f[free], cf) for f, cf in p.load_terms()]
    Fs = [(f, cf) for f, cf in Fs if np.any(f) and all(np.any(c) for c in cf)]
    if not Fs or len(free) == 0:
        out = SeparatedTensor.zeros(n, grid)
        return (out, info) if return_info else out

    modes_R: list = []
    modes_S: list = []  # each: list of D vectors
    KV: list = []  # KV[m][k] = K_k @ R_m
    factors: dict = {}
    first_amp = None

    def spatial_matrix(alphas):
        key = tuple(np.round(alphas, 14))
        if key not in factors:
            if len(factors) > 8:
                factors.clear()
            A = sum(a * K for a, (K, _) in zip(alphas, Ks))
            factors[key] = SpdFactor(A)
        return factors[key]

    for _ in range(cfg.max_modes):
        R = rng.standard_normal(len(free))
        S = [np.ones(ax.size) for ax in grid.axes]
        prev = None
        it = 0
        converged = False
        for it in range(1, cfg.fp_max_iters + 1):
            # parametric updates, pointwise at each collocation point
            RF = [R @ f for f, _ in Fs]
            RKR = [R @ (K @ R) for K, _ in Ks]
            RKV = [[R @ kv for kv in kvs] for kvs in KV]
            for d in range(D):
                others = [e for e in range(D) if e != d]
                num = np.zeros(grid.axes[d].size)
                den = np.zeros(grid.axes[d].size)
                for (f, cf), rf in zip(Fs, RF):
                    c = rf
                    for e in others:
                        c *= _winner((cf[e], S[e]), W[e])
                    num += c * cf[d]
                for m, (Sm, rkv) in enumerate(zip(modes_S, RKV)):
                    for (K, af), val in zip(Ks, rkv):
                        c = val
                        for e in others:
                            c *= _winner((af[e], Sm[e], S[e]), W[e])
                        num -= c * af[d] * Sm[d]
                for (K, af), rkr in zip(Ks, RKR):
                    c = rkr
                    for e in others:
                        c *= _winner((af[e], S[e], S[e]), W[e])
                    den += c * af[d]
                if np.any(den <= 0):
                    raise PgdError("non-positive parametric denominator; diffusion must be positive")
                s = num / den
                smax = np.abs(s).max()
                if smax == 0.0:
                    S[d] = np.ones_like(s)
                    R = np.zeros_like(R)
                    break
                S[d] = s / smax
                R = R * smax
            # spatial update: weighted stiffness against the residual load
            alphas = [np.prod([_winner((af[e], S[e], S[e]), W[e]) for e in range(D)]) for _, af in Ks]
            rhs = np.zeros(len(free))
            for f, cf in Fs:
                rhs += np.prod([_winner((cf[e], S[e]), W[e]) for e in range(D)]) * f
            for Sm, kvs in zip(modes_S, KV):
                for (K, af), kv in zip(Ks, kvs):
                    rhs -= np.prod([_winner((af[e], Sm[e], S[e]), W[e]) for e in range(D)]) * kv
            R = spatial_matrix(alphas).solve(rhs)
            # relative change of the rank-one term R (x) S
            if prev is not None:
                Rp, Sp = prev
                ss = np.prod([_winner((S[e], S[e]), W[e]) for e in range(D)])
                pp = np.prod([_winner((Sp[e], Sp[e]), W[e]) for e in range(D)])
                sp_ = np.prod([_winner((S[e], Sp[e]), W[e]) for e in range(D)])
                nn = (R @ R) * ss
                diff2 = nn + (Rp @ Rp) * pp - 2.0 * (R @ Rp) * sp_
                if nn > 0 and np.sqrt(max(diff2, 0.0) / nn) < cfg.fp_tol:
                    converged = True
                    break
            prev = (R.copy(), [s.copy() for s in S])
        if not converged:
            info["fp_unconverged"] += 1
            warnings.warn("PGD fixed point did not converge; accepting mode", RuntimeWarning, stacklevel=2)
        info["fp_iters"].append(it)
        amp = amplitude(R, S)
        info["amplitudes"].append(amp)
        if first_amp is None:
            if amp == 0.0:
                raise PgdError("first PGD mode has zero amplitude with nonzero data")
            first_amp = amp
        elif amp < cfg.enrich_tol * first_amp:
            break
        modes_R.append(R)
        modes_S.append(S)
        KV.append([K @ R for K, _ in Ks])
        log.debug("mode %d amplitude %.3e (fp %d)", len(modes_R), amp, it)

    spatial = np.zeros((len(modes_R), n))
    if modes_R:
        spatial[:, free] = np.array(modes_R)
    params = [np.array([S[d] for S in modes_S]).reshape(len(modes_S), grid.axes[d].size) for d in range(D)]
    out = SeparatedTensor(spatial, params, grid)
    info["n_modes"] = out.n_modes
    return (out, info) if return_info else out
