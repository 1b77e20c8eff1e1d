"""Separated (PGD) representation of parametric nodal fields."""
from __future__ import annotations

import io
import json
import struct
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

FORMAT_MAGIC = b"DDPGD\x00"
FORMAT_VERSION = 1


class DomainError(ValueError):
    """Parameter value outside the grid box."""


class CorruptPayloadError(ValueError):
    pass


class VersionMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ParamAxis:
    name: str
    lower: float
    upper: float
    step: float

    def __post_init__(self):
        if not self.upper > self.lower:
            raise ValueError(f"axis {self.name!r}: degenerate interval")
        if not self.step > 0:
            raise ValueError(f"axis {self.name!r}: step must be positive")
        n = (self.upper - self.lower) / self.step
        if abs(n - round(n)) > 1e-6 or round(n) < 1:
            raise ValueError(
                f"axis {self.name!r}: step {self.step} does not divide [{self.lower}, {self.upper}]"
            )

    @property
    def size(self) -> int:
        return int(round((self.upper - self.lower) / self.step)) + 1

    @property
    def points(self) -> np.ndarray:
        return self.lower + self.step * np.arange(self.size)

    @property
    def weights(self) -> np.ndarray:
        """Trapezoidal quadrature weights."""
        w = np.full(self.size, self.step)
        w[0] = w[-1] = 0.5 * self.step
        return w

    def locate(self, value: float):
        """Bracketing index and linear weight of ``value`` (exact at grid points)."""
        if not (self.lower - 1e-12 * abs(self.step) <= value <= self.upper + 1e-12 * abs(self.step)):
            raise DomainError(
                f"{self.name}={value} outside [{self.lower}, {self.upper}]"
            )
        f = (value - self.lower) / self.step
        k = int(round(f))
        if abs(f - k) < 1e-9:
            return min(max(k, 0), self.size - 1), 0.0
        i = min(int(np.floor(f)), self.size - 2)
        return i, f - i

    def to_dict(self):
        return {"name": self.name, "lower": self.lower, "upper": self.upper, "step": self.step}


@dataclass(frozen=True)
class ParamGrid:
    axes: tuple

    def __init__(self, axes: Sequence[ParamAxis]):
        object.__setattr__(self, "axes", tuple(axes))
        names = [a.name for a in self.axes]
        if len(set(names)) != len(names):
            raise ValueError("axis names must be unique")

    @property
    def names(self):
        return [a.name for a in self.axes]

    @property
    def shape(self):
        return tuple(a.size for a in self.axes)

    def __len__(self):
        return len(self.axes)

    def values(self, mu) -> list:
        """Per-axis values from a tuple (axis order) or a name mapping."""
        if isinstance(mu, Mapping):
            try:
                return [float(mu[a.name]) for a in self.axes]
            except KeyError as exc:
                raise DomainError(f"missing parameter {exc.args[0]!r}") from None
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        if len(mu) != len(self.axes):
            raise DomainError(f"expected {len(self.axes)} parameter values, got {len(mu)}")
        return list(mu)

    def contains(self, mu) -> bool:
        try:
            for a, v in zip(self.axes, self.values(mu)):
                a.locate(v)
        except DomainError:
            return False
        return True

    def to_list(self):
        return [a.to_dict() for a in self.axes]

    @classmethod
    def from_list(cls, items) -> "ParamGrid":
        return cls([ParamAxis(d["name"], d["lower"], d["upper"], d["step"]) for d in items])


class SeparatedTensor:
    """Sum of modes ``spatial[m] * prod_d parametric[d][m]``.

    ``spatial`` has shape (M, n_space); ``parametric[d]`` has shape
    (M, grid.axes[d].size). Instances are treated as immutable.
    """

    def __init__(self, spatial, parametric, grid: ParamGrid):
        spatial = np.asarray(spatial, dtype=np.float64)
        if spatial.ndim != 2:
            raise ValueError("spatial modes must be a 2D array")
        parametric = [np.asarray(p, dtype=np.float64) for p in parametric]
        parametric = [p.reshape(spatial.shape[0], -1) if p.ndim == 1 else p for p in parametric]
        if len(parametric) != len(grid):
            raise ValueError("one parametric factor per grid axis required")
        for p, ax in zip(parametric, grid.axes):
            if p.shape != (spatial.shape[0], ax.size):
                raise ValueError(f"parametric factor for {ax.name!r} has shape {p.shape}")
        self.spatial = spatial
        self.parametric = parametric
        self.grid = grid
        for arr in (self.spatial, *self.parametric):
            arr.setflags(write=False)

    @classmethod
    def zeros(cls, n_space: int, grid: ParamGrid) -> "SeparatedTensor":
        return cls(np.zeros((0, n_space)), [np.zeros((0, a.size)) for a in grid.axes], grid)

    @classmethod
    def rank_one(cls, spatial, factors, grid: ParamGrid) -> "SeparatedTensor":
        return cls(np.asarray(spatial, float)[None, :], [np.asarray(f, float)[None, :] for f in factors], grid)

    @property
    def n_space(self) -> int:
        return self.spatial.shape[1]

    @property
    def n_modes(self) -> int:
        return self.spatial.shape[0]

    def modes(self):
        for m in range(self.n_modes):
            yield self.spatial[m], [p[m] for p in self.parametric]

    def parametric_weights(self, mu) -> np.ndarray:
        """Product over axes of the interpolated parametric factors, per mode."""
        coef = np.ones(self.n_modes)
        for ax, p, v in zip(self.grid.axes, self.parametric, self.grid.values(mu)):
            i, t = ax.locate(v)
            coef = coef * (p[:, i] if t == 0.0 else (1.0 - t) * p[:, i] + t * p[:, i + 1])
        return coef

    def evaluate(self, mu) -> np.ndarray:
        return evaluate(self, mu)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def normalized(self) -> "SeparatedTensor":
        """Unit max-norm parametric factors; amplitude moved to the spatial modes."""
        spatial = self.spatial.copy()
        params = []
        for p in self.parametric:
            s = np.abs(p).max(axis=1) if p.shape[1] else np.ones(len(p))
            s = np.where(s > 0, s, 1.0)
            params.append(p / s[:, None])
            spatial *= s[:, None]
        return SeparatedTensor(spatial, params, self.grid)

    def amplitudes(self) -> np.ndarray:
        amp = np.linalg.norm(self.spatial, axis=1)
        for p in self.parametric:
            amp = amp * np.abs(p).max(axis=1)
        return amp

    def dense(self) -> np.ndarray:
        """Full array of shape (n_space, *grid.shape). Small grids only."""
        out = np.zeros((self.n_space,) + self.grid.shape)
        for v, fs in self.modes():
            term = v
            for f in fs:
                term = np.multiply.outer(term, f)
            out += term
        return out

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        write_container(buf, {"kind": "tensor", **tensor_header(self)}, tensor_arrays(self, ""))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "SeparatedTensor":
        manifest, arrays = read_container(io.BytesIO(data))
        return tensor_from_arrays(manifest, arrays, "")


def evaluate(t: SeparatedTensor, mu) -> np.ndarray:
    if t.n_modes == 0:
        t.grid.values(mu)
        for ax, v in zip(t.grid.axes, t.grid.values(mu)):
            ax.locate(v)
        return np.zeros(t.n_space)
    return t.parametric_weights(mu) @ t.spatial


def add(t1: SeparatedTensor, t2: SeparatedTensor) -> SeparatedTensor:
    if t1.n_space != t2.n_space or t1.grid != t2.grid:
        raise ValueError("tensors must share spatial size and parametric grid")
    return SeparatedTensor(
        np.vstack([t1.spatial, t2.spatial]),
        [np.vstack([a, b]) for a, b in zip(t1.parametric, t2.parametric)],
        t1.grid,
    )


def scale(t: SeparatedTensor, c: float) -> SeparatedTensor:
    return SeparatedTensor(t.spatial * float(c), t.parametric, t.grid)


# -- norms and compression -------------------------------------------------


def _spatial_gram(A, B, G):
    if G is None:
        return A @ B.T
    return A @ (G @ B.T)


def inner(a: SeparatedTensor, b: SeparatedTensor, spatial_norm=None) -> float:
    """Discrete inner product: spatial (identity or SPD ``spatial_norm``) x trapezoid grid."""
    g = _spatial_gram(a.spatial, b.spatial, spatial_norm)
    for ax, pa, pb in zip(a.grid.axes, a.parametric, b.parametric):
        g = g * ((pa * ax.weights) @ pb.T)
    return float(g.sum())


def norm(t: SeparatedTensor, spatial_norm=None) -> float:
    return float(np.sqrt(max(inner(t, t, spatial_norm), 0.0)))


def _lstsq(P, R):
    try:
        return np.linalg.solve(P, R)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(P, R, rcond=None)[0]


def _rel_error(tt, Wsp, V, P, B, G):
    # ||t - a||^2 = ||t||^2 - 2<t,a> + ||a||^2 via Gram matrices
    ta = float((_spatial_gram(Wsp, V, G) * B).sum())
    aa = float((_spatial_gram(Wsp, Wsp, G) * P).sum())
    return np.sqrt(max(tt - 2.0 * ta + aa, 0.0))


def compress(
    t: SeparatedTensor,
    tol: float,
    spatial_norm=None,
    als_tol: float = 1e-10,
    als_max_iters: int = 100,
    return_info: bool = False,
    als_refit_sweeps: int = 50,
):
    """Greedy rank-one ALS re-approximation of ``t``.

    Modes are added until the relative error in the discrete
    L2(space) x L2(grid) norm drops below ``tol``. After each new mode all
    spatial modes are refitted by least squares on the current parametric
    factors (and, with several parametric axes, all factors by ALS sweeps). Never returns more modes than ``t`` has; on stagnation the best
    approximation found is returned and a warning is issued.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    G = spatial_norm
    grid = t.grid
    W = [ax.weights for ax in grid.axes]
    V = t.spatial
    Phi = t.parametric
    M = t.n_modes
    info = {"error": 0.0, "n_modes_in": M, "n_modes_out": 0, "stagnated": False}

    # Gram blocks of the target with itself.
    gVV = _spatial_gram(V, V, G)
    gPP = [(p * w) @ p.T for p, w in zip(Phi, W)]
    tt = float((gVV * np.prod(gPP, axis=0)).sum()) if M else 0.0
    if M == 0 or tt <= 0.0:
        out = SeparatedTensor.zeros(t.n_space, grid)
        return (out, info) if return_info else out

    t_norm = np.sqrt(tt)
    D = len(grid)
    order = np.argsort(-t.amplitudes())
    Psi = [np.zeros((0, ax.size)) for ax in grid.axes]  # accepted parametric factors
    Wsp = np.zeros((0, t.n_space))
    best = None
    while True:
        k = Wsp.shape[0]
        # start from the parametric factors of a large original mode
        psi = [Phi[d][order[k % M]].copy() for d in range(D)]
        psi = [p / max(np.abs(p).max(), 1e-300) for p in psi]
        prev = None
        for _ in range(als_max_iters):
            # spatial update against the residual t - current approximation
            c_t, c_a, denom = np.ones(M), np.ones(k), 1.0
            for d in range(D):
                c_t = c_t * ((Phi[d] * W[d]) @ psi[d])
                c_a = c_a * ((Psi[d] * W[d]) @ psi[d])
                denom *= (psi[d] * W[d]) @ psi[d]
            w_new = (c_t @ V - c_a @ Wsp) / denom
            ww = float(_spatial_gram(w_new[None, :], w_new[None, :], G)[0, 0])
            if ww == 0.0:
                break
            v_t = _spatial_gram(V, w_new[None, :], G)[:, 0]
            v_a = _spatial_gram(Wsp, w_new[None, :], G)[:, 0]
            for d in range(D):
                ct, ca, other = v_t.copy(), v_a.copy(), ww
                for e in range(D):
                    if e != d:
                        ct = ct * ((Phi[e] * W[e]) @ psi[e])
                        ca = ca * ((Psi[e] * W[e]) @ psi[e])
                        other *= (psi[e] * W[e]) @ psi[e]
                p = (ct @ Phi[d] - ca @ Psi[d]) / other
                s = np.abs(p).max()
                psi[d] = p / s if s > 0 else p
            cur = np.concatenate(psi)
            if prev is not None and np.linalg.norm(cur - prev) <= als_tol * np.linalg.norm(cur):
                break
            prev = cur
        Psi = [np.vstack([Psi[d], psi[d]]) for d in range(D)]
        k += 1
        # least-squares refit of all spatial modes for the chosen factors
        P, B = np.ones((k, k)), np.ones((k, M))
        for d in range(D):
            P = P * ((Psi[d] * W[d]) @ Psi[d].T)
            B = B * ((Psi[d] * W[d]) @ Phi[d].T)
        Wsp = _lstsq(P, B @ V)
        err = _rel_error(tt, Wsp, V, P, B, G) / t_norm
        # With two or more parametric axes greedy deflation is not optimal, so
        # alternate over all factors of the current rank. For a single axis
        # the greedy sequence is a weighted SVD and this step is skipped.
        sweeps = als_refit_sweeps if D >= 2 else 0
        for _ in range(sweeps):
            if err <= tol:
                break
            gWW = _spatial_gram(Wsp, Wsp, G)
            gWV = _spatial_gram(Wsp, V, G)
            for d in range(D):
                A_d, B_d = gWW.copy(), gWV.copy()
                for e in range(D):
                    if e != d:
                        A_d = A_d * ((Psi[e] * W[e]) @ Psi[e].T)
                        B_d = B_d * ((Psi[e] * W[e]) @ Phi[e].T)
                p = _lstsq(A_d, B_d @ Phi[d])
                s = np.abs(p).max(axis=1)
                Psi[d] = p / np.where(s > 0, s, 1.0)[:, None]
            P, B = np.ones((k, k)), np.ones((k, M))
            for d in range(D):
                P = P * ((Psi[d] * W[d]) @ Psi[d].T)
                B = B * ((Psi[d] * W[d]) @ Phi[d].T)
            Wsp = _lstsq(P, B @ V)
            new_err = _rel_error(tt, Wsp, V, P, B, G) / t_norm
            stalled = new_err > (1.0 - 1e-3) * err
            err = new_err
            if stalled:
                break
        cand = SeparatedTensor(Wsp, Psi, grid)
        if best is None or err < best[1]:
            best = (cand, err)
        if err <= tol:
            out, info["error"] = cand, float(err)
            break
        if k >= M:
            info["stagnated"] = True
            # the original is exact; keep it
            out, info["error"] = t, 0.0
            warnings.warn(
                f"compression stagnated at relative error {best[1]:.3e} > {tol:.1e}; "
                "keeping uncompressed tensor",
                RuntimeWarning,
                stacklevel=2,
            )
            break
    out = out.normalized()
    info["n_modes_out"] = out.n_modes
    return (out, info) if return_info else out


# -- binary container -------------------------------------------------------


def tensor_header(t: SeparatedTensor) -> dict:
    return {"n_space": t.n_space, "grid": t.grid.to_list(), "n_modes": t.n_modes}


def tensor_arrays(t: SeparatedTensor, prefix: str) -> dict:
    arrays = {f"{prefix}spatial": t.spatial}
    for ax, p in zip(t.grid.axes, t.parametric):
        arrays[f"{prefix}param:{ax.name}"] = p
    return arrays


def tensor_from_arrays(header: dict, arrays: dict, prefix: str) -> SeparatedTensor:
    grid = ParamGrid.from_list(header["grid"])
    M, n = header["n_modes"], header["n_space"]
    try:
        spatial = arrays[f"{prefix}spatial"].reshape(M, n)
        params = [arrays[f"{prefix}param:{ax.name}"].reshape(M, ax.size) for ax in grid.axes]
    except (KeyError, ValueError) as exc:
        raise CorruptPayloadError(f"tensor {prefix!r}: {exc}") from None
    return SeparatedTensor(spatial, params, grid)


def write_container(fh, manifest: dict, arrays: dict) -> None:
    """Magic, version, JSON manifest, then little-endian float64 arrays."""
    entries = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        offset += a.nbytes
        blobs.append(a.tobytes())
    manifest = dict(manifest, format_version=FORMAT_VERSION, arrays=entries, payload_bytes=offset)
    head = json.dumps(manifest, sort_keys=True, indent=1).encode("utf-8")
    fh.write(FORMAT_MAGIC)
    fh.write(struct.pack("<IQ", FORMAT_VERSION, len(head)))
    fh.write(head)
    for b in blobs:
        fh.write(b)


def read_container(fh):
    magic = fh.read(len(FORMAT_MAGIC))
    if magic != FORMAT_MAGIC:
        raise CorruptPayloadError("not a ddpgd file (bad magic)")
    raw = fh.read(12)
    if len(raw) != 12:
        raise CorruptPayloadError("truncated header")
    version, head_len = struct.unpack("<IQ", raw)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, expected {FORMAT_VERSION}")
    head = fh.read(head_len)
    if len(head) != head_len:
        raise CorruptPayloadError("truncated manifest")
    try:
        manifest = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptPayloadError(f"unreadable manifest: {exc}") from None
    payload = fh.read()
    if len(payload) != manifest.get("payload_bytes", -1):
        raise CorruptPayloadError(
            f"payload has {len(payload)} bytes, manifest declares {manifest.get('payload_bytes')}"
        )
    arrays = {}
    for e in manifest["arrays"]:
        chunk = payload[e["offset"] : e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CorruptPayloadError(f"array {e['name']!r} truncated")
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return manifest, arrays
