"""Sparse storage, SPD solves and a matrix-free GMRES."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


# Number of sparse factorizations performed in this process.
counters = {"factorizations": 0}


class FactorizationError(RuntimeError):
    """Raised when a matrix expected to be SPD produces a non-positive pivot."""


class ConvergenceError(RuntimeError):
    """Raised when an iterative solver does not reach its tolerance."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class SparseMatrix:
    """CSR matrix. Thin value wrapper around the three CSR arrays."""

    n_rows: int
    n_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    symmetric: bool = False

    def __post_init__(self):
        if len(self.row_offsets) != self.n_rows + 1:
            raise ValueError("row_offsets must have length n_rows + 1")
        if np.any(np.diff(self.row_offsets) < 0):
            raise ValueError("row_offsets must be non-decreasing")
        if len(self.col_indices) and (
            self.col_indices.min() < 0 or self.col_indices.max() >= self.n_cols
        ):
            raise ValueError("column index out of range")

    @classmethod
    def from_scipy(cls, mat, symmetric: bool = False) -> "SparseMatrix":
        csr = sp.csr_matrix(mat)
        csr.sum_duplicates()
        csr.sort_indices()
        return cls(
            n_rows=csr.shape[0],
            n_cols=csr.shape[1],
            row_offsets=csr.indptr.astype(np.int64),
            col_indices=csr.indices.astype(np.int64),
            values=csr.data.astype(np.float64),
            symmetric=symmetric,
        )

    @classmethod
    def from_dense(cls, arr, symmetric: bool = False) -> "SparseMatrix":
        return cls.from_scipy(sp.csr_matrix(np.asarray(arr, dtype=float)), symmetric)

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    def tocsr(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.values, self.col_indices, self.row_offsets), shape=self.shape
        )

    def toarray(self) -> np.ndarray:
        return self.tocsr().toarray()

    def __matmul__(self, x):
        return self.tocsr() @ x

    def __add__(self, other: "SparseMatrix") -> "SparseMatrix":
        return SparseMatrix.from_scipy(
            self.tocsr() + other.tocsr(), self.symmetric and other.symmetric
        )

    def scaled(self, c: float) -> "SparseMatrix":
        return SparseMatrix.from_scipy(self.tocsr() * c, self.symmetric)

    def is_symmetric(self, rtol: float = 1e-14) -> bool:
        a = self.tocsr()
        diff = abs(a - a.T)
        scale = abs(a).max() if a.nnz else 0.0
        return diff.nnz == 0 or diff.max() <= rtol * max(scale, 1.0)


class SpdFactor:
    """Sparse LU without pivoting under a symmetric fill-reducing ordering.

    For an SPD matrix the diagonal of U holds the LDL^T pivots, so a
    non-positive entry there means the matrix is not positive definite.
    """

    def __init__(self, A):
        csc = sp.csc_matrix(A.tocsr() if isinstance(A, SparseMatrix) else A)
        self.n = csc.shape[0]
        if csc.shape[0] != csc.shape[1]:
            raise ValueError("matrix must be square")
        if self.n == 0:
            self._lu = None
            return
        counters["factorizations"] += 1
        try:
            self._lu = spla.splu(
                csc,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as exc:  # exactly singular
            raise FactorizationError(str(exc)) from exc
        pivots = self._lu.U.diagonal()
        if not np.all(pivots > 0.0):
            raise FactorizationError(
                f"non-positive pivot {pivots.min():.3e}: matrix is not SPD"
            )

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        if self.n == 0:
            return np.zeros_like(b)
        return self._lu.solve(b)


def spd_solve(A, b, method: str = "direct", tol: float = 1e-12, maxiter=None):
    """Solve ``A x = b`` for SPD ``A``.

    ``method="direct"`` factorizes; ``method="cg"`` runs conjugate gradients
    to relative residual ``tol``.
    """
    b = np.asarray(b, dtype=float)
    n = A.shape[0]
    if A.shape[1] != n or b.shape[0] != n:
        raise ValueError(f"dimension mismatch: A is {A.shape}, b has {b.shape[0]}")
    if method == "direct":
        return SpdFactor(A).solve(b)
    if method == "cg":
        mat = A.tocsr() if isinstance(A, SparseMatrix) else A
        x, info = spla.cg(mat, b, rtol=tol, atol=0.0, maxiter=maxiter or 10 * n)
        if info != 0:
            raise ConvergenceError(f"CG did not converge (info={info})")
        return x
    raise ValueError(f"unknown method {method!r}")


@dataclass(frozen=True)
class GmresConfig:
    rel_tol: float = 1e-6
    max_iters: int = 500
    restart: Optional[int] = None

    def __post_init__(self):
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.restart is not None and self.restart < 1:
            raise ValueError("restart must be >= 1 or None")


@dataclass
class GmresResult:
    x: np.ndarray
    iters: int
    residual_history: list = field(default_factory=list)
    status: str = "converged"  # converged | max_iters | breakdown

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def __iter__(self):
        # allows ``x, iters, history = gmres(...)``
        return iter((self.x, self.iters, self.residual_history))


def gmres(
    apply: Callable[[np.ndarray], np.ndarray],
    b,
    cfg: GmresConfig = GmresConfig(),
) -> GmresResult:
    """Right-hand-side GMRES from a zero initial guess.

    Arnoldi uses modified Gram-Schmidt with one reorthogonalization pass and
    Givens rotations for the least-squares update. ``residual_history[k]``
    is the relative residual estimate after iteration ``k + 1``.
    """
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    x = np.zeros(n)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return GmresResult(x, 0, [], "converged")

    m = cfg.restart or cfg.max_iters
    history: list = []
    total = 0
    r = b.copy()
    beta = bnorm
    while True:
        V = np.zeros((min(m, n) + 1, n))
        H = np.zeros((min(m, n) + 1, min(m, n)))
        cs = np.zeros(min(m, n))
        sn = np.zeros(min(m, n))
        g = np.zeros(min(m, n) + 1)
        g[0] = beta
        V[0] = r / beta
        k = 0
        status = None
        for j in range(min(m, n)):
            w = np.asarray(apply(V[j]), dtype=float)
            for _ in range(2):
                for i in range(j + 1):
                    c = V[i] @ w
                    H[i, j] += c
                    w = w - c * V[i]
            h_next = np.linalg.norm(w)
            H[j + 1, j] = h_next
            for i in range(j):
                tmp = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = tmp
            denom = np.hypot(H[j, j], H[j + 1, j])
            if denom == 0.0:
                status = "breakdown"
                break
            cs[j] = H[j, j] / denom
            sn[j] = H[j + 1, j] / denom
            H[j, j] = denom
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            k = j + 1
            total += 1
            rel = abs(g[j + 1]) / bnorm
            history.append(rel)
            if rel <= cfg.rel_tol:
                status = "converged"
                break
            if h_next <= 1e-14 * denom:
                # invariant Krylov subspace reached without meeting tol
                status = "breakdown"
                break
            if total >= cfg.max_iters:
                status = "max_iters"
                break
            V[j + 1] = w / h_next
        if k > 0:
            y = np.linalg.solve(np.triu(H[:k, :k]), g[:k])
            x = x + V[:k].T @ y
        if status is not None:
            return GmresResult(x, total, history, status)
        # restart from the true residual
        r = b - np.asarray(apply(x), dtype=float)
        beta = np.linalg.norm(r)
        if beta / bnorm <= cfg.rel_tol:
            return GmresResult(x, total, history, "converged")
