"""Sparse matrices with differentiable values and the shifted SPD solve.

The sparsity pattern (``rows``, ``cols``) is discrete and never
differentiated; ``values`` may be a tape-attached :class:`Tensor` so that
gradients reach whatever produced the edge weights.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .tensor import ContractError, ShapeError, Tensor, _emit, as_tensor


class SolverError(RuntimeError):
    """An iterative solve failed to reach its residual tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


DENSE_LIMIT = 4096


@dataclass
class SparseMatrix:
    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    values: Tensor

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.intp)
        self.cols = np.asarray(self.cols, dtype=np.intp)
        self.values = as_tensor(self.values)
        if not (self.rows.shape == self.cols.shape == self.values.shape):
            raise ShapeError("rows, cols and values must have equal length")
        if self.rows.size:
            key = self.rows * self.n_cols + self.cols
            if np.any(np.diff(key) <= 0):
                raise ContractError("entries must be row-sorted without duplicates")
            if self.rows.max() >= self.n_rows or self.cols.max() >= self.n_cols:
                raise ContractError("entry index out of range")

    @classmethod
    def from_triples(cls, n_rows, n_cols, rows, cols, values) -> "SparseMatrix":
        """Build from unsorted, duplicate-free triples (values as plain data)."""
        rows = np.asarray(rows, dtype=np.intp)
        cols = np.asarray(cols, dtype=np.intp)
        order = np.lexsort((cols, rows))
        return cls(n_rows, n_cols, rows[order], cols[order], np.asarray(values, dtype=np.float64)[order])

    @property
    def nnz(self) -> int:
        return int(self.rows.size)

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.values.data, (self.rows, self.cols)), shape=(self.n_rows, self.n_cols)
        )

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n_rows, self.n_cols))
        out[self.rows, self.cols] = self.values.data
        return out

    def transpose_permutation(self) -> np.ndarray:
        """Permutation ``p`` with ``values[p]`` ordered as the transpose's entries."""
        return np.lexsort((self.rows, self.cols))

    def is_symmetric(self, tol: float = 0.0) -> bool:
        if self.n_rows != self.n_cols:
            return False
        p = self.transpose_permutation()
        if not (np.array_equal(self.rows, self.cols[p]) and np.array_equal(self.cols, self.rows[p])):
            return False
        v = self.values.data
        return bool(np.all(np.abs(v - v[p]) <= tol))

    def save_text(self, path) -> None:
        """Debug export, one ``row col value`` line per entry."""
        with open(path, "w") as fh:
            for r, c, v in zip(self.rows, self.cols, self.values.data):
                fh.write(f"{r} {c} {v:.17g}\n")


def _cg(matvec, b: np.ndarray, tol: float, maxiter: int) -> tuple[np.ndarray, float]:
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    bound = tol * max(1.0, np.sqrt(b @ b))
    for _ in range(maxiter):
        if np.sqrt(rr) <= bound:
            break
        q = matvec(p)
        step = rr / (p @ q)
        x += step * p
        r -= step * q
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x, float(np.sqrt(rr))


class _ShiftedSystem:
    """``I - alpha*S`` with either a Cholesky factor or a CG matvec."""

    def __init__(self, S: SparseMatrix, alpha: float, method: str):
        n = S.n_rows
        if method == "auto":
            method = "dense" if n <= DENSE_LIMIT else "cg"
        self.method = method
        self.n = n
        if method == "dense":
            mat = np.eye(n) - alpha * S.to_dense()
            self.factor = scipy.linalg.cho_factor(mat, lower=True, check_finite=False)
        elif method == "cg":
            self.op = (sp.identity(n, format="csr") - alpha * S.to_scipy()).tocsr()
        else:
            raise ContractError(f"unknown solve method {method!r}")

    def solve(self, rhs: np.ndarray, tol: float) -> np.ndarray:
        if self.method == "dense":
            return scipy.linalg.cho_solve(self.factor, rhs, check_finite=False)
        out = np.empty_like(rhs)
        for j in range(rhs.shape[1]):
            out[:, j], res = _cg(self.op.dot, rhs[:, j], tol, 10 * self.n)
            if res > tol * max(1.0, np.linalg.norm(rhs[:, j])):
                raise SolverError(f"CG did not converge on column {j}", res)
        return out


def solve_spd(S: SparseMatrix, alpha: float, Y, *, method: str = "auto", tol: float = 1e-10) -> Tensor:
    """Solve ``(I - alpha*S) Z = Y`` for symmetric ``S`` and ``alpha`` in (0, 1).

    ``method`` is ``"dense"`` (Cholesky), ``"cg"`` (conjugate gradient per
    column) or ``"auto"`` (dense up to :data:`DENSE_LIMIT` nodes). The
    backward pass solves the adjoint system ``(I - alpha*S) G = dZ`` and
    returns ``alpha * (G Z^T)`` on the pattern of ``S`` and ``G`` for ``Y``.
    """
    if not 0.0 < alpha < 1.0:
        raise ContractError("alpha must lie in (0, 1)")
    if S.n_rows != S.n_cols:
        raise ShapeError("S must be square")
    if not S.is_symmetric(tol=1e-12):
        raise ContractError("S must be symmetric")
    Y = as_tensor(Y)
    squeeze = Y.ndim == 1
    y = Y.data.reshape(S.n_rows, -1)
    system = _ShiftedSystem(S, alpha, method)
    z = system.solve(y, tol)
    rows, cols = S.rows, S.cols

    def fn(g):
        g = g.reshape(z.shape)
        adj = system.solve(g, tol)
        dS = alpha * np.einsum("ij,ij->i", adj[rows], z[cols])
        return dS, adj.reshape(Y.shape)

    return _emit(z.reshape(Y.shape) if squeeze else z, (S.values, Y), fn)
