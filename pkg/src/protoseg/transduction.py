"""k-NN affinity graph over prototypes and query points, and label propagation.

Nodes are the prototype rows followed by the query points. Each node keeps
Gaussian similarities to its ``k_graph`` nearest neighbours; the graph is
symmetrised, normalised as ``D^-1/2 W D^-1/2`` and labels are diffused
either iteratively or through the closed-form shifted solve.

The closed form ``(I - alpha S)^-1 Y`` is the limit of the iteration scaled
by ``1 / (1 - alpha)``; the constant does not change any argmax.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .embednet import knn_indices
from .numerics import ContractError, SparseMatrix, Tensor


class GraphError(ValueError):
    """The affinity graph cannot be built."""


def build_affinity(nodes, k_graph: int, sigma: float) -> SparseMatrix:
    """Directed k-NN graph with weights ``exp(-||v_i - v_j||^2 / (2 sigma^2))``.

    Neighbours exclude the node itself, ties go to the lower index, and
    ``k_graph`` is clamped to ``V - 1``.
    """
    nodes = nx.as_tensor(nodes)
    v = nodes.shape[0]
    if v < 2:
        raise GraphError("an affinity graph needs at least two nodes")
    if sigma <= 0:
        raise ContractError("sigma must be positive")
    if k_graph < 1:
        raise ContractError("k_graph must be >= 1")
    idx = knn_indices(nodes.data, k_graph)
    k = idx.shape[1]
    rows = np.repeat(np.arange(v), k)
    order = np.argsort(idx, axis=1, kind="stable")
    cols = np.take_along_axis(idx, order, axis=1).reshape(-1)
    d = nx.pair_sqdist(nodes, rows, cols)
    values = nx.exp(nx.scale(d, -1.0 / (2.0 * sigma * sigma)))
    return SparseMatrix(v, v, rows, cols, values)


def normalize(A: SparseMatrix) -> SparseMatrix:
    """``S = D^-1/2 (A + A^T) D^-1/2``; nodes without edges get zero rows.

    Each entry is ``W_ij * (d_i * d_j)`` so that ``S`` is symmetric bit for
    bit, not just up to rounding.
    """
    if A.n_rows != A.n_cols:
        raise nx.ShapeError("affinity must be square")
    if A.nnz and A.values.data.min() < 0:
        raise ContractError("affinity weights must be non-negative")
    n = A.n_rows
    key = np.concatenate([A.rows * n + A.cols, A.cols * n + A.rows])
    uniq, inverse = np.unique(key, return_inverse=True)
    w = nx.segment_sum(nx.concat([A.values, A.values], axis=0), inverse.reshape(-1), len(uniq))
    rows, cols = uniq // n, uniq % n
    dinv = nx.rsqrt_or_zero(nx.segment_sum(w, rows, n))
    pair = nx.mul(nx.take(dinv, rows), nx.take(dinv, cols))
    return SparseMatrix(n, n, rows, cols, nx.mul(w, pair))


def label_matrix(prototype_labels: np.ndarray, n_query: int, n_classes: int) -> np.ndarray:
    """One-hot rows for the prototypes followed by ``n_query`` zero rows."""
    labels = np.asarray(prototype_labels, dtype=np.intp)
    y = np.zeros((len(labels) + n_query, n_classes))
    y[np.arange(len(labels)), labels] = 1.0
    return y


def propagate_iterative(
    S: SparseMatrix,
    Y,
    alpha: float,
    t_max: int = 5000,
    tol: float = 1e-12,
) -> tuple[np.ndarray, int]:
    """Iterate ``Z <- alpha S Z + (1 - alpha) Y`` from ``Z = Y``.

    Stops once the max-norm change is at most ``tol``; returns ``(Z, steps)``,
    with ``steps == t_max`` meaning it did not converge.
    """
    y = np.asarray(Y.data if isinstance(Y, Tensor) else Y, dtype=np.float64)
    s = S.to_scipy()
    z = y.copy()
    base = (1.0 - alpha) * y
    for t in range(1, t_max + 1):
        z_next = alpha * (s @ z) + base
        change = np.max(np.abs(z_next - z)) if z.size else 0.0
        z = z_next
        if change <= tol:
            return z, t
    return z, t_max


def propagate_closed_form(S: SparseMatrix, Y, alpha: float, method: str = "auto") -> Tensor:
    """``(I - alpha S)^-1 Y``, differentiable in ``S.values`` and ``Y``."""
    return nx.solve_spd(S, alpha, Y, method=method)


def query_logits(Z: Tensor, n_prototypes: int, n_query_clouds: int, m_points: int) -> list[Tensor]:
    """Drop the prototype rows and split the rest into per-cloud ``M x C`` blocks."""
    Z = nx.as_tensor(Z)
    if Z.shape[0] != n_prototypes + n_query_clouds * m_points:
        raise ContractError(
            f"expected {n_prototypes} + {n_query_clouds}x{m_points} rows, got {Z.shape[0]}"
        )
    return [
        nx.take(Z, np.arange(n_prototypes + t * m_points, n_prototypes + (t + 1) * m_points))
        for t in range(n_query_clouds)
    ]


@dataclass
class AffinityGraph:
    """Nodes (prototypes first), the directed affinity ``A`` and normalised ``S``."""

    nodes: Tensor
    A: SparseMatrix
    S: SparseMatrix
    sigma: float
    k_graph: int

    @classmethod
    def build(cls, nodes, k_graph: int, sigma: float) -> "AffinityGraph":
        nodes = nx.as_tensor(nodes)
        A = build_affinity(nodes, k_graph, sigma)
        return cls(nodes, A, normalize(A), sigma, min(k_graph, nodes.shape[0] - 1))

    def export(self, prefix) -> None:
        """Write ``<prefix>.A.txt`` and ``<prefix>.S.txt`` triple lists."""
        self.A.save_text(f"{prefix}.A.txt")
        self.S.save_text(f"{prefix}.S.txt")
