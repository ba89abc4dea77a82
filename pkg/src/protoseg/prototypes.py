"""Class prototypes in embedding space.

Multi-prototypes come from farthest point sampling of a class's support
embeddings followed by nearest-seed clustering; each prototype is the mean
of one cluster. With ``n = 1`` this is exactly the class mean used by the
single-prototype baseline, and both go through the same ``segment_mean``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .episodes import EpisodeError
from .numerics import ContractError, Tensor


def _first_lexicographic(x: np.ndarray, candidates: np.ndarray) -> int:
    """Candidate whose feature row is lexicographically smallest, then lowest index."""
    if len(candidates) == 1:
        return int(candidates[0])
    rows = x[candidates]
    keys = [candidates] + [rows[:, j] for j in range(rows.shape[1] - 1, -1, -1)]
    return int(candidates[np.lexsort(keys)[0]])


def _sq_to(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    d = x - v
    return np.einsum("ij,ij->i", d, d)


def farthest_point_sample(points, n: int) -> np.ndarray:
    """Greedy max-min selection of ``n`` row indices.

    The first seed is the point farthest from the centroid; every later seed
    is farthest from the seeds chosen so far. Equal distances go to the
    lexicographically smallest feature row, then the lowest index, so the
    selected points do not depend on the input order.
    """
    x = np.asarray(points.data if isinstance(points, Tensor) else points, dtype=np.float64)
    m = len(x)
    if not 1 <= n <= m:
        raise ContractError(f"need 1 <= n <= {m}, got n={n}")
    # sorting each column first makes the sum independent of row order
    centroid = np.sort(x, axis=0).sum(axis=0) / m
    d = _sq_to(x, centroid)
    seeds = [_first_lexicographic(x, np.flatnonzero(d == d.max()))]
    nearest = _sq_to(x, x[seeds[0]])
    nearest[seeds[0]] = -np.inf
    for _ in range(1, n):
        nxt = _first_lexicographic(x, np.flatnonzero(nearest == nearest.max()))
        seeds.append(nxt)
        np.minimum(nearest, _sq_to(x, x[nxt]), out=nearest)
        nearest[nxt] = -np.inf
    return np.array(seeds, dtype=np.intp)


def assign_to_seeds(points, seeds: np.ndarray) -> np.ndarray:
    """Index (into ``seeds``) of each point's nearest seed; ties to the lower seed.

    Every seed is assigned to itself, so no cluster is empty even when two
    seeds coincide.
    """
    x = np.asarray(points.data if isinstance(points, Tensor) else points, dtype=np.float64)
    s = x[seeds]
    d = np.stack([_sq_to(x, v) for v in s], axis=1)
    out = d.argmin(axis=1)
    out[seeds] = np.arange(len(seeds))
    return out


def cluster_means(points: Tensor, assignment: np.ndarray, n_clusters: int) -> Tensor:
    return nx.segment_mean(points, assignment, n_clusters)


def multi_prototypes(points, n: int) -> Tensor:
    """``min(n, m)`` prototypes: means of the nearest-seed clusters."""
    points = nx.as_tensor(points)
    m = points.shape[0]
    if m < 1:
        raise EpisodeError("cannot build prototypes from zero points")
    n = min(n, m)
    seeds = farthest_point_sample(points.data, n)
    return cluster_means(points, assign_to_seeds(points.data, seeds), n)


def class_means(points, labels: np.ndarray, n_classes: int) -> Tensor:
    """One mean per class ``0..n_classes-1`` (single-prototype baseline)."""
    return cluster_means(nx.as_tensor(points), np.asarray(labels), n_classes)


@dataclass
class PrototypeSet:
    """Prototype vectors and their episode-local class labels (0 = background)."""

    vectors: Tensor
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def counts(self, n_classes: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=n_classes)


def support_point_labels(masks: Sequence[np.ndarray], shot_classes: Sequence[int]) -> np.ndarray:
    """Episode-local label of every stacked support point.

    A support cloud's masked points take its class; the rest are background.
    """
    if len(masks) != len(shot_classes):
        raise ContractError("one class per support mask required")
    parts = [np.where(np.asarray(mk, dtype=bool), c, 0) for mk, c in zip(masks, shot_classes)]
    return np.concatenate(parts).astype(np.intp)


def build_prototype_set(
    support: Tensor,
    point_labels: np.ndarray,
    n_classes: int,
    n: int,
) -> PrototypeSet:
    """Multi-prototypes for classes ``0..n_classes-1`` from stacked support embeddings.

    ``point_labels`` gives each row's episode-local class (see
    :func:`support_point_labels`). Class ``c`` gets ``min(n, m_c)`` rows,
    ordered by class.
    """
    support = nx.as_tensor(support)
    point_labels = np.asarray(point_labels, dtype=np.intp)
    if point_labels.shape != (support.shape[0],):
        raise nx.ShapeError("one label per support row required")
    rows, segments, labels = [], [], []
    offset = 0
    for c in range(n_classes):
        idx = np.flatnonzero(point_labels == c)
        if idx.size == 0:
            what = "background" if c == 0 else f"class {c}"
            raise EpisodeError(f"{what} has no support points")
        k = min(n, idx.size)
        x = support.data[idx]
        assignment = assign_to_seeds(x, farthest_point_sample(x, k))
        rows.append(idx)
        segments.append(assignment + offset)
        labels.append(np.full(k, c))
        offset += k
    rows = np.concatenate(rows)
    vectors = nx.segment_mean(nx.take(support, rows), np.concatenate(segments), offset)
    return PrototypeSet(vectors, np.concatenate(labels))


def protonet_predict(query: Tensor, means: Tensor) -> Tensor:
    """``-||f - mu_c||^2`` for every query row and class mean."""
    return nx.scale(nx.sqdist_matrix(query, means), -1.0)
