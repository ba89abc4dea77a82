"""Class splits, block indexing and N-way K-shot episode construction."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from math import comb
from typing import Iterable, Iterator, Sequence

import numpy as np

from .pointcloud import PointCloud, center_block, sample_points, slice_blocks


class EpisodeError(ValueError):
    """An episode cannot be sampled or processed."""


@dataclass(frozen=True)
class ClassSplit:
    train: frozenset[int]
    test: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "train", frozenset(int(c) for c in self.train))
        object.__setattr__(self, "test", frozenset(int(c) for c in self.test))
        shared = self.train & self.test
        if shared:
            raise ValueError(f"classes {sorted(shared)} are in both train and test")


def load_split(path) -> ClassSplit:
    """Read ``train: 1,2,...`` and ``test: ...`` lines."""
    found: dict[str, list[int]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            key, sep, rest = line.partition(":")
            key = key.strip()
            if not sep or key not in ("train", "test") or key in found:
                raise ValueError(f"{path}:{lineno}: expected one 'train:' and one 'test:' line")
            try:
                found[key] = [int(v) for v in rest.split(",") if v.strip()]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: class ids must be integers") from None
    if set(found) != {"train", "test"}:
        raise ValueError(f"{path}: missing {sorted({'train', 'test'} - set(found))}")
    return ClassSplit(frozenset(found["train"]), frozenset(found["test"]))


def save_split(split: ClassSplit, path) -> None:
    with open(path, "w") as fh:
        fh.write("train: " + ",".join(str(c) for c in sorted(split.train)) + "\n")
        fh.write("test: " + ",".join(str(c) for c in sorted(split.test)) + "\n")


def prepare_blocks(
    scenes: Iterable[PointCloud],
    m_points: int,
    rng: np.random.Generator,
    window: float = 1.0,
) -> list[PointCloud]:
    """Slice every scene into windows, sample ``m_points`` per block and center it."""
    out = []
    for scene in scenes:
        for block in slice_blocks(scene, window):
            out.append(center_block(sample_points(block, m_points, rng)))
    return out


def index_blocks(blocks: Sequence[PointCloud], classes: Iterable[int], min_points: int) -> dict[int, list[int]]:
    """Block ids per class, keeping blocks with at least ``min_points`` points of it."""
    if min_points < 1:
        raise ValueError("min_points must be >= 1")
    classes = sorted(set(int(c) for c in classes))
    out: dict[int, list[int]] = {c: [] for c in classes}
    for b, cloud in enumerate(blocks):
        if cloud.labels is None:
            raise ValueError(f"block {b} has no labels")
        counts = np.bincount(cloud.labels, minlength=max(classes, default=0) + 1)
        for c in classes:
            if counts[c] >= min_points:
                out[c].append(b)
    return out


@dataclass
class BlockIndex:
    """Sampled blocks and, for each class of interest, the blocks that qualify."""

    blocks: list[PointCloud]
    by_class: dict[int, list[int]]
    min_points: int = 50

    @classmethod
    def build(cls, blocks: Sequence[PointCloud], classes: Iterable[int], min_points: int) -> "BlockIndex":
        blocks = list(blocks)
        return cls(blocks, index_blocks(blocks, classes, min_points), min_points)

    @property
    def classes(self) -> list[int]:
        return sorted(self.by_class)


def remap_labels(labels: np.ndarray, chosen: Sequence[int]) -> np.ndarray:
    """``chosen[i] -> i + 1``; every other label becomes 0."""
    chosen = [int(c) for c in chosen]
    if len(set(chosen)) != len(chosen):
        raise ValueError("chosen classes must be distinct")
    labels = np.asarray(labels)
    out = np.zeros(labels.shape, dtype=np.int64)
    for i, c in enumerate(chosen):
        out[labels == c] = i + 1
    return out


@dataclass
class Episode:
    """Support clouds with binary masks and query clouds with episode-local labels.

    ``support`` is ordered class by class (all K shots of class 1 first);
    ``support_classes[s]`` is the episode-local class of support ``s`` and
    ``class_map[i]`` the global id of episode class ``i + 1``.
    """

    support: list[tuple[PointCloud, np.ndarray]]
    support_classes: list[int]
    query: list[tuple[PointCloud, np.ndarray]]
    class_map: tuple[int, ...]
    block_ids: dict[str, list[int]] = field(default_factory=dict)

    @property
    def n_way(self) -> int:
        return len(self.class_map)

    @property
    def k_shot(self) -> int:
        return len(self.support) // max(self.n_way, 1)


def build_episode(index: BlockIndex, chosen: Sequence[int], K: int, T: int, rng: np.random.Generator) -> Episode:
    """Episode over the given global classes with distinct support and query blocks."""
    used: set[int] = set()
    support, support_classes, support_ids = [], [], []
    for i, c in enumerate(chosen):
        avail = [b for b in index.by_class.get(c, []) if b not in used]
        if len(avail) < K:
            raise EpisodeError(f"class {c} has {len(avail)} unused qualifying blocks, need {K}")
        for b in rng.choice(avail, size=K, replace=False):
            b = int(b)
            used.add(b)
            mask = index.blocks[b].labels == c
            support.append((index.blocks[b], mask))
            support_classes.append(i + 1)
            support_ids.append(b)
    pool = sorted({b for c in chosen for b in index.by_class.get(c, [])} - used)
    if len(pool) < T:
        names = ", ".join(str(c) for c in chosen)
        raise EpisodeError(f"classes {names} leave {len(pool)} query blocks, need {T}")
    query, query_ids = [], []
    for b in rng.choice(pool, size=T, replace=False):
        b = int(b)
        query.append((index.blocks[b], remap_labels(index.blocks[b].labels, chosen)))
        query_ids.append(b)
    return Episode(
        support, support_classes, query, tuple(int(c) for c in chosen),
        {"support": support_ids, "query": query_ids},
    )


def sample_train_episode(index: BlockIndex, N: int, K: int, T: int, rng: np.random.Generator) -> Episode:
    """Choose ``N`` classes uniformly without replacement and build an episode."""
    classes = index.classes
    if N > len(classes):
        raise EpisodeError(f"cannot draw {N} classes from {len(classes)}")
    chosen = [int(c) for c in rng.choice(classes, size=N, replace=False)]
    return build_episode(index, chosen, K, T, rng)


def enumerate_test_episodes(
    index: BlockIndex, N: int, K: int, T: int, episodes_per_combo: int, rng: np.random.Generator
) -> Iterator[Episode]:
    """``episodes_per_combo`` episodes for every ``N``-subset of the classes, in sorted order."""
    for combo in itertools.combinations(index.classes, N):
        for _ in range(episodes_per_combo):
            yield build_episode(index, combo, K, T, rng)


def count_test_episodes(n_classes: int, N: int, episodes_per_combo: int) -> int:
    return comb(n_classes, N) * episodes_per_combo
