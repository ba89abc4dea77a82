"""Synthetic rooms built from labeled geometric primitives.

A room is a grid of 1 m cells on a floor (label 0). Each cell holds a fixed
number of object instances. Classes are dealt from a shuffled deck holding
each library class once, refilled when empty, so class counts stay balanced
across a batch of scenes. Instance colors are random, so geometry is the only reliable cue.

The default library has 12 classes built from six primitive types; one of
them consists of two separate parts, i.e. two geometric modes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .episodes import ClassSplit
from .pointcloud import PointCloud

PRIMITIVES = ("plane", "box", "sphere", "cylinder", "wedge", "torus")


@dataclass(frozen=True)
class ClassEntry:
    """A class: one or more ``(primitive, variant)`` parts placed side by side."""

    class_id: int
    name: str
    parts: tuple[tuple[str, str], ...]


def default_library() -> tuple[ClassEntry, ...]:
    """Two variants of each primitive plus one class made of two separate parts.

    Odd ids go to training and even ids to testing (see
    :meth:`SyntheticSceneSpec.split`), so five of the six primitive types
    appear on both sides in different variants. Class 12 (a small box next to a small
    sphere) is the two-mode class.
    """
    names = [
        ("panel", ("plane", "vertical")),
        ("slab", ("plane", "raised")),
        ("cube", ("box", "cube")),
        ("bar", ("box", "bar")),
        ("ball", ("sphere", "ball")),
        ("dome", ("sphere", "dome")),
        ("post", ("cylinder", "upright")),
        ("log", ("cylinder", "lying")),
        ("ramp", ("wedge", "ramp")),
        ("ring", ("torus", "upright")),
        ("arc", ("torus", "flat")),
    ]
    out = [ClassEntry(i + 1, name, (part,)) for i, (name, part) in enumerate(names)]
    out.append(ClassEntry(12, "cube+ball", (("box", "small"), ("sphere", "small"))))
    return tuple(out)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    extent: float = 2.0
    instances_per_cell: int = 2
    points_per_instance: int = 300
    floor_points_per_cell: int = 150
    color_noise: float = 0.05
    library: tuple[ClassEntry, ...] = field(default_factory=default_library)

    def __post_init__(self):
        if self.extent <= 0:
            raise ValueError("extent must be positive")
        if len(self.library) < 2:
            raise ValueError("the class library needs at least two classes")
        ids = [e.class_id for e in self.library]
        if len(set(ids)) != len(ids) or min(ids) < 1:
            raise ValueError("library class ids must be distinct and >= 1 (0 is the floor)")
        if self.instances_per_cell < 1 or self.points_per_instance < 1:
            raise ValueError("instances_per_cell and points_per_instance must be >= 1")

    @property
    def cells_per_side(self) -> int:
        return max(1, int(np.floor(self.extent)))

    def expected_fractions(self) -> dict[int, float]:
        """Expected share of points per label (floor included)."""
        cells = self.cells_per_side ** 2
        obj = cells * self.instances_per_cell * self.points_per_instance
        floor = cells * self.floor_points_per_cell
        total = obj + floor
        share = obj / total / len(self.library)
        out = {e.class_id: share for e in self.library}
        out[0] = floor / total
        return out

    def split(self) -> ClassSplit:
        """Alternating ids: odd ids train, even ids test."""
        ids = sorted(e.class_id for e in self.library)
        return ClassSplit(frozenset(ids[0::2]), frozenset(ids[1::2]))


# -- surface samplers; local frame, object resting on z = 0, centered in xy ----------

def _rect(rng, n, u, v, origin):
    a = rng.uniform(0, 1, (n, 1))
    b = rng.uniform(0, 1, (n, 1))
    return origin + a * u + b * v


def _split_by_area(rng, n, areas):
    p = np.asarray(areas, dtype=float)
    return rng.multinomial(n, p / p.sum())


def _plane(rng, n, variant):
    if variant == "vertical":
        w, h = 0.55, 0.45
        pts = _rect(rng, n, np.array([w, 0, 0]), np.array([0, 0, h]), np.array([-w / 2, 0, 0]))
        pts[:, 1] += rng.normal(0, 0.004, n)
        return pts
    w = 0.45
    pts = _rect(rng, n, np.array([w, 0, 0]), np.array([0, w, 0]), np.array([-w / 2, -w / 2, 0.35]))
    pts[:, 2] += rng.normal(0, 0.004, n)
    return pts


def _cuboid(rng, n, ex, ey, ez, z0=0.0):
    faces = [
        (np.array([ex, 0, 0]), np.array([0, ey, 0]), np.array([0, 0, z]), ex * ey) for z in (0.0, ez)
    ] + [
        (np.array([ex, 0, 0]), np.array([0, 0, ez]), np.array([0, y, 0]), ex * ez) for y in (0.0, ey)
    ] + [
        (np.array([0, ey, 0]), np.array([0, 0, ez]), np.array([x, 0, 0]), ey * ez) for x in (0.0, ex)
    ]
    counts = _split_by_area(rng, n, [f[3] for f in faces])
    pts = np.vstack([_rect(rng, c, u, v, o) for c, (u, v, o, _) in zip(counts, faces)])
    return pts - np.array([ex / 2, ey / 2, -z0])


def _box(rng, n, variant):
    if variant == "cube":
        return _cuboid(rng, n, 0.3, 0.3, 0.3)
    if variant == "bar":
        return _cuboid(rng, n, 0.55, 0.12, 0.12)
    return _cuboid(rng, n, 0.16, 0.16, 0.16)


def _unit_dirs(rng, n):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _sphere(rng, n, variant):
    if variant == "dome":
        d = _unit_dirs(rng, n)
        d[:, 2] = np.abs(d[:, 2])
        return d * 0.25
    r = 0.17 if variant == "ball" else 0.09
    return _unit_dirs(rng, n) * r + np.array([0, 0, r + 0.03])


def _cylinder_surface(rng, n, r, h):
    side, top = _split_by_area(rng, n, [2 * np.pi * r * h, np.pi * r * r])
    t = rng.uniform(0, 2 * np.pi, side)
    lat = np.column_stack([r * np.cos(t), r * np.sin(t), rng.uniform(0, h, side)])
    rad = r * np.sqrt(rng.uniform(0, 1, top))
    t2 = rng.uniform(0, 2 * np.pi, top)
    cap = np.column_stack([rad * np.cos(t2), rad * np.sin(t2), np.full(top, h)])
    return np.vstack([lat, cap])


def _cylinder(rng, n, variant):
    if variant == "upright":
        return _cylinder_surface(rng, n, 0.1, 0.45)
    pts = _cylinder_surface(rng, n, 0.09, 0.5)
    # lay it along x, resting on the floor
    return np.column_stack([pts[:, 2] - 0.25, pts[:, 1], pts[:, 0] + 0.09])


def _wedge(rng, n, variant):
    L, W, H = 0.4, 0.3, 0.3
    slope = np.hypot(L, H)
    c_bottom, c_back, c_slope, c_sides = _split_by_area(rng, n, [L * W, H * W, slope * W, L * H])
    bottom = _rect(rng, c_bottom, np.array([L, 0, 0]), np.array([0, W, 0]), np.zeros(3))
    back = _rect(rng, c_back, np.array([0, W, 0]), np.array([0, 0, H]), np.zeros(3))
    slant = _rect(rng, c_slope, np.array([L, 0, -H]), np.array([0, W, 0]), np.array([0, 0, H]))
    # triangular side walls: fold the unit square onto the triangle
    a = rng.uniform(0, 1, c_sides)
    b = rng.uniform(0, 1, c_sides)
    flip = a + b > 1
    a[flip], b[flip] = 1 - a[flip], 1 - b[flip]
    y = np.where(rng.uniform(size=c_sides) < 0.5, 0.0, W)
    sides = np.column_stack([a * L, y, b * H])
    return np.vstack([bottom, back, slant, sides]) - np.array([L / 2, W / 2, 0])


def _torus(rng, n, variant):
    R, r = 0.18, 0.05
    v = rng.uniform(0, 2 * np.pi, n)
    if variant == "upright":
        u = rng.uniform(0, 2 * np.pi, n)
        rad = R + r * np.cos(v)
        return np.column_stack([rad * np.cos(u), r * np.sin(v), rad * np.sin(u) + R + r])
    u = rng.uniform(0, np.pi, n)
    rad = R + r * np.cos(v)
    return np.column_stack([rad * np.cos(u), rad * np.sin(u) - R / 2, r * np.sin(v) + r])


SAMPLERS = {
    "plane": _plane, "box": _box, "sphere": _sphere,
    "cylinder": _cylinder, "wedge": _wedge, "torus": _torus,
}


def sample_instance(entry: ClassEntry, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` surface points of one instance, randomly rotated about z."""
    if len(entry.parts) == 1:
        shape, variant = entry.parts[0]
        pts = SAMPLERS[shape](rng, n, variant) * rng.uniform(0.9, 1.1)
    else:
        counts = np.full(len(entry.parts), n // len(entry.parts))
        counts[: n - counts.sum()] += 1
        offsets = np.linspace(-0.17, 0.17, len(entry.parts))
        pts = np.vstack([
            SAMPLERS[shape](rng, c, variant) + np.array([0.0, dy, 0.0])
            for (shape, variant), c, dy in zip(entry.parts, counts, offsets)
        ])
    t = rng.uniform(0, 2 * np.pi)
    c, s_ = np.cos(t), np.sin(t)
    return pts @ np.array([[c, s_, 0], [-s_, c, 0], [0, 0, 1]])


class ClassDeck:
    """Deals library entries from a reshuffled deck of the whole library."""

    def __init__(self, library: Sequence[ClassEntry], rng: np.random.Generator):
        self.library = tuple(library)
        self.rng = rng
        self._pending: list[int] = []

    def draw(self) -> ClassEntry:
        if not self._pending:
            self._pending = list(self.rng.permutation(len(self.library)))
        return self.library[self._pending.pop()]


def generate_scene(spec: SyntheticSceneSpec, rng: np.random.Generator, deck: ClassDeck | None = None) -> PointCloud:
    """One room; pass a shared ``deck`` to balance classes over several rooms."""
    deck = deck or ClassDeck(spec.library, rng)
    cells = spec.cells_per_side
    xyz, colors, labels = [], [], []
    for i in range(cells):
        for j in range(cells):
            origin = np.array([i, j, 0.0])
            floor = np.column_stack([
                rng.uniform(0, 1, spec.floor_points_per_cell) + i,
                rng.uniform(0, 1, spec.floor_points_per_cell) + j,
                rng.normal(0, 0.003, spec.floor_points_per_cell),
            ])
            gray = rng.uniform(0.3, 0.7)
            xyz.append(floor)
            colors.append(np.full((len(floor), 3), gray))
            labels.append(np.zeros(len(floor), dtype=np.int64))
            k = spec.instances_per_cell
            for slot in range(k):
                entry = deck.draw()
                centre = origin + np.array([(slot + 0.5) / k, 0.5, 0.0])
                centre[:2] += rng.uniform(-0.04, 0.04, 2)
                pts = sample_instance(entry, spec.points_per_instance, rng) + centre
                xyz.append(pts)
                colors.append(np.tile(rng.uniform(0.15, 0.85, 3), (len(pts), 1)))
                labels.append(np.full(len(pts), entry.class_id, dtype=np.int64))
    color = np.vstack(colors)
    color = np.clip(color + rng.normal(0, spec.color_noise, color.shape), 0.0, 1.0)
    # keep every point inside the room so the window grid stays aligned
    pts = np.vstack(xyz)
    pts[:, :2] = np.clip(pts[:, :2], 0.0, np.nextafter(cells, 0))
    return PointCloud(pts, color, np.concatenate(labels))


def generate_scenes(spec: SyntheticSceneSpec, count: int, rng: np.random.Generator) -> list[PointCloud]:
    deck = ClassDeck(spec.library, rng)
    return [generate_scene(spec, rng, deck) for _ in range(count)]
