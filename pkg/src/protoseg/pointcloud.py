"""Point-cloud records, text/binary I/O, block slicing, sampling, augmentation."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class PointCloudFormatError(ValueError):
    """A point file could not be parsed."""


@dataclass
class PointCloud:
    """``M`` points: xyz in meters, auxiliary features in [0, 1], optional labels.

    ``offset`` is the xy translation removed by :func:`center_block`; adding
    it back recovers the original coordinates.
    """

    xyz: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None
    offset: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        self.features = np.asarray(self.features, dtype=np.float64).reshape(len(self.xyz), -1)
        if len(self.xyz) < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.all(np.isfinite(self.xyz)):
            raise ValueError("coordinates must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.xyz),):
                raise ValueError("labels must have one entry per point")
            if self.labels.size and self.labels.min() < 0:
                raise ValueError("labels must be non-negative")

    def __len__(self) -> int:
        return len(self.xyz)

    def subset(self, idx) -> "PointCloud":
        return PointCloud(
            self.xyz[idx],
            self.features[idx],
            None if self.labels is None else self.labels[idx],
            self.offset.copy(),
        )

    def network_input(self) -> np.ndarray:
        """Per-point network input ``(x, y, z, features...)``."""
        return np.hstack([self.xyz, self.features])


@dataclass
class Block:
    cloud: PointCloud
    window: tuple[int, int]


def load_text(path) -> PointCloud:
    """Parse ``x y z r g b [label]`` lines; colors in 0..255 become [0, 1]."""
    rows, labels = [], []
    has_label = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) not in (6, 7):
                raise PointCloudFormatError(f"{path}:{lineno}: expected 6 or 7 fields, got {len(parts)}")
            if has_label is None:
                has_label = len(parts) == 7
            elif has_label != (len(parts) == 7):
                raise PointCloudFormatError(f"{path}:{lineno}: label column present on some lines only")
            try:
                rows.append([float(v) for v in parts[:6]])
                if has_label:
                    labels.append(int(parts[6]))
            except ValueError as exc:
                raise PointCloudFormatError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise PointCloudFormatError(f"{path}: no points")
    arr = np.array(rows)
    color = arr[:, 3:6] / 255.0
    if np.any(color < 0) or np.any(color > 1):
        raise PointCloudFormatError(f"{path}: colors must lie in 0..255")
    return PointCloud(arr[:, :3], color, np.array(labels) if has_label else None)


def save_text(cloud: PointCloud, path, extra_columns: dict[str, np.ndarray] | None = None) -> None:
    """Write the text format at 9 decimal digits; ``extra_columns`` are appended."""
    cols = [cloud.xyz + np.r_[cloud.offset, 0.0], cloud.features * 255.0]
    with open(path, "w") as fh:
        extra = list((extra_columns or {}).values())
        for i in range(len(cloud)):
            vals = [f"{v:.9f}" for c in cols for v in c[i]]
            if cloud.labels is not None:
                vals.append(str(int(cloud.labels[i])))
            for e in extra:
                vals.append(f"{e[i]:.9g}" if np.issubdtype(e.dtype, np.floating) else str(e[i]))
            fh.write(" ".join(vals) + "\n")


_MAGIC = b"PCV1"


def save_binary(cloud: PointCloud, path) -> None:
    """Little-endian ``PCV1``: u32 M, u32 f0, f64 payload, then u32 labels if present."""
    m, f0 = cloud.features.shape
    payload = np.hstack([cloud.xyz + np.r_[cloud.offset, 0.0], cloud.features]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", m, f0))
        fh.write(payload.tobytes())
        if cloud.labels is not None:
            fh.write(cloud.labels.astype("<u4").tobytes())


def load_binary(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise PointCloudFormatError(f"{path}: bad magic {raw[:4]!r}")
    m, f0 = struct.unpack_from("<II", raw, 4)
    if m == 0:
        raise PointCloudFormatError(f"{path}: no points")
    n = m * (3 + f0)
    data = np.frombuffer(raw, dtype="<f8", count=n, offset=12).reshape(m, 3 + f0)
    pos = 12 + 8 * n
    if len(raw) not in (pos, pos + 4 * m):
        raise PointCloudFormatError(f"{path}: truncated or oversized payload")
    labels = np.frombuffer(raw, dtype="<u4", count=m, offset=pos).astype(np.int64) if len(raw) > pos else None
    return PointCloud(data[:, :3].copy(), data[:, 3:].copy(), labels)


def slice_blocks(cloud: PointCloud, window: float = 1.0) -> list[Block]:
    """Partition points by non-overlapping ``window`` x ``window`` cells on the xy plane."""
    if window <= 0:
        raise ValueError("window must be positive")
    cells = np.floor(cloud.xyz[:, :2] / window).astype(np.int64)
    keys, inverse = np.unique(cells, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(len(keys) + 1))
    return [
        Block(cloud.subset(order[bounds[i]:bounds[i + 1]]), (int(k[0]), int(k[1])))
        for i, k in enumerate(keys)
    ]


def sample_points(block: Block | PointCloud, m_target: int, rng: np.random.Generator) -> PointCloud:
    cloud = block.cloud if isinstance(block, Block) else block
    replace_ = len(cloud) < m_target
    idx = rng.choice(len(cloud), size=m_target, replace=replace_)
    return cloud.subset(idx)


def augment(
    cloud: PointCloud,
    jitter_sigma: float,
    rng: np.random.Generator,
    angle: float | None = None,
) -> PointCloud:
    """Clipped Gaussian jitter on xyz, then a rotation about the z axis.

    The angle is drawn uniformly from [0, 2pi) unless given.
    """
    if jitter_sigma < 0:
        raise ValueError("jitter_sigma must be non-negative")
    xyz = cloud.xyz.copy()
    if jitter_sigma > 0:
        noise = rng.normal(0.0, jitter_sigma, size=xyz.shape)
        xyz += np.clip(noise, -3 * jitter_sigma, 3 * jitter_sigma)
    if angle is None:
        angle = rng.uniform(0.0, 2 * np.pi)
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return replace(cloud, xyz=xyz @ rot.T, features=cloud.features.copy())


def center_block(cloud: PointCloud) -> PointCloud:
    centroid = cloud.xyz[:, :2].mean(axis=0)
    xyz = cloud.xyz.copy()
    xyz[:, :2] -= centroid
    return replace(cloud, xyz=xyz, offset=cloud.offset + centroid)
