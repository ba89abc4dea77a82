"""Attention-aware multi-level point embedding.

The extractor is two EdgeConv blocks followed by a point-wise layer; the
first block's output is the local geometric level. Semantic features pass
through a residual self-attention block (or, for the ablations, a plain
linear mapper), and a small MLP metric learner consumes the geometric and
attended levels. The embedding is the concatenation of the geometric,
attended and metric levels.

Parameters are a flat ``dict[str, ndarray]``. Every forward function also
accepts the same dict with :class:`~protoseg.numerics.Tensor` values on a
tape, which is how gradients are obtained.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .numerics._kernels import select_k_smallest


@dataclass
class EmbedConfig:
    in_dim: int = 6
    knn_k: int = 20
    edgeconv1: list[int] = field(default_factory=lambda: [32, 32])
    edgeconv2: list[int] = field(default_factory=lambda: [64, 64])
    d_sem: int = 64
    d_att: int | None = None
    metric: list[int] = field(default_factory=lambda: [64, 64])
    slope: float = 0.2
    use_attention: bool = True

    def __post_init__(self):
        if self.d_att is None:
            self.d_att = self.d_sem
        widths = [self.in_dim, self.d_sem, self.d_att, *self.edgeconv1, *self.edgeconv2, *self.metric]
        if min(widths) < 1 or self.knn_k < 1:
            raise ValueError("all widths and knn_k must be >= 1")

    @property
    def out_dim(self) -> int:
        return self.edgeconv1[-1] + self.d_sem + self.metric[-1]


EXTRACTOR_PREFIXES = ("ec1.", "ec2.", "sem.")
ADAPTIVE_PREFIXES = ("san.", "mapper.", "metric.")
HEAD_PREFIX = "head."


def param_group(name: str) -> str:
    if name.startswith(EXTRACTOR_PREFIXES):
        return "extractor"
    if name.startswith(ADAPTIVE_PREFIXES):
        return "adaptive"
    if name.startswith(HEAD_PREFIX):
        return "head"
    raise KeyError(name)


def _dense(rng, n_in, n_out):
    bound = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, size=(n_in, n_out))


def _mlp_params(prefix, rng, n_in, widths, first_doubled=False):
    out = {}
    for i, w in enumerate(widths):
        fan_in = 2 * n_in if (first_doubled and i == 0) else n_in
        out[f"{prefix}.{i}.w"] = _dense(rng, fan_in, w)
        out[f"{prefix}.{i}.b"] = np.zeros(w)
        n_in = w
    return out


def init_params(
    config: EmbedConfig,
    rng: np.random.Generator,
    n_head_classes: int | None = None,
    head_widths: tuple[int, int] = (64, 64),
) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases.

    SAN and the linear mapper are both created so a checkpoint can serve
    every method; ``n_head_classes`` adds the 3-layer pre-training head.
    """
    p = {}
    p.update(_mlp_params("ec1", rng, config.in_dim, config.edgeconv1, first_doubled=True))
    p.update(_mlp_params("ec2", rng, config.edgeconv1[-1], config.edgeconv2, first_doubled=True))
    sem_in = config.edgeconv1[-1] + config.edgeconv2[-1]
    p["sem.w"] = _dense(rng, sem_in, config.d_sem)
    p["sem.b"] = np.zeros(config.d_sem)
    p["san.theta"] = _dense(rng, config.d_sem, config.d_att)
    p["san.phi"] = _dense(rng, config.d_sem, config.d_att)
    p["san.psi"] = _dense(rng, config.d_sem, config.d_sem)
    p["mapper.w"] = _dense(rng, config.d_sem, config.d_sem)
    p.update(_mlp_params("metric", rng, config.edgeconv1[-1] + config.d_sem, config.metric))
    if n_head_classes is not None:
        p.update(_mlp_params("head", rng, config.d_sem, [*head_widths, n_head_classes]))
    return p


def knn_indices(features: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest other rows, nearest first.

    Squared Euclidean distance; equal distances resolve to the lower index.
    ``k`` is clamped to ``M - 1``.
    """
    x = np.asarray(features, dtype=np.float64)
    m = len(x)
    if m < 2:
        raise ValueError("cannot build neighborhood of a single point")
    k = min(k, m - 1)
    sq = np.einsum("ij,ij->i", x, x)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    d[np.arange(m), np.arange(m)] = np.inf
    if k == m - 1:
        return np.argsort(d, axis=1, kind="stable")[:, :k]
    kth = np.partition(d, k - 1, axis=1)[:, k - 1]
    return select_k_smallest(d, kth, k)


def _linear(x: Tensor, w, b=None) -> Tensor:
    y = nx.matmul(x, w)
    return y if b is None else nx.add(y, b)


def edgeconv(x: Tensor, layers: list[tuple], k: int, slope: float = 0.2, idx: np.ndarray | None = None) -> Tensor:
    """EdgeConv: shared MLP on ``concat(x_i, x_j - x_i)`` then max over neighbours.

    ``layers`` is a list of ``(weight, bias)``; the first weight has
    ``2 * f_in`` rows. Every layer is followed by a leaky ReLU.

    Two exact rewrites keep the per-edge work small: the first product is
    split as ``x_i (W_a - W_b) + x_j W_b`` so it runs per point, and since
    ``max_j leaky(h_j + b) == leaky(max_j h_j + b)`` the last layer's bias and
    activation are applied after pooling.
    """
    x = nx.as_tensor(x)
    m, f = x.shape
    if idx is None:
        idx = knn_indices(x.data, k)
    kk = idx.shape[1]
    w0, b0 = layers[0]
    if nx.as_tensor(w0).shape[0] != 2 * f:
        raise nx.ShapeError(f"first EdgeConv weight needs {2 * f} rows, has {nx.as_tensor(w0).shape[0]}")
    top = nx.take(w0, np.arange(f))
    bottom = nx.take(w0, np.arange(f, 2 * f))
    if len(layers) == 1:
        centre = nx.matmul(x, nx.sub(top, bottom))
        pooled = nx.max_axis(nx.take(nx.matmul(x, bottom), idx), axis=1)
        return nx.leaky_relu(nx.add(nx.add(pooled, centre), b0), slope)
    centre = _linear(x, nx.sub(top, bottom), b0)
    h = nx.leaky_relu(nx.gather_add(centre, nx.matmul(x, bottom), idx), slope)
    h = nx.reshape(h, (m * kk, -1))
    for w, b in layers[1:-1]:
        h = nx.leaky_relu(_linear(h, w, b), slope)
    w_last, b_last = layers[-1]
    pooled = nx.max_axis(nx.reshape(nx.matmul(h, w_last), (m, kk, -1)), axis=1)
    return nx.leaky_relu(nx.add(pooled, b_last), slope)


def san(F: Tensor, theta, phi, psi) -> Tensor:
    """Residual self-attention: ``F + softmax_rows((F theta)(F phi)^T) (F psi)``."""
    F = nx.as_tensor(F)
    q = nx.matmul(F, theta)
    kt = nx.matmul(F, phi)
    if q.shape[1] != kt.shape[1]:
        raise nx.ShapeError("theta and phi must share the attention width")
    att = nx.softmax_rows(nx.matmul(q, nx.transpose(kt)))
    return nx.add(F, nx.matmul(att, nx.matmul(F, psi)))


def _layers(params, prefix, n):
    return [(params[f"{prefix}.{i}.w"], params[f"{prefix}.{i}.b"]) for i in range(n)]


def _count(params, prefix):
    return sum(1 for k in params if k.startswith(prefix + ".") and k.endswith(".w"))


def extract(x, params: Mapping, config: EmbedConfig) -> tuple[Tensor, Tensor]:
    """Feature extractor; returns ``(f_geom, f_sem)``."""
    x = nx.as_tensor(x)
    f_geom = edgeconv(x, _layers(params, "ec1", _count(params, "ec1")), config.knn_k, config.slope)
    f2 = edgeconv(f_geom, _layers(params, "ec2", _count(params, "ec2")), config.knn_k, config.slope)
    f_sem = nx.leaky_relu(_linear(nx.concat([f_geom, f2], axis=1), params["sem.w"], params["sem.b"]), config.slope)
    return f_geom, f_sem


def embed_levels(x, params: Mapping, config: EmbedConfig) -> dict[str, Tensor]:
    f_geom, f_sem = extract(x, params, config)
    if config.use_attention:
        f_att = san(f_sem, params["san.theta"], params["san.phi"], params["san.psi"])
    else:
        f_att = nx.matmul(f_sem, params["mapper.w"])
    h = nx.concat([f_geom, f_att], axis=1)
    layers = _layers(params, "metric", _count(params, "metric"))
    for i, (w, b) in enumerate(layers):
        h = _linear(h, w, b)
        if i < len(layers) - 1:
            h = nx.leaky_relu(h, config.slope)
    return {"geom": f_geom, "sem": f_sem, "att": f_att, "metric": h}


def embed(x, params: Mapping, config: EmbedConfig) -> Tensor:
    """Per-point embedding ``concat(f_geom, f_att, f_metric)`` of width ``config.out_dim``."""
    x = nx.as_tensor(x)
    if x.shape[0] < 2:
        raise ValueError("embedding needs at least two points")
    lv = embed_levels(x, params, config)
    return nx.concat([lv["geom"], lv["att"], lv["metric"]], axis=1)


def pretrain_head(f_sem, params: Mapping, slope: float = 0.2) -> Tensor:
    """Three point-wise layers; leaky ReLU after the first two, last one linear."""
    h = nx.as_tensor(f_sem)
    layers = _layers(params, "head", _count(params, "head"))
    for i, (w, b) in enumerate(layers):
        h = _linear(h, w, b)
        if i < len(layers) - 1:
            h = nx.leaky_relu(h, slope)
    return h


def config_from_params(params: Mapping[str, np.ndarray], **overrides) -> EmbedConfig:
    """Recover layer widths from parameter shapes."""
    def widths(prefix):
        return [params[f"{prefix}.{i}.w"].shape[1] for i in range(_count(params, prefix))]

    kw = dict(
        in_dim=params["ec1.0.w"].shape[0] // 2,
        edgeconv1=widths("ec1"),
        edgeconv2=widths("ec2"),
        d_sem=params["sem.w"].shape[1],
        d_att=params["san.theta"].shape[1],
        metric=widths("metric"),
    )
    kw.update(overrides)
    return EmbedConfig(**kw)


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"ATTMPTI1"


def save_checkpoint(params: Mapping[str, np.ndarray], path) -> None:
    """Binary checkpoint: magic, u32 count, then per tensor
    u32 name length, UTF-8 name, u32 rank, u64 dims, little-endian f64 data."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.asarray(params[name], dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {raw[:8]!r})")
    (count,) = struct.unpack_from("<I", raw, 8)
    pos = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", raw, pos)
        pos += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * n
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return out
