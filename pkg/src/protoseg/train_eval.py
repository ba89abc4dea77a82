"""Episode loss, pre-training, episodic training, baselines and mean-IoU.

Every method shares one routing function, :func:`episode_logits`:

============  ==========  ==========================
method        attention   prototypes / inference
============  ==========  ==========================
full          SAN         multi-prototypes, label propagation
MPTI          linear      multi-prototypes, label propagation
AttProtoNet   SAN         class means, negative squared distance
ProtoNet      linear      class means, negative squared distance
FT            n/a         fine-tuned pre-training head
============  ==========  ==========================
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .embednet import EmbedConfig, embed, extract, init_params, param_group, pretrain_head
from .episodes import BlockIndex, Episode, EpisodeError, sample_train_episode
from .numerics import SolverError, Tensor
from .pointcloud import PointCloud, augment
from .prototypes import build_prototype_set, class_means, protonet_predict, support_point_labels
from .transduction import AffinityGraph, GraphError, label_matrix, propagate_closed_form, query_logits

log = logging.getLogger(__name__)

METHODS = ("full", "MPTI", "AttProtoNet", "ProtoNet", "FT")


@dataclass(frozen=True)
class Route:
    attention: bool
    transductive: bool


ROUTES = {
    "full": Route(attention=True, transductive=True),
    "MPTI": Route(attention=False, transductive=True),
    "AttProtoNet": Route(attention=True, transductive=False),
    "ProtoNet": Route(attention=False, transductive=False),
}


@dataclass
class TrainConfig:
    """Optimisation and inference settings.

    Defaults are the full-scale schedule; :meth:`desk` gives the shortened
    one used on the synthetic benchmark.
    """

    method: str = "full"
    n_way: int = 2
    k_shot: int = 1
    n_queries: int = 1
    n_prototypes: int = 10
    k_graph: int = 10
    sigma: float = 1.0
    alpha: float = 0.99
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 32
    pretrain_epochs: int = 100
    lr_extractor: float = 1e-4
    lr_adaptive: float = 1e-3
    halving_interval: int = 5000
    iterations: int = 1500
    jitter_sigma: float = 0.01
    ft_steps: int = 50
    ft_lr: float = 1e-3
    embed: EmbedConfig = field(default_factory=EmbedConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if min(self.lr_extractor, self.lr_adaptive, self.pretrain_lr, self.ft_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if self.halving_interval < 1:
            raise ValueError("halving_interval must be >= 1")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.sigma <= 0 or self.k_graph < 1 or self.n_prototypes < 1:
            raise ValueError("sigma, k_graph and n_prototypes must be positive")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        # small batches over more epochs: the synthetic train split has only ~150 blocks
        base = dict(halving_interval=500, iterations=1500, pretrain_batch=2, pretrain_epochs=30)
        base.update(overrides)
        return cls(**base)

    @property
    def route(self) -> Route:
        return ROUTES[self.method]

    def embed_config(self) -> EmbedConfig:
        return replace(self.embed, use_attention=self.route.attention)


def learning_rates(config: TrainConfig, iteration: int) -> dict[str, float]:
    """Per-group rates at a 0-based iteration, halved every ``halving_interval``."""
    factor = 0.5 ** (iteration // config.halving_interval)
    return {"extractor": config.lr_extractor * factor, "adaptive": config.lr_adaptive * factor}


cross_entropy = nx.cross_entropy


# -- forward pass over one episode ----------------------------------------------

@dataclass
class EpisodeOutput:
    logits: list[Tensor]
    prototypes: Tensor
    prototype_labels: np.ndarray
    graph: AffinityGraph | None = None


def episode_logits(
    params: Mapping,
    support: Sequence[tuple[PointCloud, np.ndarray]],
    support_classes: Sequence[int],
    queries: Sequence[PointCloud],
    config: TrainConfig,
) -> EpisodeOutput:
    """Query logits for every non-FT method.

    ``support`` pairs each cloud with its binary mask, ``support_classes``
    gives each shot's episode-local class (1..N).
    """
    route = config.route
    ecfg = config.embed_config()
    n_classes = max(support_classes) + 1
    sup = nx.concat([embed(c.network_input(), params, ecfg) for c, _ in support], axis=0)
    qry = [embed(q.network_input(), params, ecfg) for q in queries]
    labels = support_point_labels([m for _, m in support], support_classes)
    if not route.transductive:
        means = class_means(sup, labels, n_classes)
        return EpisodeOutput([protonet_predict(q, means) for q in qry], means, np.arange(n_classes))
    protos = build_prototype_set(sup, labels, n_classes, config.n_prototypes)
    graph = AffinityGraph.build(nx.concat([protos.vectors, *qry], axis=0), config.k_graph, config.sigma)
    m_points = qry[0].shape[0]
    if any(q.shape[0] != m_points for q in qry):
        raise EpisodeError("query clouds must have equal point counts")
    y = label_matrix(protos.labels, len(qry) * m_points, n_classes)
    z = propagate_closed_form(graph.S, y, config.alpha)
    return EpisodeOutput(query_logits(z, len(protos), len(qry), m_points), protos.vectors, protos.labels, graph)


def episode_loss(outputs: Sequence[Tensor], labels: Sequence[np.ndarray]) -> Tensor:
    """Mean cross-entropy over all query points of all query clouds."""
    if len(outputs) != len(labels):
        raise nx.ShapeError("one label vector per query cloud required")
    return nx.cross_entropy(nx.concat(list(outputs), axis=0), np.concatenate(labels))


def _augmented(episode: Episode, jitter: float, rng: np.random.Generator):
    support = [(augment(c, jitter, rng), m) for c, m in episode.support]
    queries = [augment(c, jitter, rng) for c, _ in episode.query]
    return support, queries


def episode_gradients(
    params: Mapping[str, np.ndarray],
    episode: Episode,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and gradients for one episode; augments when ``rng`` is given."""
    if rng is None:
        support, queries = episode.support, [c for c, _ in episode.query]
    else:
        support, queries = _augmented(episode, config.jitter_sigma, rng)
    tape = nx.Tape()
    tp = {k: tape.parameter(v, k) for k, v in params.items() if param_group(k) != "head"}
    out = episode_logits(tp, support, episode.support_classes, queries, config)
    loss = episode_loss(out.logits, [lab for _, lab in episode.query])
    return float(loss.data), nx.backward(tape, loss)


# -- training loops -----------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    losses: list[float]
    skipped: list[tuple[int, str]]


SKIPPABLE = (EpisodeError, SolverError, GraphError, np.linalg.LinAlgError)


def train_episodic(
    params: Mapping[str, np.ndarray],
    index: BlockIndex,
    config: TrainConfig,
    rng: np.random.Generator,
    iterations: int | None = None,
    callback: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """One random episode per iteration, two Adam parameter groups.

    Episodes that cannot be sampled or solved are skipped and logged.
    """
    if config.method not in ROUTES:
        raise ValueError(f"episodic training does not apply to method {config.method!r}")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    state = nx.AdamState()
    losses: list[float] = []
    skipped: list[tuple[int, str]] = []
    total = config.iterations if iterations is None else iterations
    for it in range(total):
        rates = learning_rates(config, it)
        try:
            episode = sample_train_episode(index, config.n_way, config.k_shot, config.n_queries, rng)
            loss, grads = episode_gradients(params, episode, config, rng)
        except SKIPPABLE as exc:
            log.warning("iteration %d skipped: %s", it, exc)
            skipped.append((it, str(exc)))
            continue
        lr = {k: rates[param_group(k)] for k in grads}
        params, state = nx.adam_step(params, grads, state, lr)
        losses.append(loss)
        if callback is not None:
            callback(it, loss)
    return TrainResult(params, losses, skipped)


def pretrain_labels(labels: np.ndarray, train_classes: Sequence[int]) -> np.ndarray:
    """Sorted train classes map to ``1..C``; everything else is background 0."""
    out = np.zeros(len(labels), dtype=np.int64)
    for i, c in enumerate(sorted(train_classes)):
        out[labels == c] = i + 1
    return out


@dataclass
class PretrainResult:
    params: dict[str, np.ndarray]
    epoch_start_losses: list[float]
    final_loss: float


def _segmentation_loss(params, cloud: PointCloud, target: np.ndarray, ecfg: EmbedConfig) -> Tensor:
    _, f_sem = extract(cloud.network_input(), params, ecfg)
    return nx.cross_entropy(pretrain_head(f_sem, params, ecfg.slope), target)


def pretrain(
    blocks: Sequence[PointCloud],
    train_classes: Sequence[int],
    config: TrainConfig,
    rng: np.random.Generator,
    params: Mapping[str, np.ndarray] | None = None,
    probe_size: int = 32,
) -> PretrainResult:
    """Extractor plus 3-layer head trained with per-point cross-entropy.

    Mini-batches of ``pretrain_batch`` blocks; gradients are averaged over
    the batch. The loss on a fixed probe subset (no augmentation) is
    recorded at the start of every epoch and once at the end.
    """
    if not blocks:
        raise ValueError("pre-training needs at least one block")
    ecfg = config.embed
    if params is None:
        params = init_params(ecfg, rng, n_head_classes=len(train_classes) + 1)
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    targets = [pretrain_labels(b.labels, train_classes) for b in blocks]
    probe = list(range(min(probe_size, len(blocks))))
    trainable = [k for k in params if param_group(k) in ("extractor", "head")]

    def probe_loss(p):
        return float(np.mean([_segmentation_loss(p, blocks[i], targets[i], ecfg).data for i in probe]))

    state = nx.AdamState()
    starts = []
    for _ in range(config.pretrain_epochs):
        starts.append(probe_loss(params))
        order = rng.permutation(len(blocks))
        for lo in range(0, len(order), config.pretrain_batch):
            batch = order[lo : lo + config.pretrain_batch]
            acc = {k: np.zeros_like(params[k]) for k in trainable}
            for b in batch:
                cloud = augment(blocks[b], config.jitter_sigma, rng)
                tape = nx.Tape()
                tp = {k: tape.parameter(params[k], k) for k in trainable}
                grads = nx.backward(tape, _segmentation_loss(tp, cloud, targets[b], ecfg))
                for k in trainable:
                    acc[k] += grads[k]
            acc = {k: g / len(batch) for k, g in acc.items()}
            params, state = nx.adam_step(params, acc, state, config.pretrain_lr)
    return PretrainResult(params, starts, probe_loss(params))


# -- fine-tuning baseline --------------------------------------------------------------

HEAD_PREFIX = "head."


@dataclass
class FineTuneResult:
    predictions: list[np.ndarray]
    support_losses: list[float]
    params: dict[str, np.ndarray]


def finetune_baseline(
    params: Mapping[str, np.ndarray],
    episode: Episode,
    steps: int,
    lr: float,
    config: TrainConfig | None = None,
) -> FineTuneResult:
    """Fit only the head on the support points, then label the queries.

    Episode class ``c`` is read from head output column ``c``: the last head
    layer is cut to its first ``N + 1`` columns before fitting. The extractor
    runs once without recording.
    """
    config = config or TrainConfig(method="FT")
    ecfg = config.embed
    n_out = episode.n_way + 1
    head = {k: np.array(v) for k, v in params.items() if k.startswith(HEAD_PREFIX)}
    if not head:
        raise ValueError("the checkpoint has no pre-training head")
    last = max(int(k.split(".")[1]) for k in head)
    if head[f"head.{last}.b"].shape[0] < n_out:
        raise ValueError(f"head has {head[f'head.{last}.b'].shape[0]} outputs, episode needs {n_out}")
    head[f"head.{last}.w"] = head[f"head.{last}.w"][:, :n_out].copy()
    head[f"head.{last}.b"] = head[f"head.{last}.b"][:n_out].copy()
    frozen = {k: v for k, v in params.items() if not k.startswith(HEAD_PREFIX)}
    sup_feat = nx.concat([extract(c.network_input(), frozen, ecfg)[1] for c, _ in episode.support], axis=0)
    sup_lab = support_point_labels([m for _, m in episode.support], episode.support_classes)
    state = nx.AdamState()
    losses = []
    for _ in range(steps):
        tape = nx.Tape()
        tp = {k: tape.parameter(v, k) for k, v in head.items()}
        loss = nx.cross_entropy(pretrain_head(sup_feat, tp, ecfg.slope), sup_lab)
        losses.append(float(loss.data))
        head, state = nx.adam_step(head, nx.backward(tape, loss), state, lr)
    preds = []
    for cloud, _ in episode.query:
        f_sem = extract(cloud.network_input(), frozen, ecfg)[1]
        preds.append(pretrain_head(f_sem, head, ecfg.slope).data.argmax(axis=1))
    return FineTuneResult(preds, losses, {**frozen, **head})


# -- evaluation ------------------------------------------------------------------------------

@dataclass
class MetricsReport:
    """Per-class intersection and union counts over global class ids."""

    intersection: dict[int, int] = field(default_factory=dict)
    union: dict[int, int] = field(default_factory=dict)
    episodes: int = 0
    seconds: float = 0.0

    def add(self, pred: np.ndarray, gt: np.ndarray, class_map: Sequence[int]) -> None:
        """Accumulate one query cloud; episode class ``i + 1`` is global ``class_map[i]``."""
        pred, gt = np.asarray(pred), np.asarray(gt)
        for i, g in enumerate(class_map):
            p, t = pred == i + 1, gt == i + 1
            self.intersection[g] = self.intersection.get(g, 0) + int(np.sum(p & t))
            self.union[g] = self.union.get(g, 0) + int(np.sum(p | t))

    def merge(self, other: "MetricsReport") -> "MetricsReport":
        out = MetricsReport(dict(self.intersection), dict(self.union),
                            self.episodes + other.episodes, self.seconds + other.seconds)
        for g in other.union:
            out.intersection[g] = out.intersection.get(g, 0) + other.intersection[g]
            out.union[g] = out.union.get(g, 0) + other.union[g]
        return out

    def per_class_iou(self) -> dict[int, float]:
        return {g: self.intersection[g] / self.union[g] for g in sorted(self.union) if self.union[g] > 0}

    @property
    def mean_iou(self) -> float:
        ious = self.per_class_iou()
        return float(np.mean(list(ious.values()))) if ious else 0.0

    def table(self) -> str:
        lines = [f"{'class':>6}  {'IoU':>8}  {'inter':>8}  {'union':>8}"]
        for g, v in self.per_class_iou().items():
            lines.append(f"{g:>6}  {v:8.4f}  {self.intersection[g]:>8}  {self.union[g]:>8}")
        lines.append(f"{'mean':>6}  {self.mean_iou:8.4f}")
        lines.append(f"episodes: {self.episodes}")
        return "\n".join(lines) + "\n"

    def key_values(self, with_seconds: bool = False) -> str:
        lines = [f"iou.{g} = {v:.10f}" for g, v in self.per_class_iou().items()]
        lines.append(f"mean_iou = {self.mean_iou:.10f}")
        lines.append(f"episodes = {self.episodes}")
        if with_seconds:
            lines.append(f"seconds = {self.seconds:.3f}")
        return "\n".join(lines) + "\n"


def predict_episode(params: Mapping, episode: Episode, config: TrainConfig) -> list[np.ndarray]:
    """Episode-local label per query point (argmax of the class probabilities)."""
    if config.method == "FT":
        return finetune_baseline(params, episode, config.ft_steps, config.ft_lr, config).predictions
    out = episode_logits(params, episode.support, episode.support_classes, [c for c, _ in episode.query], config)
    return [nx.softmax_rows(z).data.argmax(axis=1) for z in out.logits]


def evaluate(params: Mapping, episodes: Iterable[Episode], config: TrainConfig) -> MetricsReport:
    """Micro-averaged IoU per global class over all episodes; background excluded."""
    report = MetricsReport()
    start = time.perf_counter()
    for episode in episodes:
        for pred, (_, gt) in zip(predict_episode(params, episode, config), episode.query):
            report.add(pred, gt, episode.class_map)
        report.episodes += 1
    report.seconds = time.perf_counter() - start
    return report
