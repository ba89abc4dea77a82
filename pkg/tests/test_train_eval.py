import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protoseg import numerics as nx
from protoseg import train_eval
from protoseg.embednet import EmbedConfig, embed, init_params, load_checkpoint, save_checkpoint
from protoseg.episodes import BlockIndex, prepare_blocks
from protoseg.synthetic import SyntheticSceneSpec, generate_scenes
from protoseg.train_eval import (
    MetricsReport,
    TrainConfig,
    episode_gradients,
    episode_logits,
    episode_loss,
    evaluate,
    finetune_baseline,
    learning_rates,
    pretrain,
    pretrain_labels,
    train_episodic,
)

from conftest import TINY_EMBED, numeric_grad, rel_err, tiny_episode

TINY = EmbedConfig(**TINY_EMBED)


def _cfg(method="full", **kw):
    return TrainConfig(method=method, n_prototypes=2, k_graph=5, embed=TINY, **kw)


@pytest.fixture(scope="module")
def synth():
    spec = SyntheticSceneSpec(extent=2.0, points_per_instance=120, floor_points_per_cell=60)
    rng = np.random.default_rng(0)
    blocks = prepare_blocks(generate_scenes(spec, 6, rng), 64, rng)
    split = spec.split()
    return blocks, split


# -- loss ------------------------------------------------------------------------------

def test_cross_entropy_half_probability():
    loss = train_eval.cross_entropy(nx.Tensor([[0.0, 0.0]]), np.array([1]))
    assert float(loss.data) == pytest.approx(np.log(2), abs=1e-12)


def test_cross_entropy_vanishes_with_margin():
    losses = [float(train_eval.cross_entropy(nx.Tensor([[m, 0.0]]), np.array([0])).data) for m in (1, 10, 100)]
    assert losses[0] > losses[1] > losses[2] >= 0 and losses[2] < 1e-40


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_cross_entropy_matches_naive(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(0, 5, size=(int(rng.integers(1, 10)), int(rng.integers(2, 6))))
    y = rng.integers(0, z.shape[1], len(z))
    naive = -np.mean(np.log((np.exp(z) / np.exp(z).sum(1, keepdims=True))[np.arange(len(z)), y]))
    got = float(train_eval.cross_entropy(nx.Tensor(z), y).data)
    assert got >= 0
    assert got == pytest.approx(naive, abs=1e-10)


# -- routing -----------------------------------------------------------------------------

@pytest.mark.parametrize("method", ["full", "MPTI", "AttProtoNet", "ProtoNet"])
def test_logits_shape(method):
    ep = tiny_episode(0)
    out = episode_logits(init_params(TINY, np.random.default_rng(0)), ep.support, ep.support_classes,
                         [c for c, _ in ep.query], _cfg(method))
    assert len(out.logits) == 1 and out.logits[0].shape == (32, 3)
    assert (out.graph is not None) == (method in ("full", "MPTI"))


def test_protonet_never_builds_graph(monkeypatch):
    def boom(*a, **k):
        raise AssertionError("graph built")

    monkeypatch.setattr(train_eval.AffinityGraph, "build", boom)
    ep = tiny_episode(1)
    episode_gradients(init_params(TINY, np.random.default_rng(1)), ep, _cfg("ProtoNet"))
    episode_gradients(init_params(TINY, np.random.default_rng(1)), ep, _cfg("AttProtoNet"))
    with pytest.raises(AssertionError):
        episode_gradients(init_params(TINY, np.random.default_rng(1)), ep, _cfg("full"))


@pytest.mark.parametrize("attention", [True, False])
def test_method_lattice_n1_prototypes(attention):
    # with n = 1 the transductive route's prototypes are the class means of the inductive route
    ep = tiny_episode(2)
    params = init_params(TINY, np.random.default_rng(2))
    trans, ind = ("full", "AttProtoNet") if attention else ("MPTI", "ProtoNet")
    one = TrainConfig(method=trans, n_prototypes=1, k_graph=5, embed=TINY)
    a = episode_logits(params, ep.support, ep.support_classes, [c for c, _ in ep.query], one)
    b = episode_logits(params, ep.support, ep.support_classes, [c for c, _ in ep.query], _cfg(ind))
    np.testing.assert_array_equal(a.prototypes.data, b.prototypes.data)


def test_mpti_equals_full_with_identity_attention_swap():
    # the linear mapper with identity weights and SAN with zero value weights produce the same features
    ep = tiny_episode(3)
    params = init_params(TINY, np.random.default_rng(3))
    params["mapper.w"] = np.eye(TINY.d_sem)
    params["san.psi"] = np.zeros_like(params["san.psi"])
    qs = [c for c, _ in ep.query]
    a = episode_logits(params, ep.support, ep.support_classes, qs, _cfg("full")).logits[0].data
    b = episode_logits(params, ep.support, ep.support_classes, qs, _cfg("MPTI")).logits[0].data
    np.testing.assert_array_equal(a, b)


def test_lr_schedule_halves():
    cfg = TrainConfig()
    assert learning_rates(cfg, 0) == {"extractor": 1e-4, "adaptive": 1e-3}
    assert learning_rates(cfg, 4999) == learning_rates(cfg, 0)
    assert learning_rates(cfg, 5000) == {"extractor": 5e-5, "adaptive": 5e-4}
    assert learning_rates(TrainConfig.desk(), 500)["adaptive"] == 5e-4


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(method="nope")
    with pytest.raises(ValueError):
        TrainConfig(lr_extractor=0)
    with pytest.raises(ValueError):
        TrainConfig(alpha=1.0)


# -- gradients --------------------------------------------------------------------------------

@pytest.mark.parametrize("method", ["full", "ProtoNet"])
def test_episode_gradient_metric_weight(method):
    ep = tiny_episode(4)
    cfg = _cfg(method)
    params = init_params(TINY, np.random.default_rng(4))
    _, grads = episode_gradients(params, ep, cfg)
    name = "metric.1.w"

    def f(w):
        p = {**params, name: w}
        out = episode_logits(p, ep.support, ep.support_classes, [c for c, _ in ep.query], cfg)
        return float(episode_loss(out.logits, [lab for _, lab in ep.query]).data)

    assert rel_err(grads[name], numeric_grad(f, params[name])) <= 1e-3


def test_head_parameters_are_not_trained():
    ep = tiny_episode(5)
    params = init_params(TINY, np.random.default_rng(5), n_head_classes=3, head_widths=(4, 4))
    _, grads = episode_gradients(params, ep, _cfg())
    assert not any(k.startswith("head.") for k in grads)


# -- training loops ----------------------------------------------------------------------------

def test_train_episodic_deterministic_and_skips(synth):
    blocks, split = synth
    index = BlockIndex.build(blocks, split.train, 10)
    params = init_params(TINY, np.random.default_rng(0))
    a = train_episodic(params, index, _cfg(iterations=3), np.random.default_rng(1))
    b = train_episodic(params, index, _cfg(iterations=3), np.random.default_rng(1))
    assert a.losses == b.losses and len(a.losses) + len(a.skipped) == 3
    empty = BlockIndex(blocks, {c: [] for c in split.train}, 10)
    res = train_episodic(params, empty, _cfg(iterations=2), np.random.default_rng(1))
    assert res.losses == [] and len(res.skipped) == 2


def test_train_episodic_rejects_ft(synth):
    blocks, split = synth
    with pytest.raises(ValueError):
        train_episodic({}, BlockIndex.build(blocks, split.train, 10), _cfg("FT"), np.random.default_rng(0))


def test_pretrain_labels():
    np.testing.assert_array_equal(pretrain_labels(np.array([0, 5, 3, 9, 5]), [5, 3]), [0, 2, 1, 0, 2])


def test_pretrain_loss_drops_and_is_deterministic(synth):
    blocks, split = synth
    train_blocks = [b for b in blocks if np.isin(b.labels, list(split.train)).any()]
    drops = []
    for seed in range(3):
        cfg = TrainConfig.desk(pretrain_batch=2, pretrain_epochs=2, pretrain_lr=3e-3, embed=TINY)
        r = pretrain(train_blocks, sorted(split.train), cfg, np.random.default_rng(seed))
        drops.append(r.epoch_start_losses[0] - r.epoch_start_losses[1])
        if seed == 0:
            again = pretrain(train_blocks, sorted(split.train), cfg, np.random.default_rng(0))
            assert again.final_loss == r.final_loss
    assert np.median(drops) > 0


def test_pretrain_rejects_empty():
    with pytest.raises(ValueError):
        pretrain([], [1], TrainConfig(), np.random.default_rng(0))


def test_checkpoint_preserves_forward(tmp_path, rng):
    params = init_params(TINY, rng)
    save_checkpoint(params, tmp_path / "c.ckpt")
    x = rng.normal(size=(20, 6))
    np.testing.assert_array_equal(embed(x, load_checkpoint(tmp_path / "c.ckpt"), TINY).data, embed(x, params, TINY).data)


# -- fine-tuning baseline ---------------------------------------------------------------------

def _ft_params(seed):
    return init_params(TINY, np.random.default_rng(seed), n_head_classes=7, head_widths=(8, 8))


def test_ft_zero_steps_is_restricted_head_argmax():
    ep = tiny_episode(6)
    params = _ft_params(6)
    res = finetune_baseline(params, ep, 0, 1e-3, _cfg("FT"))
    f_sem = train_eval.extract(ep.query[0][0].network_input(), params, TINY)[1]
    logits = train_eval.pretrain_head(f_sem, params, TINY.slope).data[:, :3]
    np.testing.assert_array_equal(res.predictions[0], logits.argmax(1))


def test_ft_freezes_extractor_and_lowers_loss():
    decreasing = []
    for seed in range(3):
        ep = tiny_episode(10 + seed)
        params = _ft_params(seed)
        res = finetune_baseline(params, ep, 6, 1e-2, _cfg("FT"))
        for k, v in params.items():
            if not k.startswith("head."):
                assert res.params[k] is v or np.array_equal(res.params[k], v)
        decreasing.append(all(np.diff(res.support_losses[:6]) < 0))
    assert np.median(decreasing) == 1


def test_ft_needs_head():
    with pytest.raises(ValueError):
        finetune_baseline(init_params(TINY, np.random.default_rng(0)), tiny_episode(0), 1, 1e-3, _cfg("FT"))


# -- metrics --------------------------------------------------------------------------------------

def test_iou_perfect_and_hand_example():
    r = MetricsReport()
    r.add(np.array([1, 1, 2, 2]), np.array([1, 1, 2, 2]), (4, 9))
    assert r.mean_iou == 1.0
    r = MetricsReport()
    r.add(np.array([1, 1, 1, 1]), np.array([1, 1, 2, 2]), (4, 9))
    assert r.per_class_iou() == {4: 0.5, 9: 0.0}
    assert r.mean_iou == 0.25


def confusion_oracle(episodes):
    conf: dict[int, np.ndarray] = {}
    for pred, gt, cmap in episodes:
        n = len(cmap) + 1
        cm = np.zeros((n, n), int)
        np.add.at(cm, (gt, pred), 1)
        for i, g in enumerate(cmap):
            c = i + 1
            tp, fp, fn = cm[c, c], cm[:, c].sum() - cm[c, c], cm[c, :].sum() - cm[c, c]
            conf.setdefault(g, np.zeros(2, int))
            conf[g] += [tp, tp + fp + fn]
    ious = [conf[g][0] / conf[g][1] for g in sorted(conf) if conf[g][1] > 0]
    return float(np.mean(ious)) if ious else 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_iou_matches_confusion_oracle_and_is_order_free(seed):
    rng = np.random.default_rng(seed)
    eps = []
    for _ in range(int(rng.integers(1, 6))):
        cmap = tuple(int(c) for c in rng.choice(6, 2, replace=False) + 1)
        m = int(rng.integers(1, 40))
        eps.append((rng.integers(0, 3, m), rng.integers(0, 3, m), cmap))
    r = MetricsReport()
    for p, g, c in eps:
        r.add(p, g, c)
    assert r.mean_iou == confusion_oracle(eps)
    assert all(0 <= v <= 1 for v in r.per_class_iou().values())
    s = MetricsReport()
    for p, g, c in reversed(eps):
        s.add(p, g, c)
    assert s.mean_iou == r.mean_iou


def test_merge_and_report_text():
    a, b = MetricsReport(), MetricsReport()
    a.add(np.array([1, 0]), np.array([1, 1]), (3, 4))
    b.add(np.array([2, 2]), np.array([2, 0]), (3, 4))
    a.episodes = b.episodes = 1
    m = a.merge(b)
    assert m.per_class_iou() == {3: 0.5, 4: 0.5} and m.episodes == 2
    kv = m.key_values()
    assert "mean_iou = 0.5000000000" in kv and "seconds" not in kv
    assert "seconds" in m.key_values(with_seconds=True)
    assert m.table().splitlines()[-2].split()[0] == "mean"


@pytest.mark.parametrize("method", ["full", "ProtoNet", "FT"])
def test_evaluate_reports_nonnegative(method):
    eps = [tiny_episode(s) for s in range(2)]
    params = _ft_params(0)
    r = evaluate(params, eps, TrainConfig(method=method, n_prototypes=2, k_graph=5, ft_steps=2, embed=TINY))
    assert r.episodes == 2 and 0 <= r.mean_iou <= 1
