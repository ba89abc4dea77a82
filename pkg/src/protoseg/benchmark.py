"""Synthetic end-to-end benchmark and the prototype-count sweep.

For each seed: generate rooms, cut blocks, evaluate the untrained network,
pre-train, then train the full method and the ProtoNet ablation from the
same pre-trained weights and evaluate both on identical test episodes.
The trained full model is also evaluated with n in {1, 5, 10} prototypes
per class on episodes that contain the two-mode class.

    python3 -m protoseg.benchmark --seeds 0,1,2,3,4 --out benchmarks/synthetic_results.txt

Results are written as ``key = value`` lines; :func:`check` evaluates the
acceptance thresholds on them.
"""
from __future__ import annotations

import argparse
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .embednet import init_params, save_checkpoint
from .episodes import BlockIndex, Episode, build_episode, enumerate_test_episodes, prepare_blocks
from .synthetic import SyntheticSceneSpec, generate_scenes
from .train_eval import TrainConfig, evaluate, pretrain, train_episodic

log = logging.getLogger(__name__)

TWO_MODE_CLASS = 12
SWEEP_VALUES = (1, 5, 10)
N_SCENES = 50
M_POINTS = 512
MIN_POINTS = 50
EPISODES_PER_COMBO = 5
SWEEP_EPISODES_PER_COMBO = 10
CHANCE = 1.0 / 3.0


@dataclass
class BenchmarkData:
    blocks: list
    train_index: BlockIndex
    test_index: BlockIndex
    test_episodes: list[Episode]
    sweep_episodes: list[Episode]


@dataclass
class SeedResult:
    seed: int
    untrained: float
    full: float
    protonet: float
    sweep: dict[int, float] = field(default_factory=dict)
    seconds: float = 0.0


def prepare_data(seed: int, spec: SyntheticSceneSpec | None = None) -> BenchmarkData:
    """Scenes, blocks, class indexes and the fixed test episodes for one seed."""
    spec = spec or SyntheticSceneSpec()
    rng = np.random.default_rng(seed)
    blocks = prepare_blocks(generate_scenes(spec, N_SCENES, rng), M_POINTS, rng)
    split = spec.split()
    train_index = BlockIndex.build(blocks, split.train, MIN_POINTS)
    test_index = BlockIndex.build(blocks, split.test, MIN_POINTS)
    test_eps = list(enumerate_test_episodes(test_index, 2, 1, 1, EPISODES_PER_COMBO,
                                            np.random.default_rng([seed, 1])))
    sweep_rng = np.random.default_rng([seed, 5])
    sweep_eps = [
        build_episode(test_index, sorted((TWO_MODE_CLASS, other)), 1, 1, sweep_rng)
        for other in test_index.classes if other != TWO_MODE_CLASS
        for _ in range(SWEEP_EPISODES_PER_COMBO)
    ]
    return BenchmarkData(blocks, train_index, test_index, test_eps, sweep_eps)


def initial_params(seed: int, config: TrainConfig, n_train_classes: int) -> dict:
    return init_params(config.embed, np.random.default_rng([seed, 2]), n_head_classes=n_train_classes + 1)


def run_seed(seed: int, config: TrainConfig | None = None, checkpoint_dir: Path | None = None) -> SeedResult:
    config = config or TrainConfig.desk()
    start = time.perf_counter()
    data = prepare_data(seed)
    classes = data.train_index.classes
    p0 = initial_params(seed, config, len(classes))
    untrained = evaluate(p0, data.test_episodes, config).mean_iou
    log.info("seed %d untrained %.4f", seed, untrained)

    used = sorted({b for ids in data.train_index.by_class.values() for b in ids})
    pre = pretrain([data.blocks[b] for b in used], classes, config, np.random.default_rng([seed, 3]), params=p0)
    log.info("seed %d pre-training probe loss %.4f", seed, pre.final_loss)

    trained = {}
    for method in ("full", "ProtoNet"):
        cfg = replace(config, method=method)
        res = train_episodic(pre.params, data.train_index, cfg, np.random.default_rng([seed, 4]))
        trained[method] = res.params
        if checkpoint_dir is not None:
            save_checkpoint(res.params, Path(checkpoint_dir) / f"seed{seed}_{method}.ckpt")
    full = evaluate(trained["full"], data.test_episodes, config).mean_iou
    protonet = evaluate(trained["ProtoNet"], data.test_episodes, replace(config, method="ProtoNet")).mean_iou
    sweep = {n: evaluate(trained["full"], data.sweep_episodes, replace(config, n_prototypes=n)).mean_iou
             for n in SWEEP_VALUES}
    seconds = time.perf_counter() - start
    log.info("seed %d full %.4f ProtoNet %.4f sweep %s (%.0f s)", seed, full, protonet, sweep, seconds)
    return SeedResult(seed, untrained, full, protonet, sweep, seconds)


# -- result files and thresholds -------------------------------------------------------

def format_results(results: Sequence[SeedResult]) -> str:
    lines = []
    for r in results:
        p = f"seed.{r.seed}."
        lines += [f"{p}untrained = {r.untrained:.10f}", f"{p}full = {r.full:.10f}",
                  f"{p}protonet = {r.protonet:.10f}"]
        lines += [f"{p}sweep.n{n} = {v:.10f}" for n, v in sorted(r.sweep.items())]
        lines.append(f"{p}seconds = {r.seconds:.1f}")
    return "\n".join(lines) + "\n"


def parse_results(text: str) -> list[SeedResult]:
    by_seed: dict[int, dict] = {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        _, seed, *rest = key.split(".")
        entry = by_seed.setdefault(int(seed), {"sweep": {}})
        if rest[0] == "sweep":
            entry["sweep"][int(rest[1][1:])] = float(value)
        else:
            entry[rest[0]] = float(value)
    return [SeedResult(seed, e["untrained"], e["full"], e["protonet"], e["sweep"], e["seconds"])
            for seed, e in sorted(by_seed.items())]


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str


def check(results: Sequence[SeedResult], time_limit: float = 20 * 60) -> list[Check]:
    """Benchmark and sweep thresholds on the per-seed medians."""
    med = {k: float(np.median([getattr(r, k) for r in results])) for k in ("untrained", "full", "protonet")}
    sweep = {n: float(np.median([r.sweep[n] for r in results])) for n in SWEEP_VALUES}
    best_n = max(sweep, key=lambda n: (sweep[n], -n))
    slowest = max(r.seconds for r in results)
    return [
        Check("full beats untrained by 0.15", med["full"] >= med["untrained"] + 0.15,
              f"full {med['full']:.4f} vs untrained {med['untrained']:.4f}"),
        Check("full beats chance by 0.10", med["full"] >= CHANCE + 0.10, f"full {med['full']:.4f}"),
        Check("full at least ProtoNet", med["full"] >= med["protonet"],
              f"full {med['full']:.4f} vs ProtoNet {med['protonet']:.4f}"),
        Check("per-seed run within time limit", slowest <= time_limit, f"slowest seed {slowest:.0f} s"),
        Check("best n above 1", best_n > 1,
              "medians " + ", ".join(f"n={n}: {v:.4f}" for n, v in sweep.items())),
    ]


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="synthetic benchmark and n-sweep")
    parser.add_argument("--seeds", default="0,1,2,3,4")
    parser.add_argument("--out", default="benchmarks/synthetic_results.txt")
    parser.add_argument("--checkpoints", default=None, help="directory for trained checkpoints")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    results = []
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    for seed in (int(s) for s in args.seeds.split(",")):
        results.append(run_seed(seed, checkpoint_dir=args.checkpoints))
        out.write_text(format_results(results))
    ok = True
    for c in check(results):
        ok &= c.passed
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}")
    return 0 if ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
