"""Command-line entry points.

``protoseg {gen-synth|pretrain|train|eval|predict|sweep} --config PATH [--seed N] [--out DIR]``

Exit status is 0 on success, 2 for configuration errors and 1 for runtime
failures.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .embednet import init_params, load_checkpoint, save_checkpoint
from .episodes import BlockIndex, Episode, enumerate_test_episodes, load_split, prepare_blocks, save_split
from .pointcloud import PointCloud, center_block, load_binary, load_text, save_text
from .synthetic import ClassDeck, generate_scene
from .train_eval import (
    MetricsReport,
    episode_logits,
    evaluate,
    finetune_baseline,
    pretrain,
    train_episodic,
)
from . import numerics as nx

log = logging.getLogger("protoseg")

SPLIT_NAME = "split.txt"


# -- shared plumbing --------------------------------------------------------------

def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset_root(cfg: RunConfig) -> Path:
    if not cfg.dataset_root:
        raise ConfigError("dataset_root", "not set")
    root = Path(cfg.dataset_root)
    if not root.is_dir():
        raise ConfigError("dataset_root", f"{root} is not a directory")
    return root


def load_scenes(root: Path) -> list[PointCloud]:
    """Every ``*.txt`` (except the split file) and ``*.pcv`` under ``root``, sorted by name."""
    scenes = []
    for path in sorted(root.iterdir()):
        if path.suffix == ".txt" and path.name != SPLIT_NAME:
            scenes.append(load_text(path))
        elif path.suffix == ".pcv":
            scenes.append(load_binary(path))
    if not scenes:
        raise RuntimeError(f"no point-cloud files under {root}")
    return scenes


def load_dataset(cfg: RunConfig, rng: np.random.Generator):
    root = _dataset_root(cfg)
    split_path = Path(cfg.split_file) if cfg.split_file else root / SPLIT_NAME
    if not split_path.is_file():
        raise ConfigError("split_file", f"{split_path} not found")
    split = load_split(split_path)
    blocks = prepare_blocks(load_scenes(root), cfg.m_points, rng, cfg.block_window)
    return split, blocks


def _initial_params(cfg: RunConfig, n_train_classes: int, rng: np.random.Generator) -> dict:
    if cfg.checkpoint:
        path = Path(cfg.checkpoint)
        if not path.is_file():
            raise ConfigError("checkpoint", f"{path} not found")
        return load_checkpoint(path)
    return init_params(cfg.embed_config(), rng, n_head_classes=n_train_classes + 1,
                       head_widths=tuple(cfg.head_widths))


def _test_episodes(cfg: RunConfig, split, blocks, seed: int) -> list[Episode]:
    index = BlockIndex.build(blocks, split.test, cfg.min_points)
    rng = np.random.default_rng([seed, 1])
    return list(enumerate_test_episodes(index, cfg.n_way, cfg.k_shot, cfg.n_queries,
                                        cfg.episodes_per_combo, rng))


def write_report(report: MetricsReport, cfg: RunConfig, out: Path, stem: str = "metrics") -> None:
    """Text table, ``key = value`` file with the resolved config, and wall-clock."""
    (out / f"{stem}_table.txt").write_text(report.table())
    config_lines = "".join(f"config.{line}\n" for line in cfg.lines())
    (out / f"{stem}.txt").write_text(report.key_values() + config_lines)
    (out / f"{stem}_timing.txt").write_text(f"seconds = {report.seconds:.3f}\n")


# -- commands ---------------------------------------------------------------------------

def cmd_gen_synth(cfg: RunConfig, seed: int) -> None:
    out = _out_dir(cfg)
    spec = cfg.scene_spec()
    rng = np.random.default_rng(seed)
    deck = ClassDeck(spec.library, rng)
    for i in range(cfg.synth_count):
        path = out / f"scene_{i:04d}.txt"
        try:
            save_text(generate_scene(spec, rng, deck), path)
        except OSError as exc:
            raise RuntimeError(f"cannot write {path}: {exc.strerror}") from None
    save_split(spec.split(), out / SPLIT_NAME)
    print(f"wrote {cfg.synth_count} scenes and {SPLIT_NAME} to {out}")


def cmd_pretrain(cfg: RunConfig, seed: int) -> None:
    rng = np.random.default_rng(seed)
    split, blocks = load_dataset(cfg, rng)
    index = BlockIndex.build(blocks, split.train, cfg.min_points)
    train_blocks = [blocks[b] for b in sorted({b for ids in index.by_class.values() for b in ids})]
    if not train_blocks:
        raise RuntimeError("no block qualifies for any training class")
    params = _initial_params(cfg.replace(checkpoint=""), len(split.train), rng)
    result = pretrain(train_blocks, sorted(split.train), cfg.train_config(), rng, params=params)
    out = _out_dir(cfg)
    save_checkpoint(result.params, out / "pretrained.ckpt")
    lines = [f"epoch_start_loss.{i} = {v:.10f}" for i, v in enumerate(result.epoch_start_losses)]
    lines.append(f"final_loss = {result.final_loss:.10f}")
    (out / "pretrain_report.txt").write_text("\n".join(lines) + "\n")
    print(f"pre-training done, final probe loss {result.final_loss:.4f}")


def cmd_train(cfg: RunConfig, seed: int) -> None:
    rng = np.random.default_rng(seed)
    split, blocks = load_dataset(cfg, rng)
    index = BlockIndex.build(blocks, split.train, cfg.min_points)
    params = _initial_params(cfg, len(split.train), rng)
    result = train_episodic(params, index, cfg.train_config(), rng)
    out = _out_dir(cfg)
    save_checkpoint(result.params, out / "trained.ckpt")
    lines = [f"loss.{i} = {v:.10f}" for i, v in enumerate(result.losses)]
    lines += [f"skipped.{it} = {msg}" for it, msg in result.skipped]
    (out / "train_log.txt").write_text("\n".join(lines) + "\n")
    tail = np.mean(result.losses[-100:]) if result.losses else float("nan")
    print(f"episodic training done, {len(result.skipped)} skipped, recent loss {tail:.4f}")


def cmd_eval(cfg: RunConfig, seed: int) -> None:
    rng = np.random.default_rng(seed)
    split, blocks = load_dataset(cfg, rng)
    params = _initial_params(cfg, len(split.train), rng)
    report = evaluate(params, _test_episodes(cfg, split, blocks, seed), cfg.train_config())
    out = _out_dir(cfg)
    write_report(report, cfg, out)
    print(report.table(), end="")


def _load_support(cfg: RunConfig) -> tuple[list[tuple[PointCloud, np.ndarray]], list[int]]:
    """``<class>_<shot>.txt`` files whose label column is the class mask."""
    if not cfg.support_dir:
        raise ConfigError("support_dir", "not set")
    root = Path(cfg.support_dir)
    if not root.is_dir():
        raise ConfigError("support_dir", f"{root} is not a directory")
    found: dict[tuple[int, int], Path] = {}
    for path in sorted(root.glob("*.txt")):
        try:
            c, s = (int(v) for v in path.stem.split("_"))
        except ValueError:
            raise RuntimeError(f"{path}: support files must be named <class>_<shot>.txt") from None
        found[(c, s)] = path
    expected = {(c, s) for c in range(1, cfg.n_way + 1) for s in range(1, cfg.k_shot + 1)}
    if set(found) != expected:
        raise RuntimeError(
            f"support dir holds {len(found)} clouds, config needs n_way={cfg.n_way} x k_shot={cfg.k_shot}"
        )
    support, classes = [], []
    for c, s in sorted(expected):
        cloud = load_text(found[(c, s)])
        if cloud.labels is None:
            raise RuntimeError(f"{found[(c, s)]}: support clouds need a mask column")
        support.append((center_block(cloud), cloud.labels > 0))
        classes.append(c)
    return support, classes


def cmd_predict(cfg: RunConfig, seed: int) -> None:
    if not cfg.input_cloud:
        raise ConfigError("input_cloud", "not set")
    if not Path(cfg.input_cloud).is_file():
        raise ConfigError("input_cloud", f"{cfg.input_cloud} not found")
    if not cfg.checkpoint:
        raise ConfigError("checkpoint", "not set")
    params = _initial_params(cfg, 0, np.random.default_rng(seed))
    support, classes = _load_support(cfg)
    query = load_text(cfg.input_cloud)
    tcfg = cfg.train_config()
    if tcfg.method == "FT":
        episode = Episode(support, classes, [(center_block(query), np.zeros(len(query), int))], tuple(range(1, cfg.n_way + 1)))
        pred = finetune_baseline(params, episode, tcfg.ft_steps, tcfg.ft_lr, tcfg).predictions[0]
        prob = np.ones(len(query))
    else:
        out = episode_logits(params, support, classes, [center_block(query)], tcfg)
        probs = nx.softmax_rows(out.logits[0]).data
        pred = probs.argmax(axis=1)
        prob = probs.max(axis=1)
    out_dir = _out_dir(cfg)
    target = out_dir / (Path(cfg.input_cloud).stem + "_pred.txt")
    save_text(query, target, {"pred": pred.astype(np.int64), "prob": prob})
    print(f"wrote {target}")


SWEEP_KEYS = {"n": "n_prototypes", "k_graph": "k_graph", "sigma": "sigma"}


def sweep_table(cfg: RunConfig, seed: int) -> list[tuple[float, float]]:
    rng = np.random.default_rng(seed)
    split, blocks = load_dataset(cfg, rng)
    params = _initial_params(cfg, len(split.train), rng)
    episodes = _test_episodes(cfg, split, blocks, seed)
    key = SWEEP_KEYS[cfg.sweep_param]
    rows = []
    for value in cfg.sweep_values:
        if key != "sigma" and value != int(value):
            raise ConfigError("sweep_values", f"{cfg.sweep_param} needs integer values")
        typed = value if key == "sigma" else int(value)
        report = evaluate(params, episodes, cfg.train_config(**{key: typed}))
        rows.append((value, report.mean_iou))
    return rows


def cmd_sweep(cfg: RunConfig, seed: int) -> None:
    rows = sweep_table(cfg, seed)
    text = f"{cfg.sweep_param}\tmean_iou\n" + "".join(f"{v:g}\t{m:.6f}\n" for v, m in rows)
    (_out_dir(cfg) / "sweep.txt").write_text(text)
    print(text, end="")


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protoseg", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="flat 'key = value' run configuration")
    parser.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    parser.add_argument("--out", default=None, help="overrides output_dir")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.out is not None:
            cfg = cfg.replace(output_dir=args.out)
        seed = cfg.seed if args.seed is None else args.seed
        if seed < 0:
            raise ConfigError("seed", "must be >= 0")
        COMMANDS[args.command](cfg, seed)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
