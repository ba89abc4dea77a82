"""Flat ``key = value`` run configuration with a typed schema."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

from .embednet import EmbedConfig
from .synthetic import SyntheticSceneSpec
from .train_eval import METHODS, TrainConfig


class ConfigError(ValueError):
    """A configuration key is unknown, mistyped or missing."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Field:
    parse: Callable[[str], Any]
    default: Any
    check: Callable[[Any], bool] = lambda v: True
    rule: str = ""


def _pos(v):
    return v > 0


def _ge1(v):
    return v >= 1


def _widths(v):
    return len(v) >= 1 and min(v) >= 1


SCHEMA: dict[str, Field] = {
    # paths
    "dataset_root": Field(str, ""),
    "split_file": Field(str, ""),
    "checkpoint": Field(str, ""),
    "output_dir": Field(str, "out"),
    "input_cloud": Field(str, ""),
    "support_dir": Field(str, ""),
    # episodes
    "n_way": Field(int, 2, _ge1, ">= 1"),
    "k_shot": Field(int, 1, _ge1, ">= 1"),
    "n_queries": Field(int, 1, _ge1, ">= 1"),
    "m_points": Field(int, 512, lambda v: v >= 2, ">= 2"),
    "min_points": Field(int, 50, _ge1, ">= 1"),
    "episodes_per_combo": Field(int, 10, _ge1, ">= 1"),
    "block_window": Field(float, 1.0, _pos, "> 0"),
    # prototypes and graph
    "n_prototypes": Field(int, 10, _ge1, ">= 1"),
    "k_graph": Field(int, 10, _ge1, ">= 1"),
    "sigma": Field(float, 1.0, _pos, "> 0"),
    "alpha": Field(float, 0.99, lambda v: 0 < v < 1, "in (0, 1)"),
    # network
    "knn_k": Field(int, 20, _ge1, ">= 1"),
    "edgeconv1": Field(_int_list, [32, 32], _widths, "comma-separated widths >= 1"),
    "edgeconv2": Field(_int_list, [64, 64], _widths, "comma-separated widths >= 1"),
    "d_sem": Field(int, 64, _ge1, ">= 1"),
    "metric_widths": Field(_int_list, [64, 64], _widths, "comma-separated widths >= 1"),
    "head_widths": Field(_int_list, [64, 64], lambda v: len(v) == 2 and min(v) >= 1, "two widths >= 1"),
    "slope": Field(float, 0.2, lambda v: 0 <= v < 1, "in [0, 1)"),
    # schedule
    "method": Field(str, "full", lambda v: v in METHODS, f"one of {', '.join(METHODS)}"),
    "iterations": Field(int, 1500, lambda v: v >= 0, ">= 0"),
    "halving_interval": Field(int, 500, _ge1, ">= 1"),
    "lr_extractor": Field(float, 1e-4, _pos, "> 0"),
    "lr_adaptive": Field(float, 1e-3, _pos, "> 0"),
    "pretrain_lr": Field(float, 1e-3, _pos, "> 0"),
    "pretrain_batch": Field(int, 2, _ge1, ">= 1"),
    "pretrain_epochs": Field(int, 30, lambda v: v >= 0, ">= 0"),
    "jitter_sigma": Field(float, 0.01, lambda v: v >= 0, ">= 0"),
    "ft_steps": Field(int, 50, lambda v: v >= 0, ">= 0"),
    "ft_lr": Field(float, 1e-3, _pos, "> 0"),
    "seed": Field(int, 0, lambda v: v >= 0, ">= 0"),
    # synthetic scenes
    "synth_count": Field(int, 50, lambda v: v >= 0, ">= 0"),
    "synth_extent": Field(float, 2.0, _pos, "> 0"),
    "synth_instances_per_cell": Field(int, 2, _ge1, ">= 1"),
    "synth_points_per_instance": Field(int, 300, _ge1, ">= 1"),
    "synth_floor_points": Field(int, 150, lambda v: v >= 0, ">= 0"),
    "synth_color_noise": Field(float, 0.05, lambda v: v >= 0, ">= 0"),
    # sweeps
    "sweep_param": Field(str, "n", lambda v: v in ("n", "k_graph", "sigma"), "one of n, k_graph, sigma"),
    "sweep_values": Field(_float_list, [1.0, 5.0, 10.0], lambda v: len(v) >= 1, "at least one value"),
}


def _format(value) -> str:
    if isinstance(value, list):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Resolved values for every schema key; attribute access by key name."""

    def __init__(self, values: dict[str, Any] | None = None):
        merged = {k: f.default for k, f in SCHEMA.items()}
        for key, value in (values or {}).items():
            if key not in SCHEMA:
                raise ConfigError(key, "unknown key")
            f = SCHEMA[key]
            if not f.check(value):
                raise ConfigError(key, f"value {value!r} violates rule {f.rule}")
            merged[key] = value
        self._values = merged

    def __getattr__(self, key):
        try:
            return self.__dict__["_values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def replace(self, **changes) -> "RunConfig":
        return RunConfig({**self._values, **changes})

    def as_dict(self) -> dict[str, Any]:
        return dict(self._values)

    def lines(self) -> list[str]:
        return [f"{k} = {_format(v)}" for k, v in sorted(self._values.items())]

    # -- views for the library layers ------------------------------------------

    def embed_config(self) -> EmbedConfig:
        return EmbedConfig(
            knn_k=self.knn_k,
            edgeconv1=list(self.edgeconv1),
            edgeconv2=list(self.edgeconv2),
            d_sem=self.d_sem,
            metric=list(self.metric_widths),
            slope=self.slope,
        )

    def train_config(self, **overrides) -> TrainConfig:
        kw = dict(
            method=self.method, n_way=self.n_way, k_shot=self.k_shot, n_queries=self.n_queries,
            n_prototypes=self.n_prototypes, k_graph=self.k_graph, sigma=self.sigma, alpha=self.alpha,
            pretrain_lr=self.pretrain_lr, pretrain_batch=self.pretrain_batch,
            pretrain_epochs=self.pretrain_epochs, lr_extractor=self.lr_extractor,
            lr_adaptive=self.lr_adaptive, halving_interval=self.halving_interval,
            iterations=self.iterations, jitter_sigma=self.jitter_sigma,
            ft_steps=self.ft_steps, ft_lr=self.ft_lr, embed=self.embed_config(),
        )
        kw.update(overrides)
        return TrainConfig(**kw)

    def scene_spec(self) -> SyntheticSceneSpec:
        return SyntheticSceneSpec(
            extent=self.synth_extent,
            instances_per_cell=self.synth_instances_per_cell,
            points_per_instance=self.synth_points_per_instance,
            floor_points_per_cell=self.synth_floor_points,
            color_noise=self.synth_color_noise,
        )


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(key or f"line {lineno}", f"{source}:{lineno}: expected 'key = value'")
        if key not in SCHEMA:
            raise ConfigError(key, f"{source}:{lineno}: unknown key")
        if key in values:
            raise ConfigError(key, f"{source}:{lineno}: duplicate key")
        try:
            values[key] = SCHEMA[key].parse(value)
        except ValueError as exc:
            raise ConfigError(key, f"{source}:{lineno}: {exc}") from None
    return RunConfig(values)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    return parse_config_text(text, str(path))
