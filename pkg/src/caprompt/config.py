"""Experiment configuration and its key-value text form."""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, fields
from pathlib import Path

from .backbone import BackboneConfig
from .data import StreamSpec
from .errors import ArgumentError
from .losses import LossWeights
from .weighting import MODES

SECTION = "experiment"
CONFIG_VERSION = 1


@dataclass
class ExperimentConfig:
    seed: int = 0
    # backbone
    layers: int = 4
    dim: int = 32
    heads: int = 4
    tokens: int = 9
    prompt_layers: tuple[int, ...] | None = None
    pretrain_epochs: int = 10
    pretrain_lr: float = 3e-3
    # prompts
    prompt_length: int = 10
    prompt_std: float = 0.02
    # objective
    alpha: float = 5.0
    beta: float = 0.2
    # weighting
    num: int = 2
    weighting: str = "cyclic"
    aggregation: bool = True
    detach_weights: bool = True
    # optimisation
    lr: float = 3e-3
    batch_size: int = 24
    epochs: int = 5
    replay: bool = True
    align_steps: int = 100
    prototype_head: bool = False
    # stream
    tasks: int = 10
    classes_per_task: int = 4
    train_per_class: int = 50
    test_per_class: int = 50
    input_dim: int = 64
    separation: float = 10.0
    subspace_dim: int = 16
    novel_dim: int = 16
    novel_share: float = 0.6
    base_classes: int = 512
    base_per_class: int = 12
    # reports
    eval_cycles: tuple[int, ...] = (1, 2, 4, 6)
    jensen_mode: str = "query"

    def validate(self) -> "ExperimentConfig":
        if self.weighting not in ("cyclic", "query"):
            raise ArgumentError("weighting must be 'cyclic' or 'query'")
        if self.jensen_mode not in MODES:
            raise ArgumentError(f"jensen_mode must be one of {MODES}")
        if self.num < 1:
            raise ArgumentError("num must be at least 1")
        if self.prompt_length < 0 or self.prompt_length % 2:
            raise ArgumentError("prompt_length must be a non-negative even number")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ArgumentError("invalid optimisation settings")
        if any(c < 1 for c in self.eval_cycles):
            raise ArgumentError("eval_cycles must be positive")
        self.loss_weights()
        self.backbone_config()
        self.stream_spec().validate()
        return self

    @property
    def mode(self) -> str:
        """Weighting mode used for prediction and for training weights."""
        if not self.aggregation:
            return "select"
        return self.weighting

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(layers=self.layers, dim=self.dim, heads=self.heads,
                              tokens=self.tokens, input_dim=self.input_dim,
                              prompt_layers=self.prompt_layers)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)

    def stream_spec(self) -> StreamSpec:
        return StreamSpec(tasks=self.tasks, classes_per_task=self.classes_per_task,
                          train_per_class=self.train_per_class,
                          test_per_class=self.test_per_class, input_dim=self.input_dim,
                          separation=self.separation, subspace_dim=self.subspace_dim,
                          novel_dim=self.novel_dim, novel_share=self.novel_share,
                          base_classes=self.base_classes,
                          base_per_class=self.base_per_class, seed=self.seed)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes).validate()


def _format(value) -> str:
    if value is None:
        return "all"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if name == "prompt_layers":
            return None if raw.lower() == "all" else tuple(int(v) for v in raw.split(",") if v)
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ArgumentError(f"bad value for {name}: {raw!r}") from exc


def config_fields() -> list[dataclasses.Field]:
    return list(fields(ExperimentConfig))


def config_to_text(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser()
    parser[SECTION] = {"config_version": str(CONFIG_VERSION)}
    for f in config_fields():
        parser[SECTION][f.name] = _format(getattr(cfg, f.name))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def config_from_text(text: str, **overrides) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ArgumentError(f"unreadable config: {exc}") from exc
    if SECTION not in parser:
        raise ArgumentError(f"config lacks an [{SECTION}] section")
    section = dict(parser[SECTION])
    section.pop("config_version", None)
    defaults = ExperimentConfig()
    known = {f.name for f in config_fields()}
    unknown = set(section) - known
    if unknown:
        raise ArgumentError(f"unknown config keys: {sorted(unknown)}")
    values = {k: _parse(k, v, getattr(defaults, k)) for k, v in section.items()}
    values.update(overrides)
    return ExperimentConfig(**values).validate()


def save_config(path, cfg: ExperimentConfig) -> None:
    Path(path).write_text(config_to_text(cfg))


def load_config(path, **overrides) -> ExperimentConfig:
    return config_from_text(Path(path).read_text(), **overrides)
