from __future__ import annotations

import sys

import numpy as np
import pytest

from caprompt import autograd as ag
from caprompt.backbone import BackboneConfig, init_backbone
from caprompt.config import ExperimentConfig
from caprompt.data import generate_stream
from caprompt.experiment import prepare_backbone
from caprompt.head import ClassMap, TaskHead
from caprompt.prompts import PromptSet
from caprompt.trainer import ExperimentState, train_task

TINY = BackboneConfig(layers=2, dim=8, heads=2, tokens=5, input_dim=8)


def tiny_backbone(seed: int = 0, config: BackboneConfig = TINY):
    return init_backbone(config, seed).freeze()


def random_prompts(t: int, config: BackboneConfig = TINY, m: int = 2, seed: int = 0,
                   scale: float = 0.5) -> list[PromptSet]:
    rng = np.random.default_rng(seed)
    shape = (2, len(config.prompt_layers), m, config.dim)
    return [PromptSet(i, ag.Node(rng.normal(0.0, scale, size=shape))) for i in range(t)]


def random_head(tasks, dim: int = TINY.dim, seed: int = 0, scale: float = 1.0) -> TaskHead:
    cmap = ClassMap([tuple(c) for c in tasks])
    rng = np.random.default_rng(seed)
    return TaskHead(ag.Node(rng.normal(0.0, scale, size=(cmap.num_classes, dim))), cmap)


@pytest.fixture
def tiny():
    return tiny_backbone()


def small_config(**changes) -> ExperimentConfig:
    """A few-second experiment: 3 tasks of 3 classes on a 2-layer backbone."""
    base = dict(layers=2, dim=16, heads=2, tokens=5, input_dim=16, pretrain_epochs=4,
                prompt_length=4, epochs=5, lr=0.01, batch_size=16, tasks=3, classes_per_task=3,
                train_per_class=30, test_per_class=30, separation=8.0, subspace_dim=6,
                novel_dim=4, novel_share=0.5, base_classes=24, base_per_class=24,
                align_steps=20, eval_cycles=(1, 2))
    base.update(changes)
    return ExperimentConfig(**base).validate()


@pytest.fixture(scope="session")
def small_run():
    """One trained 3-task state shared by read-only tests."""
    cfg = small_config()
    stream = generate_stream(cfg.stream_spec())
    bb = prepare_backbone(cfg, stream)
    state = ExperimentState.fresh(bb)
    for i, task in enumerate(stream.tasks):
        train_task(state, i, task, cfg)
    return cfg, stream, state


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
