"""Task-by-task training: two-stage weighting, aggregated-prompt loss, head replay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Node
from .backbone import Backbone, encode_prompted
from .config import ExperimentConfig
from .data import TaskData
from .errors import StateError
from .head import TaskHead
from .losses import concave_loss, label_probability, linear_loss, total_loss
from .optim import OptimState
from .prompts import AggregatedPrompt, PromptSet, aggregate, init_task_prompt
from .weighting import WeightVector, equal_weights, infer, stage_weights, task_mass


@dataclass
class ClassFeatureStore:
    """One stored feature per seen class, replayed through the head."""

    features: dict[int, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.features)

    def update(self, entries: dict[int, np.ndarray]) -> None:
        self.features.update(entries)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        labels = np.array(sorted(self.features), dtype=np.int64)
        if len(labels) == 0:
            return np.zeros((0, 0)), labels
        return np.stack([self.features[c] for c in labels]), labels


@dataclass
class ExperimentState:
    backbone: Backbone
    head: TaskHead
    prompts: list[PromptSet] = field(default_factory=list)
    store: ClassFeatureStore = field(default_factory=ClassFeatureStore)
    tasks_trained: int = 0
    loss_log: list[tuple[int, int, float]] = field(default_factory=list)

    @classmethod
    def fresh(cls, backbone: Backbone) -> "ExperimentState":
        return cls(backbone, TaskHead.empty(backbone.config.dim))


def training_forward(state: ExperimentState, x, cfg: ExperimentConfig):
    """Stages 1-4 of a training step: returns (weights, prompt, feature, logits).

    Cyclic mode aggregates with equal weights, re-weights from the prompted
    prediction and aggregates again (train mode, so only the newest prompt
    is differentiable). Query mode takes weights from the unprompted
    feature; select mode uses the current task's prompt alone.
    """
    bb, head, prompts = state.backbone, state.head, state.prompts
    t = len(prompts)
    x = np.atleast_2d(x)
    if cfg.mode == "select":
        weights = WeightVector(np.tile(np.eye(t)[t - 1], (x.shape[0], 1)))
        w_in = weights.probs
    elif cfg.mode == "cyclic" and not cfg.detach_weights:
        first = aggregate(prompts, equal_weights(t, x.shape[0]).probs, train_mode=True)
        probs = ag.softmax(head.logits(encode_prompted(bb, x, first)), -1)
        w_in = task_mass(probs, head.class_map)
        weights = WeightVector(w_in.value, 2)
    else:
        with ag.no_grad():
            weights = stage_weights(bb, head, prompts, x, cfg.mode, num=2)
        w_in = weights.probs
    phi = aggregate(prompts, w_in, train_mode=True)
    feat = encode_prompted(bb, x, phi)
    return weights, AggregatedPrompt(phi.tensor, weights.probs), feat, head.logits(feat)


def training_loss(state: ExperimentState, x, y, cfg: ExperimentConfig) -> Node:
    weights, _, _, logits = training_forward(state, x, cfg)
    ce = ag.cross_entropy(logits, y)
    con = None
    if cfg.alpha > 0 and cfg.mode != "select":
        con = concave_loss(state.backbone, state.head, state.prompts, weights.probs, x, y,
                           full=label_probability(logits, y))
    lin = linear_loss(state.prompts) if cfg.beta > 0 else None
    return total_loss(ce, con, lin, cfg.loss_weights())


def replay_loss(head: TaskHead, store: ClassFeatureStore) -> Node | None:
    """Mean cross-entropy of the head on the stored class features."""
    if len(store) == 0:
        return None
    feats, labels = store.arrays()
    return ag.mean(ag.cross_entropy(head.logits(feats), labels))


def replay_step(head: TaskHead, store: ClassFeatureStore, optim: OptimState) -> TaskHead:
    """One cross-entropy step of the head alone on the stored class features."""
    loss = replay_loss(head, store)
    if loss is None:
        return head
    loss.backward()
    optim.step({"W": head.W})
    return head


def snapshot_class_features(backbone: Backbone, head: TaskHead, prompts: list[PromptSet],
                            task: TaskData, num: int, mode: str,
                            batch_size: int = 256) -> dict[int, np.ndarray]:
    """Mean prompted feature per class of ``task`` under the inference prompt."""
    feats = []
    for i in range(0, len(task.train_x), batch_size):
        xb = task.train_x[i:i + batch_size]
        _, phi, _ = infer(backbone, head, prompts, xb, num, mode)
        feats.append(encode_prompted(backbone, xb, phi).value)
    feats = np.concatenate(feats) if feats else np.zeros((0, backbone.config.dim))
    out = {}
    for c in task.classes:
        rows = feats[task.train_y == c]
        if len(rows) == 0:
            raise StateError(f"class {c} has no training samples")
        out[int(c)] = rows.mean(axis=0)
    return out


def _prompt_seed(cfg: ExperimentConfig, task_index: int) -> int:
    return cfg.seed * 7919 + 101 + task_index


def train_task(state: ExperimentState, task_index: int, task: TaskData,
               cfg: ExperimentConfig) -> ExperimentState:
    if task_index != state.tasks_trained:
        raise StateError(f"expected task {state.tasks_trained}, got {task_index}")
    if not state.backbone.frozen:
        raise StateError("backbone must be frozen before continual training")
    bcfg = state.backbone.config
    for ps in state.prompts:
        ps.trainable = False
    previous = state.prompts[-1] if state.prompts else None
    new = init_task_prompt(previous, _prompt_seed(cfg, task_index), task_id=task_index,
                           n_layers=len(bcfg.prompt_layers), length=cfg.prompt_length,
                           dim=bcfg.dim, std=cfg.prompt_std)
    state.prompts.append(new)
    rng = np.random.default_rng([cfg.seed, task_index])
    state.head.grow(task.classes, rng)
    head_trainable = not cfg.prototype_head
    state.head.W.requires_grad = head_trainable
    if cfg.prototype_head:
        _set_prototypes(state, task, cfg)

    optim = OptimState(lr=cfg.lr, batch_size=cfg.batch_size)
    replaying = cfg.replay and head_trainable and len(state.store) > 0
    n = len(task.train_y)
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = training_loss(state, task.train_x[idx], task.train_y[idx], cfg)
            if replaying:
                loss = loss + replay_loss(state.head, state.store)
            loss.backward()
            params = {"phi": new.param}
            if head_trainable:
                params["W"] = state.head.W
            optim.step(params)
            state.loss_log.append((task_index, step, float(loss.value)))
            step += 1

    new.trainable = False
    state.head.W.requires_grad = False
    state.store.update(snapshot_class_features(state.backbone, state.head, state.prompts,
                                               task, cfg.num, cfg.mode))
    if cfg.align_steps and head_trainable:
        state.head.W.requires_grad = True
        align = OptimState(lr=cfg.lr, batch_size=cfg.batch_size)
        for _ in range(cfg.align_steps):
            replay_step(state.head, state.store, align)
        state.head.W.requires_grad = False
    if cfg.prototype_head:
        _set_prototypes(state, task, cfg)
    state.tasks_trained += 1
    return state


def _set_prototypes(state: ExperimentState, task: TaskData, cfg: ExperimentConfig) -> None:
    """Prototype-head ablation: head rows are the class mean features."""
    W = state.head.W.value
    if task.classes[0] in state.store.features:
        feats = state.store.features
    else:
        feats = snapshot_class_features(state.backbone, state.head, state.prompts, task,
                                        cfg.num, cfg.mode)
    for c in task.classes:
        W[c] = feats[c]
