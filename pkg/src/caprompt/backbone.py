"""A small ViT-style encoder, pre-trained once and then frozen.

Inputs are flat vectors cut into equal "patch" tokens, embedded, prefixed
with a class token and passed through pre-norm transformer blocks. The
class-token output after the final norm is the feature fed to the head.
Prompts enter as key/value prefixes in the attention of selected layers.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Node
from .errors import ArgumentError
from .optim import OptimState

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BackboneConfig:
    layers: int = 4
    dim: int = 32
    heads: int = 4
    tokens: int = 9
    input_dim: int = 64
    prompt_layers: tuple[int, ...] | None = None
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.layers < 1 or self.dim < 1:
            raise ArgumentError("layers and dim must be positive")
        if self.dim % self.heads:
            raise ArgumentError("dim must be divisible by heads")
        if self.tokens < 2:
            raise ArgumentError("need at least one patch token plus the class token")
        if self.input_dim % (self.tokens - 1):
            raise ArgumentError("input_dim must split evenly into tokens - 1 patches")
        if self.prompt_layers is None:
            object.__setattr__(self, "prompt_layers", tuple(range(self.layers)))
        else:
            layers = tuple(sorted(set(int(i) for i in self.prompt_layers)))
            if any(i < 0 or i >= self.layers for i in layers):
                raise ArgumentError("prompt_layers must index existing layers")
            object.__setattr__(self, "prompt_layers", layers)

    @property
    def patch_dim(self) -> int:
        return self.input_dim // (self.tokens - 1)


@dataclass
class Backbone:
    config: BackboneConfig
    params: dict[str, Node]
    frozen: bool = False
    passes: dict[str, int] = field(default_factory=lambda: {"prompted": 0, "unprompted": 0})

    def freeze(self) -> "Backbone":
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        return self

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].value).tobytes())
        return h.hexdigest()

    def reset_counters(self) -> None:
        self.passes["prompted"] = 0
        self.passes["unprompted"] = 0

    def forward(self, x, prompt: Node | None = None) -> Node:
        """Class-token feature for a batch ``x`` of shape ``(B, input_dim)``.

        ``prompt`` has shape ``(2, P, m, d)`` (shared by the batch) or
        ``(B, 2, P, m, d)`` (per sample) where ``P = len(prompt_layers)``.
        """
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None]
        if x.ndim != 2 or x.shape[1] != cfg.input_dim:
            raise ArgumentError(f"expected inputs of width {cfg.input_dim}, got {x.shape}")
        if prompt is not None:
            check_prompt_shape(prompt.shape, cfg, batch=x.shape[0])
        p = self.params
        b = x.shape[0]
        patches = x.reshape(b, cfg.tokens - 1, cfg.patch_dim)
        h = ag.matmul(patches, p["embed_w"]) + p["embed_b"] + p["pos"]
        cls = ag.broadcast_to(p["cls"], (b, 1, cfg.dim))
        h = ag.concat([cls, h], axis=1)
        slots = {layer: i for i, layer in enumerate(cfg.prompt_layers)}
        for layer in range(cfg.layers):
            pk = pv = None
            if prompt is not None and layer in slots and prompt.shape[-2] > 0:
                pk = prompt[..., 0, slots[layer], :, :]
                pv = prompt[..., 1, slots[layer], :, :]
            h = self._block(h, layer, pk, pv)
        h = ag.layer_norm(h, p["lnf_g"], p["lnf_b"])
        return h[:, 0, :]

    def _block(self, h: Node, layer: int, pk, pv) -> Node:
        p, d = self.params, self.config.dim
        pre = f"l{layer}_"
        a = ag.layer_norm(h, p[pre + "ln1_g"], p[pre + "ln1_b"])
        qkv = ag.matmul(a, p[pre + "w_qkv"]) + p[pre + "b_qkv"]
        q, k, v = qkv[..., :d], qkv[..., d:2 * d], qkv[..., 2 * d:]
        att = ag.attention_prefix(q, k, v, pk, pv, self.config.heads)
        h = h + ag.matmul(att, p[pre + "w_o"]) + p[pre + "b_o"]
        a = ag.layer_norm(h, p[pre + "ln2_g"], p[pre + "ln2_b"])
        a = ag.gelu(ag.matmul(a, p[pre + "w_1"]) + p[pre + "b_1"])
        return h + ag.matmul(a, p[pre + "w_2"]) + p[pre + "b_2"]


def check_prompt_shape(shape: tuple, cfg: BackboneConfig, batch: int | None = None) -> None:
    core = shape[-4:]
    ok = (len(shape) in (4, 5) and core[0] == 2 and core[1] == len(cfg.prompt_layers)
          and core[3] == cfg.dim)
    if ok and len(shape) == 5 and batch is not None:
        ok = shape[0] in (1, batch)
    if not ok:
        raise ArgumentError(
            f"prompt shape {shape} does not match (2, {len(cfg.prompt_layers)}, m, {cfg.dim})")


def init_backbone(config: BackboneConfig, seed: int) -> Backbone:
    rng = np.random.default_rng(seed)
    d, hidden = config.dim, config.dim * config.mlp_ratio

    def dense(n_in, n_out):
        return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))

    params = {
        "embed_w": dense(config.patch_dim, d),
        "embed_b": np.zeros(d),
        "pos": rng.normal(0.0, 0.02, size=(config.tokens - 1, d)),
        "cls": rng.normal(0.0, 0.02, size=(1, 1, d)),
    }
    for layer in range(config.layers):
        pre = f"l{layer}_"
        params.update({
            pre + "ln1_g": np.ones(d), pre + "ln1_b": np.zeros(d),
            pre + "w_qkv": dense(d, 3 * d), pre + "b_qkv": np.zeros(3 * d),
            pre + "w_o": dense(d, d), pre + "b_o": np.zeros(d),
            pre + "ln2_g": np.ones(d), pre + "ln2_b": np.zeros(d),
            pre + "w_1": dense(d, hidden), pre + "b_1": np.zeros(hidden),
            pre + "w_2": dense(hidden, d), pre + "b_2": np.zeros(d),
        })
    params["lnf_g"] = np.ones(d)
    params["lnf_b"] = np.zeros(d)
    return Backbone(config, {k: ag.parameter(v) for k, v in params.items()})


def pretrain_backbone(base_x: np.ndarray, base_y: np.ndarray, config: BackboneConfig,
                      epochs: int, seed: int, lr: float = 1e-3,
                      batch_size: int = 32) -> Backbone:
    """Supervised pre-training on the base classes, then freeze.

    A throwaway linear head is trained alongside the encoder and discarded.
    ``epochs=0`` returns the randomly initialised encoder, frozen.
    """
    base_x = np.asarray(base_x, dtype=np.float64)
    base_y = np.asarray(base_y, dtype=np.int64)
    if base_x.shape[0] == 0:
        raise ArgumentError("empty pre-training set")
    backbone = init_backbone(config, seed)
    rng = np.random.default_rng(seed + 1)
    classes = np.unique(base_y)
    remap = {c: i for i, c in enumerate(classes)}
    y = np.array([remap[c] for c in base_y])
    head = ag.parameter(rng.normal(0.0, 0.02, size=(config.dim, len(classes))))
    params = dict(backbone.params, _head=head)
    opt = OptimState(lr=lr, batch_size=batch_size)
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), batch_size):
            idx = order[start:start + batch_size]
            feats = backbone.forward(base_x[idx])
            loss = ag.mean(ag.cross_entropy(ag.matmul(feats, head), y[idx]))
            loss.backward()
            opt.step(params)
    return backbone.freeze()


def encode(backbone: Backbone, x) -> Node:
    """Unprompted query feature."""
    if not backbone.frozen:
        raise ArgumentError("encode requires a frozen backbone")
    out = backbone.forward(x, None)
    backbone.passes["unprompted"] += out.shape[0]
    return out


def encode_prompted(backbone: Backbone, x, prompt) -> Node:
    """Class-token feature with the prompt's prefixes attached.

    ``prompt`` is an AggregatedPrompt, a PromptSet, or a raw prompt Node.
    """
    if not backbone.frozen:
        raise ArgumentError("encode_prompted requires a frozen backbone")
    tensor = getattr(prompt, "tensor", None)
    if tensor is None:
        tensor = getattr(prompt, "param", prompt)
    out = backbone.forward(x, ag.as_node(tensor))
    backbone.passes["prompted"] += out.shape[0]
    return out


def linear_probe_accuracy(train_x, train_y, test_x, test_y, ridge: float = 1e-3) -> float:
    """Accuracy of a ridge-regression one-vs-all probe."""
    train_x, test_x = np.asarray(train_x), np.asarray(test_x)
    classes, yi = np.unique(train_y, return_inverse=True)
    targets = np.eye(len(classes))[yi]
    xb = np.hstack([train_x, np.ones((len(train_x), 1))])
    w = np.linalg.solve(xb.T @ xb + ridge * np.eye(xb.shape[1]), xb.T @ targets)
    pred = classes[np.argmax(np.hstack([test_x, np.ones((len(test_x), 1))]) @ w, axis=1)]
    return float(np.mean(pred == np.asarray(test_y)))


def features(backbone: Backbone, x, batch_size: int = 256) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.concatenate([backbone.forward(x[i:i + batch_size]).value
                           for i in range(0, len(x), batch_size)])


def save_backbone(path, backbone: Backbone) -> None:
    arrays = {f"param/{k}": v.value for k, v in backbone.params.items()}
    meta = dict(asdict(backbone.config), prompt_layers=list(backbone.config.prompt_layers))
    with open(path, "wb") as fh:
        np.savez(fh, format_version=np.int64(CHECKPOINT_VERSION),
                 config=np.array(json.dumps(meta, sort_keys=True)),
                 frozen=np.bool_(backbone.frozen), **arrays)


def load_backbone(path) -> Backbone:
    with np.load(Path(path)) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ArgumentError(f"unsupported backbone checkpoint version {version}")
        meta = json.loads(str(data["config"]))
        meta["prompt_layers"] = tuple(meta["prompt_layers"])
        params = {k[len("param/"):]: Node(data[k].copy())
                  for k in data.files if k.startswith("param/")}
        frozen = bool(data["frozen"])
    bb = Backbone(BackboneConfig(**meta), params)
    bb.frozen = frozen
    return bb
