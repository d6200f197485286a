"""Shared-encoder multi-task network: lesion mask + melanoma and SK probabilities.

Layout for ``stages`` = S and ``base_channels`` = B:

* encoder stage s (s < S): block(C_s = B * 2**s) -> keep as skip -> maxpool
* bottleneck: block(B * 2**S)
* decoder stage s (s = S-1 .. 0): upsample -> concat skip_s -> 3x3 conv + relu to C_s
* segmentation head: 1x1 conv to one channel + sigmoid
* classification heads: global average pool of the bottleneck -> linear -> sigmoid

``block`` is an inception-lite unit (parallel 1x1 and 3x3 conv branches with
relu, concatenated 1x1-first) or, with ``inception_enabled=False``, two
stacked 3x3 conv + relu layers.
"""
from __future__ import annotations

import dataclasses
import json
from collections.abc import Iterable
from dataclasses import dataclass, field

import numpy as np

from . import layers
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigError, ShapeMismatchError
from .rng import RngState
from .tensor import Graph, Node, add, reshape, scale

TASKS = ("seg", "mel", "sk")


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple[int, int] = (64, 64)
    base_channels: int = 16
    stages: int = 4
    inception_enabled: bool = True
    seg_feeds_heads: bool = False
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "loss_weights", tuple(float(v) for v in self.loss_weights))
        self.validate()

    def validate(self) -> None:
        if len(self.input_size) != 2 or min(self.input_size) < 1:
            raise ConfigError(f"input_size must be two positive extents, got {self.input_size}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be positive, got {self.base_channels}")
        if self.stages < 1:
            raise ConfigError(f"stages must be >= 1, got {self.stages}")
        div = 2**self.stages
        h, w = self.input_size
        if h % div or w % div:
            raise ConfigError(f"input_size {h}x{w} is not divisible by 2**stages = {div}")
        if len(self.loss_weights) != 3 or any(v < 0 or not np.isfinite(v) for v in self.loss_weights):
            raise ConfigError(f"loss_weights must be three non-negative reals, got {self.loss_weights}")
        if not any(v > 0 for v in self.loss_weights):
            raise ConfigError("at least one loss weight must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_size"] = list(self.input_size)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def stage_channels(self, s: int) -> int:
        return self.base_channels * 2**s


def layer_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (parameter name, shape) inventory implied by ``cfg``."""
    specs: list[tuple[str, tuple[int, ...]]] = []

    def conv(name, cin, cout, k):
        specs.append((f"{name}.weight", (cout, cin, k, k)))
        specs.append((f"{name}.bias", (cout,)))

    def block(prefix, cin, cout):
        if cfg.inception_enabled:
            w3 = cout // 2
            w1 = cout - w3
            conv(f"{prefix}.branch1x1", cin, w1, 1)
            conv(f"{prefix}.branch3x3", cin, w3, 3)
        else:
            conv(f"{prefix}.conv1", cin, cout, 3)
            conv(f"{prefix}.conv2", cout, cout, 3)

    cin = 3
    for s in range(cfg.stages):
        block(f"encoder.stage{s}", cin, cfg.stage_channels(s))
        cin = cfg.stage_channels(s)
    cb = cfg.stage_channels(cfg.stages)
    block("bottleneck", cin, cb)
    prev = cb
    for s in reversed(range(cfg.stages)):
        cs = cfg.stage_channels(s)
        conv(f"decoder.stage{s}.conv", prev + cs, cs, 3)
        prev = cs
    conv("seg_head", prev, 1, 1)
    feat = cb + (1 if cfg.seg_feeds_heads else 0)
    for head in ("head_melanoma", "head_sk"):
        specs.append((f"{head}.weight", (feat, 1)))
        specs.append((f"{head}.bias", (1,)))
    return specs


def parameter_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in layer_specs(cfg))


class MultiTaskModel:
    """Config plus named float64 parameters and matching gradient buffers."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        expected = layer_specs(config)
        names = [n for n, _ in expected]
        if set(params) != set(names):
            missing = sorted(set(names) - set(params))
            extra = sorted(set(params) - set(names))
            raise ConfigError(f"parameter set does not match config (missing={missing}, unexpected={extra})")
        for name, shape in expected:
            if params[name].shape != shape:
                raise ShapeMismatchError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = {n: np.array(params[n], dtype=np.float64) for n in names}
        self.grads = {n: np.zeros_like(v) for n, v in self.params.items()}

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def save(self, path) -> None:
        save_checkpoint(path, self.params, header=self.config.to_dict())

    @classmethod
    def load(cls, path) -> "MultiTaskModel":
        tensors, header = load_checkpoint(path)
        if header is None:
            raise CheckpointError(f"{path}: checkpoint carries no model config")
        return cls(ModelConfig.from_dict(header), tensors)

    def exclusive_params(self, task: str) -> list[str]:
        """Parameters that only ``task``'s output depends on."""
        cfg = self.config
        if task == "mel":
            return [n for n in self.params if n.startswith("head_melanoma.")]
        if task == "sk":
            return [n for n in self.params if n.startswith("head_sk.")]
        if task == "seg":
            if cfg.seg_feeds_heads:
                return []
            return [n for n in self.params if n.startswith(("decoder.", "seg_head."))]
        raise ValueError(f"unknown task {task!r}")


def build_model(cfg: ModelConfig, seed: int) -> MultiTaskModel:
    """Kaiming-normal weights (std sqrt(2 / fan_in)), zero biases."""
    cfg.validate()
    rng = RngState(seed)
    params = {}
    for name, shape in layer_specs(cfg):
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        params[name] = rng.normal(shape, 0.0, np.sqrt(2.0 / fan_in))
    return MultiTaskModel(cfg, params)


@dataclass
class ModelOutput:
    graph: Graph
    seg_prob: Node | None = None  # [n, 1, H, W]
    p_melanoma: Node | None = None  # [n]
    p_sk: Node | None = None  # [n]
    leaves: dict[str, Node] = field(default_factory=dict)


def forward(m: MultiTaskModel, images, outputs: Iterable[str] = TASKS, graph: Graph | None = None) -> ModelOutput:
    """Run the shared encoder once and evaluate the requested task outputs."""
    cfg = m.config
    outputs = tuple(outputs)
    for t in outputs:
        if t not in TASKS:
            raise ValueError(f"unknown output {t!r}")
    x = np.asarray(images, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != cfg.input_size:
        raise ShapeMismatchError(f"expected images of shape [n, 3, {cfg.input_size[0]}, {cfg.input_size[1]}], got {x.shape}")
    g = Graph() if graph is None else graph
    leaves: dict[str, Node] = {}

    def p(name: str) -> Node:
        if name not in leaves:
            leaves[name] = g.variable(m.params[name], grad=m.grads[name], name=name)
        return leaves[name]

    def conv(prefix, h, act=True):
        w = p(f"{prefix}.weight")
        out = layers.conv2d(h, layers.Conv2dParams.same(w, p(f"{prefix}.bias")))
        return layers.relu(out) if act else out

    def block(prefix, h):
        if cfg.inception_enabled:
            return layers.concat_channels(conv(f"{prefix}.branch1x1", h), conv(f"{prefix}.branch3x3", h))
        return conv(f"{prefix}.conv2", conv(f"{prefix}.conv1", h))

    h = g.constant(x, name="images")
    skips = []
    for s in range(cfg.stages):
        h = block(f"encoder.stage{s}", h)
        skips.append(h)
        h = layers.maxpool2d(h)
    bottleneck = block("bottleneck", h)

    out = ModelOutput(graph=g, leaves=leaves)
    need_seg = "seg" in outputs or (cfg.seg_feeds_heads and ("mel" in outputs or "sk" in outputs))
    if need_seg:
        d = bottleneck
        for s in reversed(range(cfg.stages)):
            d = layers.concat_channels(layers.upsample2x_nearest(d), skips[s])
            d = conv(f"decoder.stage{s}.conv", d)
        seg = layers.sigmoid(conv("seg_head", d, act=False))
        if "seg" in outputs:
            out.seg_prob = seg

    if "mel" in outputs or "sk" in outputs:
        feats = bottleneck
        if cfg.seg_feeds_heads:
            feats = layers.concat_channels(feats, layers.avg_pool(seg, 2**cfg.stages))
        pooled = layers.global_avg_pool(feats)
        n = x.shape[0]
        for task, head in (("mel", "head_melanoma"), ("sk", "head_sk")):
            if task in outputs:
                logit = layers.linear(pooled, p(f"{head}.weight"), p(f"{head}.bias"))
                prob = reshape(layers.sigmoid(logit), (n,))
                if task == "mel":
                    out.p_melanoma = prob
                else:
                    out.p_sk = prob
    return out


def joint_loss(
    out: ModelOutput,
    gt_mask,
    gt_mel,
    gt_sk,
    weights: tuple[float, float, float],
    pos_weights: tuple[float, float] = (1.0, 1.0),
) -> Node:
    """lambda_seg * (bce + dice) + lambda_mel * bce_mel + lambda_sk * bce_sk.

    Terms with zero weight are left off the graph entirely.
    """
    w_seg, w_mel, w_sk = (float(v) for v in weights)
    if min(w_seg, w_mel, w_sk) < 0 or max(w_seg, w_mel, w_sk) <= 0:
        raise ConfigError(f"loss weights must be non-negative with at least one positive, got {weights}")
    terms = []
    if w_seg > 0:
        if out.seg_prob is None:
            raise ValueError("segmentation output was not computed")
        seg = add(layers.bce_loss(out.seg_prob, gt_mask), layers.soft_dice_loss(out.seg_prob, gt_mask))
        terms.append(scale(seg, w_seg) if w_seg != 1.0 else seg)
    for w, node, target, pw, label in (
        (w_mel, out.p_melanoma, gt_mel, pos_weights[0], "melanoma"),
        (w_sk, out.p_sk, gt_sk, pos_weights[1], "sk"),
    ):
        if w > 0:
            if node is None:
                raise ValueError(f"{label} output was not computed")
            term = layers.bce_loss(node, target, pos_weight=pw)
            terms.append(scale(term, w) if w != 1.0 else term)
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


def threshold_mask(seg_prob: np.ndarray) -> np.ndarray:
    """Binary lesion mask: probability >= 0.5 is lesion."""
    return (np.asarray(seg_prob) >= 0.5).astype(np.uint8)


def predict(m: MultiTaskModel, images, batch_size: int = 16) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (binary masks [n,1,H,W] uint8, p_melanoma [n], p_sk [n])."""
    images = np.asarray(images, dtype=np.float64)
    masks, mel, sk = [], [], []
    for i in range(0, images.shape[0], batch_size):
        out = forward(m, images[i : i + batch_size])
        masks.append(threshold_mask(out.seg_prob.value))
        mel.append(out.p_melanoma.value)
        sk.append(out.p_sk.value)
        out.graph.release()
    return np.concatenate(masks), np.concatenate(mel), np.concatenate(sk)


def model_config_json(cfg: ModelConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)
