"""Model presets and their U-shaped head/body/tail partition."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .streams import stream

CR_DENOMINATOR_LCM = 24
ROLES = ("head", "body", "tail", "full")


class ConfigError(ValueError):
    """Invalid model or partition configuration."""


@dataclass(frozen=True)
class SplitSpec:
    cut1: int
    cut2: int
    total_layers: int
    allow_empty_body: bool = False

    def __post_init__(self):
        ok = 0 < self.cut1 <= self.cut2 < self.total_layers
        if not ok:
            raise ConfigError(
                f"invalid cuts cut1={self.cut1} cut2={self.cut2} for {self.total_layers} layers "
                "(need 0 < cut1 <= cut2 < total_layers)"
            )
        if self.cut1 == self.cut2 and not self.allow_empty_body:
            raise ConfigError("cut1 == cut2 leaves an empty body")


@dataclass(frozen=True)
class NoSplit:
    """Degenerate partition used by the FL, centralized and local regimes."""

    total_layers: int


@dataclass(frozen=True)
class ArchConfig:
    preset: str = "tinycnn"
    input_shape: tuple = (3, 32, 32)
    num_classes: int = 10
    feature_dim: int = 1536
    hidden: int = 64


@dataclass
class Model:
    arch: ArchConfig
    layers: list[tc.Layer]
    split: SplitSpec


@dataclass(eq=False)
class ModelSegment:
    role: str
    layers: list[tc.Layer]
    in_shape: tuple
    lr: float = 1e-4
    optimizer_state: tc.AdamState = None
    grads: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"unknown segment role {self.role!r}")
        shape = tuple(self.in_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
        self.out_shape = shape
        if self.optimizer_state is None:
            self.optimizer_state = tc.AdamState.for_params(self.params(), lr=self.lr)
        if not self.grads:
            self.grads = [np.zeros_like(p) for p in self.params()]

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params()))

    def zero_grad(self) -> None:
        for g in self.grads:
            g[...] = 0.0

    def step(self) -> None:
        """Apply accumulated gradients with Adam, then clear them."""
        if self.grads:
            tc.adam_step(self.params(), self.grads, self.optimizer_state)
            for layer in self.layers:
                layer.version += 1
        self.zero_grad()

    def set_params(self, values: list[np.ndarray]) -> None:
        for p, v in zip(self.params(), values):
            p[...] = v
        for layer in self.layers:
            layer.version += 1


def param_hash(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return h.hexdigest()


# -- presets ------------------------------------------------------------------

def default_arch(preset: str, **overrides) -> ArchConfig:
    if preset == "tinycnn":
        base = dict(input_shape=(3, 32, 32), num_classes=10, feature_dim=1536, hidden=64)
    elif preset == "mlp":
        base = dict(input_shape=(48,), num_classes=2, feature_dim=24, hidden=32)
    else:
        raise ConfigError(f"unknown architecture preset {preset!r} (expected tinycnn or mlp)")
    base.update({k: v for k, v in overrides.items() if v is not None})
    base["input_shape"] = tuple(base["input_shape"])
    return ArchConfig(preset=preset, **base)


def build_model(arch: ArchConfig, seed: int) -> Model:
    """Build the preset's layer list; each layer draws its weights from its own stream."""
    d = arch.feature_dim
    if d <= 0 or d % CR_DENOMINATOR_LCM:
        raise ConfigError(f"feature_dim {d} must be a positive multiple of {CR_DENOMINATOR_LCM}")

    def rng(i):
        return stream(seed, "init", arch.preset, i)

    if arch.preset == "tinycnn":
        c, h, w = arch.input_shape
        # conv 3x3 'same' -> avgpool p -> flatten gives out_ch * (h/p) * (w/p) = d.
        pool = 4
        if h % pool or w % pool:
            raise ConfigError(f"tinycnn needs spatial extents divisible by {pool}, got {(h, w)}")
        cells = (h // pool) * (w // pool)
        if d % cells:
            raise ConfigError(f"feature_dim {d} not reachable from {arch.input_shape} (need multiple of {cells})")
        layers = [
            tc.conv2d(c, d // cells, 3, rng(0), stride=1, padding=1),
            tc.relu(),
            tc.avgpool(pool),
            tc.flatten(),
            tc.dense(d, arch.hidden, rng(4)),
            tc.relu(),
            tc.dense(arch.hidden, arch.hidden, rng(6)),
            tc.relu(),
            tc.dense(arch.hidden, arch.num_classes, rng(8)),
        ]
        split = SplitSpec(4, 8, len(layers))
    elif arch.preset == "mlp":
        (n_in,) = arch.input_shape
        layers = [
            tc.dense(n_in, d, rng(0)),
            tc.relu(),
            tc.dense(d, arch.hidden, rng(2)),
            tc.relu(),
            tc.dense(arch.hidden, arch.hidden, rng(4)),
            tc.relu(),
            tc.dense(arch.hidden, arch.num_classes, rng(6)),
        ]
        split = SplitSpec(2, 6, len(layers))
    else:
        raise ConfigError(f"unknown architecture preset {arch.preset!r}")
    return Model(arch, layers, split)


def _clone_layer(layer: tc.Layer) -> tc.Layer:
    return tc.Layer(layer.kind, [p.copy() for p in layer.params], dict(layer.hyper))


def partition(model: Model, spec: SplitSpec | NoSplit | None = None, lr: float = 1e-4,
              copy: bool = True):
    """Split ``model`` into (head, body, tail) segments, or a single ``full`` segment.

    Segments own copies of the layers unless ``copy=False``, and each gets its own
    optimizer state.
    """
    spec = model.split if spec is None else spec
    layers = [_clone_layer(l) for l in model.layers] if copy else list(model.layers)
    if isinstance(spec, NoSplit):
        if spec.total_layers != len(layers):
            raise ConfigError(f"NoSplit over {spec.total_layers} layers, model has {len(layers)}")
        return ModelSegment("full", layers, model.arch.input_shape, lr=lr)
    if spec.total_layers != len(layers):
        raise ConfigError(f"split spec covers {spec.total_layers} layers, model has {len(layers)}")
    head = ModelSegment("head", layers[:spec.cut1], model.arch.input_shape, lr=lr)
    body = ModelSegment("body", layers[spec.cut1:spec.cut2], head.out_shape, lr=lr)
    tail = ModelSegment("tail", layers[spec.cut2:], body.out_shape, lr=lr)
    return head, body, tail


def merge_segments(role: str, *segments: ModelSegment, lr: float = 1e-4) -> ModelSegment:
    """A new segment owning copies of the concatenated layers of ``segments``."""
    layers = [_clone_layer(l) for s in segments for l in s.layers]
    return ModelSegment(role, layers, segments[0].in_shape, lr=lr)


def segment_forward(seg: ModelSegment, x: np.ndarray):
    contexts = []
    for layer in seg.layers:
        x, ctx = tc.forward(layer, x)
        contexts.append(ctx)
    return x, contexts


def segment_backward(seg: ModelSegment, contexts, upstream: np.ndarray) -> np.ndarray:
    """Backpropagate through ``seg``, accumulating parameter grads into ``seg.grads``."""
    if len(contexts) != len(seg.layers):
        raise tc.ContextError(f"{len(contexts)} contexts for a {len(seg.layers)}-layer {seg.role} segment")
    g = upstream
    offsets = np.cumsum([0] + [len(l.params) for l in seg.layers])
    for idx in range(len(seg.layers) - 1, -1, -1):
        g, pgrads = tc.backward(seg.layers[idx], contexts[idx], g)
        for j, pg in enumerate(pgrads):
            seg.grads[offsets[idx] + j] += pg
    return g


def flop_count(seg: ModelSegment, in_shape=None) -> int:
    """Forward FLOPs per sample through ``seg``."""
    shape = tuple(seg.in_shape if in_shape is None else in_shape)
    total = 0
    for layer in seg.layers:
        total += tc.layer_flops(layer, shape)
        shape = layer.output_shape(shape)
    return total
