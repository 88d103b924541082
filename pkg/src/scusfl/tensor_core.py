"""Minimal differentiable layer engine.

Tensors are plain float64 numpy arrays with a leading batch axis. Each layer
kind has a forward that returns ``(output, context)`` and a backward that
consumes that context and returns ``(input_grad, param_grads)``. Gradients are
exact analytic derivatives; :func:`finite_diff_grad` is the independent oracle
used to check them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64

LAYER_KINDS = ("dense", "conv2d", "relu", "flatten", "avgpool")


class ShapeError(ValueError):
    """Input shape is incompatible with a layer or operation."""


class ContextError(RuntimeError):
    """A backward call received a context from a different or outdated forward."""


@dataclass(eq=False)
class Layer:
    kind: str
    params: list[np.ndarray] = field(default_factory=list)
    hyper: dict = field(default_factory=dict)
    # Bumped whenever params are updated so stale contexts can be detected.
    version: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense":
            w, b = self.params
            if w.shape != (self.hyper["out"], self.hyper["in"]) or b.shape != (self.hyper["out"],):
                raise ShapeError(
                    f"dense params {w.shape}/{b.shape} inconsistent with "
                    f"in={self.hyper['in']} out={self.hyper['out']}"
                )
        elif self.kind == "conv2d":
            w, b = self.params
            h = self.hyper
            if h["kernel"] < 1 or h.get("stride", 1) < 1:
                raise ShapeError("conv2d kernel and stride must be >= 1")
            if w.shape != (h["out_ch"], h["in_ch"], h["kernel"], h["kernel"]) or b.shape != (h["out_ch"],):
                raise ShapeError(f"conv2d params {w.shape}/{b.shape} inconsistent with {h}")
        elif self.kind == "avgpool" and self.hyper.get("size", 0) < 1:
            raise ShapeError("avgpool size must be >= 1")

    def output_shape(self, in_shape: tuple) -> tuple:
        """Per-sample output shape for a per-sample ``in_shape``."""
        k = self.kind
        if k == "dense":
            if tuple(in_shape) != (self.hyper["in"],):
                raise ShapeError(f"dense expects ({self.hyper['in']},), got {tuple(in_shape)}")
            return (self.hyper["out"],)
        if k == "conv2d":
            if len(in_shape) != 3 or in_shape[0] != self.hyper["in_ch"]:
                raise ShapeError(f"conv2d expects ({self.hyper['in_ch']}, H, W), got {tuple(in_shape)}")
            ho, wo = _conv_out_hw(in_shape[1:], self.hyper)
            return (self.hyper["out_ch"], ho, wo)
        if k == "avgpool":
            if len(in_shape) != 3:
                raise ShapeError(f"avgpool expects (C, H, W), got {tuple(in_shape)}")
            p = self.hyper["size"]
            if in_shape[1] % p or in_shape[2] % p:
                raise ShapeError(f"avgpool size {p} does not tile spatial extents {tuple(in_shape[1:])}")
            return (in_shape[0], in_shape[1] // p, in_shape[2] // p)
        if k == "flatten":
            return (int(np.prod(in_shape)),)
        return tuple(in_shape)

    def set_params(self, values: list[np.ndarray]) -> None:
        for p, v in zip(self.params, values):
            p[...] = v
        self.version += 1


@dataclass(eq=False)
class Context:
    layer: Layer
    version: int
    in_shape: tuple
    saved: tuple


def _conv_out_hw(hw, hyper) -> tuple[int, int]:
    k, s, pad = hyper["kernel"], hyper.get("stride", 1), hyper.get("padding", 0)
    H, W = hw[0] + 2 * pad, hw[1] + 2 * pad
    if k > H or k > W:
        raise ShapeError(f"conv2d kernel {k} exceeds padded input extents {(H, W)}")
    return (H - k) // s + 1, (W - k) // s + 1


# -- initialisation -----------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(DTYPE)


def dense(n_in: int, n_out: int, rng: np.random.Generator) -> Layer:
    w = glorot_uniform(rng, (n_out, n_in), n_in, n_out)
    return Layer("dense", [w, np.zeros(n_out, dtype=DTYPE)], {"in": n_in, "out": n_out})


def conv2d(in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
           stride: int = 1, padding: int = 0) -> Layer:
    w = glorot_uniform(rng, (out_ch, in_ch, kernel, kernel),
                       in_ch * kernel * kernel, out_ch * kernel * kernel)
    return Layer("conv2d", [w, np.zeros(out_ch, dtype=DTYPE)],
                 {"in_ch": in_ch, "out_ch": out_ch, "kernel": kernel,
                  "stride": stride, "padding": padding})


def relu() -> Layer:
    return Layer("relu")


def flatten() -> Layer:
    return Layer("flatten")


def avgpool(size: int) -> Layer:
    return Layer("avgpool", hyper={"size": size})


# -- forward / backward -------------------------------------------------------

def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values produced by {what}")
    return arr


def forward(layer: Layer, x: np.ndarray) -> tuple[np.ndarray, Context]:
    """Apply ``layer`` to the batch ``x``; return output and backward context."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim < 2:
        raise ShapeError(f"{layer.kind}: expected a batched input, got shape {x.shape}")
    try:
        out_shape = layer.output_shape(x.shape[1:])
    except ShapeError as exc:
        raise ShapeError(f"{layer.kind} layer {layer.hyper}: input shape {x.shape}: {exc}") from None
    k = layer.kind
    if k == "dense":
        w, b = layer.params
        y = x @ w.T + b
        saved = (x,)
    elif k == "relu":
        y = np.maximum(x, 0.0)
        saved = (x > 0,)
    elif k == "flatten":
        y = x.reshape(x.shape[0], -1)
        saved = ()
    elif k == "avgpool":
        p = layer.hyper["size"]
        # Strided taps are much faster than a 6-D reshape + mean.
        y = sum(x[:, :, i::p, j::p] for i in range(p) for j in range(p)) / (p * p)
        saved = ()
    else:
        y, saved = _conv_forward(layer, x, out_shape)
    return _check_finite(y, k), Context(layer, layer.version, x.shape, saved)


def backward(layer: Layer, ctx: Context, upstream: np.ndarray,
             param_grads: bool = True) -> tuple[np.ndarray, list[np.ndarray]]:
    """Return ``(input_grad, param_grads)`` for the forward call that produced ``ctx``.

    With ``param_grads=False`` (frozen layers) the parameter list is empty.
    """
    if ctx.layer is not layer:
        raise ContextError(f"context belongs to a different {ctx.layer.kind} layer")
    if ctx.version != layer.version:
        raise ContextError(f"stale context for {layer.kind} layer (params updated since forward)")
    upstream = np.asarray(upstream, dtype=DTYPE)
    expected = (ctx.in_shape[0],) + layer.output_shape(ctx.in_shape[1:])
    if upstream.shape != expected:
        raise ShapeError(f"{layer.kind} backward: upstream shape {upstream.shape} != output shape {expected}")
    k = layer.kind
    if k == "dense":
        (x,) = ctx.saved
        w, _ = layer.params
        return upstream @ w, ([upstream.T @ x, upstream.sum(axis=0)] if param_grads else [])
    if k == "relu":
        (mask,) = ctx.saved
        return upstream * mask, []
    if k == "flatten":
        return upstream.reshape(ctx.in_shape), []
    if k == "avgpool":
        p = layer.hyper["size"]
        g = np.repeat(np.repeat(upstream, p, axis=2), p, axis=3) / (p * p)
        return g, []
    return _conv_backward(layer, ctx, upstream, param_grads)


def _im2col(x: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, H, W) -> (N*Ho*Wo, C*k*k) patch matrix."""
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(x.shape[0] * ho * wo, -1)


def _conv_forward(layer: Layer, x: np.ndarray, out_shape) -> tuple[np.ndarray, tuple]:
    w, b = layer.params
    k, s, pad = layer.hyper["kernel"], layer.hyper.get("stride", 1), layer.hyper.get("padding", 0)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    co, ho, wo = out_shape
    n = x.shape[0]
    cols = _im2col(x, k, s, ho, wo)
    y = cols @ w.reshape(co, -1).T + b
    y = y.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), (cols, x.shape)


def _conv_backward(layer: Layer, ctx: Context, g: np.ndarray, param_grads: bool = True):
    cols, xp_shape = ctx.saved
    w, _ = layer.params
    k, s, pad = layer.hyper["kernel"], layer.hyper.get("stride", 1), layer.hyper.get("padding", 0)
    n, co, ho, wo = g.shape
    gm = g.transpose(0, 2, 3, 1).reshape(-1, co)
    dcols = (gm @ w.reshape(co, -1)).reshape(n, ho, wo, w.shape[1], k, k)
    dx = np.zeros(xp_shape, dtype=DTYPE)
    # Scatter each kernel tap back onto the input grid.
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    if not param_grads:
        return np.ascontiguousarray(dx), []
    return np.ascontiguousarray(dx), [(gm.T @ cols).reshape(w.shape), g.sum(axis=(0, 2, 3))]


# -- loss ---------------------------------------------------------------------

def softmax_cross_entropy(logits: np.ndarray, label) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to ``logits``.

    Accepts a single rank-1 logit vector with an integer label, or a batch of
    logits with an integer label array (the loss is then the batch mean and the
    gradient is scaled by ``1/N``).
    """
    z = np.asarray(logits, dtype=DTYPE)
    single = z.ndim == 1
    if single:
        z = z[None, :]
    labels = np.asarray(label).reshape(-1)
    if labels.shape[0] != z.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {z.shape[0]} logit rows")
    if labels.dtype.kind not in "iu" or (labels < 0).any() or (labels >= z.shape[1]).any():
        raise ValueError(f"label out of range for {z.shape[1]} classes: {labels.tolist()[:8]}")
    labels = labels.view(np.ndarray)
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    losses = lse - shifted[rows, labels]
    probs = np.exp(shifted - lse[:, None])
    grad = probs
    grad[rows, labels] -= 1.0
    grad /= z.shape[0]
    loss = float(losses.mean())
    return loss, (grad[0] if single else grad)


# -- optimiser ----------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr: float = 1e-4, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], lr=lr, **kw)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> list[np.ndarray]:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError(f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moments")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"adam_step: param {p.shape}, grad {g.shape}, moment {m.shape}")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# -- gradient oracle ----------------------------------------------------------

def finite_diff_grad(f, x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar function ``f`` at ``x``."""
    x = np.array(x, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x)
        flat[i] = orig - eps
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def layer_flops(layer: Layer, in_shape: tuple) -> int:
    """Forward FLOPs per sample; activations, pooling and reshapes count as zero."""
    if layer.kind == "dense":
        return 2 * layer.hyper["in"] * layer.hyper["out"]
    if layer.kind == "conv2d":
        co, ho, wo = layer.output_shape(in_shape)
        k = layer.hyper["kernel"]
        return 2 * k * k * layer.hyper["in_ch"] * co * ho * wo
    return 0
