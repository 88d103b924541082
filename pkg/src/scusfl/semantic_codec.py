"""Semantic communication module: per-CR encoder/decoder pairs.

The encoder maps a length-``d`` feature vector to ``k = d * cr`` real symbols,
which are power-normalised before hitting the channel. The receiver equalises,
undoes the normalisation using the scale carried as side information, and
decodes back to ``d`` features. Codecs are pretrained as autoencoders through
a noisy AWGN channel and then frozen.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import channel as ch
from . import tensor_core as tc
from .split_models import param_hash
from .streams import stream

STANDARD_CRS = (Fraction(1, 3), Fraction(1, 6), Fraction(1, 8), Fraction(1, 12))
VALID_CRS = STANDARD_CRS + (Fraction(1),)
PSNR_CAP_DB = 100.0
CHECKPOINT_MAGIC = b"SCCODEC"
CHECKPOINT_VERSION = 1


class CodecError(ValueError):
    pass


class FrozenCodecError(RuntimeError):
    pass


def parse_cr(value) -> Fraction:
    """Parse ``"1/3"``, ``0.333..`` or a Fraction into one of the supported CRs."""
    if isinstance(value, Fraction):
        cr = value
    elif isinstance(value, str):
        cr = Fraction(value.strip())
    else:
        cr = Fraction(value).limit_denominator(24)
    if cr not in VALID_CRS:
        raise CodecError(f"unsupported compression ratio {value!r}; choose from "
                         + ", ".join(str(c) for c in VALID_CRS))
    return cr


def latent_size(d: int, cr: Fraction) -> int:
    k = d * cr
    if k.denominator != 1:
        raise CodecError(f"d={d} with cr={cr} gives non-integer latent size {float(k)}")
    return int(k)


@dataclass(eq=False)
class SemanticCodec:
    cr: Fraction
    d: int
    encoder: list[tc.Layer]
    decoder: list[tc.Layer]
    arch: str
    train_snr_db: float = 10.0
    frozen: bool = False
    loss_history: list[float] = field(default_factory=list)
    # Fixed input standardisation fitted on the pretraining features:
    # the networks see (x - shift) / spread.
    shift: np.ndarray = None
    spread: np.ndarray = None

    def __post_init__(self):
        if self.shift is None:
            self.shift = np.zeros(self.d)
        if self.spread is None:
            self.spread = np.ones(1)

    @property
    def k(self) -> int:
        return latent_size(self.d, self.cr)

    def params(self) -> list[np.ndarray]:
        return [p for l in self.encoder + self.decoder for p in l.params]

    def state_arrays(self) -> list[np.ndarray]:
        """Trainable parameters plus the fixed standardisation."""
        return self.params() + [self.shift, self.spread]

    def param_hash(self) -> str:
        return param_hash(self.state_arrays())

    def freeze(self) -> "SemanticCodec":
        self.frozen = True
        for p in self.state_arrays():
            p.flags.writeable = False
        return self

    def encoder_flops(self) -> int:
        return sum(tc.layer_flops(l, ()) for l in self.encoder)

    def decoder_flops(self) -> int:
        return sum(tc.layer_flops(l, ()) for l in self.decoder)


def _dense_from(w: np.ndarray) -> tc.Layer:
    # C-contiguous so a reloaded checkpoint hits the same BLAS path bit for bit.
    w = np.ascontiguousarray(w, dtype=np.float64)
    return tc.Layer("dense", [w, np.zeros(w.shape[0])], {"in": w.shape[1], "out": w.shape[0]})


def build_codec(d: int, cr, seed: int, hidden: int | None = None, train_snr_db: float = 10.0) -> SemanticCodec:
    """Randomly initialised codec: dense-relu-dense on each side, linear outputs."""
    cr = parse_cr(cr)
    k = latent_size(d, cr)
    h = hidden or max(k, d // 2)
    r = lambda i: stream(seed, "codec", str(cr), i)
    enc = [tc.dense(d, h, r(0)), tc.relu(), tc.dense(h, k, r(1))]
    dec = [tc.dense(k, h, r(2)), tc.relu(), tc.dense(h, d, r(3))]
    return SemanticCodec(cr, d, enc, dec, f"mlp2:d={d},h={h},k={k}", train_snr_db)


def pca_codec(features: np.ndarray, cr, train_snr_db: float = 10.0) -> SemanticCodec:
    """Codec initialised at the principal subspace of ``features``.

    The hidden layer holds +/- copies of each projection so that
    ``relu(a) - relu(-a) == a`` makes each side exactly linear at init.
    """
    feats = np.asarray(features, dtype=np.float64)
    d = feats.shape[1]
    cr = parse_cr(cr)
    k = latent_size(d, cr)
    shift = feats.mean(axis=0)
    spread = max(float(np.std(feats - shift)), 1e-12)
    u = (feats - shift) / spread
    evals, evecs = np.linalg.eigh(u.T @ u / len(u))
    top = evecs[:, ::-1][:, :k].T  # (k, d)
    top *= np.where(top[np.arange(k), np.abs(top).argmax(axis=1)] < 0, -1.0, 1.0)[:, None]
    eye = np.eye(k)
    enc = [_dense_from(np.vstack([top, -top])), tc.relu(), _dense_from(np.hstack([eye, -eye]))]
    dec = [_dense_from(np.vstack([eye, -eye])), tc.relu(), _dense_from(np.hstack([top.T, -top.T]))]
    return SemanticCodec(cr, d, enc, dec, f"mlp2:d={d},h={2 * k},k={k}", train_snr_db,
                         shift=shift, spread=np.array([spread]))


def identity_codec(d: int) -> SemanticCodec:
    """cr = 1 codec whose encoder and decoder are identity maps (frozen)."""
    eye = np.eye(d)
    return SemanticCodec(Fraction(1), d, [_dense_from(eye.copy())], [_dense_from(eye.copy())],
                         f"identity:d={d}", math.inf).freeze()


# -- normalisation ------------------------------------------------------------

def power_normalize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scale each row to unit mean power; return symbols and the per-row scale.

    ``s = sqrt(k) * x / ||x||``; the returned scale is ``||x|| / sqrt(k)`` so
    that ``x == s * scale``.
    """
    x = np.asarray(x, dtype=np.float64)
    k = x.shape[-1]
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise CodecError("cannot power-normalise a zero vector")
    scale = norm / math.sqrt(k)
    return x / scale, scale


# -- encode / decode ----------------------------------------------------------

def _run(layers, x):
    ctxs = []
    for layer in layers:
        x, c = tc.forward(layer, x)
        ctxs.append(c)
    return x, ctxs


def _back(layers, ctxs, g, grads=None):
    for i in range(len(layers) - 1, -1, -1):
        g, pg = tc.backward(layers[i], ctxs[i], g, param_grads=grads is not None)
        if grads is not None:
            grads[i] = pg
    return g


def _as_batch(x, n_expected, what):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.shape[-1] != n_expected:
        raise CodecError(f"{what}: expected length {n_expected}, got {x2.shape[-1]}")
    return x2, single


def sc_encode(features: np.ndarray, codec: SemanticCodec):
    """Return ``(symbols, scale)``; symbols have length ``k`` and unit power."""
    x, single = _as_batch(features, codec.d, "sc_encode")
    z, _ = _run(codec.encoder, (x - codec.shift) / codec.spread)
    s, scale = power_normalize(z)
    return (s[0], scale[0]) if single else (s, scale)


def sc_decode(received: np.ndarray, codec: SemanticCodec, scale) -> np.ndarray:
    y, single = _as_batch(received, codec.k, "sc_decode")
    out, _ = _run(codec.decoder, y * np.reshape(scale, (-1, 1)))
    out = out * codec.spread + codec.shift
    return out[0] if single else out


@dataclass(eq=False)
class ChainContext:
    codec: SemanticCodec
    enc_ctx: list
    dec_ctx: list
    z: np.ndarray
    norm: np.ndarray
    resid: np.ndarray  # equalised symbols minus transmitted symbols (effective noise)


def codec_chain(features: np.ndarray, codec: SemanticCodec, real: ch.ChannelRealization | None,
                rng: np.random.Generator | None = None):
    """encode -> normalise -> channel -> equalise -> de-normalise -> decode.

    Returns ``(reconstruction, ChainContext)``; ``real=None`` is a noiseless
    channel.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != codec.d:
        raise CodecError(f"codec_chain: expected (N, {codec.d}) features, got {x.shape}")
    z, enc_ctx = _run(codec.encoder, (x - codec.shift) / codec.spread)
    s, scale = power_normalize(z)
    if real is None:
        y_hat = s
    elif isinstance(real, ch.ChannelRealization):
        y_hat = ch.equalize(ch.transmit(s, real, rng), real)
    else:
        # One realization per row (per-sample block fading); with perfect CSI,
        # transmit + zero-forcing equalisation reduces to s + n / h.
        if len(real) != s.shape[0]:
            raise CodecError(f"codec_chain: {len(real)} realizations for {s.shape[0]} rows")
        h = np.array([r.h for r in real])[:, None]
        sd = np.sqrt(np.array([r.noise_var for r in real]))[:, None]
        rng = rng if rng is not None else np.random.default_rng(0)
        y_hat = s + sd * rng.standard_normal(s.shape) / h
    z_tilde = y_hat * scale
    out, dec_ctx = _run(codec.decoder, z_tilde)
    out = out * codec.spread + codec.shift
    return out, ChainContext(codec, enc_ctx, dec_ctx, z, scale * math.sqrt(codec.k), y_hat - s)


def _chain_backward(ctx: ChainContext, grad: np.ndarray, grads=None) -> np.ndarray:
    codec = ctx.codec
    dec_grads = [None] * len(codec.decoder) if grads is not None else None
    enc_grads = [None] * len(codec.encoder) if grads is not None else None
    g = _back(codec.decoder, ctx.dec_ctx, grad * codec.spread, dec_grads)
    # Straight-through channel with the noise held fixed:
    # z~ = z + resid * ||z|| / sqrt(k)  =>  dz~/dz = I + (resid / sqrt(k)) (z / ||z||)^T
    coef = np.sum(g * ctx.resid, axis=1, keepdims=True) / math.sqrt(codec.k)
    g = g + coef * ctx.z / ctx.norm
    g = _back(codec.encoder, ctx.enc_ctx, g, enc_grads)
    if grads is not None:
        grads.extend(pg for lst in (enc_grads, dec_grads) for pgs in lst for pg in pgs)
    return g / codec.spread


def codec_backward(codec: SemanticCodec, ctx: ChainContext, grad_wrt_reconstruction: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the encoder input; codec parameters are never touched."""
    if not codec.frozen:
        raise FrozenCodecError("codec_backward requires a frozen codec during split training")
    if ctx.codec is not codec:
        raise tc.ContextError("chain context was produced by a different codec")
    return _chain_backward(ctx, grad_wrt_reconstruction)


# -- pretraining --------------------------------------------------------------

def pretrain_codec(features: np.ndarray, cr, train_snr_db: float = 10.0, epochs: int = 20,
                   seed: int = 0, lr: float = 1e-3, batch_size: int = 64,
                   hidden: int | None = None, init: str = "pca") -> SemanticCodec:
    """Train a codec as an autoencoder through AWGN at ``train_snr_db``, then freeze it.

    ``init="pca"`` starts from the principal subspace of the features;
    ``init="random"`` starts from a Glorot-initialised network of width ``hidden``.
    ``loss_history[0]`` is the loss before training and ``loss_history[e]`` the
    loss after epoch ``e``, all measured on the full feature set under one fixed
    noise draw so the entries are directly comparable.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise CodecError("pretrain_codec needs a non-empty (N, d) feature array")
    cr = parse_cr(cr)
    if init == "pca":
        codec = pca_codec(feats, cr, train_snr_db)
    else:
        codec = build_codec(feats.shape[1], cr, seed, hidden=hidden, train_snr_db=train_snr_db)
        codec.shift = feats.mean(axis=0)
        codec.spread = np.array([max(float(np.std(feats - codec.shift)), 1e-12)])
    params = codec.params()
    state = tc.AdamState.for_params(params, lr=lr)
    n = feats.shape[0]
    awgn = ch.ChannelRealization("awgn", train_snr_db, 1.0, 0)

    def eval_loss() -> float:
        out, _ = codec_chain(feats, codec, awgn, stream(seed, "pretrain-eval", str(cr)))
        return float(np.mean((out - feats) ** 2))

    codec.loss_history.append(eval_loss())
    for epoch in range(epochs):
        order = stream(seed, "pretrain-order", str(cr), epoch).permutation(n)
        for b, start in enumerate(range(0, n, batch_size)):
            xb = feats[order[start:start + batch_size]]
            out, ctx = codec_chain(xb, codec, awgn, stream(seed, "pretrain-noise", str(cr), epoch, b))
            grads: list[np.ndarray] = []
            _chain_backward(ctx, 2.0 * (out - xb) / out.size, grads)
            tc.adam_step(params, grads, state)
            for layer in codec.encoder + codec.decoder:
                layer.version += 1
        codec.loss_history.append(eval_loss())
    return codec.freeze()


# -- PSNR ---------------------------------------------------------------------

def psnr(original: np.ndarray, reconstructed: np.ndarray, peak: float | None = None) -> float:
    """10 log10(peak^2 / MSE) in dB, capped at 100 dB."""
    o = np.asarray(original, dtype=np.float64)
    r = np.asarray(reconstructed, dtype=np.float64)
    if o.shape != r.shape:
        raise tc.ShapeError(f"psnr: shape mismatch {o.shape} vs {r.shape}")
    peak = float(np.max(np.abs(o))) if peak is None else float(peak)
    mse = float(np.mean((o - r) ** 2))
    if mse == 0 or peak == 0:
        return PSNR_CAP_DB if mse == 0 else 0.0
    return min(PSNR_CAP_DB, 10.0 * math.log10(peak * peak / mse))


def psnr_per_sample(original: np.ndarray, reconstructed: np.ndarray) -> np.ndarray:
    """Per-row PSNR using the batch's peak magnitude."""
    peak = float(np.max(np.abs(original)))
    return np.array([psnr(o, r, peak) for o, r in zip(original, reconstructed)])


# -- checkpoint ---------------------------------------------------------------

def save_codec(codec: SemanticCodec, path) -> Path:
    path = Path(path)
    block = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in codec.state_arrays())
    header = {
        "version": CHECKPOINT_VERSION,
        "cr": str(codec.cr),
        "d": codec.d,
        "train_snr_db": codec.train_snr_db if math.isfinite(codec.train_snr_db) else None,
        "arch": codec.arch,
        "param_hash": codec.param_hash(),
        "n_values": len(block) // 8,
        "loss_history": codec.loss_history,
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(block)
    return path


def load_codec(path) -> SemanticCodec:
    raw = Path(path).read_bytes()
    magic, header_line, block = raw.split(b"\n", 2)
    if magic != CHECKPOINT_MAGIC:
        raise CodecError(f"{path}: not a codec checkpoint")
    header = json.loads(header_line)
    if header.get("version") != CHECKPOINT_VERSION:
        raise CodecError(f"{path}: unsupported checkpoint version {header.get('version')}")
    kind, _, rest = header["arch"].partition(":")
    dims = dict(item.split("=") for item in rest.split(","))
    d = int(header["d"])
    if kind == "identity":
        codec = identity_codec(d)
    elif kind == "mlp2":
        codec = build_codec(d, header["cr"], 0, hidden=int(dims["h"]))
    else:
        raise CodecError(f"{path}: unknown codec architecture {header['arch']!r}")
    values = np.frombuffer(block, dtype="<f8")
    params = codec.state_arrays()
    if values.size != sum(p.size for p in params):
        raise CodecError(f"{path}: parameter block has {values.size} values, expected {sum(p.size for p in params)}")
    off = 0
    for p in params:
        p.flags.writeable = True
        p[...] = values[off:off + p.size].reshape(p.shape)
        off += p.size
    codec.train_snr_db = header["train_snr_db"] if header["train_snr_db"] is not None else math.inf
    codec.loss_history = list(header.get("loss_history", []))
    if codec.param_hash() != header["param_hash"]:
        raise CodecError(f"{path}: parameter hash mismatch (corrupt checkpoint)")
    return codec.freeze()
