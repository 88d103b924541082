"""Round execution for every training regime.

Regimes:

* ``centralized`` - one model, all data.
* ``local`` - one model per client, no communication.
* ``fl`` - full local models, FedAvg of all weights.
* ``sfl`` - client head, server body + classifier; labels go uplink.
* ``usfl`` - client head and tail, server body; lossless feature transfer.
* ``scusfl`` - ``usfl`` with the frozen semantic codec and a noisy uplink.

Within a round each client trains on its own shard against its own server-side
body replica, so clients are independent and may run on a thread pool; the
aggregation at the end of the round is the barrier.
"""

from __future__ import annotations

import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import channel as ch
from . import semantic_codec as sc
from . import tensor_core as tc
from .config import RunConfig
from .data import Dataset, batch_order, shard_dirichlet, shard_iid
from .metrics import RoundRecord, evaluate, evaluate_ensemble
from .nsm import observe, select_cr
from .split_models import (Model, ModelSegment, NoSplit, build_model, default_arch, flop_count,
                           merge_segments, partition, segment_backward, segment_forward)
from .streams import stream

# Training a segment costs ~3x its forward FLOPs (forward, input grad, weight grad);
# the frozen codec needs only forward and input grad.
TRAIN_FLOP_FACTOR = 3
FROZEN_FLOP_FACTOR = 2


class LabelLeakError(AssertionError):
    """A label value reached server scope in a regime that must keep labels local."""


class TaintedLabels(np.ndarray):
    """Label array that is detectable wherever it travels.

    Indexing keeps the taint (a label subset is still labels); arithmetic does
    not, since derived quantities such as loss gradients are not label values.
    """

    def __new__(cls, labels):
        return np.asarray(labels, dtype=np.int64).view(cls)

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        inputs = tuple(i.view(np.ndarray) if isinstance(i, TaintedLabels) else i for i in inputs)
        return getattr(ufunc, method)(*inputs, **kwargs)


def fedavg(weight_sets, sample_counts):
    """Sample-count weighted elementwise mean of parameter lists."""
    if len(weight_sets) != len(sample_counts) or not weight_sets:
        raise ValueError("fedavg needs one sample count per weight set")
    counts = np.asarray(sample_counts, dtype=np.float64)
    if np.any(counts <= 0):
        raise ValueError("sample counts must be positive")
    scalar = not isinstance(weight_sets[0], (list, tuple))
    sets = [[np.asarray(w, dtype=np.float64)] if scalar else [np.asarray(a, dtype=np.float64) for a in w]
            for w in weight_sets]
    n = len(sets[0])
    for s in sets:
        if len(s) != n or any(a.shape != b.shape for a, b in zip(s, sets[0])):
            raise tc.ShapeError("fedavg: weight sets differ in structure or shape")
    weights = counts / counts.sum()
    out = []
    for j in range(n):
        acc = weights[0] * sets[0][j]
        for w, s in zip(weights[1:], sets[1:]):
            acc = acc + w * s[j]
        out.append(acc)
    return out[0] if scalar else out


# -- state --------------------------------------------------------------------

@dataclass(eq=False)
class ClientState:
    cid: int
    indices: np.ndarray
    head: ModelSegment | None = None
    tail: ModelSegment | None = None
    full: ModelSegment | None = None

    @property
    def n_samples(self) -> int:
        return len(self.indices)


@dataclass(eq=False)
class ServerState:
    bodies: list
    codecs: dict = field(default_factory=dict)
    accepts_labels: bool = False
    labels_seen: int = 0
    _ctx: dict = field(default_factory=dict)

    def _receive(self, *payload) -> None:
        for item in payload:
            if isinstance(item, TaintedLabels):
                if not self.accepts_labels:
                    raise LabelLeakError("label values observed in server scope")
                self.labels_seen += 1

    def body_forward(self, cid: int, features: np.ndarray) -> np.ndarray:
        self._receive(features)
        out, ctxs = segment_forward(self.bodies[cid], features)
        self._ctx[cid] = ctxs
        return out

    def body_backward(self, cid: int, grad: np.ndarray) -> np.ndarray:
        self._receive(grad)
        g = segment_backward(self.bodies[cid], self._ctx.pop(cid), grad)
        self.bodies[cid].step()
        return g

    def forward_loss(self, cid: int, features: np.ndarray, labels) -> tuple[float, np.ndarray]:
        """SFL server step: body + classifier forward, loss, backward, update."""
        self._receive(features, labels)
        seg = self.bodies[cid]
        logits, ctxs = segment_forward(seg, features)
        loss, g = tc.softmax_cross_entropy(logits, labels)
        g_in = segment_backward(seg, ctxs, g)
        seg.step()
        return loss, g_in


@dataclass
class Traffic:
    """Per-client, per-round counters feeding byte and latency accounting."""

    samples: int = 0
    loss_sum: float = 0.0
    uplink_bytes: int = 0
    downlink_bytes: int = 0
    grad_uplink_bytes: int = 0
    sync_up_bytes: int = 0
    sync_down_bytes: int = 0
    device_flops: float = 0.0
    server_flops: float = 0.0
    crs: list = field(default_factory=list)


# -- simulation ---------------------------------------------------------------

class Simulation:
    """Owns the model replicas, channel trace and codecs for one run."""

    def __init__(self, cfg: RunConfig, train: Dataset, test: Dataset, codecs: dict | None = None,
                 model: Model | None = None):
        self.cfg = cfg
        self.train = train
        self.test = test
        arch = default_arch(cfg.arch, input_shape=train.input_shape, num_classes=train.num_classes)
        self.model = model or build_model(arch, cfg.seed)
        self.codecs = dict(codecs or {})
        n_clients = 1 if cfg.regime == "centralized" else cfg.num_clients
        self.trace = ch.generate_trace(cfg.channel_model, math.inf if cfg.noiseless else cfg.snr_db,
                                       n_clients, cfg.rounds, cfg.seed)
        self.shards = self._shards(n_clients)
        self.clients = [ClientState(c, self.shards[c]) for c in range(n_clients)]
        self.server = None
        self._setup()

    def _shards(self, n_clients):
        cfg = self.cfg
        if cfg.regime == "centralized":
            return {0: np.arange(len(self.train))}
        if cfg.samples_per_client:
            # Fixed per-client data volume (each vehicle brings its own data).
            need = cfg.samples_per_client * n_clients
            perm = stream(cfg.seed, "shard").permutation(len(self.train))
            pool = np.resize(perm, need)
            return {c: np.sort(pool[c * cfg.samples_per_client:(c + 1) * cfg.samples_per_client])
                    for c in range(n_clients)}
        if cfg.partition == "dirichlet":
            return shard_dirichlet(self.train, n_clients, cfg.dirichlet_alpha, cfg.seed)
        return shard_iid(self.train, n_clients, cfg.seed)

    def _setup(self):
        cfg, lr = self.cfg, self.cfg.lr
        regime = cfg.regime
        if regime in ("centralized", "local", "fl"):
            for c in self.clients:
                c.full = partition(self.model, NoSplit(len(self.model.layers)), lr=lr)
            return
        bodies = []
        for c in self.clients:
            head, body, tail = partition(self.model, lr=lr)
            c.head = head
            if regime == "sfl":
                bodies.append(merge_segments("body", body, tail, lr=lr))
            else:
                c.tail = tail
                bodies.append(body)
        self.server = ServerState(bodies, self.codecs, accepts_labels=(regime == "sfl"))
        if regime == "scusfl":
            missing = [str(cr) for cr in self.cfg.policy.crs() if cr not in self.codecs]
            if missing:
                raise ValueError(f"no pretrained codec for CR(s) {', '.join(missing)}")
            for cr, codec in self.codecs.items():
                if not codec.frozen:
                    raise sc.FrozenCodecError(f"codec for cr={cr} is not frozen")

    # -- per-client work ----------------------------------------------------

    def _epochs(self, client: ClientState, round_idx: int):
        E = self.cfg.local_epochs
        for e in range(E):
            yield from batch_order(client.indices, self.cfg.batch_size, self.cfg.seed, client.cid, round_idx * E + e)

    def _train_full(self, client: ClientState, round_idx: int) -> Traffic:
        t = Traffic()
        seg = client.full
        per_sample = flop_count(seg) * TRAIN_FLOP_FACTOR
        for idx in self._epochs(client, round_idx):
            xb, yb = self.train.x[idx], self.train.y[idx]
            logits, ctxs = segment_forward(seg, xb)
            loss, g = tc.softmax_cross_entropy(logits, yb)
            segment_backward(seg, ctxs, g)
            seg.step()
            t.samples += len(idx)
            t.loss_sum += loss * len(idx)
        flops = per_sample * t.samples
        if self.cfg.regime == "centralized":
            t.server_flops = flops
        else:
            t.device_flops = flops
        if self.cfg.regime == "fl":
            nbytes = seg.param_count() * self.cfg.latency.bytes_per_symbol
            t.uplink_bytes = nbytes
            t.downlink_bytes = nbytes
        return t

    def _train_split(self, client: ClientState, round_idx: int) -> Traffic:
        cfg, lm = self.cfg, self.cfg.latency
        regime = cfg.regime
        t = Traffic()
        head, tail, server = client.head, client.tail, self.server
        d = int(np.prod(head.out_shape))
        bps = lm.bytes_per_symbol
        codec = None
        if regime == "scusfl":
            cr = select_cr(cfg.policy, observe(self.trace, client.cid, round_idx))
            codec = self.codecs[cr]
            t.crs.append(cr)
            real = self.trace.get(client.cid, round_idx, "up")
        head_flops = flop_count(head)
        body_flops = flop_count(server.bodies[client.cid])
        tail_flops = flop_count(tail) if tail is not None else 0
        for b, idx in enumerate(self._epochs(client, round_idx)):
            n = len(idx)
            xb, yb = self.train.x[idx], self.train.y[idx]
            f, hctx = segment_forward(head, xb)
            if regime == "sfl":
                t.uplink_bytes += n * d * bps + n * lm.label_bytes
                loss, g_f = server.forward_loss(client.cid, f, yb)
                t.downlink_bytes += n * d * bps
            else:
                if codec is not None:
                    rng = real.noise_rng("batch", b)
                    recon, cctx = sc.codec_chain(f, codec, real, rng)
                    t.uplink_bytes += n * codec.k * bps
                    t.device_flops += n * codec.encoder_flops() * FROZEN_FLOP_FACTOR
                    t.server_flops += n * codec.decoder_flops() * FROZEN_FLOP_FACTOR
                else:
                    recon = f.copy()
                    t.uplink_bytes += n * d * bps
                b_out = server.body_forward(client.cid, recon)
                t.downlink_bytes += n * b_out[0].size * bps
                logits, tctx = segment_forward(tail, b_out)
                loss, g = tc.softmax_cross_entropy(logits, yb)
                g_bout = segment_backward(tail, tctx, g)
                t.grad_uplink_bytes += n * g_bout[0].size * bps
                g_recon = server.body_backward(client.cid, g_bout)
                t.downlink_bytes += n * d * bps
                g_f = sc.codec_backward(codec, cctx, g_recon) if codec is not None else g_recon
                tail.step()
            segment_backward(head, hctx, g_f)
            head.step()
            t.samples += n
            t.loss_sum += loss * n
        t.device_flops += t.samples * (head_flops + tail_flops) * TRAIN_FLOP_FACTOR
        t.server_flops += t.samples * body_flops * TRAIN_FLOP_FACTOR
        client_params = head.param_count() + (tail.param_count() if tail is not None else 0)
        t.sync_up_bytes = client_params * bps
        t.sync_down_bytes = client_params * bps
        return t

    # -- rounds -------------------------------------------------------------

    def _map_clients(self, fn, round_idx):
        if self.cfg.workers > 1 and len(self.clients) > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
                return list(pool.map(lambda c: fn(c, round_idx), self.clients))
        return [fn(c, round_idx) for c in self.clients]

    def _aggregate(self):
        regime = self.cfg.regime
        counts = [c.n_samples for c in self.clients]
        groups = []
        if regime == "fl":
            groups.append([c.full for c in self.clients])
        elif regime in ("sfl", "usfl", "scusfl"):
            groups.append([c.head for c in self.clients])
            if regime != "sfl":
                groups.append([c.tail for c in self.clients])
            groups.append(self.server.bodies)
        for segs in groups:
            avg = fedavg([s.params() for s in segs], counts)
            for s in segs:
                s.set_params(avg)

    def run_round(self, round_idx: int) -> RoundRecord:
        if not 0 <= round_idx < self.cfg.rounds:
            raise ValueError(f"round {round_idx} outside [0, {self.cfg.rounds})")
        regime = self.cfg.regime
        fn = self._train_split if regime in ("sfl", "usfl", "scusfl") else self._train_full
        traffic = self._map_clients(fn, round_idx)
        self._aggregate()
        return self._record(round_idx, traffic)

    def run(self):
        for r in range(self.cfg.rounds):
            yield self.run_round(r)

    # -- accounting ---------------------------------------------------------

    def client_latency(self, t: Traffic, cid: int, round_idx: int) -> float:
        lm = self.cfg.latency
        bw = lm.client_bandwidth(len(self.clients))
        up = self.trace.get(cid, round_idx, "up")
        down = self.trace.get(cid, round_idx, "down")
        comp = t.device_flops / lm.device_flops + t.server_flops / lm.server_flops
        up_bits = 8 * (t.uplink_bytes + t.grad_uplink_bytes + t.sync_up_bytes)
        down_bits = 8 * (t.downlink_bytes + t.sync_down_bytes)
        return comp + _tx_time(up_bits, bw, up) + _tx_time(down_bits, bw, down)

    def round_latency(self, traffic, round_idx: int) -> float:
        """Synchronous round: the slowest client sets the pace."""
        return max(self.client_latency(t, c.cid, round_idx) for t, c in zip(traffic, self.clients))

    def evaluate_now(self, round_idx: int):
        cfg = self.cfg
        if cfg.regime == "local":
            return evaluate_ensemble([c.full for c in self.clients], self.test)
        if cfg.regime in ("centralized", "fl"):
            return evaluate(self.clients[0].full, self.test)
        c0 = self.clients[0]
        if cfg.regime == "sfl":
            return evaluate((c0.head, ModelSegment("body", [], c0.head.out_shape), self.server.bodies[0]), self.test)
        codec = None
        snr = ch.scheduled_snr(self.trace.schedule, round_idx)
        if cfg.regime == "scusfl":
            codec = self.codecs[select_cr(cfg.policy, snr)]
        return evaluate((c0.head, self.server.bodies[0], c0.tail), self.test, codec,
                        cfg.channel_model, snr, seed=cfg.seed + round_idx)

    def _record(self, round_idx: int, traffic) -> RoundRecord:
        ev = self.evaluate_now(round_idx)
        samples = sum(t.samples for t in traffic)
        latency = self.round_latency(traffic, round_idx)
        hist = Counter(cr for t in traffic for cr in t.crs)
        return RoundRecord(
            round=round_idx,
            regime=self.cfg.regime,
            train_loss=sum(t.loss_sum for t in traffic) / samples,
            test_accuracy=ev.accuracy,
            feature_psnr=ev.psnr,
            task_loss=ev.task_loss,
            uplink_bytes=sum(t.uplink_bytes for t in traffic),
            downlink_bytes=sum(t.downlink_bytes for t in traffic),
            grad_uplink_bytes=sum(t.grad_uplink_bytes for t in traffic),
            sync_bytes=sum(t.sync_up_bytes + t.sync_down_bytes for t in traffic),
            latency_s=latency,
            cr_histogram=";".join(f"{cr}:{hist[cr]}" for cr in sorted(hist, reverse=True)),
            success=latency <= self.cfg.deadline_s,
        )


def _tx_time(bits: float, bandwidth: float, real: ch.ChannelRealization) -> float:
    if bits == 0:
        return 0.0
    rate = ch.shannon_rate(bandwidth, real.snr_db, real.h)
    return math.inf if rate == 0 else bits / rate


# Named per-regime entry points over a Simulation.

def _round_for(regime: str, sim: Simulation, round_idx: int) -> RoundRecord:
    if sim.cfg.regime != regime:
        raise ValueError(f"simulation is configured for {sim.cfg.regime!r}, not {regime!r}")
    return sim.run_round(round_idx)


def run_round_scusfl(sim: Simulation, round_idx: int) -> RoundRecord:
    return _round_for("scusfl", sim, round_idx)


def run_round_usfl(sim: Simulation, round_idx: int) -> RoundRecord:
    return _round_for("usfl", sim, round_idx)


def run_round_sfl(sim: Simulation, round_idx: int) -> RoundRecord:
    return _round_for("sfl", sim, round_idx)


def run_round_fl(sim: Simulation, round_idx: int) -> RoundRecord:
    return _round_for("fl", sim, round_idx)


def run_centralized_epoch(sim: Simulation, round_idx: int) -> RoundRecord:
    return _round_for("centralized", sim, round_idx)


def run_local(sim: Simulation, round_idx: int) -> RoundRecord:
    return _round_for("local", sim, round_idx)
