"""Experiment drivers: single runs, the CR x SNR grid and the latency sweep."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import semantic_codec as sc
from . import tensor_core as tc
from .config import CodecSettings, LatencyModel, RunConfig, write_config
from .data import Dataset, batch_order, find_cifar10_dir, load_cifar10, synth_split
from .metrics import evaluate, records_to_csv, write_summary
from .nsm import NsmPolicy
from .orchestrator import Simulation
from .split_models import build_model, default_arch, partition, segment_backward, segment_forward

log = logging.getLogger(__name__)

GRID_COLUMNS = ("channel", "cr", "snr_db", "psnr_db", "task_loss", "accuracy")
SWEEP_COLUMNS = ("regime", "num_clients", "latency_s", "uplink_bytes", "downlink_bytes",
                 "grad_uplink_bytes", "sync_bytes")
SYNTH_DEFAULTS = {"tinycnn": ((3, 32, 32), 10), "mlp": ((48,), 2)}


# -- data ---------------------------------------------------------------------

def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    kind = cfg.dataset
    if kind == "auto":
        kind = "cifar10" if find_cifar10_dir(cfg.data_dir) else "synthetic"
        if kind == "synthetic":
            log.warning("CIFAR-10 not found; falling back to synthetic data")
    if kind == "cifar10":
        return load_cifar10(cfg.data_dir, cfg.n_train, cfg.n_test)
    shape, classes = SYNTH_DEFAULTS[cfg.arch]
    return synth_split(cfg.n_train, cfg.n_test, classes, shape, cfg.separation, cfg.seed)


# -- codecs -------------------------------------------------------------------

def warmup_features(cfg: RunConfig, train: Dataset, epochs: int | None = None) -> np.ndarray:
    """Head features of ``train`` after a short centralized warm-up."""
    epochs = cfg.codec.warmup_epochs if epochs is None else epochs
    arch = default_arch(cfg.arch, input_shape=train.input_shape, num_classes=train.num_classes)
    model = build_model(arch, cfg.seed)
    head, body, tail = partition(model, lr=cfg.lr)
    idx_all = np.arange(len(train))
    for e in range(epochs):
        for idx in batch_order(idx_all, cfg.batch_size, cfg.seed, "warmup", e):
            f, hc = segment_forward(head, train.x[idx])
            b, bc = segment_forward(body, f)
            logits, tcx = segment_forward(tail, b)
            _, g = tc.softmax_cross_entropy(logits, train.y[idx])
            g = segment_backward(tail, tcx, g)
            g = segment_backward(body, bc, g)
            segment_backward(head, hc, g)
            for s in (head, body, tail):
                s.step()
    feats = [segment_forward(head, train.x[i:i + 250])[0] for i in range(0, len(train), 250)]
    return np.concatenate(feats)


def prepare_codecs(cfg: RunConfig, train: Dataset, crs=None, features: np.ndarray | None = None) -> dict:
    """Pretrained, frozen codecs for every CR the policy can select (or ``crs``)."""
    cs: CodecSettings = cfg.codec
    crs = sorted(set(crs) if crs is not None else cfg.policy.crs(), reverse=True)
    if cs.identity:
        arch = default_arch(cfg.arch, input_shape=train.input_shape, num_classes=train.num_classes)
        return {Fraction(1): sc.identity_codec(arch.feature_dim)}
    ckpt_dir = Path(cs.checkpoint_dir) if cs.checkpoint_dir else None
    codecs = {}
    for cr in crs:
        path = ckpt_dir / f"codec_{cr.numerator}_{cr.denominator}_seed{cfg.seed}.bin" if ckpt_dir else None
        if path is not None and path.exists():
            codecs[cr] = sc.load_codec(path)
            continue
        if features is None:
            features = warmup_features(cfg, train)
        codecs[cr] = sc.pretrain_codec(features, cr, cs.train_snr_db, cs.pretrain_epochs, cfg.seed,
                                       lr=cs.lr, batch_size=cfg.batch_size, hidden=cs.hidden,
                                       init=cs.init)
        log.info("pretrained codec cr=%s: loss %.4g -> %.4g", cr, codecs[cr].loss_history[0],
                 codecs[cr].loss_history[-1])
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            sc.save_codec(codecs[cr], path)
    return codecs


# -- runs ---------------------------------------------------------------------

def run_records(cfg: RunConfig, data=None, codecs=None):
    train, test = data or load_data(cfg)
    if cfg.regime == "scusfl" and codecs is None:
        codecs = prepare_codecs(cfg, train)
    sim = Simulation(cfg, train, test, codecs)
    return list(sim.run()), sim


def run_experiment(cfg: RunConfig, out_dir, data=None, codecs=None, name: str | None = None) -> Path:
    """Run ``cfg`` and write ``<name>.csv``, ``<name>.summary.json`` and the config used."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = name or cfg.regime
    records, _ = run_records(cfg, data, codecs)
    csv_path = out / f"{name}.csv"
    csv_path.write_text(records_to_csv(records), encoding="utf-8")
    write_summary(records, cfg.deadline_s, out / f"{name}.summary.json")
    write_config(cfg, out / f"{name}.config.toml")
    return csv_path


@dataclass
class GridCell:
    channel: str
    cr: Fraction
    snr_db: float
    psnr_db: float
    task_loss: float
    accuracy: float


def run_grid(cfg: RunConfig, crs=sc.STANDARD_CRS, snrs=(0, 5, 10, 15, 20), channels=("awgn", "rayleigh"),
             data=None, codecs=None, segments=None) -> list[GridCell]:
    """Evaluate each (channel, CR, SNR) cell with pretrained codecs and a trained model.

    The model is trained as SC-USFL over ``cfg`` (codecs frozen throughout)
    unless trained ``segments`` are given.
    """
    train, test = data or load_data(cfg)
    crs = [sc.parse_cr(c) for c in crs]
    if codecs is None:
        codecs = prepare_codecs(cfg, train, crs)
    if segments is None:
        run_cfg = cfg.with_(regime="scusfl")
        missing = run_cfg.policy.crs() - set(codecs)
        if missing:
            codecs = {**codecs, **prepare_codecs(run_cfg, train, missing)}
        sim = Simulation(run_cfg, train, test, codecs)
        for _ in sim.run():
            pass
        c0 = sim.clients[0]
        segments = (c0.head, sim.server.bodies[0], c0.tail)
    cells = []
    for chan in channels:
        for cr in crs:
            for snr in snrs:
                ev = evaluate(segments, test, codecs[cr], chan, float(snr), seed=cfg.seed)
                cells.append(GridCell(chan, cr, float(snr), ev.psnr, ev.task_loss, ev.accuracy))
    return cells


def write_grid(cells, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_COLUMNS)
        for c in cells:
            w.writerow([c.channel, str(c.cr), repr(c.snr_db), repr(c.psnr_db), repr(c.task_loss), repr(c.accuracy)])
    return path


@dataclass
class SweepRow:
    regime: str
    num_clients: int
    latency_s: float
    uplink_bytes: int
    downlink_bytes: int
    grad_uplink_bytes: int
    sync_bytes: int


def run_latency_sweep(cfg: RunConfig, client_counts=(1, 2, 4, 8), regimes=("fl", "sfl", "usfl", "scusfl"),
                      data=None, codecs=None) -> list[SweepRow]:
    """Mean per-round latency and bytes per regime and client count.

    Every client keeps ``cfg.samples_per_client`` samples, so total traffic grows
    with the number of vehicles.
    """
    if not cfg.samples_per_client:
        cfg = cfg.with_(samples_per_client=max(cfg.batch_size, cfg.n_train // max(client_counts)))
    train, test = data or load_data(cfg)
    if "scusfl" in regimes and codecs is None:
        codecs = prepare_codecs(cfg, train)
    rows = []
    for regime in regimes:
        for n in client_counts:
            rcfg = cfg.with_(regime=regime, num_clients=n)
            sim = Simulation(rcfg, train, test, codecs if regime == "scusfl" else None)
            recs = list(sim.run())
            rows.append(SweepRow(regime, n, float(np.mean([r.latency_s for r in recs])),
                                 int(np.mean([r.uplink_bytes for r in recs])),
                                 int(np.mean([r.downlink_bytes for r in recs])),
                                 int(np.mean([r.grad_uplink_bytes for r in recs])),
                                 int(np.mean([r.sync_bytes for r in recs]))))
    return rows


def write_sweep(rows, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([r.regime, r.num_clients, repr(r.latency_s), r.uplink_bytes, r.downlink_bytes,
                        r.grad_uplink_bytes, r.sync_bytes])
    return path


# -- presets ------------------------------------------------------------------

DESK = RunConfig(rounds=10, local_epochs=3, num_clients=4, n_train=2000, n_test=1000, dataset="auto",
                 codec=CodecSettings())

PRESETS = {
    # Accuracy curves for every regime.
    "fig4a": dict(kind="runs", cfg=DESK.with_(rounds=5, local_epochs=1, n_train=1000, n_test=500),
                  regimes=("centralized", "local", "fl", "usfl", "scusfl")),
    # Per-round latency versus vehicle count, shared uplink bandwidth.
    "fig4b": dict(kind="sweep", cfg=DESK.with_(rounds=1, samples_per_client=128, policy=NsmPolicy.static("1/3"),
                                             latency=LatencyModel(bandwidth_mode="shared", bandwidth_hz=4e6),
                                             codec=CodecSettings(pretrain_epochs=1))),
    "fig5-awgn": dict(kind="grid", cfg=DESK.with_(rounds=3, local_epochs=1), channels=("awgn",)),
    "fig5-rayleigh": dict(kind="grid", cfg=DESK.with_(rounds=3, local_epochs=1), channels=("rayleigh",)),
}


def gnuplot_script(kind: str, csv_name: str) -> str:
    if kind == "grid":
        return (f"set datafile separator ','\nset key autotitle columnhead\n"
                f"set xlabel 'SNR (dB)'\nset ylabel 'PSNR (dB)'\n"
                f"plot for [cr in '1/3 1/6 1/8 1/12'] '{csv_name}' using "
                f"(strcol(2) eq cr ? $3 : NaN):4 with linespoints title 'CR '.cr\n")
    if kind == "sweep":
        return (f"set datafile separator ','\nset xlabel 'vehicles'\nset ylabel 'latency (s)'\n"
                f"plot for [r in 'fl sfl usfl scusfl'] '{csv_name}' using "
                f"(strcol(1) eq r ? $2 : NaN):3 with linespoints title r\n")
    return (f"set datafile separator ','\nset xlabel 'round'\nset ylabel 'test accuracy'\n"
            f"plot '{csv_name}' using 1:4 with lines title columnhead(4)\n")


def run_preset(name: str, out_dir, seed: int | None = None, data_dir: str | None = None) -> list[Path]:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    spec = PRESETS[name]
    cfg = spec["cfg"].with_(**{k: v for k, v in (("seed", seed), ("data_dir", data_dir)) if v is not None})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if spec["kind"] == "runs":
        data = load_data(cfg)
        codecs = prepare_codecs(cfg, data[0])
        for regime in spec["regimes"]:
            written.append(run_experiment(cfg.with_(regime=regime), out, data,
                                          codecs if regime == "scusfl" else None))
            (out / f"{regime}.gp").write_text(gnuplot_script("runs", f"{regime}.csv"))
    elif spec["kind"] == "grid":
        cells = run_grid(cfg, channels=spec["channels"])
        written.append(write_grid(cells, out / f"{name}.csv"))
        (out / f"{name}.gp").write_text(gnuplot_script("grid", f"{name}.csv"))
    else:
        rows = run_latency_sweep(cfg)
        written.append(write_sweep(rows, out / f"{name}.csv"))
        (out / f"{name}.gp").write_text(gnuplot_script("sweep", f"{name}.csv"))
    return written
