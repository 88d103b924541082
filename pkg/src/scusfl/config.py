"""Run configuration and its TOML representation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import tomli

from .channel import MODELS, parse_schedule
from .nsm import DEFAULT_POLICY, NsmPolicy
from .semantic_codec import parse_cr

REGIMES = ("centralized", "local", "fl", "sfl", "usfl", "scusfl")
SPLIT_REGIMES = ("sfl", "usfl", "scusfl")


class ConfigValidationError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class LatencyModel:
    bandwidth_hz: float = 1e6
    device_flops: float = 2e10
    server_flops: float = 2e12
    bytes_per_symbol: int = 4
    label_bytes: int = 4
    bandwidth_mode: str = "per_client"  # or "shared": bandwidth_hz is split across clients

    def __post_init__(self):
        for name in ("bandwidth_hz", "device_flops", "server_flops", "bytes_per_symbol", "label_bytes"):
            if not getattr(self, name) > 0:
                raise ConfigValidationError(f"latency.{name}", "must be positive")
        if self.bandwidth_mode not in ("per_client", "shared"):
            raise ConfigValidationError("latency.bandwidth_mode", "must be 'per_client' or 'shared'")

    def client_bandwidth(self, num_clients: int) -> float:
        return self.bandwidth_hz / num_clients if self.bandwidth_mode == "shared" else self.bandwidth_hz


@dataclass(frozen=True)
class CodecSettings:
    train_snr_db: float = 10.0
    pretrain_epochs: int = 5
    lr: float = 1e-3
    init: str = "pca"  # or "random"
    warmup_epochs: int = 1
    hidden: int | None = None
    identity: bool = False  # use the cr=1 identity codec (equivalence fixture)
    checkpoint_dir: str | None = None


@dataclass(frozen=True)
class RunConfig:
    regime: str = "scusfl"
    num_clients: int = 4
    rounds: int = 200
    local_epochs: int = 3
    batch_size: int = 64
    lr: float = 1e-4
    seed: int = 0
    arch: str = "tinycnn"
    dataset: str = "synthetic"  # synthetic | cifar10 | auto
    data_dir: str | None = None
    n_train: int = 2000
    n_test: int = 1000
    separation: float = 20.0
    samples_per_client: int | None = None  # fixes shard size instead of splitting n_train
    partition: str = "iid"
    dirichlet_alpha: float = 0.5
    channel_model: str = "awgn"
    snr_db: object = 10.0  # number or [[round_start, snr_db], ...]
    noiseless: bool = False
    policy: NsmPolicy = DEFAULT_POLICY
    codec: CodecSettings = field(default_factory=CodecSettings)
    latency: LatencyModel = field(default_factory=LatencyModel)
    deadline_s: float = math.inf
    workers: int = 1

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigValidationError("run.regime", f"must be one of {', '.join(REGIMES)}")
        for name in ("num_clients", "rounds", "local_epochs", "batch_size", "workers", "n_train", "n_test"):
            if int(getattr(self, name)) < 1:
                raise ConfigValidationError(f"run.{name}", "must be >= 1")
        if not self.lr > 0:
            raise ConfigValidationError("run.lr", "must be positive")
        if self.channel_model not in MODELS:
            raise ConfigValidationError("channel.model", f"must be one of {', '.join(MODELS)}")
        if self.dataset not in ("synthetic", "cifar10", "auto"):
            raise ConfigValidationError("data.dataset", "must be synthetic, cifar10 or auto")
        if self.partition not in ("iid", "dirichlet"):
            raise ConfigValidationError("data.partition", "must be iid or dirichlet")
        try:
            parse_schedule(self.snr_db)
        except (TypeError, ValueError) as exc:
            raise ConfigValidationError("channel.snr_db", str(exc)) from None

    def with_(self, **kw) -> "RunConfig":
        return replace(self, **kw)


# -- TOML ---------------------------------------------------------------------

_SECTIONS = {
    "run": ("regime", "num_clients", "rounds", "local_epochs", "batch_size", "lr", "seed", "arch",
            "deadline_s", "workers"),
    "data": ("dataset", "data_dir", "n_train", "n_test", "separation", "samples_per_client",
             "partition", "dirichlet_alpha"),
    "channel": ("model", "snr_db", "noiseless"),
}


def _known(section: str, table: dict, allowed) -> None:
    for key in table:
        if key not in allowed:
            raise ConfigValidationError(f"{section}.{key}", "unknown key")


def config_from_dict(doc: dict, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    kw = {}
    _known("<root>", doc, ("run", "data", "channel", "nsm", "codec", "latency"))
    for section, keys in _SECTIONS.items():
        table = doc.get(section, {})
        _known(section, table, keys)
        for key, value in table.items():
            kw["channel_model" if (section, key) == ("channel", "model") else key] = value
    if "nsm" in doc:
        t = doc["nsm"]
        _known("nsm", t, ("static_cr", "table", "fallback"))
        try:
            if "static_cr" in t:
                kw["policy"] = NsmPolicy.static(t["static_cr"])
            else:
                kw["policy"] = NsmPolicy.from_entries(t.get("table", []), t.get("fallback", "1/12"))
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigValidationError("nsm", str(exc)) from None
    if "codec" in doc:
        t = doc["codec"]
        _known("codec", t, tuple(f.name for f in fields(CodecSettings)))
        kw["codec"] = replace(base.codec, **t)
    if "latency" in doc:
        t = doc["latency"]
        _known("latency", t, tuple(f.name for f in fields(LatencyModel)))
        kw["latency"] = replace(base.latency, **t)
    if isinstance(kw.get("deadline_s"), str):
        kw["deadline_s"] = float(kw["deadline_s"])
    return replace(base, **kw)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path, "rb") as fh:
        try:
            doc = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigValidationError(str(path), f"invalid TOML: {exc}") from None
    return config_from_dict(doc, base)


def config_to_toml(cfg: RunConfig) -> str:
    """Serialise ``cfg`` to TOML (enough to reproduce the run)."""

    def val(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return f'"{v}"'
        if isinstance(v, float) and math.isinf(v):
            return '"inf"'
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(val(x) for x in v) + "]"
        return repr(v)

    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            attr = "channel_model" if (section, key) == ("channel", "model") else key
            v = getattr(cfg, attr)
            if v is None or (key == "deadline_s" and math.isinf(v)):
                continue
            lines.append(f"{key} = {val(v)}")
        lines.append("")
    lines.append("[nsm]")
    if not cfg.policy.table:
        lines.append(f'static_cr = "{cfg.policy.fallback}"')
    else:
        lines.append(f'fallback = "{cfg.policy.fallback}"')
        rows = ", ".join(f'{{snr_floor_db = {f!r}, cr = "{c}"}}' for f, c in cfg.policy.table)
        lines.append(f"table = [{rows}]")
    lines.append("")
    for name, obj in (("codec", cfg.codec), ("latency", cfg.latency)):
        lines.append(f"[{name}]")
        for f in fields(obj):
            v = getattr(obj, f.name)
            if v is not None:
                lines.append(f"{f.name} = {val(v)}")
        lines.append("")
    return "\n".join(lines)


def write_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(config_to_toml(cfg), encoding="utf-8")
    return path


def static_cr(cfg: RunConfig):
    """The single CR of a static policy, else None."""
    return cfg.policy.fallback if not cfg.policy.table else None


__all__ = ["RunConfig", "LatencyModel", "CodecSettings", "load_config", "config_from_dict",
           "config_to_toml", "write_config", "ConfigValidationError", "REGIMES", "SPLIT_REGIMES",
           "parse_cr", "static_cr"]
