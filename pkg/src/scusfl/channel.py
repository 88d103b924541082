"""Wireless channel: AWGN and block Rayleigh fading over real unit-power symbols."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .streams import stream, stream_seed

MODELS = ("awgn", "rayleigh")
DIRECTIONS = ("up", "down")
POWER_TOL = 1e-6


class ChannelError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelRealization:
    model: str
    snr_db: float
    h: float
    noise_seed: int

    @property
    def noise_var(self) -> float:
        if self.snr_db == math.inf:
            return 0.0
        return 10.0 ** (-self.snr_db / 10.0)

    @property
    def effective_snr_db(self) -> float:
        """Receive SNR after fading, as seen with perfect CSI."""
        return self.snr_db + 10.0 * math.log10(self.h * self.h)

    def noise_rng(self, *names) -> np.random.Generator:
        return stream(self.noise_seed, *names)


def sample_realization(model: str, snr_db: float, rng: np.random.Generator,
                       noise_seed: int | None = None) -> ChannelRealization:
    if model not in MODELS:
        raise ChannelError(f"unknown channel model {model!r}")
    if math.isnan(snr_db) or snr_db == -math.inf:
        raise ChannelError(f"snr_db must be finite or +inf, got {snr_db}")
    if model == "awgn":
        h = 1.0
    else:
        g = rng.standard_normal(2) / math.sqrt(2.0)
        h = float(math.hypot(g[0], g[1]))
        h = max(h, 1e-12)
    if noise_seed is None:
        noise_seed = int(rng.integers(0, 2**63 - 1))
    return ChannelRealization(model, float(snr_db), h, noise_seed)


def transmit(symbols: np.ndarray, real: ChannelRealization, rng: np.random.Generator | None = None) -> np.ndarray:
    """y = h*x + n. Each row of a 2-D ``symbols`` array must be unit power."""
    x = np.asarray(symbols, dtype=np.float64)
    power = np.mean(x * x, axis=-1)
    if np.any(np.abs(power - 1.0) > POWER_TOL):
        raise ChannelError(f"symbols must be power-normalised (mean square 1), got {np.atleast_1d(power)[:4]}")
    y = real.h * x
    var = real.noise_var
    if var > 0:
        rng = rng if rng is not None else real.noise_rng()
        y = y + rng.standard_normal(x.shape) * math.sqrt(var)
    return y


def equalize(received: np.ndarray, real: ChannelRealization) -> np.ndarray:
    """Zero-forcing with perfect CSI."""
    if real.h == 1.0:
        return np.asarray(received, dtype=np.float64)
    return np.asarray(received, dtype=np.float64) / real.h


def shannon_rate(bandwidth_hz: float, snr_db: float, h: float = 1.0) -> float:
    """Capacity in bit/s; ``h`` scales the SNR by h**2 under fading."""
    if bandwidth_hz < 0:
        raise ChannelError("bandwidth must be non-negative")
    if snr_db == -math.inf or bandwidth_hz == 0:
        return 0.0
    if snr_db == math.inf:
        return math.inf
    snr = 10.0 ** (snr_db / 10.0) * h * h
    return bandwidth_hz * math.log2(1.0 + snr)


# -- schedules and traces -----------------------------------------------------

def parse_schedule(spec) -> list[tuple[int, float]]:
    """Normalise an SNR schedule to sorted (round_start, snr_db) breakpoints.

    Accepts a number (constant) or a list of ``[round_start, snr_db]`` pairs.
    """
    if isinstance(spec, (int, float)):
        return [(0, float(spec))]
    points = sorted((int(r), float(s)) for r, s in spec)
    if not points or points[0][0] != 0:
        raise ChannelError("SNR schedule must start at round 0")
    return points


def scheduled_snr(schedule: list[tuple[int, float]], round_idx: int) -> float:
    snr = schedule[0][1]
    for start, value in schedule:
        if round_idx >= start:
            snr = value
    return snr


@dataclass
class ChannelTrace:
    model: str
    schedule: list
    seed: int
    num_clients: int
    rounds: int
    cells: dict

    def get(self, client: int, round_idx: int, direction: str = "up") -> ChannelRealization:
        try:
            return self.cells[(client, round_idx, direction)]
        except KeyError:
            raise KeyError(f"no channel realization for client {client}, round {round_idx}, {direction}") from None


def generate_trace(model: str, schedule, num_clients: int, rounds: int, seed: int) -> ChannelTrace:
    """One realization per client, round and direction, fixed ahead of the run."""
    sched = parse_schedule(schedule)
    cells = {}
    for r in range(rounds):
        snr = scheduled_snr(sched, r)
        for c in range(num_clients):
            for d in DIRECTIONS:
                rng = stream(seed, "fading", c, r, d)
                cells[(c, r, d)] = sample_realization(model, snr, rng, stream_seed(seed, "noise", c, r, d))
    return ChannelTrace(model, sched, seed, num_clients, rounds, cells)
