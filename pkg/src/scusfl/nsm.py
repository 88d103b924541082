"""Network status monitor: per-transmission CR selection from observed SNR."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .channel import ChannelTrace
from .semantic_codec import parse_cr

MAX_TABLE = 8


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class NsmPolicy:
    table: tuple  # ((snr_floor_db, cr), ...) with floors strictly descending
    fallback: Fraction

    def __post_init__(self):
        if len(self.table) > MAX_TABLE:
            raise PolicyError(f"policy table has {len(self.table)} rows; at most {MAX_TABLE} allowed")
        floors = [f for f, _ in self.table]
        if any(a <= b for a, b in zip(floors, floors[1:])):
            raise PolicyError(f"snr floors must be strictly descending, got {floors}")
        crs = [c for _, c in self.table] + [self.fallback]
        # Milder channel must never get stronger compression.
        if any(a < b for a, b in zip(crs, crs[1:])):
            raise PolicyError(f"policy CRs must be non-increasing as the floor drops, got {[str(c) for c in crs]}")

    @classmethod
    def from_entries(cls, entries, fallback) -> "NsmPolicy":
        rows = []
        for e in entries:
            floor, cr = (e["snr_floor_db"], e["cr"]) if isinstance(e, dict) else e
            rows.append((float(floor), parse_cr(cr)))
        return cls(tuple(rows), parse_cr(fallback))

    @classmethod
    def static(cls, cr) -> "NsmPolicy":
        return cls((), parse_cr(cr))

    def crs(self) -> set:
        return {c for _, c in self.table} | {self.fallback}


DEFAULT_POLICY = NsmPolicy.from_entries([(15, "1/3"), (10, "1/6"), (5, "1/8")], "1/12")


def observe(trace: ChannelTrace, client: int, round_idx: int) -> float:
    """Effective uplink SNR for (client, round) under perfect CSI."""
    return trace.get(client, round_idx, "up").effective_snr_db


def select_cr(policy: NsmPolicy, snr_db: float, counter: list | None = None) -> Fraction:
    """First row whose floor is <= ``snr_db``; the fallback otherwise.

    ``counter``, when given, has its first element incremented once per
    comparison made.
    """
    for floor, cr in policy.table:
        if counter is not None:
            counter[0] += 1
        if snr_db >= floor:
            return cr
    return policy.fallback
