"""Anchor clock error and the slot schedule.

Each anchor's clock is re-synchronised every ``sync_interval`` seconds. Right
after a sync it is off by a Gaussian residual; between syncs it drifts
linearly at a per-anchor rate. Both draws are pure functions of
``(seed, anchor_id, interval index)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class ClockModel:
    sync_error_std: float = 100e-6
    drift_ppm: float = 0.0
    sync_interval: float = 32.0
    seed: int = 0

    def __post_init__(self):
        if self.sync_error_std < 0:
            raise ConfigError("sync_error_std must be >= 0")
        if not self.sync_interval > 0:
            raise ConfigError("sync_interval must be > 0")
        if self.drift_ppm < 0:
            raise ConfigError("drift_ppm is a bound and must be >= 0")

    def with_seed(self, seed: int) -> "ClockModel":
        return ClockModel(self.sync_error_std, self.drift_ppm, self.sync_interval, int(seed))


def sync_residual(anchor_id: int, interval: int, clock: ClockModel) -> float:
    """Offset of ``anchor_id`` right after sync number ``interval``."""
    if clock.sync_error_std == 0:
        return 0.0
    rng = np.random.default_rng(np.random.SeedSequence([clock.seed, anchor_id, interval, 0]))
    return float(rng.normal(0.0, clock.sync_error_std))


def drift_rate(anchor_id: int, clock: ClockModel) -> float:
    """Fractional frequency error, uniform in +-drift_ppm and fixed per anchor."""
    if clock.drift_ppm == 0:
        return 0.0
    rng = np.random.default_rng(np.random.SeedSequence([clock.seed, anchor_id, 1]))
    return float(rng.uniform(-clock.drift_ppm, clock.drift_ppm)) * 1e-6


def clock_offset(anchor_id: int, t: float, clock: ClockModel) -> float:
    interval = int(np.floor(t / clock.sync_interval))
    since_sync = t - interval * clock.sync_interval
    return sync_residual(anchor_id, interval, clock) + drift_rate(anchor_id, clock) * since_sync


def anchor_tx_time(anchor_id: int, nominal_epoch: float, clock: ClockModel) -> float:
    """True emission time of a beacon the anchor believes it sends at ``nominal_epoch``."""
    if nominal_epoch < 0:
        raise ConfigError("nominal_epoch must be >= 0")
    return nominal_epoch + clock_offset(anchor_id, nominal_epoch, clock)


@dataclass(frozen=True)
class Schedule:
    slots: dict = field(default_factory=dict)   # anchor id -> slot index
    slot_ms: float = 100.0

    @property
    def n_slots(self) -> int:
        return max(self.slots.values()) + 1 if self.slots else 0

    @property
    def round_ms(self) -> float:
        return self.n_slots * self.slot_ms

    @property
    def round_s(self) -> float:
        return self.round_ms / 1000.0

    def epoch(self, anchor_id: int, round_index: int = 0, start: float = 0.0) -> float:
        """Nominal transmit time of ``anchor_id`` in round ``round_index``."""
        return start + round_index * self.round_s + self.slots[anchor_id] * self.slot_ms / 1000.0


def build_schedule(anchor_ids: Sequence[int], slot_ms: float = 100.0,
                   concurrency_groups: Sequence[Sequence[int]] | None = None) -> Schedule:
    """One slot per anchor, or one slot per group when groups are given.

    Anchors not named in any group get a slot of their own after the groups.
    """
    ids = [int(i) for i in anchor_ids]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ConfigError(f"duplicate anchor id(s): {dup}")
    if not slot_ms > 0:
        raise ConfigError("slot_ms must be > 0")
    slots: dict[int, int] = {}
    next_slot = 0
    for group in concurrency_groups or ():
        members = [int(i) for i in group]
        for i in members:
            if i not in ids:
                raise ConfigError(f"group member {i} is not a known anchor")
            if i in slots:
                raise ConfigError(f"anchor {i} appears in more than one group")
            slots[i] = next_slot
        if members:
            next_slot += 1
    for i in ids:
        if i not in slots:
            slots[i] = next_slot
            next_slot += 1
    return Schedule(slots, float(slot_ms))


@dataclass(frozen=True)
class EnergyCosts:
    """Per-event energy in joules and idle power in watts; user supplied."""
    sync_j: float = 0.05
    beacon_j: float = 0.002
    idle_w: float = 0.001


def duty_cycle_energy(duration_s: float, schedule: Schedule, clock: ClockModel,
                      costs: EnergyCosts = EnergyCosts()) -> float:
    """Energy one anchor spends over ``duration_s``: syncs + beacons + idle floor."""
    if duration_s < 0:
        raise ConfigError("duration must be >= 0")
    n_sync = int(np.floor(duration_s / clock.sync_interval)) + 1
    n_beacons = int(np.floor(duration_s / schedule.round_s)) if schedule.round_s > 0 else 0
    return n_sync * costs.sync_j + n_beacons * costs.beacon_j + duration_s * costs.idle_w
