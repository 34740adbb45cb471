"""Acoustic channel: delay, spreading loss, echoes, noise, superposition.

Buffers produced here always start on the global sample grid ``n / rate``
so that ``mix`` can add them without any further interpolation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .clocksched import ClockModel
from .errors import ConfigError, RateMismatchError
from .micmodel import MicNonlinearity
from .signals import DEFAULT_CARRIER, DEFAULT_RATE, BeaconFrame, ChirpParams, SampleBuffer

SPEED_OF_SOUND = 344.38
D_REF = 0.1
FD_TAPS = 31
_FD_HALF = FD_TAPS // 2


def fractional_delay_kernel(frac: float) -> np.ndarray:
    """31-tap Blackman-windowed sinc that delays by ``frac`` in [0, 1) samples.

    Tap ``i`` multiplies the input ``i - 15`` samples before the output, so
    convolution with an integer shift of -15 gives a total delay of ``frac``.
    """
    t = np.arange(FD_TAPS) - _FD_HALF - frac
    w = 0.42 + 0.5 * np.cos(np.pi * t / (_FD_HALF + 1)) + 0.08 * np.cos(2 * np.pi * t / (_FD_HALF + 1))
    h = np.sinc(t) * w
    return h / h.sum()


def _delay_onto_grid(x: np.ndarray, rate: float, start: float) -> tuple[np.ndarray, int]:
    """Resample ``x`` (first sample at continuous time ``start``) onto the
    integer grid. Returns samples and the grid index of the first one."""
    pos = start * rate
    base = int(np.floor(pos))
    frac = pos - base
    if frac > 1 - 1e-9:
        base, frac = base + 1, 0.0
    if frac < 1e-9:
        return x.copy(), base
    return np.convolve(x, fractional_delay_kernel(frac)), base - _FD_HALF


def spreading_gain(d: float, d_ref: float = D_REF) -> float:
    return 1.0 / max(d, d_ref)


def propagate(src: SampleBuffer, src_pos, dst_pos, c: float = SPEED_OF_SOUND,
              echoes: Sequence[tuple[float, float]] = (), gain: float = 1.0,
              absorption_db_per_m: float = 0.0) -> SampleBuffer:
    """Sound of ``src`` emitted at ``src_pos`` as heard at ``dst_pos``.

    Each echo is ``(extra_delay_s, relative_amplitude)`` and is relative to
    the direct path. ``gain`` is an extra scalar (e.g. mic shadowing).
    """
    if not c > 0:
        raise ConfigError("speed of sound must be > 0")
    a, b = np.asarray(src_pos, float), np.asarray(dst_pos, float)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ConfigError("positions must be finite")
    d = float(np.linalg.norm(a - b))
    amp = gain * spreading_gain(d) * 10 ** (-absorption_db_per_m * d / 20)
    paths = [(d / c, amp)] + [(d / c + float(ed), amp * float(ea)) for ed, ea in echoes]
    pieces = []
    for delay, pa in paths:
        y, base = _delay_onto_grid(src.samples, src.rate, src.t0 + delay)
        pieces.append(SampleBuffer(pa * y, src.rate, base / src.rate))
    return pieces[0] if len(pieces) == 1 else mix(pieces)


def mix(buffers: Sequence[SampleBuffer]) -> SampleBuffer:
    """Sum buffers on their common time axis, zero-padding to the union span."""
    if not buffers:
        raise ConfigError("mix needs at least one buffer")
    rate = buffers[0].rate
    for b in buffers:
        if b.rate != rate:
            raise RateMismatchError(f"cannot mix rates {rate} and {b.rate}")
    starts = [b.t0 * rate for b in buffers]
    ref = starts[0]
    offs = []
    for s in starts:
        o = s - ref
        if abs(o - round(o)) > 1e-6:
            raise ConfigError("buffers do not share a sample grid")
        offs.append(int(round(o)))
    lo = min(offs)
    hi = max(o + len(b) for o, b in zip(offs, buffers))
    out = np.zeros(hi - lo)
    for o, b in zip(offs, buffers):
        out[o - lo: o - lo + len(b)] += b.samples
    return SampleBuffer(out, rate, buffers[0].t0 + lo / rate)


def crop(x: SampleBuffer, t0: float, n: int) -> SampleBuffer:
    """Window of ``n`` samples starting at grid time ``t0``; zeros outside ``x``."""
    off = int(round(t0 * x.rate)) - x.start_index
    out = np.zeros(n)
    lo, hi = max(off, 0), min(off + n, len(x))
    if hi > lo:
        out[lo - off: hi - off] = x.samples[lo:hi]
    return SampleBuffer(out, x.rate, t0)


def white_noise(n: int, std: float, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, std, n) if std > 0 else np.zeros(n)


def add_noise(x: SampleBuffer, snr_db: float | None, seed=None,
              ref_power: float | None = None) -> SampleBuffer:
    """Add white Gaussian noise at ``snr_db`` relative to ``ref_power``
    (default: the power of ``x``). ``None`` or ``inf`` disables noise."""
    if len(x) == 0:
        raise ConfigError("cannot add noise to an empty buffer")
    if snr_db is None or np.isposinf(snr_db):
        return x.replace(x.samples.copy())
    p = x.power() if ref_power is None else float(ref_power)
    std = np.sqrt(p / 10 ** (snr_db / 10))
    rng = np.random.default_rng(seed)
    return x.replace(x.samples + white_noise(len(x), std, rng))


# -- scenario description -------------------------------------------------

@dataclass
class Anchor:
    id: int
    position: np.ndarray
    amplitude: float = 1.0
    slot: int | None = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        if not 0 <= int(self.id) <= 127:
            raise ConfigError(f"anchor id {self.id} outside [0, 127]")


@dataclass
class CBeaconConfig:
    position: np.ndarray
    f0: float = 45_000.0
    bandwidth: float = 10_000.0
    period_s: float = 0.1
    amplitude: float = 1.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)

    def chirp(self, rate: float) -> ChirpParams:
        return ChirpParams.from_sweep(self.f0, self.bandwidth, self.period_s, rate, self.amplitude)


@dataclass
class Receiver:
    position: np.ndarray
    secondary: np.ndarray | None = None
    # extra loss of the beacon paths at the primary mic (the phone body
    # shadows it); the ambient noise field is unaffected
    primary_shadow_db: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        if self.secondary is None:
            self.secondary = self.position + np.array([0.0, 0.1, 0.0])
        self.secondary = np.asarray(self.secondary, dtype=float).reshape(3)

    @property
    def separation(self) -> float:
        return float(np.linalg.norm(self.secondary - self.position))


@dataclass
class Scenario:
    anchors: list[Anchor]
    receiver: Receiver
    cbeacon: CBeaconConfig | None = None
    c: float = SPEED_OF_SOUND
    snr_db: float | None = None
    # when set, the SNR refers to a unit-amplitude anchor at this distance
    # instead of the strongest anchor actually present
    snr_ref_distance: float | None = None
    echoes: list[tuple[float, float]] = field(default_factory=list)
    clock: ClockModel = field(default_factory=lambda: ClockModel(sync_error_std=0.0))
    mic: MicNonlinearity = field(default_factory=MicNonlinearity)
    rate: float = DEFAULT_RATE
    preamble_ms: float = 30.0
    bit_ms: float = 5.0
    guard_ms: float = 30.0
    carrier_freq: float = DEFAULT_CARRIER
    ramp_ms: float = 0.2
    slot_ms: float = 100.0
    groups: list[list[int]] | None = None
    rounds: int = 1
    lead_s: float = 0.05
    tail_s: float = 0.05
    dims: int = 3
    z_fixed: float | None = None
    dual_mic: bool = True
    absorption_db_per_m: float = 0.0

    def __post_init__(self):
        ids = [a.id for a in self.anchors]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"anchor ids must be distinct: {ids}")
        if not self.c > 0:
            raise ConfigError("speed of sound must be > 0")
        if self.dual_mic and self.receiver.separation <= 0:
            raise ConfigError("dual-mic processing needs a non-zero mic separation")
        if self.dims not in (2, 3):
            raise ConfigError("dims must be 2 or 3")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")

    def frame(self, anchor: Anchor) -> BeaconFrame:
        return BeaconFrame(anchor.id, self.preamble_ms, self.bit_ms, self.guard_ms,
                           self.carrier_freq, anchor.amplitude, self.ramp_ms)

    @property
    def max_range(self) -> float:
        """Farthest anchor distance that cannot alias into another slot."""
        return self.c * self.slot_ms / 1000.0

    def anchor_map(self) -> dict[int, np.ndarray]:
        return {a.id: a.position.copy() for a in self.anchors}
