"""Transmit-side waveforms: chirp beacon sweeps, pulse beacon frames, tones.

All generators are pure functions of their arguments and return a fresh
:class:`SampleBuffer`.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.io import wavfile

from .errors import ConfigError, NyquistError

DEFAULT_RATE = 441_000
ADC_RATE = 44_100
DEFAULT_CARRIER = 40_000.0


@dataclass(frozen=True, eq=False)
class SampleBuffer:
    """Uniformly sampled real waveform. Sample ``k`` sits at ``t0 + k / rate``."""

    samples: np.ndarray
    rate: float
    t0: float = 0.0

    def __post_init__(self):
        if not self.rate > 0:
            raise ConfigError(f"sample rate must be positive, got {self.rate}")
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=float))

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.rate

    @property
    def t_end(self) -> float:
        return self.t0 + self.duration

    @property
    def start_index(self) -> int:
        """Index of the first sample on the global grid ``n / rate``."""
        return int(round(self.t0 * self.rate))

    def times(self) -> np.ndarray:
        return self.t0 + np.arange(len(self.samples)) / self.rate

    def replace(self, samples: np.ndarray) -> "SampleBuffer":
        return SampleBuffer(samples, self.rate, self.t0)

    def power(self) -> float:
        return float(np.mean(self.samples ** 2)) if len(self.samples) else 0.0


@dataclass(frozen=True)
class ChirpParams:
    """Periodic linear sweep.

    ``delta_f`` and ``period_k`` are per sample of the rate the chirp is
    rendered at; use :meth:`from_sweep` to build them from physical units.
    """

    f0: float
    delta_f: float
    period_k: int
    amplitude: float = 1.0

    def __post_init__(self):
        if self.f0 <= 0 or self.delta_f <= 0 or self.period_k <= 0:
            raise ConfigError(f"chirp needs f0, delta_f, period_k > 0: {self}")

    @classmethod
    def from_sweep(cls, f0: float, bandwidth: float, period_s: float, rate: float,
                   amplitude: float = 1.0) -> "ChirpParams":
        k = period_s * rate
        if abs(k - round(k)) > 1e-6:
            raise ConfigError(f"chirp period {period_s}s is not a whole number of samples at {rate} Hz")
        k = int(round(k))
        return cls(f0, bandwidth / k, k, amplitude)

    @property
    def bandwidth(self) -> float:
        return self.period_k * self.delta_f

    @property
    def f_top(self) -> float:
        return self.f0 + self.bandwidth

    def period_s(self, rate: float) -> float:
        return self.period_k / rate

    def slope(self, rate: float) -> float:
        """Sweep rate in Hz per second."""
        return self.delta_f * rate

    def resampled(self, rate_from: float, rate_to: float) -> "ChirpParams":
        """The same physical sweep expressed per sample of ``rate_to``."""
        k = self.period_k * rate_to / rate_from
        if abs(k - round(k)) > 1e-6:
            raise ConfigError(f"chirp period does not map to whole samples at {rate_to} Hz")
        return ChirpParams(self.f0, self.delta_f * rate_from / rate_to, int(round(k)), self.amplitude)


def parity_bit(data_bits: Sequence[int]) -> int:
    return int(sum(data_bits) % 2)


def id_to_bits(beacon_id: int) -> list[int]:
    """7 data bits (MSB first) followed by an even-parity bit."""
    if not 0 <= beacon_id <= 127:
        raise ConfigError(f"beacon id must be in [0, 127], got {beacon_id}")
    data = [(beacon_id >> (6 - i)) & 1 for i in range(7)]
    return data + [parity_bit(data)]


def bits_to_id(bits: Sequence[int]) -> tuple[int, bool]:
    """Return ``(id, parity_ok)`` for an 8-bit field."""
    if len(bits) != 8:
        raise ValueError("expected 8 bits")
    value = 0
    for b in bits[:7]:
        value = (value << 1) | int(b)
    return value, sum(int(b) for b in bits) % 2 == 0


@dataclass(frozen=True)
class BeaconFrame:
    id: int
    preamble_ms: float = 30.0
    bit_ms: float = 5.0
    guard_ms: float = 30.0
    carrier_freq: float = DEFAULT_CARRIER
    amplitude: float = 1.0
    # raised-cosine rise/fall time of every on-run (transducer inertia)
    ramp_ms: float = 0.2

    def __post_init__(self):
        if self.ramp_ms < 0 or self.ramp_ms > self.bit_ms / 2:
            raise ConfigError("ramp_ms must lie in [0, bit_ms/2]")
        if not 0 <= self.id <= 127:
            raise ConfigError(f"beacon id must be in [0, 127], got {self.id}")
        if self.preamble_ms <= 0 or self.bit_ms <= 0 or self.guard_ms < 0:
            raise ConfigError("frame durations must be positive")

    @property
    def bits(self) -> list[int]:
        return id_to_bits(self.id)

    @property
    def id_ms(self) -> float:
        return 8 * self.bit_ms

    @property
    def duration_ms(self) -> float:
        return self.preamble_ms + self.id_ms + self.guard_ms

    @property
    def duration_s(self) -> float:
        return self.duration_ms / 1000.0


def _check_nyquist(top_freq: float, rate: float, what: str) -> None:
    if not rate > 2 * top_freq:
        raise NyquistError(
            f"{what}: band reaches {top_freq:.1f} Hz but rate {rate:.1f} Hz "
            f"only supports content below {rate / 2:.1f} Hz"
        )


def _n_samples(duration: float, rate: float) -> int:
    return int(round(duration * rate))


def gen_chirp(p: ChirpParams, rate: float, duration: float, t0: float = 0.0) -> SampleBuffer:
    """Render a periodic sweep.

    The sweep index is the global sample index ``round(t0*rate) + k`` modulo
    ``period_k``, and the phase restarts at every wrap, so each period is the
    same sweep from ``f0`` to ``f0 + period_k*delta_f``.
    """
    _check_nyquist(p.f_top, rate, "chirp")
    n = _n_samples(duration, rate)
    m = (np.arange(n, dtype=np.int64) + int(round(t0 * rate))) % p.period_k
    m = m.astype(float)
    phase = 2 * np.pi * (p.f0 + 0.5 * m * p.delta_f) * (m / rate)
    return SampleBuffer(p.amplitude * np.cos(phase), rate, t0)


def fm0_levels(bits: Sequence[int], start_level: int = 1) -> list[int]:
    """Half-bit levels. ``start_level`` is the level just before the first bit
    (the preamble is on, so 1)."""
    levels = []
    prev = int(start_level)
    for b in bits:
        first = 1 - prev
        second = first if b else 1 - first
        levels += [first, second]
        prev = second
    return levels


def fm0_encode(bits: Sequence[int], bit_ms: float, rate: float, start_level: int = 1) -> SampleBuffer:
    """On/off mask for FM0-coded bits: a transition at every bit boundary and
    an extra mid-bit transition for a 0."""
    if bit_ms <= 0:
        raise ConfigError("bit_ms must be positive")
    levels = np.asarray(fm0_levels(bits, start_level), dtype=float)
    bit_len = bit_ms * rate / 1000.0
    n = _n_samples(len(bits) * bit_ms / 1000.0, rate)
    half_index = np.floor(np.arange(n) * 2.0 / bit_len + 1e-9).astype(int)
    half_index = np.minimum(half_index, len(levels) - 1)
    return SampleBuffer(levels[half_index], rate, 0.0)


def fm0_decode(mask, bit_ms: float, n_bits: int = 8, rate: float | None = None) -> list[int]:
    """Hard-decision decode of a clean level sequence (``SampleBuffer`` or
    array + ``rate``): a bit is 0 when its two halves differ."""
    if isinstance(mask, SampleBuffer):
        rate, x = mask.rate, mask.samples
    else:
        x = np.asarray(mask, dtype=float)
        if rate is None:
            raise ValueError("rate is required for a bare array")
    bit_len = bit_ms * rate / 1000.0
    bits = []
    for j in range(n_bits):
        a = x[min(int((j + 0.25) * bit_len), len(x) - 1)] > 0.5
        b = x[min(int((j + 0.75) * bit_len), len(x) - 1)] > 0.5
        bits.append(int(a == b))
    return bits


def ramp_gate(gate: np.ndarray, n_ramp: int) -> np.ndarray:
    """Replace the hard edges of a 0/1 gate by raised-cosine ramps that lie
    inside each on-run, so every run stays symmetric about its centre."""
    g = np.asarray(gate, dtype=float).copy()
    if n_ramp <= 0:
        return g
    edges = np.flatnonzero(np.diff(np.concatenate(([0.0], g, [0.0]))))
    for a, b in zip(edges[0::2], edges[1::2]):
        r = min(n_ramp, (b - a) // 2)
        rise = 0.5 - 0.5 * np.cos(np.pi * (np.arange(r) + 0.5) / r)
        g[a: a + r] *= rise
        g[b - r: b] *= rise[::-1]
    return g


def gen_ubeacon_frame(frame: BeaconFrame, rate: float, t0: float = 0.0) -> SampleBuffer:
    """Carrier tone for the preamble, FM0-gated carrier for the ID, then silence.

    Gate edges are ramped over ``frame.ramp_ms`` (inside the on-runs).
    """
    _check_nyquist(frame.carrier_freq, rate, "pulse beacon")
    n_pre = _n_samples(frame.preamble_ms / 1000.0, rate)
    mask_id = fm0_encode(frame.bits, frame.bit_ms, rate).samples
    n_guard = _n_samples(frame.guard_ms / 1000.0, rate)
    gate = np.concatenate([np.ones(n_pre), mask_id, np.zeros(n_guard)])
    gate = ramp_gate(gate, _n_samples(frame.ramp_ms / 1000.0, rate))
    t = t0 + np.arange(len(gate)) / rate
    carrier = frame.amplitude * np.cos(2 * np.pi * frame.carrier_freq * t)
    return SampleBuffer(carrier * gate, rate, t0)


def gen_cw(freq: float, amplitude: float, rate: float, duration: float, t0: float = 0.0) -> SampleBuffer:
    _check_nyquist(freq, rate, "tone")
    t = t0 + np.arange(_n_samples(duration, rate)) / rate
    return SampleBuffer(amplitude * np.cos(2 * np.pi * freq * t), rate, t0)


def write_wav(path, channels: SampleBuffer | Sequence[SampleBuffer], fmt: str = "float32") -> None:
    """Write one or more equal-rate buffers as a little-endian WAV file.

    ``fmt`` is ``"float32"`` or ``"pcm16"``; PCM is clipped to [-1, 1].
    """
    if isinstance(channels, SampleBuffer):
        channels = [channels]
    rates = {ch.rate for ch in channels}
    if len(rates) != 1:
        raise ConfigError(f"channels have different rates: {sorted(rates)}")
    rate = rates.pop()
    if abs(rate - round(rate)) > 1e-9:
        raise ConfigError("WAV needs an integer sample rate")
    n = max(len(ch) for ch in channels)
    data = np.zeros((n, len(channels)))
    for i, ch in enumerate(channels):
        data[: len(ch), i] = ch.samples
    if fmt == "float32":
        out = data.astype("<f4")
    elif fmt == "pcm16":
        out = np.round(np.clip(data, -1.0, 1.0) * 32767).astype("<i2")
    else:
        raise ConfigError(f"unknown WAV format {fmt!r}")
    if out.shape[1] == 1:
        out = out[:, 0]
    wavfile.write(Path(path), int(round(rate)), out)


def read_wav(path) -> list[SampleBuffer]:
    """Read a WAV file into one buffer per channel, scaled to [-1, 1] for PCM."""
    rate, data = wavfile.read(Path(path))
    if data.ndim == 1:
        data = data[:, None]
    if np.issubdtype(data.dtype, np.integer):
        scale = float(np.iinfo(data.dtype).max)
        data = data.astype(float) / scale
    else:
        data = data.astype(float)
    return [SampleBuffer(data[:, i].copy(), float(rate), 0.0) for i in range(data.shape[1])]


def periodogram_peak(buf: SampleBuffer) -> float:
    """Frequency of the strongest non-DC bin (Hann window)."""
    x = buf.samples * np.hanning(len(buf))
    spec = np.abs(np.fft.rfft(x))
    spec[0] = 0.0
    return float(np.argmax(spec) * buf.rate / len(buf))


def band_power_fraction(buf: SampleBuffer, lo: float, hi: float) -> float:
    """Fraction of (non-DC) periodogram power inside ``[lo, hi]`` Hz."""
    spec = np.abs(np.fft.rfft(buf.samples)) ** 2
    freqs = np.fft.rfftfreq(len(buf), 1.0 / buf.rate)
    spec[0] = 0.0
    total = spec.sum()
    if total == 0:
        return 0.0
    return float(spec[(freqs >= lo) & (freqs <= hi)].sum() / total)


__all__ = [
    "ADC_RATE", "DEFAULT_RATE", "DEFAULT_CARRIER", "SampleBuffer", "ChirpParams", "BeaconFrame",
    "gen_chirp", "fm0_levels", "fm0_encode", "fm0_decode", "gen_ubeacon_frame", "gen_cw",
    "id_to_bits", "bits_to_id", "parity_bit", "write_wav", "read_wav", "periodogram_peak",
    "band_power_fraction",
]
