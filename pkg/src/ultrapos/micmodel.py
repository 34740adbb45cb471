"""Receiver microphone model: polynomial amplifier, anti-alias FIR, ADC decimation.

The amplifier's quadratic term mixes two ultrasonic tones down to their
difference frequency; the low-pass filter then removes everything the ADC
cannot represent. ``capture`` is the only path from air to audio samples.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import signal

from .errors import ConfigError
from .signals import ADC_RATE, SampleBuffer


@dataclass(frozen=True)
class MicNonlinearity:
    g1: float = 1.0
    g2: float = 0.05
    g3: float = 0.0
    lpf_cutoff: float = 22_000.0
    adc_rate: float = ADC_RATE
    # transition band ends here; attenuation is guaranteed from this frequency up
    lpf_stop: float = 25_000.0
    lpf_atten_db: float = 70.0
    quantize_bits: int | None = None

    def __post_init__(self):
        if self.g1 <= 0:
            raise ConfigError("g1 must be positive")
        if self.g2 < 0:
            raise ConfigError("g2 must be non-negative")
        if self.lpf_cutoff > self.adc_rate / 2:
            raise ConfigError(f"lpf_cutoff {self.lpf_cutoff} exceeds adc_rate/2 = {self.adc_rate / 2}")
        if self.lpf_stop <= self.lpf_cutoff:
            raise ConfigError("lpf_stop must lie above lpf_cutoff")


def decimation_ratio(rate: float, adc_rate: float) -> int:
    if adc_rate > rate:
        raise ConfigError(f"adc_rate {adc_rate} exceeds input rate {rate}")
    ratio = rate / adc_rate
    if abs(ratio - round(ratio)) > 1e-9:
        raise ConfigError(f"input rate {rate} is not an integer multiple of adc_rate {adc_rate}")
    return int(round(ratio))


@lru_cache(maxsize=16)
def _design(rate: float, cutoff: float, stop: float, atten: float, ratio: int) -> np.ndarray:
    ntaps, beta = signal.kaiserord(atten, (stop - cutoff) / (rate / 2))
    # odd length with a group delay of a whole number of output samples
    half = int(np.ceil((ntaps - 1) / 2 / ratio)) * ratio
    h = signal.firwin(2 * half + 1, (cutoff + stop) / 2, window=("kaiser", beta), fs=rate)
    h.setflags(write=False)
    return h


def design_lpf(m: MicNonlinearity, rate: float) -> np.ndarray:
    """Linear-phase Kaiser FIR; its group delay is a whole number of ADC samples."""
    ratio = decimation_ratio(rate, m.adc_rate)
    return _design(float(rate), m.lpf_cutoff, m.lpf_stop, m.lpf_atten_db, ratio)


def apply_nonlinearity(x: SampleBuffer, m: MicNonlinearity) -> SampleBuffer:
    s = x.samples
    y = m.g1 * s + m.g2 * s * s
    if m.g3:
        y = y + m.g3 * s ** 3
    return x.replace(y)


def lpf_and_decimate(x: SampleBuffer, m: MicNonlinearity) -> SampleBuffer:
    """Low-pass, then keep the input samples that fall on the ADC grid.

    The FIR group delay is removed, so output sample ``j`` is the filtered
    value at time ``t0_out + j / adc_rate`` with ``t0_out`` the first ADC
    grid instant at or after ``x.t0``.
    """
    ratio = decimation_ratio(x.rate, m.adc_rate)
    h = design_lpf(m, x.rate)
    delay = (len(h) - 1) // 2 // ratio
    phase = (-x.start_index) % ratio
    src = x.samples[phase:]
    n_out = -(-len(src) // ratio)
    y = signal.upfirdn(h, src, up=1, down=ratio)[delay: delay + n_out]
    if m.quantize_bits:
        q = 2.0 ** (m.quantize_bits - 1)
        y = np.round(np.clip(y, -1.0, 1.0 - 1.0 / q) * q) / q
    return SampleBuffer(y, float(m.adc_rate), (x.start_index + phase) / x.rate)


def dump_spectrum_csv(x: SampleBuffer, path) -> None:
    """Write the magnitude spectrum (Hann window) of ``x`` as ``freq_hz,level_db``."""
    spec = np.abs(np.fft.rfft(x.samples * np.hanning(len(x)))) * 2 / max(np.hanning(len(x)).sum(), 1e-300)
    freqs = np.fft.rfftfreq(len(x), 1.0 / x.rate)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["freq_hz", "level_db"])
        for f, a in zip(freqs, 20 * np.log10(spec + 1e-300)):
            w.writerow([f"{f:.3f}", f"{a:.3f}"])


def capture(acoustic: SampleBuffer, m: MicNonlinearity = MicNonlinearity(),
            spectrum_csv=None) -> SampleBuffer:
    """Air pressure at the mic -> recorded audio at ``m.adc_rate``."""
    amplified = apply_nonlinearity(acoustic, m)
    if spectrum_csv is not None:
        dump_spectrum_csv(amplified, spectrum_csv)
    return lpf_and_decimate(amplified, m)
