"""Receiver chain on ADC-rate audio.

After downconversion a pulse beacon heard during the chirp becomes a
segment of a chirp in the 5-15 kHz band. Multiplying the analytic audio by
the conjugate of the dechirp template (aligned by the global offset) turns
every such segment into a constant phasor, so preamble detection reduces to
a sliding coherent sum, and the ID field becomes an on/off envelope.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import signal

from .errors import ConfigError, InsufficientDataError, NoPeakError, RateMismatchError
from .signals import ADC_RATE, BeaconFrame, ChirpParams, SampleBuffer, bits_to_id, fm0_levels, ramp_gate

DETECTIONS_SCHEMA = "detections/1"
# least gap between mean on and off half-bit levels (on = 1) for a field to count
MIN_FIELD_CONTRAST = 0.25
DETECTION_COLUMNS = ["id", "b_start", "t_i", "peak_score", "parity_ok"]


@dataclass(frozen=True)
class DetectorConfig:
    f_diff: float = 5000.0
    delta_f: float = 10_000.0 / 4410
    period_k: int = 4410
    preamble_ms: float = 30.0
    bit_ms: float = 5.0
    guard_ms: float = 30.0
    slot_ms: float = 100.0
    psd_gate_db: float = 10.0
    peak_threshold: float = 8.0
    adc_rate: float = ADC_RATE
    # half-width of the exact search around the coarse global offset
    refine_halfwidth: int = 20
    # False gives the plain non-negative modulo for ToAs
    centered_toa: bool = True
    # after a successful decode, re-time the detection against the whole
    # known frame envelope (preamble plus ID transitions)
    frame_refine: bool = True
    frame_refine_span: int = 48
    # transmit gate ramp, so the envelope template matches the beacon
    ramp_ms: float = 0.2
    # ID decoding integrates coherently over windows this long and then
    # takes magnitudes; 0 projects the whole field on the preamble phasor
    decode_window_ms: float = 1.0

    def __post_init__(self):
        top = self.f_diff + self.period_k * self.delta_f
        if not (self.f_diff > 0 and top < self.adc_rate / 2):
            raise ConfigError(f"downconverted band [{self.f_diff}, {top}] Hz must lie inside "
                              f"(0, {self.adc_rate / 2}) Hz")
        slot = self.slot_ms * self.adc_rate / 1000.0
        if abs(slot - round(slot)) > 1e-6:
            raise ConfigError(f"slot of {self.slot_ms} ms is not a whole number of samples")
        if self.preamble_ms <= 0 or self.bit_ms <= 0:
            raise ConfigError("frame timings must be positive")
        if not 0 <= self.decode_window_ms <= self.bit_ms / 2:
            raise ConfigError("decode_window_ms must lie in [0, bit_ms / 2]")

    @classmethod
    def from_chirp(cls, chirp: ChirpParams, chirp_rate: float, carrier_freq: float = 40_000.0,
                   frame: BeaconFrame | None = None, slot_ms: float = 100.0,
                   adc_rate: float = ADC_RATE, **kw) -> "DetectorConfig":
        """Detector settings for a room's chirp beacon and pulse-beacon frame."""
        adc = chirp.resampled(chirp_rate, adc_rate)
        frame = frame or BeaconFrame(0)
        return cls(f_diff=chirp.f0 - carrier_freq, delta_f=adc.delta_f, period_k=adc.period_k,
                   preamble_ms=frame.preamble_ms, bit_ms=frame.bit_ms, guard_ms=frame.guard_ms,
                   slot_ms=slot_ms, adc_rate=adc_rate, ramp_ms=frame.ramp_ms, **kw)

    @property
    def preamble_len(self) -> int:
        return int(round(self.preamble_ms * self.adc_rate / 1000.0))

    @property
    def bit_len(self) -> float:
        return self.bit_ms * self.adc_rate / 1000.0

    @property
    def slot_len(self) -> int:
        return int(round(self.slot_ms * self.adc_rate / 1000.0))

    @property
    def frame_len(self) -> int:
        """Preamble plus ID field, in samples."""
        return int(round(self.preamble_len + 8 * self.bit_len))

    @property
    def band(self) -> tuple[float, float]:
        return self.f_diff, self.f_diff + self.period_k * self.delta_f


@dataclass
class Detection:
    b_start: float
    gamma: int
    tau: int
    id: int | None = None
    parity_ok: bool = False
    peak_score: float = 0.0


# -- correlation core -----------------------------------------------------

@lru_cache(maxsize=32)
def chirp_template(cfg: DetectorConfig) -> np.ndarray:
    """One period of the downconverted chirp as a complex exponential."""
    m = np.arange(cfg.period_k, dtype=float)
    t = np.exp(2j * np.pi * (cfg.f_diff * m + 0.5 * cfg.delta_f * m * m) / cfg.adc_rate)
    t.setflags(write=False)
    return t


def band_analytic(x: np.ndarray, cfg: DetectorConfig, margin: float = 1000.0,
                  taper: float = 500.0) -> np.ndarray:
    """Analytic signal restricted to the downconverted band.

    Everything outside ``band +- margin`` (the DC term of the squared
    carriers, its steps at beacon edges, stray aliases) is removed with a
    raised-cosine taper of width ``taper``.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    spec = np.fft.fft(x)
    f = np.fft.fftfreq(n, 1.0 / cfg.adc_rate)
    lo, hi = cfg.band
    lo, hi = lo - margin, hi + margin
    w = np.zeros(n)
    inside = (f >= lo) & (f <= hi)
    w[inside] = 1.0
    for edge, sign in ((lo, -1), (hi, 1)):
        ramp = (sign * (f - edge) > 0) & (sign * (f - edge) < taper)
        w[ramp] = 0.5 * (1 + np.cos(np.pi * np.abs(f[ramp] - edge) / taper))
    return np.fft.ifft(2 * spec * w)


def _as_analytic(audio, cfg: DetectorConfig) -> np.ndarray:
    if isinstance(audio, SampleBuffer):
        if abs(audio.rate - cfg.adc_rate) > 1e-9:
            raise RateMismatchError(f"audio rate {audio.rate} != detector rate {cfg.adc_rate}")
        return band_analytic(audio.samples, cfg)
    x = np.asarray(audio)
    return x if np.iscomplexobj(x) else band_analytic(x, cfg)


def _reference(n: int, gamma: int, cfg: DetectorConfig, start: int = 0) -> np.ndarray:
    """Template value for audio samples ``start .. start+n-1`` at offset ``gamma``."""
    k = cfg.period_k
    reps = (n + k - 1) // k + 1
    tiled = np.tile(chirp_template(cfg), reps)
    s = (start - gamma) % k
    return tiled[s: s + n]


def dechirp(xa: np.ndarray, gamma: int, cfg: DetectorConfig, start: int = 0) -> np.ndarray:
    return xa * np.conj(_reference(len(xa), gamma, cfg, start))


def correlation_profile(xa: np.ndarray, gamma: int, cfg: DetectorConfig) -> np.ndarray:
    """|coherent sum over one preamble| / sqrt(length), for every start tau."""
    n = cfg.preamble_len
    if len(xa) < n:
        return np.zeros(0)
    z = dechirp(xa, gamma, cfg)
    cs = np.concatenate(([0], np.cumsum(z)))
    return np.abs(cs[n:] - cs[:-n]) / np.sqrt(n)


def noise_floor(xa: np.ndarray, gamma: int, cfg: DetectorConfig) -> float:
    """Median profile with the template shifted half a period away.

    The shifted template leaves every beacon segment as a tone 5 kHz off
    zero, so the median measures noise even when beacons fill the audio.
    """
    off = correlation_profile(xa, (gamma + cfg.period_k // 2) % cfg.period_k, cfg)
    return max(float(np.median(off)), 1e-300)


def _check_length(xa: np.ndarray, cfg: DetectorConfig) -> None:
    if len(xa) < 2 * cfg.period_k:
        raise InsufficientDataError(
            f"audio holds {len(xa)} samples; at least two chirp periods ({2 * cfg.period_k}) are needed")


def _coarse_energy(xa: np.ndarray, cfg: DetectorConfig) -> np.ndarray:
    """Segment energy landing on each global offset, from one FFT pass.

    With offset 0, a segment that should be dechirped at offset G comes out
    as a tone at -G*delta_f (or (K-G)*delta_f if the sweep wrapped in
    between), so an averaged spectrum scores all offsets at once.
    """
    n, k = cfg.preamble_len, cfg.period_k
    z0 = dechirp(xa, 0, cfg)
    nfft = 1 << int(np.ceil(np.log2(2 * cfg.adc_rate / cfg.delta_f)))
    nfft = max(nfft, 1 << int(np.ceil(np.log2(n))))
    hop = max(n // 2, 1)
    frames = np.lib.stride_tricks.sliding_window_view(z0, n)[::hop]
    win = np.hanning(n)
    power = np.zeros(nfft)
    for i in range(0, len(frames), 32):
        power += np.sum(np.abs(np.fft.fft(frames[i: i + 32] * win, nfft)) ** 2, axis=0)
    g = np.arange(k)
    scale = nfft / cfg.adc_rate
    b1 = np.round(-g * cfg.delta_f * scale).astype(int) % nfft
    b2 = np.round((k - g) * cfg.delta_f * scale).astype(int) % nfft
    return power[b1] + power[b2]


@dataclass(frozen=True)
class OffsetSearch:
    gamma: int
    tau: int
    value: float
    floor: float

    @property
    def score(self) -> float:
        return self.value / self.floor


def search_offset(audio, cfg: DetectorConfig) -> OffsetSearch:
    """Coarse spectral pass for the global offset, then exact tau scans
    for the offsets around it."""
    xa = _as_analytic(audio, cfg)
    _check_length(xa, cfg)
    k = cfg.period_k
    coarse = int(np.argmax(_coarse_energy(xa, cfg)))
    best = None
    for d in range(-cfg.refine_halfwidth, cfg.refine_halfwidth + 1):
        g = (coarse + d) % k
        prof = correlation_profile(xa, g, cfg)
        t = int(np.argmax(prof))
        cand = (float(prof[t]), -g, t)
        if best is None or cand > best:
            best = cand
    value, neg_g, tau = best
    gamma = -neg_g
    return OffsetSearch(gamma, tau, value, noise_floor(xa, gamma, cfg))


def exhaustive_search(audio, cfg: DetectorConfig) -> OffsetSearch:
    """Full two-dimensional search over every global offset and every tau."""
    xa = _as_analytic(audio, cfg)
    _check_length(xa, cfg)
    best = None
    for g in range(cfg.period_k):
        prof = correlation_profile(xa, g, cfg)
        t = int(np.argmax(prof))
        cand = (float(prof[t]), -g, t)
        if best is None or cand > best:
            best = cand
    value, neg_g, tau = best
    return OffsetSearch(-neg_g, tau, value, noise_floor(xa, -neg_g, cfg))


def find_global_offset(audio, cfg: DetectorConfig) -> int:
    """Global chirp offset (samples, in [0, K)); raises NoPeakError when no
    beacon segment stands out of the noise."""
    res = search_offset(audio, cfg)
    if res.score < cfg.peak_threshold:
        raise NoPeakError(f"best correlation is {res.score:.2f}x the noise floor "
                          f"(threshold {cfg.peak_threshold}); is the chirp beacon on?")
    return res.gamma


def _parabolic(y: np.ndarray, i: int) -> float:
    if i <= 0 or i >= len(y) - 1:
        return 0.0
    a, b, c = y[i - 1], y[i], y[i + 1]
    den = a - 2 * b + c
    if den >= 0:
        return 0.0
    return float(np.clip(0.5 * (a - c) / den, -0.5, 0.5))


def detect_preambles(audio, gamma: int, cfg: DetectorConfig) -> list[Detection]:
    """Preamble starts: local maxima of the correlation profile above
    ``peak_threshold`` times the noise floor, at least one frame apart."""
    xa = _as_analytic(audio, cfg)
    gamma = int(gamma) % cfg.period_k
    prof = correlation_profile(xa, gamma, cfg)
    if len(prof) < 3:
        return []
    floor = noise_floor(xa, gamma, cfg)
    peaks, _ = signal.find_peaks(prof, height=cfg.peak_threshold * floor, distance=cfg.frame_len)
    dets = [Detection(b_start=p + _parabolic(prof, p), gamma=gamma, tau=int(p),
                      peak_score=float(prof[p] / floor)) for p in peaks]
    return sorted(dets, key=lambda d: d.b_start)


# -- ID decoding ----------------------------------------------------------

def _fm0_viterbi(q1: np.ndarray, q2: np.ndarray) -> tuple[float, list[int]]:
    """Most likely FM0 bits given per-half-bit scores (score of 'on').

    State = level at the end of the previous bit; the preamble is on.
    """
    score = {1: 0.0, 0: -np.inf}
    paths = {1: [], 0: []}
    for a, b in zip(q1, q2):
        new_score, new_paths = {0: -np.inf, 1: -np.inf}, {0: [], 1: []}
        for prev in (0, 1):
            if score[prev] == -np.inf:
                continue
            first = 1 - prev
            for bit in (1, 0):
                second = first if bit else 1 - first
                s = score[prev] + first * a + second * b
                if s > new_score[second]:
                    new_score[second] = s
                    new_paths[second] = paths[prev] + [bit]
        score, paths = new_score, new_paths
    end = max((0, 1), key=lambda s: score[s])
    return score[end], paths[end]


def decode_bits(audio, det: Detection, cfg: DetectorConfig, search_ms: float = 2.75,
                step: int = 2) -> list[int] | None:
    """FM0 bits for the ID field after ``det``, by Viterbi search over the line code.

    The dechirped ID region becomes an envelope that is about 1 where the
    carrier is on and 0 where it is off. By default the envelope is the
    magnitude of short coherent sums (``decode_window_ms``) relative to the
    preamble: echoes of the chirp dechirp to tones tens of Hz off zero, so
    the channel phase drifts across a frame and a single reference phasor
    would fade. With ``decode_window_ms = 0`` the field is projected on the
    preamble phasor instead, which is 3 dB better in white noise and phase
    stable channels. The field start is searched within +-``search_ms`` of
    the nominal end of the preamble, so moderate timing errors are absorbed.
    """
    xa = _as_analytic(audio, cfg)
    n_pre, bit_len = cfg.preamble_len, cfg.bit_len
    b = int(round(det.b_start))
    span = int(round(search_ms * cfg.adc_rate / 1000.0))
    lead = int(round(1.5 * cfg.adc_rate / 1000.0))
    lo = b + n_pre - span - lead
    hi = int(np.ceil(b + n_pre + span + 8 * bit_len)) + 1
    if b < 0 or lo < 0 or hi > len(xa):
        return None
    seg = dechirp(xa[b: hi], det.gamma, cfg, start=b)
    win = int(round(cfg.decode_window_ms * cfg.adc_rate / 1000.0))
    if win > 1:
        mag = np.abs(np.convolve(seg, np.ones(win) / win, mode="same"))
        on = np.median(mag[win: n_pre - win]) if n_pre > 3 * win else np.median(mag[:n_pre])
        if on == 0:
            return None
        level = mag / on
    else:
        pre = seg[:n_pre].mean()
        if abs(pre) == 0:
            return None
        level = np.real(seg * np.conj(pre)) / abs(pre) ** 2
    # matched statistic: sum over 'on' samples of (level - 1/2)
    cs = np.concatenate(([0.0], np.cumsum(level - 0.5)))

    def q(i0, i1):
        return cs[i1 - b] - cs[i0 - b]

    best = None
    for off in range(-span, span + 1, step):
        e = b + n_pre + off
        edges = np.round(e + np.arange(17) * bit_len / 2).astype(int)
        halves = cs[edges[1:] - b] - cs[edges[:-1] - b]
        metric, bits = _fm0_viterbi(halves[0::2], halves[1::2])
        metric += q(lo, e)
        if best is None or metric > best[0]:
            best = (metric, bits, halves / np.diff(edges) + 0.5)
    _, bits, half_levels = best
    # a real field switches the carrier off, at the preamble's amplitude
    on = np.asarray(fm0_levels(bits), dtype=bool)
    on_level, off_level = half_levels[on].mean(), half_levels[~on].mean()
    if on_level - off_level < MIN_FIELD_CONTRAST or not 0.5 <= on_level <= 2.0:
        return None
    return bits


def decode_id(audio, det: Detection, cfg: DetectorConfig) -> tuple[int | None, bool]:
    """Decode the 8-bit field after ``det``; fills ``det.id``/``det.parity_ok``."""
    bits = decode_bits(audio, det, cfg)
    if bits is None:
        det.id, det.parity_ok = None, False
        return None, False
    value, ok = bits_to_id(bits)
    det.id, det.parity_ok = (value if ok else None), ok
    if ok and cfg.frame_refine:
        refine_timing(audio, det, bits, cfg)
    return det.id, ok


def frame_envelope(bits, cfg: DetectorConfig) -> np.ndarray:
    """0/1 on-off envelope of preamble plus FM0 field at the ADC rate."""
    levels = np.asarray(fm0_levels(bits), dtype=float)
    n_id = int(round(8 * cfg.bit_len))
    half = np.minimum(np.floor(np.arange(n_id) * 2.0 / cfg.bit_len + 1e-9).astype(int), 15)
    env = np.concatenate([np.ones(cfg.preamble_len), levels[half]])
    return ramp_gate(env, int(round(cfg.ramp_ms * cfg.adc_rate / 1000.0)))


def refine_timing(audio, det: Detection, bits, cfg: DetectorConfig) -> float:
    """Matched-filter the dechirped audio against the full frame envelope
    within +-``frame_refine_span`` samples of ``det.b_start``.

    Every FM0 transition is another timing edge, so this is several times
    less noisy than the preamble alone. Updates and returns ``det.b_start``.
    """
    xa = _as_analytic(audio, cfg)
    env = frame_envelope(bits, cfg)
    span = cfg.frame_refine_span
    b0 = int(round(det.b_start))
    lo, hi = b0 - span - 1, b0 + span + 1 + len(env)
    if lo < 0 or hi > len(xa):
        return det.b_start
    z = dechirp(xa[lo:hi], det.gamma, cfg, start=lo)
    corr = np.abs(np.correlate(z, env, mode="valid"))
    i = int(np.argmax(corr))
    det.b_start = float(lo + i + _parabolic(corr, i))
    return det.b_start


# -- ToA ------------------------------------------------------------------

def estimate_toas(dets: Sequence[Detection], cfg: DetectorConfig) -> list[tuple[int, float]]:
    """Per-id arrival times relative to the earliest identified beacon,
    folded into one slot.

    With ``cfg.centered_toa`` the fold lands in [-slot/2, slot/2) so an
    anchor slightly closer than the reference does not wrap to almost a
    full slot; the receiver-to-anchor spread must then stay below half a
    slot. Duplicate ids keep the detection with the highest score.
    """
    best: dict[int, Detection] = {}
    for d in dets:
        if d.id is None or not d.parity_ok:
            continue
        if d.id not in best or d.peak_score > best[d.id].peak_score:
            best[d.id] = d
    if not best:
        return []
    ordered = sorted(best.values(), key=lambda d: d.b_start)
    b1 = ordered[0].b_start
    slot = cfg.slot_len
    out = []
    for d in ordered:
        diff = d.b_start - b1
        if cfg.centered_toa:
            folded = (diff + slot / 2) % slot - slot / 2
        else:
            folded = diff % slot
        out.append((d.id, folded / cfg.adc_rate))
    return out


# -- dual-microphone enhancement -----------------------------------------

def _smooth_freq(p: np.ndarray, width: int) -> np.ndarray:
    kern = np.ones(width) / width
    return signal.convolve(p, kern[:, None], mode="same")


def turbocharge(primary: SampleBuffer, secondary: SampleBuffer, cfg: DetectorConfig,
                return_gate: bool = False, alpha_noise: float = 0.95, alpha_dd: float = 0.7,
                nperseg: int = 256):
    """Wiener-enhance the secondary channel using noise statistics learned
    from frames where both mics see the same in-band PSD.

    Frames of ``nperseg`` samples (about 6 ms) keep a chirp segment within
    a few bins, which is where a per-bin gain can separate it from noise.
    Noise frames update the noise PSD recursively (``alpha_noise``); the
    decision-directed Wiener gain (``alpha_dd``) is applied to every frame.
    Returns the enhanced buffer, plus a boolean per-frame mask (True for
    frames classified as noise) when ``return_gate`` is set.
    """
    if primary.rate != secondary.rate:
        raise RateMismatchError("primary and secondary rates differ")
    if len(primary) != len(secondary):
        raise ConfigError(f"channel lengths differ: {len(primary)} vs {len(secondary)}")
    fs = secondary.rate
    n = len(secondary)
    if n < nperseg:
        raise InsufficientDataError(f"need at least {nperseg} samples for turbocharging")
    _, _, x1 = signal.stft(primary.samples, fs, window="hann", nperseg=nperseg, noverlap=nperseg // 2)
    freqs, _, x2 = signal.stft(secondary.samples, fs, window="hann", nperseg=nperseg, noverlap=nperseg // 2)
    p1, p2 = np.abs(x1) ** 2, np.abs(x2) ** 2
    lo, hi = cfg.band
    inband = (freqs >= lo) & (freqs <= hi)
    s1 = _smooth_freq(p1, 9)[inband]
    s2 = _smooth_freq(p2, 9)[inband]
    diff_db = 10 * np.log10((s2 + 1e-30) / (s1 + 1e-30))
    gate = np.max(np.abs(diff_db), axis=0) < cfg.psd_gate_db

    mean_pow = 0.5 * (p1 + p2)
    noise = np.median(mean_pow, axis=1)
    gain_prev = np.ones(len(freqs))
    p_prev = np.zeros(len(freqs))
    out = np.empty_like(x2)
    for j in range(x2.shape[1]):
        if gate[j]:
            noise = alpha_noise * noise + (1 - alpha_noise) * mean_pow[:, j]
        nz = np.maximum(noise, 1e-30)
        post = p2[:, j] / nz
        xi = alpha_dd * gain_prev ** 2 * p_prev / nz + (1 - alpha_dd) * np.maximum(post - 1, 0)
        g = xi / (1 + xi)
        out[:, j] = g * x2[:, j]
        gain_prev, p_prev = g, p2[:, j]
    _, y = signal.istft(out, fs, window="hann", nperseg=nperseg, noverlap=nperseg // 2)
    y = np.pad(y, (0, max(0, n - len(y))))[:n]
    enhanced = SampleBuffer(y, fs, secondary.t0)
    return (enhanced, gate) if return_gate else enhanced


# -- chirp-slope identification ------------------------------------------

def identify_slope(audio, candidates: Sequence[DetectorConfig]) -> tuple[int, DetectorConfig, float]:
    """Pick the candidate room configuration whose chirp fits best.

    Returns ``(index, config, score)``; raises NoPeakError if none clears
    its threshold.
    """
    if not candidates:
        raise ConfigError("no candidate slopes given")
    results = []
    for i, cfg in enumerate(candidates):
        results.append((search_offset(audio, cfg).score, i))
    score, i = max(results)
    if score < candidates[i].peak_threshold:
        raise NoPeakError(f"no candidate slope reaches threshold (best {score:.2f})")
    return i, candidates[i], score


# -- one-call pipeline and CSV --------------------------------------------

def detect_all(audio: SampleBuffer, cfg: DetectorConfig) -> list[Detection]:
    """Global offset, preamble detection and ID decoding in one pass."""
    xa = _as_analytic(audio, cfg)
    gamma = find_global_offset(xa, cfg)
    dets = detect_preambles(xa, gamma, cfg)
    for d in dets:
        decode_id(xa, d, cfg)
    return dets


def write_detections_csv(path, dets: Sequence[Detection], cfg: DetectorConfig) -> None:
    toas = dict(estimate_toas(dets, cfg))
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {DETECTIONS_SCHEMA}\n")
        w = csv.writer(fh)
        w.writerow(DETECTION_COLUMNS)
        for d in dets:
            t = toas.get(d.id) if d.id is not None else None
            w.writerow(["" if d.id is None else d.id, f"{d.b_start:.4f}",
                        "" if t is None else f"{t:.9f}", f"{d.peak_score:.3f}", int(d.parity_ok)])


def with_threshold(cfg: DetectorConfig, threshold: float) -> DetectorConfig:
    return replace(cfg, peak_threshold=threshold)
