"""Render a scenario into two-channel ADC audio plus ground truth."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..channel import Scenario, propagate, spreading_gain, white_noise
from ..clocksched import anchor_tx_time, build_schedule
from ..detector import DetectorConfig
from ..micmodel import capture, design_lpf
from ..signals import BeaconFrame, SampleBuffer, gen_chirp, gen_ubeacon_frame


@dataclass
class Truth:
    # anchor id -> list of (tx time, arrival at primary, arrival at secondary)
    frames: dict = field(default_factory=dict)
    gamma: int | None = None          # chirp offset at the secondary mic, ADC samples
    noise_std_adc: float = 0.0

    def arrivals(self, anchor_id: int, mic: int = 1) -> list[float]:
        return [f[1 + mic] for f in self.frames.get(anchor_id, [])]


@dataclass
class Recording:
    primary: SampleBuffer
    secondary: SampleBuffer
    truth: Truth
    detector: DetectorConfig | None


def detector_config(scn: Scenario, **kw) -> DetectorConfig | None:
    if scn.cbeacon is None:
        return None
    frame = BeaconFrame(0, scn.preamble_ms, scn.bit_ms, scn.guard_ms, scn.carrier_freq, 1.0, scn.ramp_ms)
    return DetectorConfig.from_chirp(scn.cbeacon.chirp(scn.rate), scn.rate, scn.carrier_freq,
                                     frame, scn.slot_ms, scn.mic.adc_rate, **kw)


def _shadow(scn: Scenario, mic: int) -> float:
    return 10 ** (-scn.receiver.primary_shadow_db / 20) if mic == 0 else 1.0


def reference_power(scn: Scenario) -> float:
    """Power of the strongest downconverted beacon component at either mic."""
    if scn.cbeacon is None:
        return 0.0
    g2 = scn.mic.g2
    best = 0.0
    for mic, pos in enumerate((scn.receiver.position, scn.receiver.secondary)):
        a_c = scn.cbeacon.amplitude * spreading_gain(np.linalg.norm(scn.cbeacon.position - pos))
        if scn.snr_ref_distance is not None:
            amps = [spreading_gain(scn.snr_ref_distance)]
        else:
            amps = [a.amplitude * _shadow(scn, mic) * spreading_gain(np.linalg.norm(a.position - pos))
                    for a in scn.anchors]
        for a_u in amps:
            best = max(best, (g2 * a_u * a_c) ** 2 / 2)
    return best


def noise_std_acoustic(scn: Scenario) -> tuple[float, float]:
    """(acoustic std, resulting ADC std) that realise ``scn.snr_db``."""
    if scn.snr_db is None or np.isposinf(scn.snr_db):
        return 0.0, 0.0
    p = reference_power(scn)
    std_adc = np.sqrt(p / 10 ** (scn.snr_db / 10))
    h = design_lpf(scn.mic, scn.rate)
    return std_adc / (scn.mic.g1 * np.sqrt(np.sum(h ** 2))), std_adc


def _add_into(canvas: np.ndarray, rate: float, piece: SampleBuffer) -> None:
    off = piece.start_index
    lo, hi = max(off, 0), min(off + len(piece), len(canvas))
    if hi > lo:
        canvas[lo:hi] += piece.samples[lo - off: hi - off]


def render(scn: Scenario, seed: int = 0) -> Recording:
    """Simulate ``scn.rounds`` schedule rounds heard by both microphones.

    Audio starts at t = 0. Clock errors and noise use streams derived
    from ``seed``.
    """
    rate = scn.rate
    sched = build_schedule([a.id for a in scn.anchors], scn.slot_ms, scn.groups)
    if any(a.slot is not None for a in scn.anchors):
        slots = dict(sched.slots)
        for a in scn.anchors:
            if a.slot is not None:
                slots[a.id] = int(a.slot)
        sched = type(sched)(slots, sched.slot_ms)
    clock = scn.clock.with_seed(np.random.SeedSequence([seed, 1]).generate_state(1)[0])
    mics = [scn.receiver.position, scn.receiver.secondary]

    max_d = max([np.linalg.norm(a.position - m) for a in scn.anchors for m in mics] + [0.0])
    duration = scn.lead_s + scn.rounds * sched.round_s + scn.tail_s + max_d / scn.c
    n = int(np.ceil(duration * rate / 10)) * 10
    canvases = [np.zeros(n), np.zeros(n)]
    truth = Truth()

    for a in scn.anchors:
        for r in range(scn.rounds):
            tx = anchor_tx_time(a.id, sched.epoch(a.id, r, scn.lead_s), clock)
            frame = gen_ubeacon_frame(scn.frame(a), rate, tx)
            arr = []
            for k, m in enumerate(mics):
                y = propagate(frame, a.position, m, scn.c, scn.echoes, _shadow(scn, k), scn.absorption_db_per_m)
                _add_into(canvases[k], rate, y)
                arr.append(tx + np.linalg.norm(a.position - m) / scn.c)
            truth.frames.setdefault(a.id, []).append((tx, arr[0], arr[1]))

    if scn.cbeacon is not None:
        chirp = scn.cbeacon.chirp(rate)
        for k, m in enumerate(mics):
            d = np.linalg.norm(scn.cbeacon.position - m)
            lead = int(np.ceil((d / scn.c + 0.005) * rate))
            src = gen_chirp(chirp, rate, (n + lead + 64) / rate, -lead / rate)
            _add_into(canvases[k], rate, propagate(src, scn.cbeacon.position, m, scn.c, scn.echoes,
                                                   1.0, scn.absorption_db_per_m))
        adc = chirp.resampled(rate, scn.mic.adc_rate)
        d2 = np.linalg.norm(scn.cbeacon.position - mics[1])
        truth.gamma = int(round(d2 / scn.c * scn.mic.adc_rate)) % adc.period_k

    std_a, std_adc = noise_std_acoustic(scn)
    truth.noise_std_adc = std_adc
    outs = []
    for k in range(2):
        if std_a > 0:
            rng = np.random.default_rng(np.random.SeedSequence([seed, 2, k]))
            canvases[k] += white_noise(n, std_a, rng)
        outs.append(capture(SampleBuffer(canvases[k], rate, 0.0), scn.mic))
    return Recording(outs[0], outs[1], truth, detector_config(scn))
