"""Audio in, position out: detection, decoding, ToAs, trilateration."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..channel import SPEED_OF_SOUND
from ..detector import (Detection, DetectorConfig, _as_analytic, decode_id, detect_preambles,
                        estimate_toas, find_global_offset, turbocharge)
from ..errors import DegenerateGeometryError, InsufficientAnchorsError
from ..locator import PositionFix, PseudoRangeSet, trilaterate
from ..signals import SampleBuffer


@dataclass
class LocateResult:
    fix: PositionFix | None
    detections: list[Detection] = field(default_factory=list)
    toas: list[tuple[int, float]] = field(default_factory=list)
    gamma: int | None = None
    note: str = ""


def detect(audio: SampleBuffer, cfg: DetectorConfig) -> tuple[int, list[Detection]]:
    """Global offset, preambles and decoded IDs. Raises NoPeakError when the
    chirp beacon cannot be found."""
    xa = _as_analytic(audio, cfg)
    gamma = find_global_offset(xa, cfg)
    dets = detect_preambles(xa, gamma, cfg)
    for d in dets:
        decode_id(xa, d, cfg)
    return gamma, dets


def receiver_audio(primary: SampleBuffer, secondary: SampleBuffer | None, cfg: DetectorConfig,
                   turbo: bool = False) -> SampleBuffer:
    """The channel the detector runs on: the secondary mic, Wiener-enhanced
    with the primary when ``turbo`` is set; the primary alone if mono."""
    if secondary is None:
        return primary
    if turbo:
        return turbocharge(primary, secondary, cfg)
    return secondary


def locate(audio: SampleBuffer, cfg: DetectorConfig, anchor_map: dict, dims: int = 3,
           z_fixed: float | None = None, c: float = SPEED_OF_SOUND,
           reject_outliers: bool = True) -> LocateResult:
    """Full receiver chain on one channel. Too few identified anchors or a
    degenerate layout yields ``fix=None`` with a note instead of raising."""
    gamma, dets = detect(audio, cfg)
    toas = estimate_toas(dets, cfg)
    prs = PseudoRangeSet.from_toas(toas, anchor_map, c)
    res = LocateResult(None, dets, toas, gamma)
    try:
        res.fix = trilaterate(prs, dims=dims, z_fixed=z_fixed, reject_outliers=reject_outliers)
    except (InsufficientAnchorsError, DegenerateGeometryError) as e:
        res.note = str(e)
    return res


def arrival_errors(dets, truth_frames: dict, rate: float, mic: int = 1) -> dict[int, float]:
    """Per-id error (seconds) of the first identified detection against truth."""
    out = {}
    for d in dets:
        if d.id is None or d.id in out or d.id not in truth_frames:
            continue
        arrivals = np.array([f[1 + mic] for f in truth_frames[d.id]])
        t = d.b_start / rate
        out[d.id] = float(t - arrivals[np.argmin(np.abs(arrivals - t))])
    return out
