import numpy as np
import pytest
from hypothesis import given, strategies as st

from ultrapos.errors import ConfigError
from ultrapos.micmodel import (MicNonlinearity, apply_nonlinearity, capture, decimation_ratio, design_lpf,
                               lpf_and_decimate)
from ultrapos.signals import BeaconFrame, ChirpParams, SampleBuffer, gen_chirp, gen_cw, gen_ubeacon_frame

RATE = 441_000
M = MicNonlinearity()


def tone_amp(x: SampleBuffer, f: float) -> float:
    """Amplitude of a tone at f by direct projection (oracle)."""
    t = np.arange(len(x)) / x.rate
    return 2 * abs(np.mean(x.samples * np.exp(-2j * np.pi * f * t)))


def spectrum_db(x):
    w = np.hanning(len(x))
    s = np.abs(np.fft.rfft(x * w)) * 2 / w.sum()
    return np.fft.rfftfreq(len(x), 1 / RATE), 20 * np.log10(s + 1e-300)


def test_linear_case():
    m = MicNonlinearity(g1=2.0, g2=0.0)
    x = gen_cw(1000, 1.0, RATE, 0.001)
    assert np.allclose(apply_nonlinearity(x, m).samples, 2 * x.samples)


def test_two_tone_products_match_trig_identity():
    x = gen_cw(50_000, 1.0, RATE, 0.1)
    x = x.replace(x.samples + gen_cw(40_000, 1.0, RATE, 0.1).samples)
    y = apply_nonlinearity(x, M)
    for f, a in ((10_000, M.g2), (50_000, M.g1), (40_000, M.g1), (100_000, M.g2 / 2),
                 (80_000, M.g2 / 2), (90_000, M.g2)):
        assert tone_amp(y, f) == pytest.approx(a, rel=1e-6)
    assert np.mean(y.samples) == pytest.approx(M.g2, rel=1e-6)


def test_single_tone_peaks_only_at_dc_f_2f():
    x = gen_cw(30_000, 1.0, RATE, 0.1)
    f, s = spectrum_db(apply_nonlinearity(x, M).samples)
    strong = f[s > s.max() - 60]
    allowed = np.array([0.0, 30_000.0, 60_000.0])
    assert all(np.min(np.abs(allowed - v)) <= 40 for v in strong)


@given(st.floats(0.1, 3), st.floats(0.1, 3))
def test_downconverted_amplitude_bilinear(a1, a2):
    t = 0.02
    x = gen_cw(50_000, a1, RATE, t).samples + gen_cw(40_000, a2, RATE, t).samples
    y = apply_nonlinearity(SampleBuffer(x, RATE), M)
    assert tone_amp(y, 10_000) == pytest.approx(M.g2 * a1 * a2, rel=1e-6)


def test_lpf_passband_and_stopband():
    h = design_lpf(M, RATE)
    assert len(h) % 2 == 1 and ((len(h) - 1) // 2) % 10 == 0
    x10 = gen_cw(10_000, 1.0, RATE, 0.2)
    y10 = lpf_and_decimate(x10, M)
    assert 20 * np.log10(tone_amp(y10.replace(y10.samples[200:-200]), 10_000)) == pytest.approx(0, abs=0.5)
    x40 = gen_cw(40_000, 1.0, RATE, 0.2)
    y40 = lpf_and_decimate(x40, M).samples[200:-200]
    assert 10 * np.log10(np.mean(y40 ** 2) / x40.power()) <= -60


def test_lpf_tap_count_frozen():
    # Kaiser design for 70 dB over 22-25 kHz at 441 kHz, rounded to whole ADC samples
    assert len(design_lpf(M, RATE)) == 641


def test_decimation_output_on_adc_grid():
    x = SampleBuffer(np.ones(1000), RATE, 7 / RATE)
    y = lpf_and_decimate(x, M)
    assert y.rate == 44_100
    assert y.t0 * 44_100 == pytest.approx(round(y.t0 * 44_100))
    assert y.t0 >= x.t0


def test_decimation_ratio_checks():
    assert decimation_ratio(RATE, 44_100) == 10
    with pytest.raises(ConfigError):
        decimation_ratio(100_000, 44_100)
    with pytest.raises(ConfigError):
        MicNonlinearity(lpf_cutoff=30_000)


def test_silence_in_silence_out():
    assert not np.any(capture(SampleBuffer(np.zeros(4410), RATE)).samples)


def test_capture_two_tone_10khz():
    x = gen_cw(50_000, 1.0, RATE, 0.75).samples + gen_cw(40_000, 1.0, RATE, 0.75).samples
    y = capture(SampleBuffer(x, RATE))
    core = y.replace(y.samples[100:-100])
    assert tone_amp(core, 10_000) == pytest.approx(M.g2, rel=0.12)


def test_pulse_plus_cw_gives_10khz_bursts():
    n = int(0.2 * RATE)
    pulses = np.zeros(n)
    for k in range(4):
        a = int((0.01 + 0.05 * k) * RATE)
        pulses[a: a + int(0.02 * RATE)] = 1.0
    t = np.arange(n) / RATE
    x = pulses * np.cos(2 * np.pi * 40_000 * t) + np.cos(2 * np.pi * 50_000 * t)
    y = capture(SampleBuffer(x, RATE))
    # 10 kHz envelope by projection over 1 ms windows
    tt = np.arange(len(y)) / 44_100
    base = y.samples * np.exp(-2j * np.pi * 10_000 * tt)
    env = np.abs(np.convolve(base, np.ones(44) / 44, mode="same")) * 2
    on = np.interp(tt, t, pulses) > 0.5
    inner = np.convolve(on, np.ones(90), mode="same") >= 90
    outer = np.convolve(~on, np.ones(90), mode="same") >= 90
    assert np.all(env[inner] > 0.8 * M.g2)
    assert np.all(env[outer] < 0.1 * M.g2)


def chirp_segment_capture(pulse_ms=30.0):
    chirp = ChirpParams.from_sweep(45_000, 10_000, 0.1, RATE)
    frame = BeaconFrame(0, preamble_ms=pulse_ms, guard_ms=0.0)
    n = int(0.1 * RATE)
    pulse = np.zeros(n)
    pre = gen_ubeacon_frame(frame, RATE).samples[: int(pulse_ms * RATE / 1000)]
    a = int(0.02 * RATE)
    pulse[a: a + len(pre)] = pre
    x = gen_chirp(chirp, RATE, 0.1).samples + pulse
    return capture(SampleBuffer(x, RATE)), a / RATE


def test_downconverted_segment_in_5_15_khz():
    y, _ = chirp_segment_capture()
    s = np.abs(np.fft.rfft(y.samples)) ** 2
    f = np.fft.rfftfreq(len(y), 1 / 44_100)
    s[f < 1000] = 0      # DC term of the squared tones and its steps
    assert s[(f >= 5000) & (f <= 15_000)].sum() / s.sum() >= 0.95


def segment_extent(y: SampleBuffer, start: float, dur: float, nfft: int = 1 << 16) -> tuple[float, float]:
    """Frequency extent of a recorded chirp segment: where the (zero-padded)
    spectrum stays above half amplitude of its plateau, the level a gated
    linear chirp has at its edge frequencies."""
    seg = y.samples[int(round(start * y.rate)): int(round((start + dur) * y.rate))]
    s = np.abs(np.fft.rfft(seg, nfft)) ** 2
    f = np.fft.rfftfreq(nfft, 1 / y.rate)
    s = np.where((f > 4000) & (f < 16_000), s, 0)
    plateau = np.median(s[s > 0.1 * s.max()])
    above = f[s >= 0.25 * plateau]
    return above.min(), above.max()


@pytest.mark.parametrize("pulse_ms", [20.0, 30.0, 40.0])
def test_segment_bandwidth_matches_sweep(pulse_ms):
    # pulse length x 100 kHz/s, starting at 5 kHz + sweep position at pulse start
    y, start = chirp_segment_capture(pulse_ms)
    lo, hi = segment_extent(y, start, pulse_ms / 1000)
    bin_hz = 1000 / pulse_ms
    assert hi - lo == pytest.approx(pulse_ms * 100, abs=bin_hz)
    assert lo == pytest.approx(5000 + start * 100_000, abs=bin_hz)


def test_capture_time_shift_equivariant():
    rng = np.random.default_rng(0)
    x = rng.normal(size=4410)
    a = capture(SampleBuffer(x, RATE, 0.0))
    b = capture(SampleBuffer(x, RATE, 30 / RATE))
    assert b.start_index - a.start_index == 3
    assert np.allclose(a.samples[5:-5], b.samples[5:-5])


def test_spectrum_dump_shows_difference_tone(tmp_path):
    import csv
    t = gen_cw(40_000, 1.0, RATE, 0.02)
    u = gen_cw(50_000, 1.0, RATE, 0.02)
    p = tmp_path / "spec.csv"
    capture(t.replace(t.samples + u.samples), M, spectrum_csv=p)
    with open(p) as fh:
        rows = list(csv.DictReader(fh))
    f = np.array([float(r["freq_hz"]) for r in rows])
    db = np.array([float(r["level_db"]) for r in rows])
    # pre-filter spectrum: fundamentals at 0 dB, difference tone at g2 (-26 dB)
    assert db[np.argmin(abs(f - 40_000))] == pytest.approx(0.0, abs=0.5)
    assert db[np.argmin(abs(f - 10_000))] == pytest.approx(20 * np.log10(0.05), abs=0.5)


def test_quantization_flag():
    x = gen_cw(10_000, 0.5, RATE, 0.01)
    exact = capture(x, M)
    q = capture(x, MicNonlinearity(quantize_bits=16))
    step = 2.0 ** -15
    assert np.allclose(q.samples / step, np.round(q.samples / step))
    assert np.max(np.abs(q.samples - exact.samples)) <= step / 2 + 1e-12
