import numpy as np
import numpy.testing as npt
import pytest

from core.analysis import (
    LOG_FLOOR,
    AnalysisConfig,
    ApFrames,
    F0Contour,
    McepSequence,
    SpectralEnvelope,
    analyze_waveform,
    envelope_from_mcep,
    estimate_aperiodicity,
    estimate_f0,
    extract_envelope,
    mcep_from_envelope,
    synthesize_waveform,
)
from core.errors import FrameCountMismatchError, InvalidParameterError, ValidationError
from core.signal_io import FrameSequence, Waveform, frame_signal
from tests.synth import RATE, sawtooth, sine


def _zero_crossing_rate(samples: np.ndarray) -> float:
    audible = samples[np.abs(samples) > 1e-4]
    return float(np.mean(np.diff(np.sign(audible)) != 0))


def test_f0_of_pure_sine():
    f0 = estimate_f0(sine(220.0, seconds=0.5))
    voiced = f0.values_hz[f0.values_hz > 0]
    assert voiced.size > 0.8 * f0.num_frames
    npt.assert_allclose(voiced, 220.0, rtol=0.01)


def test_f0_of_silence():
    f0 = estimate_f0(Waveform(np.zeros(8000), RATE))
    assert f0.voiced_count == 0
    npt.assert_array_equal(f0.values_hz, 0.0)


def test_f0_of_noisy_sawtooth():
    rng = np.random.default_rng(3)
    clean = sawtooth(100.0, seconds=1.0)
    noise = rng.standard_normal(clean.size) * np.sqrt(np.mean(clean ** 2) / 100.0)
    f0 = estimate_f0(Waveform(np.clip(clean + noise, -1, 1), RATE))
    voiced = f0.values_hz[f0.values_hz > 0]
    assert voiced.size > 0.5 * f0.num_frames
    assert np.median(np.abs(voiced - 100.0) / 100.0) <= 0.03


def test_f0_shift_by_one_hop():
    samples = sawtooth(130.0, seconds=0.6)
    base = estimate_f0(Waveform(samples, RATE)).values_hz
    shifted = estimate_f0(Waveform(np.concatenate([np.zeros(80), samples]), RATE)).values_hz
    interior = slice(10, base.size - 10)
    npt.assert_allclose(shifted[1:][interior], base[interior], rtol=0.01)


def test_f0_search_range_checked():
    with pytest.raises(InvalidParameterError):
        estimate_f0(sine(220.0), AnalysisConfig(f0_floor=20.0))


def test_f0_contour_rejects_out_of_range():
    with pytest.raises(ValidationError):
        F0Contour(np.array([0.0, 900.0]))
    with pytest.raises(ValidationError):
        F0Contour(np.array([-1.0]))


def test_envelope_peak_of_sine():
    frames = frame_signal(sine(440.0, seconds=0.25), 25.0, 5.0)
    env = extract_envelope(frames, fft_size=1024)
    assert env.num_bins == 513
    peaks = np.argmax(env.log_amp, axis=1)
    assert np.all(np.abs(peaks - round(440 * 1024 / RATE)) <= 1)


def test_envelope_of_zero_frames_is_floor():
    frames = FrameSequence(np.zeros((4, 400)), 400, 80, RATE)
    env = extract_envelope(frames, fft_size=1024)
    npt.assert_allclose(env.log_amp, LOG_FLOOR, atol=1e-9)


def test_envelope_of_white_noise_is_flat():
    rng = np.random.default_rng(11)
    samples = 0.1 * rng.standard_normal(400 + 199 * 80)
    frames = frame_signal(Waveform(samples, RATE), 25.0, 5.0)
    assert frames.num_frames == 200
    mean_log = extract_envelope(frames, 1024).log_amp.mean(axis=0)
    inner = mean_log[2:-2]
    assert inner.max() - inner.min() <= 3.0


def test_envelope_frame_longer_than_fft():
    frames = frame_signal(sine(440.0), 25.0, 5.0)
    with pytest.raises(InvalidParameterError):
        extract_envelope(frames, fft_size=256)


def test_mcep_of_flat_envelope():
    env = SpectralEnvelope(np.full((3, 513), -2.5))
    mcep = mcep_from_envelope(env, order=24, alpha=0.42)
    assert mcep.coeffs.shape == (3, 25)
    npt.assert_allclose(mcep.coeffs[:, 0], -2.5, atol=1e-8)
    assert np.max(np.abs(mcep.coeffs[:, 1:])) <= 1e-8


def test_mcep_round_trip_on_smooth_envelope():
    freqs = np.linspace(0, RATE / 2, 513)
    rows = []
    for shift in (1.0, 1.1, 0.9):
        row = (-2.0 - freqs / 2500.0
               + 2.0 * np.exp(-0.5 * ((freqs - 500 * shift) / 300.0) ** 2)
               + 1.5 * np.exp(-0.5 * ((freqs - 1500 * shift) / 400.0) ** 2))
        rows.append(row)
    env = SpectralEnvelope(np.array(rows))
    back = envelope_from_mcep(mcep_from_envelope(env))
    for a, b in zip(env.log_amp, back.log_amp):
        assert np.corrcoef(a, b)[0, 1] >= 0.99


def test_mcep_projection_is_idempotent(rng):
    env = SpectralEnvelope(-3.0 + rng.standard_normal((4, 513)))
    mcep = mcep_from_envelope(env)
    once = envelope_from_mcep(mcep)
    again = mcep_from_envelope(once)
    npt.assert_allclose(again.coeffs, mcep.coeffs, atol=1e-6)
    npt.assert_allclose(envelope_from_mcep(again).log_amp, once.log_amp, atol=1e-6)


def test_mcep_order_limits():
    env = SpectralEnvelope(np.zeros((2, 17)), fft_size=32)
    with pytest.raises(InvalidParameterError):
        mcep_from_envelope(env, order=24)
    with pytest.raises(InvalidParameterError):
        mcep_from_envelope(SpectralEnvelope(np.zeros((2, 513))), alpha=1.0)
    with pytest.raises(ValidationError):
        McepSequence(np.zeros((2, 10)), order=24)


def test_synthesis_keeps_f0():
    frames = 120
    f0 = F0Contour(np.full(frames, 110.0))
    env = SpectralEnvelope(np.zeros((frames, 513)))
    wave = synthesize_waveform(f0, env)
    assert wave.num_samples == (frames - 1) * 80 + 400
    assert np.max(np.abs(wave.samples)) == pytest.approx(0.99)
    est = estimate_f0(wave).values_hz
    voiced = est[est > 0]
    assert voiced.size > 0.5 * frames
    assert abs(np.median(voiced) - 110.0) / 110.0 <= 0.02


def test_unvoiced_synthesis_is_noisy():
    frames = 120
    env = SpectralEnvelope(np.zeros((frames, 513)))
    voiced = synthesize_waveform(F0Contour(np.full(frames, 110.0)), env)
    unvoiced = synthesize_waveform(F0Contour(np.zeros(frames)), env, seed=4)
    assert _zero_crossing_rate(unvoiced.samples) >= 5 * _zero_crossing_rate(voiced.samples)


def test_synthesis_of_zero_frames():
    wave = synthesize_waveform(F0Contour(np.zeros(0)), SpectralEnvelope(np.zeros((0, 513))))
    assert wave.num_samples == 0


def test_synthesis_frame_mismatch():
    with pytest.raises(FrameCountMismatchError):
        synthesize_waveform(F0Contour(np.zeros(5)), SpectralEnvelope(np.zeros((6, 513))))


def test_synthesis_is_seeded():
    env = SpectralEnvelope(np.zeros((40, 513)))
    f0 = F0Contour(np.zeros(40))
    a = synthesize_waveform(f0, env, seed=1).samples
    b = synthesize_waveform(f0, env, seed=1).samples
    npt.assert_array_equal(a, b)


def test_analyze_waveform_shares_grid():
    wave = sine(200.0, seconds=0.4)
    f0, env, ap = analyze_waveform(wave)
    assert f0.num_frames == env.num_frames == ap.num_frames
    assert ap.values.shape == (env.num_frames, 513)
    assert np.all((ap.values >= 0) & (ap.values <= 1))
    npt.assert_array_equal(ap.values[f0.values_hz == 0], 1.0)


def test_aperiodicity_of_silence_is_one():
    ap = estimate_aperiodicity(Waveform(np.zeros(4000), RATE))
    assert isinstance(ap, ApFrames)
    npt.assert_array_equal(ap.values, 1.0)
