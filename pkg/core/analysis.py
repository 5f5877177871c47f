"""
Vocoder analysis and synthesis - YIN F0, liftered log-STFT envelope,
mel-cepstrum conversion and pulse/noise overlap-add resynthesis
"""
from dataclasses import dataclass, fields
from functools import lru_cache
from typing import Any, Mapping, Optional, Tuple

import numpy as np
from scipy.signal import fftconvolve, windows

from core.errors import (
    EmptySignalError,
    FrameCountMismatchError,
    InvalidParameterError,
    ValidationError,
)
from core.signal_io import FrameSequence, Waveform, frame_signal, num_frames_for

F0_MIN_HZ = 40.0
F0_MAX_HZ = 800.0
AMP_FLOOR = 1e-10
LOG_FLOOR = float(np.log(AMP_FLOOR))
PEAK_LEVEL = 0.99


@dataclass(frozen=True)
class AnalysisConfig:
    """Analysis grid and extractor settings (config section 'analysis')"""

    sample_rate: int = 16000
    frame_ms: float = 25.0
    hop_ms: float = 5.0
    window: str = "hann"
    fft_size: int = 1024
    lifter_order: int = 40
    f0_floor: float = 50.0
    f0_ceil: float = 600.0
    voicing_threshold: float = 0.15
    mcep_order: int = 24
    mcep_alpha: float = 0.42
    allow_rate_passthrough: bool = False

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> "AnalysisConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in mapping.items() if k in names})

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class F0Contour:
    """
    Frame-wise F0 in Hz, 0 marking unvoiced frames

    voicing_mask is set when the values were gap-filled (see prosody.interpolate_unvoiced)
    and keeps the original voiced/unvoiced decision.
    """

    values_hz: np.ndarray
    hop_ms: float = 5.0
    voicing_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.array(self.values_hz, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValidationError("F0 values must be finite and non-negative")
        voiced_values = values[values > 0]
        if voiced_values.size and (
            voiced_values.min() < F0_MIN_HZ - 1e-6 or voiced_values.max() > F0_MAX_HZ + 1e-6
        ):
            raise ValidationError(
                f"Voiced F0 outside [{F0_MIN_HZ:.0f}, {F0_MAX_HZ:.0f}] Hz"
            )
        object.__setattr__(self, "values_hz", _frozen(values))
        if self.voicing_mask is not None:
            mask = np.array(self.voicing_mask, dtype=bool).reshape(-1)
            if mask.size != values.size:
                raise FrameCountMismatchError("Voicing mask length differs from contour")
            object.__setattr__(self, "voicing_mask", _frozen(mask))

    @property
    def num_frames(self) -> int:
        return int(self.values_hz.size)

    @property
    def voiced(self) -> np.ndarray:
        if self.voicing_mask is not None:
            return self.voicing_mask
        return self.values_hz > 0

    @property
    def voiced_count(self) -> int:
        return int(np.count_nonzero(self.voiced))


@dataclass(frozen=True, eq=False)
class SpectralEnvelope:
    """Per-frame natural-log amplitude envelope, K = fft_size/2 + 1 bins"""

    log_amp: np.ndarray
    fft_size: int = 1024
    sample_rate_hz: int = 16000

    def __post_init__(self):
        log_amp = np.array(self.log_amp, dtype=np.float64)
        if log_amp.ndim == 1:
            log_amp = log_amp.reshape(0, -1) if log_amp.size == 0 else log_amp[None, :]
        if log_amp.ndim != 2:
            raise ValidationError("Envelope must be a T x K matrix")
        if log_amp.shape[1] != self.fft_size // 2 + 1:
            raise ValidationError(
                f"Envelope has {log_amp.shape[1]} bins, fft_size {self.fft_size} "
                f"needs {self.fft_size // 2 + 1}"
            )
        if not np.all(np.isfinite(log_amp)):
            raise ValidationError("Envelope contains non-finite values")
        object.__setattr__(self, "log_amp", _frozen(log_amp))

    @property
    def num_frames(self) -> int:
        return int(self.log_amp.shape[0])

    @property
    def num_bins(self) -> int:
        return int(self.log_amp.shape[1])


@dataclass(frozen=True, eq=False)
class ApFrames:
    """Aperiodicity in [0, 1] per frame and bin; carried through conversion unchanged"""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or np.any(values < 0) or np.any(values > 1):
            raise ValidationError("Aperiodicity must be a T x K matrix in [0, 1]")
        object.__setattr__(self, "values", _frozen(values))

    @property
    def num_frames(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True, eq=False)
class McepSequence:
    """Mel-cepstral coefficients c0..c_order per frame"""

    coeffs: np.ndarray
    order: int = 24
    alpha: float = 0.42
    fft_size: int = 1024
    sample_rate_hz: int = 16000

    def __post_init__(self):
        coeffs = np.array(self.coeffs, dtype=np.float64)
        if self.order < 1:
            raise InvalidParameterError("Mel-cepstrum order must be >= 1")
        if coeffs.ndim != 2 or coeffs.shape[1] != self.order + 1:
            raise ValidationError(f"Expected T x {self.order + 1} coefficients")
        if not np.all(np.isfinite(coeffs)):
            raise ValidationError("Mel-cepstrum contains non-finite values")
        object.__setattr__(self, "coeffs", _frozen(coeffs))

    @property
    def num_frames(self) -> int:
        return int(self.coeffs.shape[0])


# F0

def _frame_centers(num_frames: int, frame_len: int, hop: int) -> np.ndarray:
    return np.arange(num_frames) * hop + frame_len // 2


def _yin_track(wave: Waveform, cfg: AnalysisConfig) -> Tuple[np.ndarray, np.ndarray]:
    """
    YIN cumulative-mean-normalised difference tracking

    Returns:
        (f0 per frame with 0 for unvoiced, dip depth per frame in [0, 1])
    """
    if wave.num_samples == 0:
        raise EmptySignalError("Cannot estimate F0 of an empty signal")
    if not (F0_MIN_HZ <= cfg.f0_floor < cfg.f0_ceil <= F0_MAX_HZ):
        raise InvalidParameterError(
            f"Need {F0_MIN_HZ:.0f} <= f0_floor < f0_ceil <= {F0_MAX_HZ:.0f}"
        )

    rate = wave.sample_rate_hz
    frame_len = int(round(cfg.frame_ms * rate / 1000.0))
    hop = int(round(cfg.hop_ms * rate / 1000.0))
    num_frames = num_frames_for(wave.num_samples, frame_len, hop)
    if num_frames == 0:
        return np.zeros(0), np.zeros(0)

    max_lag = int(np.ceil(rate / cfg.f0_floor)) + 1
    min_lag = max(int(np.floor(rate / cfg.f0_ceil)), 2)
    integ = frame_len
    span = integ + max_lag

    padded = np.pad(wave.samples, span)
    starts = _frame_centers(num_frames, frame_len, hop) - span // 2 + span
    segments = np.lib.stride_tricks.sliding_window_view(padded, span)[starts]

    # cross[t, tau] = sum_{j < integ} x[j] x[j + tau]
    cross = fftconvolve(segments, segments[:, :integ][:, ::-1], mode="valid", axes=1)
    power = np.concatenate([np.zeros((num_frames, 1)), np.cumsum(segments ** 2, axis=1)], axis=1)
    lags = np.arange(max_lag + 1)
    energy0 = power[:, integ][:, None]
    energy_tau = power[:, lags + integ] - power[:, lags]
    diff = np.maximum(energy0 + energy_tau - 2.0 * cross, 0.0)

    cumulative = np.cumsum(diff[:, 1:], axis=1)
    cmnd = np.ones_like(diff)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = diff[:, 1:] * lags[1:] / cumulative
    cmnd[:, 1:] = np.where(cumulative > 0, ratio, 1.0)

    f0 = np.zeros(num_frames)
    dip = np.ones(num_frames)
    silent = energy0[:, 0] < 1e-10 * integ
    hi = min(max_lag - 1, int(np.ceil(rate / cfg.f0_floor)))

    for t in range(num_frames):
        if silent[t]:
            continue
        curve = cmnd[t]
        below = np.flatnonzero(curve[min_lag:hi + 1] < cfg.voicing_threshold)
        if below.size == 0:
            continue
        tau = min_lag + int(below[0])
        while tau + 1 <= hi and curve[tau + 1] < curve[tau]:
            tau += 1

        a, b, c = curve[tau - 1], curve[tau], curve[tau + 1]
        denom = a - 2.0 * b + c
        shift = 0.5 * (a - c) / denom if denom > 0 else 0.0
        period = tau + float(np.clip(shift, -0.5, 0.5))

        f0[t] = np.clip(rate / period, cfg.f0_floor, cfg.f0_ceil)
        dip[t] = float(np.clip(b, 0.0, 1.0))

    return f0, dip


def estimate_f0(wave: Waveform, cfg: AnalysisConfig = AnalysisConfig()) -> F0Contour:
    """
    Estimate F0 on the analysis grid (one value per hop)

    Args:
        wave: Source waveform
        cfg: Analysis settings (f0_floor/f0_ceil search range, hop, voicing threshold)

    Returns:
        F0Contour with unvoiced frames exactly 0
    """
    f0, _ = _yin_track(wave, cfg)
    return F0Contour(f0, cfg.hop_ms)


def estimate_aperiodicity(wave: Waveform, cfg: AnalysisConfig = AnalysisConfig()) -> ApFrames:
    """
    Per-frame aperiodicity from the YIN dip depth, flat across bins

    Unvoiced frames are fully aperiodic (1.0).
    """
    f0, dip = _yin_track(wave, cfg)
    level = np.where(f0 > 0, dip, 1.0)
    return ApFrames(np.repeat(level[:, None], cfg.num_bins, axis=1))


# Envelope

def _check_fft_size(fft_size: int):
    if fft_size <= 0 or fft_size & (fft_size - 1):
        raise InvalidParameterError(f"fft_size {fft_size} is not a power of two")


@lru_cache(maxsize=16)
def _lifter(fft_size: int, order: int) -> np.ndarray:
    taper = np.zeros(fft_size)
    quefrency = np.arange(order + 1)
    weights = 0.5 * (1.0 + np.cos(np.pi * quefrency / (order + 1)))
    taper[:order + 1] = weights
    taper[fft_size - order:] = weights[1:][::-1]
    return _frozen(taper)


def extract_envelope(frames: FrameSequence, fft_size: int = 1024,
                     lifter_order: int = 40) -> SpectralEnvelope:
    """
    Liftered log-magnitude spectrum per frame

    Args:
        frames: Windowed analysis frames
        fft_size: FFT length (power of two, >= frame length)
        lifter_order: Highest quefrency kept by the tapered cepstral lifter

    Returns:
        SpectralEnvelope floored at log(1e-10)
    """
    _check_fft_size(fft_size)
    if frames.frame_len_samples > fft_size:
        raise InvalidParameterError(
            f"Frame of {frames.frame_len_samples} samples exceeds fft_size {fft_size}"
        )
    if not 0 < lifter_order < fft_size // 2:
        raise InvalidParameterError(f"lifter_order {lifter_order} out of range")

    magnitude = np.abs(np.fft.rfft(frames.frames, n=fft_size, axis=1))
    log_amp = np.log(np.maximum(magnitude, AMP_FLOOR))
    cepstrum = np.fft.irfft(log_amp, n=fft_size, axis=1)
    smoothed = np.fft.rfft(cepstrum * _lifter(fft_size, lifter_order), axis=1).real
    return SpectralEnvelope(np.maximum(smoothed, LOG_FLOOR), fft_size, frames.sample_rate_hz)


# Mel-cepstrum

@lru_cache(maxsize=16)
def _warped_basis(num_bins: int, order: int, alpha: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Cosine basis on the all-pass warped frequency axis and its pseudo-inverse

    log|H(w)| = c0 + sum_{m>=1} c_m cos(m * beta(w)),
    beta(w) = w + 2 atan(alpha sin w / (1 - alpha cos w)).
    """
    omega = np.linspace(0.0, np.pi, num_bins)
    warped = omega + 2.0 * np.arctan(alpha * np.sin(omega) / (1.0 - alpha * np.cos(omega)))
    basis = np.cos(np.outer(warped, np.arange(order + 1)))
    return _frozen(basis), _frozen(np.linalg.pinv(basis))


def mcep_from_envelope(env: SpectralEnvelope, order: int = 24,
                       alpha: float = 0.42) -> McepSequence:
    """
    Least-squares mel-cepstrum of a log envelope on the warped axis

    Args:
        env: Spectral envelope
        order: Cepstral order (order + 1 coefficients)
        alpha: All-pass warping constant in (-1, 1)

    Returns:
        McepSequence
    """
    if not -1.0 < alpha < 1.0:
        raise InvalidParameterError(f"alpha {alpha} outside (-1, 1)")
    if order < 1 or order + 1 > env.num_bins:
        raise InvalidParameterError(f"order {order} incompatible with {env.num_bins} bins")

    _, inverse = _warped_basis(env.num_bins, order, float(alpha))
    coeffs = env.log_amp @ inverse.T
    return McepSequence(coeffs, order, alpha, env.fft_size, env.sample_rate_hz)


def envelope_from_mcep(mcep: McepSequence) -> SpectralEnvelope:
    """Evaluate a mel-cepstrum back onto the linear-frequency bin grid"""
    if not -1.0 < mcep.alpha < 1.0:
        raise InvalidParameterError(f"alpha {mcep.alpha} outside (-1, 1)")
    basis, _ = _warped_basis(mcep.fft_size // 2 + 1, mcep.order, float(mcep.alpha))
    return SpectralEnvelope(mcep.coeffs @ basis.T, mcep.fft_size, mcep.sample_rate_hz)


# Synthesis

def _pulse_train(f0_per_sample: np.ndarray, rate: int) -> np.ndarray:
    voiced = f0_per_sample > 0
    phase = np.cumsum(np.where(voiced, f0_per_sample / rate, 0.0))
    cycles = np.floor(phase)
    onsets = np.diff(cycles, prepend=0.0) > 0
    onsets[0] = onsets[0] or bool(voiced[0])
    pulses = np.zeros_like(f0_per_sample)
    safe = np.where(voiced, f0_per_sample, 1.0)
    pulses[onsets] = np.sqrt(rate / safe[onsets])
    return pulses


def synthesize_waveform(f0: F0Contour, env: SpectralEnvelope, ap: Optional[ApFrames] = None,
                        frame_ms: float = 25.0, seed: int = 0) -> Waveform:
    """
    Pulse/noise excitation filtered by the envelope, overlap-added on the analysis grid

    Voiced frames use a pulse train at F0 (mixed with noise by AP when given),
    unvoiced frames use white noise. Output is peak-normalised to 0.99.

    Args:
        f0: F0 contour
        env: Spectral envelope with the same frame count
        ap: Optional aperiodicity; without it voicing is a hard switch
        frame_ms: Analysis frame length the grid was built with
        seed: Noise generator seed

    Returns:
        Waveform of (T - 1) * hop + frame_len samples
    """
    if f0.num_frames != env.num_frames:
        raise FrameCountMismatchError(
            f"F0 has {f0.num_frames} frames, envelope has {env.num_frames}"
        )
    if ap is not None and ap.num_frames != env.num_frames:
        raise FrameCountMismatchError(
            f"Aperiodicity has {ap.num_frames} frames, envelope has {env.num_frames}"
        )

    rate = env.sample_rate_hz
    num_frames = env.num_frames
    if num_frames == 0:
        return Waveform(np.zeros(0), rate)

    hop = int(round(f0.hop_ms * rate / 1000.0))
    frame_len = int(round(frame_ms * rate / 1000.0))
    seg_len = env.fft_size
    total = (num_frames - 1) * hop + frame_len

    centers = _frame_centers(num_frames, frame_len, hop)
    sample_frame = np.clip(
        np.rint((np.arange(total) - frame_len // 2) / hop).astype(int), 0, num_frames - 1
    )
    voiced_frames = f0.values_hz > 0
    pulses = _pulse_train(f0.values_hz[sample_frame], rate)
    noise = np.random.default_rng(seed).standard_normal(total)

    pad = seg_len
    starts = centers - seg_len // 2 + pad
    window = windows.hann(seg_len, sym=False)
    pulse_segs = np.lib.stride_tricks.sliding_window_view(np.pad(pulses, pad), seg_len)[starts]
    noise_segs = np.lib.stride_tricks.sliding_window_view(np.pad(noise, pad), seg_len)[starts]
    pulse_spec = np.fft.rfft(pulse_segs * window, axis=1)
    noise_spec = np.fft.rfft(noise_segs * window, axis=1)

    if ap is not None:
        periodic_gain = np.sqrt(1.0 - ap.values)
        noise_gain = np.sqrt(ap.values)
    else:
        periodic_gain = np.ones_like(env.log_amp)
        noise_gain = np.zeros_like(env.log_amp)
    periodic_gain = np.where(voiced_frames[:, None], periodic_gain, 0.0)
    noise_gain = np.where(voiced_frames[:, None], noise_gain, 1.0)

    spectrum = np.exp(env.log_amp) * (periodic_gain * pulse_spec + noise_gain * noise_spec)
    segments = np.fft.irfft(spectrum, n=seg_len, axis=1)

    out = np.zeros(total + 2 * pad)
    weight = np.zeros(total + 2 * pad)
    for t in range(num_frames):
        out[starts[t]:starts[t] + seg_len] += segments[t]
        weight[starts[t]:starts[t] + seg_len] += window
    out = out[pad:pad + total]
    weight = weight[pad:pad + total]
    out = np.where(weight > 1e-3 * weight.max(), out / np.maximum(weight, 1e-12), 0.0)

    peak = np.max(np.abs(out))
    if peak > 0:
        out = out * (PEAK_LEVEL / peak)
    return Waveform(out, rate)


def analyze_waveform(wave: Waveform, cfg: AnalysisConfig = AnalysisConfig()
                     ) -> Tuple[F0Contour, SpectralEnvelope, ApFrames]:
    """
    F0, envelope and aperiodicity on one frame grid
    """
    f0_values, dip = _yin_track(wave, cfg)
    frames = frame_signal(wave, cfg.frame_ms, cfg.hop_ms, cfg.window)
    env = extract_envelope(frames, cfg.fft_size, cfg.lifter_order)
    if env.num_frames != f0_values.size:
        raise FrameCountMismatchError("F0 and envelope grids disagree")
    level = np.where(f0_values > 0, dip, 1.0)
    ap = ApFrames(np.repeat(level[:, None], env.num_bins, axis=1))
    return F0Contour(f0_values, cfg.hop_ms), env, ap
