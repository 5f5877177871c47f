"""
F0 preprocessing, 10-scale continuous wavelet decomposition and the
log-Gaussian linear F0 transform
"""
from dataclasses import dataclass, fields
from functools import lru_cache
from typing import Any, Dict, Iterable, Mapping, Optional, Tuple

import numpy as np
from scipy.signal import fftconvolve

from core.analysis import F0_MAX_HZ, F0_MIN_HZ, F0Contour
from core.errors import (
    ArchiveCorruptionError,
    ContourTooShortError,
    DegenerateVarianceError,
    InvalidParameterError,
    UnvoicedContourError,
    ValidationError,
)

SIGMA_GUARD = 1e-8


@dataclass(frozen=True)
class CwtConfig:
    """Wavelet settings (config section 'prosody')"""

    num_scales: int = 10
    tau0_hops: float = 2.0
    min_frames: int = 16
    weight_offset: float = 2.5
    weight_power: float = 2.5
    context_frames: int = 1

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> "CwtConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in mapping.items() if k in names})

    def scale_frames(self, num_scales: Optional[int] = None) -> np.ndarray:
        count = self.num_scales if num_scales is None else num_scales
        return self.tau0_hops * 2.0 ** np.arange(count)


@dataclass(frozen=True)
class F0Statistics:
    """Log-F0 moments over voiced frames"""

    mu_log: float
    sigma_log: float
    count: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.mu_log) and np.isfinite(self.sigma_log)):
            raise ValidationError("F0 statistics must be finite")
        if self.sigma_log <= 0:
            raise DegenerateVarianceError(f"sigma_log must be positive, got {self.sigma_log}")

    @classmethod
    def from_log_values(cls, log_f0: np.ndarray) -> "F0Statistics":
        log_f0 = np.asarray(log_f0, dtype=np.float64).reshape(-1)
        if log_f0.size == 0:
            raise UnvoicedContourError("No voiced frames to take statistics over")
        sigma = float(np.std(log_f0))
        if sigma < SIGMA_GUARD:
            raise DegenerateVarianceError(f"Log-F0 standard deviation {sigma:.3g} below guard")
        return cls(float(np.mean(log_f0)), sigma, int(log_f0.size))

    @classmethod
    def from_contour(cls, f0: F0Contour) -> "F0Statistics":
        """Moments of ln F0 over the frames marked voiced with a positive value"""
        voiced = f0.voiced & (f0.values_hz > 0)
        return cls.from_log_values(np.log(f0.values_hz[voiced]))

    @classmethod
    def pooled(cls, stats: Iterable["F0Statistics"]) -> "F0Statistics":
        """Combine per-utterance moments weighted by their frame counts"""
        stats = [s for s in stats if s.count > 0]
        if not stats:
            raise UnvoicedContourError("No statistics to pool")
        counts = np.array([s.count for s in stats], dtype=np.float64)
        means = np.array([s.mu_log for s in stats])
        second = np.array([s.sigma_log ** 2 + s.mu_log ** 2 for s in stats])
        total = counts.sum()
        mu = float(np.dot(counts, means) / total)
        var = float(np.dot(counts, second) / total - mu ** 2)
        if var < SIGMA_GUARD ** 2:
            raise DegenerateVarianceError("Pooled log-F0 variance is degenerate")
        return cls(mu, float(np.sqrt(var)), int(total))

    def to_metadata(self, prefix: str = "") -> Dict[str, str]:
        return {
            f"{prefix}mu_log": repr(self.mu_log),
            f"{prefix}sigma_log": repr(self.sigma_log),
            f"{prefix}count": str(self.count),
        }

    @classmethod
    def from_metadata(cls, metadata: Mapping[str, str], prefix: str = "") -> "F0Statistics":
        try:
            return cls(
                float(metadata[f"{prefix}mu_log"]),
                float(metadata[f"{prefix}sigma_log"]),
                int(metadata.get(f"{prefix}count", "0")),
            )
        except (KeyError, ValueError) as e:
            raise ArchiveCorruptionError(f"Missing or invalid F0 statistics: {e}") from e


@dataclass(frozen=True, eq=False)
class ContinuousLogF0:
    """Gap-free z-normalised log-F0 with the voicing decision kept alongside"""

    values: np.ndarray
    voicing_mask: np.ndarray
    stats: F0Statistics
    hop_ms: float = 5.0

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        mask = np.array(self.voicing_mask, dtype=bool).reshape(-1)
        if values.size != mask.size:
            raise ValidationError("Values and voicing mask differ in length")
        if not np.all(np.isfinite(values)):
            raise ValidationError("Continuous log-F0 contains non-finite values")
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "voicing_mask", mask)

    @property
    def num_frames(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True, eq=False)
class CwtMatrix:
    """S x T wavelet coefficients; scales_s in seconds, strictly increasing"""

    coefficients: np.ndarray
    scales_s: np.ndarray
    hop_ms: float = 5.0

    def __post_init__(self):
        coeffs = np.array(self.coefficients, dtype=np.float64)
        scales = np.array(self.scales_s, dtype=np.float64).reshape(-1)
        if coeffs.ndim != 2 or coeffs.shape[0] != scales.size:
            raise ValidationError("Coefficient rows must match the scale count")
        if np.any(scales <= 0) or np.any(np.diff(scales) <= 0):
            raise ValidationError("Scales must be positive and strictly increasing")
        coeffs.setflags(write=False)
        scales.setflags(write=False)
        object.__setattr__(self, "coefficients", coeffs)
        object.__setattr__(self, "scales_s", scales)

    @property
    def num_scales(self) -> int:
        return int(self.coefficients.shape[0])

    @property
    def num_frames(self) -> int:
        return int(self.coefficients.shape[1])


def interpolate_unvoiced(f0: F0Contour) -> F0Contour:
    """
    Fill unvoiced frames by linear interpolation between voiced neighbours

    Leading and trailing unvoiced runs take the nearest voiced value. The
    original voicing decision is kept as the result's voicing_mask.
    """
    voiced = f0.values_hz > 0
    if not np.any(voiced):
        raise UnvoicedContourError("Cannot interpolate a contour with no voiced frame")

    frames = np.arange(f0.num_frames)
    filled = np.interp(frames, frames[voiced], f0.values_hz[voiced])
    filled[voiced] = f0.values_hz[voiced]
    return F0Contour(filled, f0.hop_ms, voicing_mask=voiced)


def normalize_log_f0(f0: F0Contour) -> ContinuousLogF0:
    """
    z-normalise ln F0 over the whole (gap-free) contour

    Raises:
        InvalidParameterError: a frame is not positive
        DegenerateVarianceError: constant contour
    """
    if f0.num_frames == 0 or np.any(f0.values_hz <= 0):
        raise InvalidParameterError("Log-F0 normalisation needs a gap-free positive contour")
    log_f0 = np.log(f0.values_hz)
    stats = F0Statistics.from_log_values(log_f0)
    values = (log_f0 - stats.mu_log) / stats.sigma_log
    return ContinuousLogF0(values, f0.voiced.copy(), stats, f0.hop_ms)


def denormalize_log_f0(contour: ContinuousLogF0,
                       stats_override: Optional[F0Statistics] = None) -> F0Contour:
    """
    Map normalised log-F0 back to Hz; frames unvoiced in the mask become 0

    Args:
        contour: Normalised contour
        stats_override: Moments to apply instead of the stored ones

    Returns:
        F0Contour, voiced values clipped to the representable F0 range
    """
    stats = stats_override or contour.stats
    hz = np.exp(contour.values * stats.sigma_log + stats.mu_log)
    hz = np.clip(hz, F0_MIN_HZ, F0_MAX_HZ)
    return F0Contour(np.where(contour.voicing_mask, hz, 0.0), contour.hop_ms)


@lru_cache(maxsize=64)
def _mexican_hat(scale: float) -> np.ndarray:
    support = int(np.ceil(5.0 * scale))
    t = np.arange(-support, support + 1) / scale
    norm = 2.0 / (np.sqrt(3.0) * np.pi ** 0.25)
    kernel = norm * (1.0 - t ** 2) * np.exp(-0.5 * t ** 2) / np.sqrt(scale)
    kernel.setflags(write=False)
    return kernel


def wavelet_transform(values: np.ndarray, cfg: CwtConfig = CwtConfig(),
                      num_scales: Optional[int] = None) -> np.ndarray:
    """
    Mexican-hat CWT of a 1-D track at dyadic scales tau0 * 2^i (frames)

    The track is mirror-padded by twice the coarsest scale before the
    transform and cropped afterwards.

    Returns:
        num_scales x T coefficient matrix
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    scales = cfg.scale_frames(num_scales)
    if values.size < cfg.min_frames:
        raise ContourTooShortError(
            f"Contour of {values.size} frames is shorter than {cfg.min_frames}"
        )
    if scales.size < 1:
        raise InvalidParameterError("num_scales must be >= 1")

    pad = int(np.ceil(2.0 * scales[-1]))
    padded = np.pad(values, pad, mode="reflect")
    coeffs = np.empty((scales.size, values.size))
    for i, scale in enumerate(scales):
        full = fftconvolve(padded, _mexican_hat(float(scale)), mode="same")
        coeffs[i] = full[pad:pad + values.size]
    return coeffs


def cwt_decompose(contour: ContinuousLogF0, num_scales: int = 10,
                  cfg: CwtConfig = CwtConfig()) -> CwtMatrix:
    """Decompose a normalised log-F0 contour into num_scales wavelet bands"""
    coeffs = wavelet_transform(contour.values, cfg, num_scales)
    scales_s = cfg.scale_frames(num_scales) * contour.hop_ms / 1000.0
    return CwtMatrix(coeffs, scales_s, contour.hop_ms)


def reconstruction_weights(num_scales: int, cfg: CwtConfig = CwtConfig()) -> np.ndarray:
    return (np.arange(num_scales) + cfg.weight_offset) ** (-cfg.weight_power)


def cwt_reconstruct(matrix: CwtMatrix, cfg: CwtConfig = CwtConfig(),
                    standardize: bool = True) -> np.ndarray:
    """
    Weighted sum over scales, then re-standardised to zero mean / unit variance

    A zero-variance sum is only centred.
    """
    weights = reconstruction_weights(matrix.num_scales, cfg)
    values = weights @ matrix.coefficients
    if not standardize:
        return values
    values = values - values.mean() if values.size else values
    std = float(np.std(values)) if values.size else 0.0
    if std < SIGMA_GUARD:
        return values
    return values / std


def lg_convert_f0(f0: F0Contour, src: F0Statistics, tgt: F0Statistics) -> F0Contour:
    """
    Log-Gaussian linear F0 transform on voiced frames

    ln f0' = (ln f0 - mu_s) * sigma_t / sigma_s + mu_t; unvoiced frames stay 0.
    """
    if src.sigma_log < SIGMA_GUARD:
        raise DegenerateVarianceError("Source log-F0 variance is degenerate")
    voiced = f0.values_hz > 0
    converted = np.zeros(f0.num_frames)
    log_f0 = np.log(f0.values_hz[voiced])
    mapped = (log_f0 - src.mu_log) * (tgt.sigma_log / src.sigma_log) + tgt.mu_log
    converted[voiced] = np.clip(np.exp(mapped), F0_MIN_HZ, F0_MAX_HZ)
    return F0Contour(converted, f0.hop_ms, voicing_mask=f0.voicing_mask)


def prepare_prosody(f0: F0Contour, cfg: CwtConfig = CwtConfig()
                    ) -> Tuple[ContinuousLogF0, CwtMatrix]:
    """Interpolate, normalise and decompose a raw contour"""
    contour = normalize_log_f0(interpolate_unvoiced(f0))
    return contour, cwt_decompose(contour, cfg.num_scales, cfg)
