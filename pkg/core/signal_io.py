"""
Signal I/O - WAV reading/writing, analysis framing and the EVCF feature archive
"""
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Mapping, Tuple, Union

import numpy as np
from scipy.io import wavfile
from scipy.signal import windows

from core.errors import (
    ArchiveCorruptionError,
    ArchiveFormatError,
    ChannelCountError,
    DataError,
    InvalidParameterError,
    OutputPathError,
    SampleRateError,
    SignalTooShortError,
    UnsupportedEncodingError,
    ValidationError,
    WavHeaderError,
)

PathLike = Union[str, Path]

MIN_SAMPLE_RATE = 8000
PCM16_SCALE = 32768.0

ARCHIVE_MAGIC = b"EVCF"
ARCHIVE_VERSION = 1
REQUIRED_UTTERANCE_ARRAYS = ("f0", "sp")
OPTIONAL_UTTERANCE_ARRAYS = ("ap", "mcep", "cwt")


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Waveform:
    """
    Mono time-domain audio with samples in [-1, 1]
    """

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(samples)):
            raise ValidationError("Waveform contains non-finite samples")
        if samples.size and np.max(np.abs(samples)) > 1.0 + 1e-6:
            raise ValidationError("Waveform samples exceed [-1, 1]")
        if int(self.sample_rate_hz) < MIN_SAMPLE_RATE:
            raise SampleRateError(
                f"Sample rate {self.sample_rate_hz} Hz is below {MIN_SAMPLE_RATE} Hz"
            )
        object.__setattr__(self, "samples", _frozen(samples))
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    @property
    def num_samples(self) -> int:
        return int(self.samples.size)

    @property
    def duration_s(self) -> float:
        return self.num_samples / self.sample_rate_hz


@dataclass(frozen=True, eq=False)
class FrameSequence:
    """
    Windowed frames cut from a Waveform on a fixed hop grid
    """

    frames: np.ndarray
    frame_len_samples: int
    hop_samples: int
    sample_rate_hz: int

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


def _check_riff_header(path: Path):
    try:
        with open(path, "rb") as f:
            head = f.read(12)
    except OSError as e:
        raise DataError(f"Cannot read {path}: {e}") from e
    if len(head) < 12 or head[:4] not in (b"RIFF", b"RF64") or head[8:12] != b"WAVE":
        raise WavHeaderError(f"{path}: not a RIFF/WAVE file")


def read_wav(path: PathLike) -> Waveform:
    """
    Read a mono PCM16 or float32 WAV file

    Args:
        path: WAV file path

    Returns:
        Waveform with samples normalised to [-1, 1]

    Raises:
        WavHeaderError: malformed header
        ChannelCountError: more than one channel
        UnsupportedEncodingError: anything but PCM16 / float32
    """
    path = Path(path)
    _check_riff_header(path)

    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except ValueError as e:
        message = str(e).lower()
        if "format" in message or "bit depth" in message or "not supported" in message:
            raise UnsupportedEncodingError(f"{path}: {e}") from e
        raise WavHeaderError(f"{path}: {e}") from e
    except EOFError as e:
        raise WavHeaderError(f"{path}: truncated WAV ({e})") from e

    if data.ndim != 1:
        raise ChannelCountError(f"{path}: expected mono, found {data.shape[1]} channels")

    if data.dtype == np.int16:
        samples = data.astype(np.float64) / PCM16_SCALE
    elif data.dtype == np.float32:
        samples = np.clip(data.astype(np.float64), -1.0, 1.0)
    else:
        raise UnsupportedEncodingError(
            f"{path}: unsupported sample encoding {data.dtype} (PCM16 or float32 only)"
        )

    return Waveform(samples, rate)


def write_wav(path: PathLike, wave: Waveform) -> None:
    """
    Write a Waveform as PCM16 mono; samples are clipped then rounded to nearest

    Args:
        path: Destination path
        wave: Waveform to write
    """
    path = Path(path)
    quantized = np.round(np.clip(wave.samples, -1.0, 1.0) * PCM16_SCALE)
    pcm = np.clip(quantized, -32768, 32767).astype(np.int16)

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        wavfile.write(path, wave.sample_rate_hz, pcm)
    except OSError as e:
        raise OutputPathError(f"Cannot write {path}: {e}") from e


def frame_signal(wave: Waveform, frame_ms: float = 25.0, hop_ms: float = 5.0,
                 window: str = "hann") -> FrameSequence:
    """
    Cut a waveform into windowed frames

    T = floor((N - W) / hop) + 1 frames, frame t starting at sample t * hop.

    Args:
        wave: Source waveform
        frame_ms: Frame length in milliseconds
        hop_ms: Hop in milliseconds
        window: 'hann' (symmetric, zero endpoints) or 'rect'

    Returns:
        FrameSequence
    """
    if not (frame_ms >= hop_ms > 0):
        raise InvalidParameterError(f"Need frame_ms >= hop_ms > 0, got {frame_ms}/{hop_ms}")
    if window not in ("hann", "rect"):
        raise InvalidParameterError(f"Unknown window '{window}'")

    frame_len = int(round(frame_ms * wave.sample_rate_hz / 1000.0))
    hop = int(round(hop_ms * wave.sample_rate_hz / 1000.0))
    if hop < 1:
        raise InvalidParameterError(f"Hop of {hop_ms} ms is below one sample")
    if wave.num_samples < frame_len:
        raise SignalTooShortError(
            f"Signal of {wave.num_samples} samples is shorter than one {frame_len}-sample frame"
        )

    frames = np.lib.stride_tricks.sliding_window_view(wave.samples, frame_len)[::hop]
    if window == "hann":
        frames = frames * windows.hann(frame_len, sym=True)
    else:
        frames = frames.copy()

    return FrameSequence(_frozen(frames), frame_len, hop, wave.sample_rate_hz)


def num_frames_for(num_samples: int, frame_len: int, hop: int) -> int:
    """Frame count of the analysis grid for a signal of num_samples"""
    if num_samples < frame_len:
        return 0
    return (num_samples - frame_len) // hop + 1


@dataclass(eq=False)
class FeatureArchive:
    """
    Named float32 arrays plus string metadata, persisted as an EVCF container
    """

    arrays: Dict[str, np.ndarray] = field(default_factory=dict)
    metadata: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.arrays = {
            str(name): np.ascontiguousarray(value, dtype=np.float32)
            for name, value in self.arrays.items()
        }
        self.metadata = {str(k): str(v) for k, v in self.metadata.items()}

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureArchive):
            return NotImplemented
        if list(self.arrays) != list(other.arrays) or self.metadata != other.metadata:
            return False
        return all(
            self.arrays[n].shape == other.arrays[n].shape
            and self.arrays[n].tobytes() == other.arrays[n].tobytes()
            for n in self.arrays
        )

    def get(self, name: str, default=None):
        return self.arrays.get(name, default)

    def with_arrays(self, **arrays: np.ndarray) -> "FeatureArchive":
        """Copy of this archive with arrays added or replaced"""
        merged = dict(self.arrays)
        merged.update(arrays)
        return FeatureArchive(merged, dict(self.metadata))

    def with_metadata(self, **metadata) -> "FeatureArchive":
        """Copy of this archive with metadata added or replaced"""
        merged = dict(self.metadata)
        merged.update({k: str(v) for k, v in metadata.items()})
        return FeatureArchive(dict(self.arrays), merged)

    def validate_utterance(self):
        """Check the arrays a full utterance needs"""
        missing = [n for n in REQUIRED_UTTERANCE_ARRAYS if n not in self.arrays]
        if missing:
            raise ValidationError(f"Archive lacks required arrays: {', '.join(missing)}")
        frames = self.arrays["f0"].shape[0]
        for name in ("sp",) + OPTIONAL_UTTERANCE_ARRAYS:
            if name not in self.arrays:
                continue
            arr = self.arrays[name]
            count = arr.shape[1] if name == "cwt" else arr.shape[0]
            if count != frames:
                raise ValidationError(
                    f"Array '{name}' has {count} frames, f0 has {frames}"
                )


def _pack_text(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_archive(archive: FeatureArchive) -> bytes:
    """
    Serialise an archive

    Layout (little-endian): magic 'EVCF', version byte, metadata count, then
    (key, value) length-prefixed UTF-8 pairs, array count, then per array:
    name, ndim, dims (uint32 each), payload count (uint64), float32 payload.
    """
    parts = [ARCHIVE_MAGIC, struct.pack("<B", ARCHIVE_VERSION)]

    parts.append(struct.pack("<I", len(archive.metadata)))
    for key, value in archive.metadata.items():
        parts.append(_pack_text(key))
        parts.append(_pack_text(value))

    parts.append(struct.pack("<I", len(archive.arrays)))
    for name, arr in archive.arrays.items():
        parts.append(_pack_text(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<Q", arr.size))
        parts.append(arr.astype("<f4").tobytes())

    return b"".join(parts)


class _Reader:
    """Bounds-checked cursor over an archive buffer"""

    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, count: int) -> bytes:
        if count < 0 or self.pos + count > len(self.data):
            raise ArchiveCorruptionError(f"{self.source}: truncated archive")
        chunk = self.data[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self) -> str:
        (length,) = self.unpack("<I")
        try:
            return self.take(length).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ArchiveCorruptionError(f"{self.source}: invalid UTF-8 ({e})") from e


def decode_archive(data: bytes, source: str = "<bytes>") -> FeatureArchive:
    """Parse bytes produced by encode_archive"""
    if data[:4] != ARCHIVE_MAGIC:
        raise ArchiveFormatError(f"{source}: bad magic {data[:4]!r}")
    reader = _Reader(data, source)
    reader.take(4)
    (version,) = reader.unpack("<B")
    if version != ARCHIVE_VERSION:
        raise ArchiveFormatError(f"{source}: unsupported archive version {version}")

    metadata = {}
    (meta_count,) = reader.unpack("<I")
    for _ in range(meta_count):
        key = reader.text()
        if key in metadata:
            raise ArchiveCorruptionError(f"{source}: duplicate metadata key '{key}'")
        metadata[key] = reader.text()

    arrays = {}
    (array_count,) = reader.unpack("<I")
    for _ in range(array_count):
        name = reader.text()
        if name in arrays:
            raise ArchiveCorruptionError(f"{source}: duplicate array '{name}'")
        (ndim,) = reader.unpack("<I")
        shape = reader.unpack(f"<{ndim}I")
        (count,) = reader.unpack("<Q")
        if int(np.prod(shape, dtype=np.int64)) != count:
            raise ArchiveCorruptionError(
                f"{source}: array '{name}' declares shape {shape} but {count} values"
            )
        payload = reader.take(4 * count)
        arrays[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)

    if reader.pos != len(data):
        raise ArchiveCorruptionError(f"{source}: {len(data) - reader.pos} trailing bytes")

    return FeatureArchive(arrays, metadata)


def save_archive(path: PathLike, archive: FeatureArchive) -> None:
    """Write an archive to disk"""
    path = Path(path)
    payload = encode_archive(archive)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    except OSError as e:
        raise OutputPathError(f"Cannot write {path}: {e}") from e


def load_archive(path: PathLike) -> FeatureArchive:
    """Read an archive from disk"""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"Cannot read {path}: {e}") from e
    return decode_archive(data, str(path))


def metadata_floats(metadata: Mapping[str, str], keys: Iterable[str]) -> Tuple[float, ...]:
    """Parse decimal-string metadata values"""
    try:
        return tuple(float(metadata[k]) for k in keys)
    except (KeyError, ValueError) as e:
        raise ArchiveCorruptionError(f"Missing or invalid metadata value: {e}") from e
