import struct

import numpy as np
import numpy.testing as npt
import pytest
from scipy.io import wavfile

from core.errors import (
    ArchiveCorruptionError,
    ArchiveFormatError,
    ChannelCountError,
    SampleRateError,
    SignalTooShortError,
    UnsupportedEncodingError,
    ValidationError,
    WavHeaderError,
)
from core.signal_io import (
    FeatureArchive,
    Waveform,
    decode_archive,
    encode_archive,
    frame_signal,
    load_archive,
    num_frames_for,
    read_wav,
    save_archive,
    write_wav,
)
from tests.synth import sine


def test_read_one_second_pcm16(tmp_path):
    path = tmp_path / "one.wav"
    wavfile.write(path, 16000, np.zeros(16000, dtype=np.int16))
    wave = read_wav(path)
    assert wave.num_samples == 16000
    assert wave.sample_rate_hz == 16000
    assert wave.duration_s == pytest.approx(1.0)


def test_read_float32(tmp_path):
    path = tmp_path / "float.wav"
    data = (0.25 * np.ones(800)).astype(np.float32)
    wavfile.write(path, 16000, data)
    npt.assert_allclose(read_wav(path).samples, 0.25)


def test_stereo_rejected(tmp_path):
    path = tmp_path / "stereo.wav"
    wavfile.write(path, 16000, np.zeros((1000, 2), dtype=np.int16))
    with pytest.raises(ChannelCountError):
        read_wav(path)


def test_int32_rejected(tmp_path):
    path = tmp_path / "int32.wav"
    wavfile.write(path, 16000, np.zeros(1000, dtype=np.int32))
    with pytest.raises(UnsupportedEncodingError):
        read_wav(path)


def test_not_a_wav(tmp_path):
    path = tmp_path / "text.wav"
    path.write_bytes(b"hello, this is not audio")
    with pytest.raises(WavHeaderError):
        read_wav(path)


def test_low_sample_rate_rejected():
    with pytest.raises(SampleRateError):
        Waveform(np.zeros(10), 4000)


def test_out_of_range_samples_rejected():
    with pytest.raises(ValidationError):
        Waveform(np.array([0.0, 1.5]), 16000)


def test_round_trip_within_one_lsb(tmp_path):
    wave = sine(440.0, seconds=0.5)
    path = tmp_path / "sine.wav"
    write_wav(path, wave)
    back = read_wav(path)
    assert back.num_samples == 8000
    assert np.max(np.abs(back.samples - wave.samples)) <= 1.0 / 32768.0


def test_full_scale_clips(tmp_path):
    path = tmp_path / "edge.wav"
    write_wav(path, Waveform(np.array([1.0, -1.0, 0.0]), 16000))
    _, data = wavfile.read(path)
    assert data.tolist() == [32767, -32768, 0]


def test_empty_waveform_writes_zero_frames(tmp_path):
    path = tmp_path / "empty.wav"
    write_wav(path, Waveform(np.zeros(0), 16000))
    assert read_wav(path).num_samples == 0


def test_frame_count_one_second():
    frames = frame_signal(Waveform(np.zeros(16000), 16000), 25.0, 5.0)
    assert frames.num_frames == 196
    assert frames.frame_len_samples == 400
    assert frames.hop_samples == 80


def test_rect_window_on_constant_signal():
    frames = frame_signal(Waveform(np.ones(2000), 16000), 25.0, 5.0, window="rect")
    npt.assert_array_equal(frames.frames, 1.0)


def test_hann_edges_vanish():
    frames = frame_signal(Waveform(np.ones(2000), 16000), 25.0, 5.0, window="hann")
    peak = np.max(np.abs(frames.frames))
    assert np.all(np.abs(frames.frames[:, 0]) <= 1e-6 * peak)
    assert np.all(np.abs(frames.frames[:, -1]) <= 1e-6 * peak)


def test_too_short_signal():
    with pytest.raises(SignalTooShortError):
        frame_signal(Waveform(np.zeros(100), 16000))


@pytest.mark.parametrize("seed", range(8))
def test_frame_count_formula(seed):
    rng = np.random.default_rng(seed)
    frame_ms = float(rng.integers(10, 40))
    hop_ms = float(rng.integers(1, int(frame_ms) + 1))
    frame_len = int(round(frame_ms * 16))
    num_samples = int(rng.integers(frame_len, frame_len + 5000))
    frames = frame_signal(Waveform(np.zeros(num_samples), 16000), frame_ms, hop_ms)
    hop = int(round(hop_ms * 16))
    assert frames.num_frames == (num_samples - frame_len) // hop + 1
    assert frames.num_frames == num_frames_for(num_samples, frame_len, hop)


def test_archive_round_trip_bitwise(tmp_path, rng):
    archive = FeatureArchive(
        {"f0": rng.uniform(80, 300, 200), "sp": rng.standard_normal((200, 513))},
        {"speaker": "spk1", "emotion": "neutral"},
    )
    path = tmp_path / "utt.evcf"
    save_archive(path, archive)
    back = load_archive(path)
    assert back == archive
    assert back["sp"].dtype == np.float32
    assert back["sp"].tobytes() == archive["sp"].tobytes()


def test_wrong_magic():
    with pytest.raises(ArchiveFormatError):
        decode_archive(b"NOPE" + bytes(16))


def test_shape_payload_mismatch():
    name = b"x"
    data = (
        b"EVCF" + struct.pack("<B", 1) + struct.pack("<I", 0) + struct.pack("<I", 1)
        + struct.pack("<I", len(name)) + name + struct.pack("<I", 2) + struct.pack("<2I", 2, 3)
        + struct.pack("<Q", 5) + np.zeros(5, dtype="<f4").tobytes()
    )
    with pytest.raises(ArchiveCorruptionError):
        decode_archive(data)


def _text(value: str) -> bytes:
    raw = value.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def test_duplicate_metadata_key():
    data = (
        b"EVCF" + struct.pack("<B", 1) + struct.pack("<I", 2)
        + _text("id") + _text("a") + _text("id") + _text("b")
        + struct.pack("<I", 0)
    )
    with pytest.raises(ArchiveCorruptionError, match="duplicate metadata key"):
        decode_archive(data)


def test_truncated_and_trailing_bytes():
    data = encode_archive(FeatureArchive({"f0": np.ones(10)}, {"k": "v"}))
    with pytest.raises(ArchiveCorruptionError):
        decode_archive(data[:-1])
    with pytest.raises(ArchiveCorruptionError):
        decode_archive(data + b"\x00")


def test_unsupported_version():
    data = bytearray(encode_archive(FeatureArchive({"f0": np.ones(3)})))
    data[4] = 9
    with pytest.raises(ArchiveFormatError):
        decode_archive(bytes(data))


def test_validate_utterance_frame_counts():
    good = FeatureArchive({"f0": np.ones(5), "sp": np.zeros((5, 9)), "cwt": np.zeros((10, 5))})
    good.validate_utterance()
    bad = good.with_arrays(sp=np.zeros((4, 9)))
    with pytest.raises(ValidationError):
        bad.validate_utterance()
    with pytest.raises(ValidationError):
        FeatureArchive({"sp": np.zeros((5, 9))}).validate_utterance()
