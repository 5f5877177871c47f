"""
Corpus manifests, emotion vocabularies and the bundled synthetic
two-emotion corpus
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import uniform_filter1d

from core.analysis import F0Contour, SpectralEnvelope, synthesize_waveform
from core.errors import ConditioningError, CorpusError, DataError, VocabularyError
from core.logger import get_logger
from core.signal_io import Waveform, write_wav

logger = get_logger()

PathLike = Union[str, Path]

MAX_EMOTIONS = 10
MANIFEST_NAME = "manifest.tsv"


@dataclass(frozen=True, eq=False)
class EmotionId:
    """An emotion label and its one-hot slot vector"""

    label: str
    one_hot: np.ndarray

    def __post_init__(self):
        vector = np.array(self.one_hot, dtype=np.float64).reshape(-1)
        if vector.size != MAX_EMOTIONS or np.count_nonzero(vector) != 1 or vector.max() != 1.0:
            raise ConditioningError(f"Emotion '{self.label}' has a malformed one-hot vector")
        vector.setflags(write=False)
        object.__setattr__(self, "one_hot", vector)

    @property
    def index(self) -> int:
        return int(np.argmax(self.one_hot))


@dataclass(frozen=True)
class EmotionVocabulary:
    """Ordered emotion labels, slot i of the one-hot holding labels[i]"""

    labels: Tuple[str, ...]

    def __post_init__(self):
        labels = tuple(str(label) for label in self.labels)
        if not labels:
            raise VocabularyError("Emotion vocabulary is empty")
        if len(labels) > MAX_EMOTIONS:
            raise VocabularyError(f"{len(labels)} emotions exceed the {MAX_EMOTIONS} one-hot slots")
        if len(set(labels)) != len(labels):
            raise VocabularyError("Duplicate emotion labels")
        if any(not label or "," in label or label != label.strip() for label in labels):
            raise VocabularyError("Emotion labels must be non-empty and comma-free")
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_labels(cls, labels: Iterable[str]) -> "EmotionVocabulary":
        return cls(tuple(sorted(set(labels))))

    def __contains__(self, label: str) -> bool:
        return label in self.labels

    def __len__(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise VocabularyError(
                f"Unknown emotion '{label}' (vocabulary: {', '.join(self.labels)})"
            ) from None

    def emotion(self, label: str) -> EmotionId:
        one_hot = np.zeros(MAX_EMOTIONS)
        one_hot[self.index(label)] = 1.0
        return EmotionId(label, one_hot)

    def one_hots(self, labels: Sequence[str]) -> np.ndarray:
        """(N, 10) one-hot matrix for a list of labels"""
        matrix = np.zeros((len(labels), MAX_EMOTIONS))
        for row, label in enumerate(labels):
            matrix[row, self.index(label)] = 1.0
        return matrix

    def to_metadata(self) -> str:
        return ",".join(self.labels)

    @classmethod
    def from_metadata(cls, text: str) -> "EmotionVocabulary":
        return cls(tuple(part for part in text.split(",") if part))


@dataclass(frozen=True)
class CorpusEntry:
    utt_id: str
    path: Path
    speaker: str
    emotion: str
    content: Optional[str] = None


@dataclass
class CorpusManifest:
    """Utterance list plus the emotion vocabulary it induces"""

    entries: List[CorpusEntry]
    vocabulary: EmotionVocabulary

    def __post_init__(self):
        ids = [e.utt_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise CorpusError(f"Duplicate utterance ids: {', '.join(dupes)}")
        for entry in self.entries:
            if entry.emotion not in self.vocabulary:
                raise VocabularyError(f"{entry.utt_id}: emotion '{entry.emotion}' not in vocabulary")

    @classmethod
    def from_entries(cls, entries: Sequence[CorpusEntry]) -> "CorpusManifest":
        if not entries:
            raise CorpusError("Manifest has no entries")
        return cls(list(entries), EmotionVocabulary.from_labels(e.emotion for e in entries))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def speakers(self) -> List[str]:
        return sorted({e.speaker for e in self.entries})


def read_manifest(path: PathLike) -> CorpusManifest:
    """
    Parse a tab-separated manifest: id, path, speaker, emotion[, content]

    Relative paths resolve against the manifest's directory. Blank lines and
    lines starting with '#' are skipped.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DataError(f"Cannot read manifest {path}: {e}") from e

    entries = []
    for number, line in enumerate(lines, start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.rstrip("\n").split("\t")
        if len(cols) not in (4, 5) or not all(c.strip() for c in cols):
            raise CorpusError(f"{path}:{number}: expected 4 or 5 tab-separated fields")
        utt_id, item, speaker, emotion = (c.strip() for c in cols[:4])
        item_path = Path(item)
        if not item_path.is_absolute():
            item_path = path.parent / item_path
        content = cols[4].strip() if len(cols) == 5 else None
        entries.append(CorpusEntry(utt_id, item_path, speaker, emotion, content))

    return CorpusManifest.from_entries(entries)


def write_manifest(path: PathLike, entries: Sequence[CorpusEntry]):
    """Write entries with paths relative to the manifest directory where possible"""
    path = Path(path)
    rows = []
    for e in entries:
        try:
            item = e.path.relative_to(path.parent)
        except ValueError:
            item = e.path
        cols = [e.utt_id, item.as_posix(), e.speaker, e.emotion]
        if e.content is not None:
            cols.append(e.content)
        rows.append("\t".join(cols))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    except OSError as e:
        raise DataError(f"Cannot write manifest {path}: {e}") from e


# Synthetic corpus

# (F1, F2, F3) in Hz
VOWELS = (
    (730.0, 1090.0, 2440.0),
    (270.0, 2290.0, 3010.0),
    (300.0, 870.0, 2240.0),
    (530.0, 1840.0, 2480.0),
    (570.0, 840.0, 2410.0),
)
SPEAKER_F0_HZ = (118.0, 205.0, 95.0, 172.0, 140.0, 230.0)
SPEAKER_FORMANT_SCALE = (1.0, 1.12, 0.95, 1.08, 1.03, 1.16)


@dataclass(frozen=True)
class ToyCorpusConfig:
    """Knobs of the synthetic corpus (config section 'corpus')"""

    speakers: int = 2
    sentences: int = 6
    emotions: Tuple[str, str] = ("neutral", "angry")
    f0_ratio: float = 1.4
    accent_gain: float = 1.6
    formant_shift: float = 1.08
    sample_rate: int = 16000
    hop_ms: float = 5.0
    frame_ms: float = 25.0
    fft_size: int = 1024

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "ToyCorpusConfig":
        known = {k: tuple(v) if isinstance(v, list) else v
                 for k, v in mapping.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class ToyCorpus:
    root: Path
    manifest_path: Path
    manifest: CorpusManifest
    truth_f0: Dict[str, F0Contour] = field(default_factory=dict)


@dataclass(frozen=True)
class _Segment:
    kind: str
    frames: int
    vowel: int
    accent: float


def _sentence_plan(seed: int, sentence: int) -> List[_Segment]:
    rng = np.random.default_rng([seed, sentence])
    plan = [_Segment("silence", 20, 0, 0.0)]
    for _ in range(int(rng.integers(5, 8))):
        if rng.random() < 0.7:
            accent = float(rng.uniform(0.08, 0.25)) if rng.random() < 0.5 else 0.0
            plan.append(_Segment("vowel", int(rng.integers(24, 44)), int(rng.integers(len(VOWELS))), accent))
        else:
            plan.append(_Segment("fricative", int(rng.integers(14, 26)), 0, 0.0))
    plan.append(_Segment("silence", 20, 0, 0.0))
    return plan


def _log_f0_shape(plan: Sequence[_Segment]) -> Tuple[np.ndarray, np.ndarray]:
    """Declination plus accent bumps (log domain, zero-based) and the voicing mask"""
    total = sum(s.frames for s in plan)
    frames = np.arange(total)
    shape = -0.18 * frames / total
    voiced = np.zeros(total, dtype=bool)
    start = 0
    for seg in plan:
        if seg.kind == "vowel":
            voiced[start:start + seg.frames] = True
            if seg.accent:
                center = start + seg.frames / 2.0
                shape += seg.accent * np.exp(-0.5 * ((frames - center) / 12.0) ** 2)
        start += seg.frames
    return shape, voiced


def _envelopes(plan: Sequence[_Segment], cfg: ToyCorpusConfig, formant_scale: float) -> np.ndarray:
    bins = np.linspace(0.0, cfg.sample_rate / 2.0, cfg.fft_size // 2 + 1)
    tilt = -bins / 2500.0
    rows = []
    for seg in plan:
        if seg.kind == "vowel":
            env = -2.0 + tilt
            for k, formant in enumerate(VOWELS[seg.vowel]):
                center = formant * formant_scale
                width = 60.0 + 40.0 * k
                env = env + (3.0 - 0.6 * k) * np.exp(-0.5 * ((bins - center) / width) ** 2)
        elif seg.kind == "fricative":
            env = -6.0 + 3.5 * np.exp(-0.5 * ((bins - 5200.0 * formant_scale) / 1300.0) ** 2)
        else:
            env = np.full_like(bins, -14.0)
        rows.append(np.repeat(env[None, :], seg.frames, axis=0))
    return uniform_filter1d(np.concatenate(rows, axis=0), size=5, axis=0, mode="nearest")


def generate_toy_corpus(out_dir: PathLike, seed: int = 0,
                        cfg: ToyCorpusConfig = ToyCorpusConfig()) -> ToyCorpus:
    """
    Synthesise a parallel two-emotion multi-speaker corpus

    The second emotion raises F0 by f0_ratio, scales the declination/accent
    excursions by accent_gain (1.0 gives a pure ratio) and shifts every
    resonance by formant_shift. Sentences share a content key across speakers
    and emotions.

    Returns:
        ToyCorpus with the written manifest and per-utterance ground-truth F0
    """
    if len(cfg.emotions) != 2:
        raise CorpusError("The synthetic corpus has exactly two emotions")
    if not 1 <= cfg.speakers <= len(SPEAKER_F0_HZ):
        raise CorpusError(f"Synthetic corpus supports 1..{len(SPEAKER_F0_HZ)} speakers")

    root = Path(out_dir)
    entries = []
    truth = {}
    neutral, emotional = cfg.emotions

    for spk in range(cfg.speakers):
        speaker = f"spk{spk + 1}"
        for sentence in range(cfg.sentences):
            content = f"s{sentence + 1:02d}"
            plan = _sentence_plan(seed, sentence)
            shape, voiced = _log_f0_shape(plan)

            for emo_index, emotion in enumerate(cfg.emotions):
                if emotion == neutral:
                    log_f0 = np.log(SPEAKER_F0_HZ[spk]) + shape
                    formant_scale = SPEAKER_FORMANT_SCALE[spk]
                else:
                    log_f0 = np.log(SPEAKER_F0_HZ[spk] * cfg.f0_ratio) + cfg.accent_gain * shape
                    formant_scale = SPEAKER_FORMANT_SCALE[spk] * cfg.formant_shift

                f0 = F0Contour(np.where(voiced, np.exp(log_f0), 0.0), cfg.hop_ms)
                env = SpectralEnvelope(_envelopes(plan, cfg, formant_scale), cfg.fft_size, cfg.sample_rate)
                noise_seed = int(np.random.default_rng([seed, spk, sentence, emo_index]).integers(2 ** 31))
                wave = synthesize_waveform(f0, env, None, cfg.frame_ms, noise_seed)
                wave = Waveform(wave.samples * 0.8, wave.sample_rate_hz)

                utt_id = f"{speaker}_{emotion}_{content}"
                wav_path = root / "wav" / f"{utt_id}.wav"
                write_wav(wav_path, wave)
                entries.append(CorpusEntry(utt_id, wav_path, speaker, emotion, content))
                truth[utt_id] = f0

    manifest_path = root / MANIFEST_NAME
    write_manifest(manifest_path, entries)
    logger.info(
        f"Synthetic corpus: {len(entries)} utterances, {cfg.speakers} speakers, "
        f"emotions {neutral}/{emotional} -> {root}"
    )
    return ToyCorpus(root, manifest_path, read_manifest(manifest_path), truth)
