"""
Training and conversion pipelines

ingest -> train_spectrum / train_prosody -> convert_utterance, plus the
checkpoint container and the F0-conditioning ablation.
"""
import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from threading import Lock
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from core.analysis import (
    AnalysisConfig,
    ApFrames,
    F0Contour,
    SpectralEnvelope,
    analyze_waveform,
    mcep_from_envelope,
    synthesize_waveform,
)
from core.corpus import CorpusManifest, EmotionId, EmotionVocabulary
from core.errors import (
    ArchiveFormatError,
    CorpusError,
    EvoconvError,
    MissingModelError,
    RoleMismatchError,
    SampleRateError,
    ShapeMismatchError,
    ValidationError,
    VocabularyError,
)
from core.evaluation import pair_utterances, spectral_mcd
from core.logger import get_logger
from core.prosody import (
    ContinuousLogF0,
    CwtConfig,
    CwtMatrix,
    F0Statistics,
    cwt_reconstruct,
    denormalize_log_f0,
    interpolate_unvoiced,
    lg_convert_f0,
    prepare_prosody,
)
from core.signal_io import (
    FeatureArchive,
    PathLike,
    Waveform,
    decode_archive,
    encode_archive,
    load_archive,
    read_wav,
    save_archive,
)
from core.vawgan import LossReport, ModelConfig, TrainBatch, TrainConfig, VawGan, train_step

logger = get_logger()

CHECKPOINT_FORMAT = "evoconv-checkpoint"
CHECKPOINT_VERSION = "1"
ALL_EMOTIONS = "*"
REQUIRED_CHECKPOINT_KEYS = ("role", "vocabulary", "model_config", "train_config")
SCALE_FLOOR = 1e-3


class Role(str, Enum):
    SPECTRUM = "spectrum"
    PROSODY = "prosody"


class ConversionMode(str, Enum):
    CWT = "cwt"
    LG = "lg"


# Utterance analysis and ingestion

def analyze_utterance(wave: Waveform, cfg: AnalysisConfig = AnalysisConfig(),
                      cwt_cfg: CwtConfig = CwtConfig(),
                      metadata: Optional[Mapping[str, str]] = None) -> FeatureArchive:
    """
    Full feature set of one utterance: f0, sp, ap, mcep, cwt plus log-F0 moments

    Raises:
        SampleRateError: rate differs from the analysis rate and pass-through is off
    """
    if wave.sample_rate_hz != cfg.sample_rate and not cfg.allow_rate_passthrough:
        raise SampleRateError(
            f"Audio at {wave.sample_rate_hz} Hz, analysis configured for {cfg.sample_rate} Hz"
        )
    f0, env, ap = analyze_waveform(wave, cfg)
    mcep = mcep_from_envelope(env, cfg.mcep_order, cfg.mcep_alpha)
    contour, cwt = prepare_prosody(f0, cwt_cfg)
    voiced_stats = F0Statistics.from_contour(f0)

    meta = dict(metadata or {})
    meta.update(
        sample_rate=str(wave.sample_rate_hz),
        hop_ms=repr(cfg.hop_ms),
        frame_ms=repr(cfg.frame_ms),
        fft_size=str(env.fft_size),
        mcep_order=str(cfg.mcep_order),
        mcep_alpha=repr(cfg.mcep_alpha),
    )
    meta.update(contour.stats.to_metadata())
    meta.update(voiced_stats.to_metadata("voiced_"))
    return FeatureArchive(
        {
            "f0": f0.values_hz,
            "sp": env.log_amp,
            "ap": ap.values,
            "mcep": mcep.coeffs,
            "cwt": cwt.coefficients,
        },
        meta,
    )


@dataclass
class IngestResult:
    archives: Dict[str, FeatureArchive] = field(default_factory=dict)
    failures: Dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failures


def ingest(manifest: CorpusManifest, cfg: AnalysisConfig = AnalysisConfig(),
           cwt_cfg: CwtConfig = CwtConfig(), max_workers: int = 4,
           provenance: Optional[Mapping[str, str]] = None) -> IngestResult:
    """
    Analyse every manifest entry; per-file failures are collected, not raised

    Entries pointing at .evcf archives are passed through unchanged.

    Returns:
        IngestResult with archives in manifest order
    """
    results: Dict[str, FeatureArchive] = {}
    failures: Dict[str, str] = {}
    lock = Lock()

    def work(entry):
        try:
            if entry.path.suffix.lower() == ".evcf":
                archive = load_archive(entry.path)
                archive.validate_utterance()
            else:
                meta = {
                    "id": entry.utt_id,
                    "speaker": entry.speaker,
                    "emotion": entry.emotion,
                    "source": entry.path.name,
                }
                if entry.content is not None:
                    meta["content"] = entry.content
                meta.update(provenance or {})
                archive = analyze_utterance(read_wav(entry.path), cfg, cwt_cfg, meta)
            with lock:
                results[entry.utt_id] = archive
            logger.debug(f"Analysed {entry.utt_id}: {archive['f0'].shape[0]} frames")
        except EvoconvError as e:
            with lock:
                failures[entry.utt_id] = f"{type(e).__name__}: {e}"
            logger.warning(f"Skipping {entry.utt_id}: {e}")

    with ThreadPoolExecutor(max_workers=max(1, max_workers), thread_name_prefix="Ingest") as pool:
        list(pool.map(work, manifest.entries))

    ordered = {e.utt_id: results[e.utt_id] for e in manifest.entries if e.utt_id in results}
    logger.info(f"Ingested {len(ordered)}/{len(manifest)} utterances ({len(failures)} failed)")
    return IngestResult(ordered, {k: failures[k] for k in sorted(failures)})


# Frame assembly

def energy_mask(log_amp: np.ndarray, gate_db: float = -60.0) -> np.ndarray:
    """Frames whose level is within gate_db of the utterance's loudest frame"""
    if log_amp.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    level_db = 10.0 * np.log10(np.mean(np.exp(2.0 * log_amp), axis=1) + 1e-300)
    return level_db >= level_db.max() + gate_db


def f0_scalars(f0: F0Contour, reference: F0Statistics) -> np.ndarray:
    """Per-frame log-F0 of the gap-filled contour, standardised by fixed reference moments"""
    filled = interpolate_unvoiced(f0)
    return (np.log(filled.values_hz) - reference.mu_log) / reference.sigma_log


def normalized_f0_scalars(archive: FeatureArchive,
                          reference: Optional[F0Statistics] = None) -> np.ndarray:
    """
    Conditioning scalars of an archive's own F0

    With no reference the archive's own moments are used (mean 0, std 1 per
    utterance). Training and conversion pass the corpus-wide moments.
    """
    f0 = F0Contour(archive["f0"].astype(np.float64))
    stats = reference if reference is not None else F0Statistics.from_metadata(archive.metadata)
    return f0_scalars(f0, stats)


def stack_context(frames: np.ndarray, context: int) -> np.ndarray:
    """(T, D) -> (T, D * context), neighbours centred on each frame, edges repeated"""
    if context <= 1:
        return frames
    half = context // 2
    padded = np.pad(frames, ((half, context - 1 - half), (0, 0)), mode="edge")
    return np.concatenate([padded[i:i + frames.shape[0]] for i in range(context)], axis=1)


def center_block(frames: np.ndarray, width: int, context: int) -> np.ndarray:
    start = (context // 2) * width
    return frames[:, start:start + width]


@dataclass(frozen=True, eq=False)
class FeatureScaler:
    """Per-dimension standardisation fitted on training frames"""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, frames: np.ndarray) -> "FeatureScaler":
        std = frames.std(axis=0)
        return cls(frames.mean(axis=0), np.where(std < SCALE_FLOOR, 1.0, std))

    def transform(self, frames: np.ndarray) -> np.ndarray:
        return (frames - self.mean) / self.std

    def inverse(self, frames: np.ndarray) -> np.ndarray:
        return frames * self.std + self.mean

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {"scaler.mean": self.mean, "scaler.std": self.std}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "FeatureScaler":
        try:
            return cls(np.asarray(arrays["scaler.mean"], dtype=np.float64),
                       np.asarray(arrays["scaler.std"], dtype=np.float64))
        except KeyError as e:
            raise ArchiveFormatError(f"Checkpoint lacks scaler array {e}") from e


def _as_list(archives: Union[Mapping[str, FeatureArchive], Sequence[FeatureArchive]]
             ) -> List[FeatureArchive]:
    items = list(archives.values()) if isinstance(archives, Mapping) else list(archives)
    if not items:
        raise CorpusError("No archives to train on")
    for archive in items:
        archive.validate_utterance()
        for key in ("emotion", "speaker", "mu_log", "sigma_log"):
            if key not in archive.metadata:
                raise CorpusError(f"Archive {archive.metadata.get('id', '?')} lacks '{key}' metadata")
    return items


def _vocabulary(items: Sequence[FeatureArchive]) -> EmotionVocabulary:
    vocabulary = EmotionVocabulary.from_labels(a.metadata["emotion"] for a in items)
    if len(vocabulary) < 2:
        raise CorpusError(
            f"Training needs at least two emotions, corpus has only '{vocabulary.labels[0]}'"
        )
    return vocabulary


def emotion_statistics(items: Sequence[FeatureArchive]) -> Dict[str, F0Statistics]:
    """
    Pooled voiced log-F0 moments keyed by emotion, by 'speaker/emotion' and '*' for everything
    """
    groups: Dict[str, List[F0Statistics]] = {}
    for archive in items:
        meta = archive.metadata
        if "voiced_mu_log" not in meta:
            continue
        stats = F0Statistics.from_metadata(meta, "voiced_")
        for key in (meta["emotion"], f"{meta['speaker']}/{meta['emotion']}", ALL_EMOTIONS):
            groups.setdefault(key, []).append(stats)
    return {key: F0Statistics.pooled(group) for key, group in sorted(groups.items())}


# Checkpoints

def _checkpoint_section(meta: Mapping[str, str], key: str) -> dict:
    try:
        value = yaml.safe_load(meta[key])
    except yaml.YAMLError as e:
        raise ArchiveFormatError(f"Checkpoint '{key}' is not valid YAML: {e}") from e
    if not isinstance(value, dict):
        raise ArchiveFormatError(f"Checkpoint '{key}' is not a mapping")
    return value


def _yaml_text(cfg) -> str:
    plain = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}
    return yaml.safe_dump(plain, sort_keys=True)


@dataclass(eq=False)
class ModelCheckpoint:
    """A trained network for one role with everything conversion needs"""

    role: Role
    model: VawGan
    vocabulary: EmotionVocabulary
    scaler: FeatureScaler
    train_cfg: TrainConfig
    f0_stats: Dict[str, F0Statistics] = field(default_factory=dict)
    speakers: Tuple[str, ...] = ()
    context_frames: int = 1
    provenance: Dict[str, str] = field(default_factory=dict)
    history: List[LossReport] = field(default_factory=list)

    @property
    def model_cfg(self) -> ModelConfig:
        return self.model.cfg

    @property
    def seed(self) -> int:
        return self.train_cfg.seed

    def to_archive(self) -> FeatureArchive:
        arrays = dict(self.model.to_arrays())
        arrays.update(self.scaler.to_arrays())
        meta = {
            "format": CHECKPOINT_FORMAT,
            "checkpoint_version": CHECKPOINT_VERSION,
            "role": self.role.value,
            "feature_dim": str(self.model_cfg.feature_dim),
            "condition_width": str(self.model_cfg.condition_width),
            "vocabulary": self.vocabulary.to_metadata(),
            "seed": str(self.seed),
            "speakers": ",".join(self.speakers),
            "context_frames": str(self.context_frames),
            "model_config": _yaml_text(self.model_cfg),
            "train_config": _yaml_text(self.train_cfg),
            "stats_keys": ";".join(self.f0_stats),
        }
        for key, stats in self.f0_stats.items():
            meta.update(stats.to_metadata(f"stats[{key}]."))
        for key, value in self.provenance.items():
            meta.setdefault(key, value)
        return FeatureArchive(arrays, meta)

    @classmethod
    def from_archive(cls, archive: FeatureArchive) -> "ModelCheckpoint":
        meta = archive.metadata
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ArchiveFormatError("Archive is not a model checkpoint")
        if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise ArchiveFormatError(
                f"Unsupported checkpoint version {meta.get('checkpoint_version')}"
            )
        for key in REQUIRED_CHECKPOINT_KEYS:
            if key not in meta:
                raise ArchiveFormatError(f"Checkpoint missing '{key}'")
        try:
            role = Role(meta["role"])
            vocabulary = EmotionVocabulary.from_metadata(meta["vocabulary"])
            model_cfg = ModelConfig.from_mapping(_checkpoint_section(meta, "model_config"))
            train_cfg = TrainConfig.from_mapping(_checkpoint_section(meta, "train_config"))
            model = VawGan(model_cfg, seed=train_cfg.seed, clip_c=None)
            model.load_arrays(archive.arrays)
            context_frames = int(meta.get("context_frames", "1"))
        except (TypeError, ValueError, ValidationError) as e:
            raise ArchiveFormatError(f"Invalid checkpoint: {e}") from e
        stats_keys = [k for k in meta.get("stats_keys", "").split(";") if k]
        known = {"format", "checkpoint_version", "role", "feature_dim", "condition_width",
                 "vocabulary", "seed", "speakers", "context_frames", "model_config",
                 "train_config", "stats_keys"}
        provenance = {
            k: v for k, v in meta.items()
            if k not in known and not k.startswith("stats[")
        }
        return cls(
            role=role,
            model=model,
            vocabulary=vocabulary,
            scaler=FeatureScaler.from_arrays(archive.arrays),
            train_cfg=train_cfg,
            f0_stats={k: F0Statistics.from_metadata(meta, f"stats[{k}].") for k in stats_keys},
            speakers=tuple(s for s in meta.get("speakers", "").split(",") if s),
            context_frames=context_frames,
            provenance=provenance,
        )

    def require(self, role: Role) -> "ModelCheckpoint":
        if self.role is not role:
            raise RoleMismatchError(f"Expected a {role.value} checkpoint, got {self.role.value}")
        return self

    def fingerprint(self) -> str:
        return hashlib.sha256(encode_archive(self.to_archive())).hexdigest()[:16]


def save_checkpoint(ckpt: ModelCheckpoint, path: PathLike):
    save_archive(path, ckpt.to_archive())
    logger.info(f"Saved {ckpt.role.value} checkpoint to {path}")


def load_checkpoint(path: PathLike, role: Optional[Role] = None) -> ModelCheckpoint:
    """Load and version-check a checkpoint, optionally enforcing its role"""
    ckpt = ModelCheckpoint.from_archive(load_archive(path))
    if role is not None:
        ckpt.require(role)
    return ckpt


def checkpoint_roundtrip(ckpt: ModelCheckpoint) -> ModelCheckpoint:
    """In-memory save/load, giving the parameters exactly as a reload would see them"""
    return ModelCheckpoint.from_archive(decode_archive(encode_archive(ckpt.to_archive())))


# Training

def _fit(role: Role, features: np.ndarray, emotions: np.ndarray, f0: Optional[np.ndarray],
         model_cfg: ModelConfig, train_cfg: TrainConfig) -> Tuple[VawGan, FeatureScaler, List[LossReport]]:
    scaler = FeatureScaler.fit(features)
    scaled = scaler.transform(features)
    nets = VawGan(model_cfg, seed=train_cfg.seed, clip_c=train_cfg.clip_c)
    rng = np.random.default_rng(train_cfg.seed)
    count = scaled.shape[0]
    steps = train_cfg.total_steps(count)
    logger.info(
        f"Training {role.value} network: {count} frames, dim {model_cfg.feature_dim}, "
        f"condition width {model_cfg.condition_width}, {steps} steps"
    )

    history = []
    for step in range(1, steps + 1):
        idx = rng.choice(count, size=min(train_cfg.batch, count), replace=False)
        batch = TrainBatch(scaled[idx], emotions[idx], None if f0 is None else f0[idx])
        report = train_step(batch, nets, train_cfg, rng)
        history.append(report)
        if step == 1 or step % train_cfg.log_interval == 0 or step == steps:
            logger.info(
                f"[{role.value}] step {step}/{steps} recon={report.recon:.4f} "
                f"kl={report.kl:.3f} d_loss={report.d_loss:.4f}"
            )
    return nets, scaler, history


def train_spectrum(archives, model_cfg: ModelConfig = ModelConfig(),
                   train_cfg: TrainConfig = TrainConfig(),
                   provenance: Optional[Mapping[str, str]] = None) -> ModelCheckpoint:
    """
    Train the spectrum VAW-GAN on energy-gated envelope frames

    Each training frame is (sp frame, emotion one-hot, normalised log-F0 scalar)
    when model_cfg.use_f0_condition is set, else (sp frame, emotion one-hot).
    """
    items = _as_list(archives)
    vocabulary = _vocabulary(items)
    feature_dim = items[0]["sp"].shape[1]
    if model_cfg.feature_dim != feature_dim:
        raise ShapeMismatchError(
            f"Envelopes have {feature_dim} bins but model.feature_dim is {model_cfg.feature_dim}"
        )

    f0_stats = emotion_statistics(items)
    reference = None
    if model_cfg.use_f0_condition:
        if ALL_EMOTIONS not in f0_stats:
            raise CorpusError("F0 conditioning needs voiced log-F0 moments in the archives")
        reference = f0_stats[ALL_EMOTIONS]

    frames, labels, scalars = [], [], []
    for archive in items:
        sp = archive["sp"].astype(np.float64)
        keep = energy_mask(sp, train_cfg.energy_gate_db)
        frames.append(sp[keep])
        labels.extend([archive.metadata["emotion"]] * int(keep.sum()))
        if reference is not None:
            scalars.append(normalized_f0_scalars(archive, reference)[keep])
    features = np.concatenate(frames, axis=0)
    f0 = np.concatenate(scalars) if reference is not None else None

    nets, scaler, history = _fit(
        Role.SPECTRUM, features, vocabulary.one_hots(labels), f0, model_cfg, train_cfg
    )
    return ModelCheckpoint(
        Role.SPECTRUM, nets, vocabulary, scaler, train_cfg,
        f0_stats=f0_stats,
        speakers=tuple(sorted({a.metadata["speaker"] for a in items})),
        provenance=dict(provenance or {}),
        history=history,
    )


def prosody_model_config(model_cfg: ModelConfig, cwt_cfg: CwtConfig) -> ModelConfig:
    return replace(
        model_cfg,
        feature_dim=cwt_cfg.num_scales * cwt_cfg.context_frames,
        use_f0_condition=False,
    )


def train_prosody(archives, model_cfg: ModelConfig = ModelConfig(),
                  train_cfg: TrainConfig = TrainConfig(), cwt_cfg: CwtConfig = CwtConfig(),
                  provenance: Optional[Mapping[str, str]] = None) -> ModelCheckpoint:
    """
    Train the prosody VAW-GAN on voiced frames of the CWT coefficient matrix

    Frames are the 10 scale coefficients of one time step (stacked over
    cwt_cfg.context_frames neighbours); conditioning is the emotion one-hot only.
    """
    items = _as_list(archives)
    vocabulary = _vocabulary(items)
    pros_cfg = prosody_model_config(model_cfg, cwt_cfg)

    frames, labels = [], []
    for archive in items:
        cwt = archive["cwt"].astype(np.float64)
        if cwt.shape[0] != cwt_cfg.num_scales:
            raise ShapeMismatchError(
                f"Archive has {cwt.shape[0]} CWT scales, prosody config expects {cwt_cfg.num_scales}"
            )
        voiced = archive["f0"] > 0
        stacked = stack_context(cwt.T, cwt_cfg.context_frames)[voiced]
        frames.append(stacked)
        labels.extend([archive.metadata["emotion"]] * stacked.shape[0])
    features = np.concatenate(frames, axis=0)

    nets, scaler, history = _fit(
        Role.PROSODY, features, vocabulary.one_hots(labels), None, pros_cfg, train_cfg
    )
    return ModelCheckpoint(
        Role.PROSODY, nets, vocabulary, scaler, train_cfg,
        f0_stats=emotion_statistics(items),
        speakers=tuple(sorted({a.metadata["speaker"] for a in items})),
        context_frames=cwt_cfg.context_frames,
        provenance=dict(provenance or {}),
        history=history,
    )


# Conversion

@dataclass(eq=False)
class ConversionResult:
    wave: Waveform
    archive: FeatureArchive


def _source_archive(source: Union[Waveform, FeatureArchive], cfg: AnalysisConfig,
                    cwt_cfg: CwtConfig, metadata: Optional[Mapping[str, str]]) -> FeatureArchive:
    if isinstance(source, Waveform):
        return analyze_utterance(source, cfg, cwt_cfg, metadata)
    source.validate_utterance()
    archive = source.with_metadata(**metadata) if metadata else source
    if "mu_log" not in archive.metadata or "cwt" not in archive:
        f0 = F0Contour(archive["f0"].astype(np.float64))
        contour, cwt = prepare_prosody(f0, cwt_cfg)
        archive = archive.with_arrays(cwt=cwt.coefficients).with_metadata(**contour.stats.to_metadata())
    return archive


def _stats_for(ckpt: ModelCheckpoint, emotion: Optional[str]) -> F0Statistics:
    """Emotion-level moments; an unknown source emotion falls back to the corpus-wide pool"""
    if emotion in ckpt.f0_stats:
        return ckpt.f0_stats[emotion]
    if ALL_EMOTIONS in ckpt.f0_stats:
        return ckpt.f0_stats[ALL_EMOTIONS]
    raise VocabularyError(f"Checkpoint has no F0 statistics for emotion '{emotion}'")


def conditioning_scalars(spec_ckpt: ModelCheckpoint, f0: F0Contour) -> np.ndarray:
    """Spectrum-decoder F0 inputs for a contour, on the same scale as training"""
    return f0_scalars(f0, _stats_for(spec_ckpt, ALL_EMOTIONS))


def _mapping_stats(ckpt: ModelCheckpoint, meta: Mapping[str, str], target: str
                   ) -> Tuple[F0Statistics, F0Statistics]:
    """
    Source/target moments for the LG mapping

    Speaker-level moments are used when the checkpoint saw this speaker in
    both emotions, emotion-level moments otherwise.
    """
    speaker, emotion = meta.get("speaker"), meta.get("emotion")
    if f"{speaker}/{emotion}" in ckpt.f0_stats and f"{speaker}/{target}" in ckpt.f0_stats:
        return ckpt.f0_stats[f"{speaker}/{emotion}"], ckpt.f0_stats[f"{speaker}/{target}"]
    return _stats_for(ckpt, emotion), _stats_for(ckpt, target)


def _target(label: Union[str, EmotionId], vocabulary: EmotionVocabulary) -> EmotionId:
    label = label.label if isinstance(label, EmotionId) else label
    return vocabulary.emotion(label)


def convert_spectrum(archive: FeatureArchive, target: EmotionId, spec_ckpt: ModelCheckpoint,
                     f0_scalars: Optional[np.ndarray]) -> np.ndarray:
    """
    Converted log envelope; frames below the energy gate keep the source envelope
    """
    spec_ckpt.require(Role.SPECTRUM)
    sp = archive["sp"].astype(np.float64)
    if sp.shape[1] != spec_ckpt.model_cfg.feature_dim:
        raise ShapeMismatchError(
            f"Envelope has {sp.shape[1]} bins, checkpoint expects {spec_ckpt.model_cfg.feature_dim}"
        )
    nets = spec_ckpt.model
    scalars = f0_scalars if nets.cfg.use_f0_condition else None
    emotions = np.repeat(target.one_hot[None, :], sp.shape[0], axis=0)
    converted = spec_ckpt.scaler.inverse(nets.convert(spec_ckpt.scaler.transform(sp), emotions, scalars))
    keep = energy_mask(sp, spec_ckpt.train_cfg.energy_gate_db)
    return np.where(keep[:, None], converted, sp)


def convert_prosody(archive: FeatureArchive, target: EmotionId, pros_ckpt: ModelCheckpoint,
                    cwt_cfg: CwtConfig = CwtConfig()) -> Tuple[F0Contour, CwtMatrix, np.ndarray]:
    """
    Converted F0 through the prosody network

    The standardised reconstruction is denormalised with the utterance's own
    log-F0 moments carried through the source->target LG mapping, so the
    speaker's register is kept.

    Returns:
        (converted F0, converted CWT matrix, standardised reconstruction)
    """
    pros_ckpt.require(Role.PROSODY)
    meta = archive.metadata
    hop_ms = float(meta.get("hop_ms", "5.0"))
    cwt = archive["cwt"].astype(np.float64)
    num_scales = cwt.shape[0]
    context = pros_ckpt.context_frames
    frames = stack_context(cwt.T, context)
    emotions = np.repeat(target.one_hot[None, :], frames.shape[0], axis=0)
    decoded = pros_ckpt.scaler.inverse(
        pros_ckpt.model.convert(pros_ckpt.scaler.transform(frames), emotions)
    )
    converted_cwt = center_block(decoded, num_scales, context).T
    scales_s = cwt_cfg.scale_frames(num_scales) * hop_ms / 1000.0
    matrix = CwtMatrix(converted_cwt, scales_s, hop_ms)
    values = cwt_reconstruct(matrix, cwt_cfg)

    utterance = F0Statistics.from_metadata(meta)
    src, tgt = _mapping_stats(pros_ckpt, meta, target.label)
    ratio = tgt.sigma_log / src.sigma_log
    mapped = F0Statistics((utterance.mu_log - src.mu_log) * ratio + tgt.mu_log,
                          utterance.sigma_log * ratio)

    voiced = archive["f0"] > 0
    contour = ContinuousLogF0(values, voiced, utterance, hop_ms)
    return denormalize_log_f0(contour, mapped), matrix, values


def convert_utterance(source: Union[Waveform, FeatureArchive], target: Union[str, EmotionId],
                      spec_ckpt: Optional[ModelCheckpoint], pros_ckpt: Optional[ModelCheckpoint] = None,
                      mode: ConversionMode = ConversionMode.CWT,
                      cfg: AnalysisConfig = AnalysisConfig(), cwt_cfg: CwtConfig = CwtConfig(),
                      seed: int = 0, provenance: Optional[Mapping[str, str]] = None,
                      source_metadata: Optional[Mapping[str, str]] = None) -> ConversionResult:
    """
    Run-time conversion of one utterance to the target emotion

    Steps: analyse; prosody encode/decode of the CWT coefficients (or the
    LG transform in 'lg' mode); reconstruct and denormalise the converted F0;
    spectrum encode/decode conditioned on the target one-hot and the
    converted F0; resynthesise with the source aperiodicity copied unchanged.

    Returns:
        ConversionResult with the waveform and the converted feature archive
    """
    mode = ConversionMode(mode)
    if spec_ckpt is None:
        raise MissingModelError("Conversion needs a spectrum checkpoint")
    if mode is ConversionMode.CWT and pros_ckpt is None:
        raise MissingModelError("CWT conversion needs a prosody checkpoint")
    spec_ckpt.require(Role.SPECTRUM)
    if pros_ckpt is not None:
        pros_ckpt.require(Role.PROSODY)
        if pros_ckpt.vocabulary != spec_ckpt.vocabulary:
            raise VocabularyError(
                f"Checkpoint vocabularies differ: {spec_ckpt.vocabulary.labels} vs "
                f"{pros_ckpt.vocabulary.labels}"
            )
    emotion = _target(target, spec_ckpt.vocabulary)

    archive = _source_archive(source, cfg, cwt_cfg, source_metadata)
    meta = archive.metadata
    hop_ms = float(meta.get("hop_ms", repr(cfg.hop_ms)))
    frame_ms = float(meta.get("frame_ms", repr(cfg.frame_ms)))
    rate = int(meta.get("sample_rate", str(cfg.sample_rate)))
    source_f0 = F0Contour(archive["f0"].astype(np.float64), hop_ms)

    if mode is ConversionMode.CWT:
        converted_f0, matrix, _ = convert_prosody(archive, emotion, pros_ckpt, cwt_cfg)
        converted_cwt = matrix.coefficients
    else:
        src, tgt = _mapping_stats(spec_ckpt, meta, emotion.label)
        converted_f0 = lg_convert_f0(source_f0, src, tgt)
        converted_cwt = prepare_prosody(converted_f0, cwt_cfg)[1].coefficients

    scalars = None
    if spec_ckpt.model_cfg.use_f0_condition:
        scalars = conditioning_scalars(spec_ckpt, converted_f0)
    sp = convert_spectrum(archive, emotion, spec_ckpt, scalars)
    fft_size = int(meta.get("fft_size", str(cfg.fft_size)))
    env = SpectralEnvelope(sp, fft_size, rate)
    ap_array = archive.get("ap")
    ap = ApFrames(ap_array.astype(np.float64)) if ap_array is not None else None
    wave = synthesize_waveform(converted_f0, env, ap, frame_ms, seed)

    order = int(meta.get("mcep_order", str(cfg.mcep_order)))
    alpha = float(meta.get("mcep_alpha", repr(cfg.mcep_alpha)))
    mcep = mcep_from_envelope(env, order, alpha)

    arrays = {"f0": converted_f0.values_hz, "sp": sp, "mcep": mcep.coeffs, "cwt": converted_cwt}
    if ap_array is not None:
        arrays["ap"] = ap_array
    out_meta = {k: v for k, v in meta.items() if k in ("id", "speaker", "content", "source",
                                                       "sample_rate", "hop_ms", "frame_ms",
                                                       "fft_size", "mcep_order", "mcep_alpha")}
    out_meta.update(
        emotion=emotion.label,
        source_emotion=meta.get("emotion", ""),
        mode=mode.value,
        spectrum_checkpoint=spec_ckpt.fingerprint(),
        prosody_checkpoint=pros_ckpt.fingerprint() if pros_ckpt is not None else "",
        seed=str(seed),
    )
    out_meta.update(provenance or {})
    logger.info(
        f"Converted {meta.get('id', 'utterance')} -> {emotion.label} ({mode.value}, "
        f"{source_f0.num_frames} frames)"
    )
    return ConversionResult(wave, FeatureArchive(arrays, out_meta))


# Ablation

@dataclass
class AblationRun:
    seed: int
    zero_effort_mcd: float
    conditioned_mcd: float
    unconditioned_mcd: float

    @property
    def conditioned_margin(self) -> float:
        return self.zero_effort_mcd - self.conditioned_mcd

    @property
    def unconditioned_margin(self) -> float:
        return self.zero_effort_mcd - self.unconditioned_mcd

    @property
    def shrinks(self) -> bool:
        return self.unconditioned_margin <= self.conditioned_margin


@dataclass
class AblationReport:
    runs: List[AblationRun] = field(default_factory=list)

    @property
    def majority_shrinks(self) -> bool:
        return sum(r.shrinks for r in self.runs) * 2 > len(self.runs)

    def to_tsv(self) -> str:
        lines = ["seed\tzero_effort_mcd\tconditioned_mcd\tunconditioned_mcd\t"
                 "conditioned_margin\tunconditioned_margin\tshrinks"]
        for r in self.runs:
            lines.append(
                f"{r.seed}\t{r.zero_effort_mcd:.4f}\t{r.conditioned_mcd:.4f}\t"
                f"{r.unconditioned_mcd:.4f}\t{r.conditioned_margin:.4f}\t"
                f"{r.unconditioned_margin:.4f}\t{str(r.shrinks).lower()}"
            )
        lines.append(f"# majority_shrinks\t{str(self.majority_shrinks).lower()}")
        return "\n".join(lines) + "\n"


def _lg_scalars(spec_ckpt: ModelCheckpoint, source: FeatureArchive, target: str) -> np.ndarray:
    """Conditioning scalars of the LG-converted source F0, as 'lg' conversion feeds them"""
    f0 = F0Contour(source["f0"].astype(np.float64), float(source.metadata.get("hop_ms", "5.0")))
    src, tgt = _mapping_stats(spec_ckpt, source.metadata, target)
    return conditioning_scalars(spec_ckpt, lg_convert_f0(f0, src, tgt))


def run_ablation(archives, model_cfg: ModelConfig = ModelConfig(),
                 train_cfg: TrainConfig = TrainConfig(), seeds: Sequence[int] = (0, 1, 2),
                 source_emotion: str = "neutral", target_emotion: str = "angry") -> AblationReport:
    """
    Spectral MCD margin over zero effort with and without the F0 condition, per seed

    Both spectrum networks are trained on the same frames and seed; converted
    source-emotion envelopes are scored against the parallel target-emotion
    references. The conditioned network is fed the LG-converted source F0.
    """
    items = _as_list(archives)
    sources = [a for a in items if a.metadata["emotion"] == source_emotion]
    references = [a for a in items if a.metadata["emotion"] == target_emotion]
    pairs = pair_utterances(sources, references)
    if not pairs:
        raise CorpusError(f"No parallel {source_emotion}/{target_emotion} pairs for the ablation")

    zero_effort = float(np.mean([spectral_mcd(s["sp"], r["sp"], s) for s, r in pairs]))
    report = AblationReport()
    for seed in seeds:
        run_cfg = replace(train_cfg, seed=int(seed))
        scores = {}
        for conditioned in (True, False):
            ckpt = train_spectrum(items, replace(model_cfg, use_f0_condition=conditioned), run_cfg)
            emotion = ckpt.vocabulary.emotion(target_emotion)
            mcds = []
            for src, ref in pairs:
                scalars = _lg_scalars(ckpt, src, target_emotion) if conditioned else None
                sp = convert_spectrum(src, emotion, ckpt, scalars)
                mcds.append(spectral_mcd(sp, ref["sp"], src))
            scores[conditioned] = float(np.mean(mcds))
        run = AblationRun(int(seed), zero_effort, scores[True], scores[False])
        report.runs.append(run)
        logger.info(
            f"Ablation seed {seed}: zero effort {zero_effort:.3f} dB, "
            f"F0-conditioned {run.conditioned_mcd:.3f} dB, unconditioned {run.unconditioned_mcd:.3f} dB"
        )
    return report
