"""
Objective evaluation - DTW alignment, MCD, LSD, F0 PCC/RMSE and reports
"""
import contextlib
import hashlib
import io
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist

from core.analysis import LOG_FLOOR, F0Contour, McepSequence, SpectralEnvelope, mcep_from_envelope
from core.errors import DegenerateVarianceError, EmptySignalError, ShapeMismatchError
from core.logger import get_logger
from core.signal_io import FeatureArchive, encode_archive

with contextlib.redirect_stdout(io.StringIO()):
    from dtw import dtw, symmetric1

logger = get_logger()

MCD_CONST = 10.0 / np.log(10.0)
DB_PER_NEPER = 20.0 / np.log(10.0)
METRICS = ("mcd_db", "lsd_db", "pcc", "rmse_hz")

Sequence2D = Union[McepSequence, np.ndarray]


def _frames(seq: Sequence2D) -> np.ndarray:
    if isinstance(seq, McepSequence):
        return seq.coeffs[:, 1:]
    arr = np.asarray(seq, dtype=np.float64)
    return arr[:, None] if arr.ndim == 1 else arr


def dtw_align(a: Sequence2D, b: Sequence2D) -> np.ndarray:
    """
    Minimum summed-Euclidean-distance warping path with steps (1,0), (0,1), (1,1)

    Mel-cepstra are compared without c0.

    Returns:
        (P, 2) array of (index_a, index_b) pairs, monotonic and continuous
    """
    fa, fb = _frames(a), _frames(b)
    if fa.shape[0] == 0 or fb.shape[0] == 0:
        raise EmptySignalError("Cannot align an empty sequence")
    if fa.shape[1] != fb.shape[1]:
        raise ShapeMismatchError(f"Frame widths differ: {fa.shape[1]} vs {fb.shape[1]}")
    cost = cdist(fa, fb, metric="euclidean")
    alignment = dtw(cost, step_pattern=symmetric1)
    return np.stack([alignment.index1, alignment.index2], axis=1).astype(np.int64)


def path_cost(a: Sequence2D, b: Sequence2D, path: np.ndarray) -> float:
    fa, fb = _frames(a), _frames(b)
    return float(np.linalg.norm(fa[path[:, 0]] - fb[path[:, 1]], axis=1).sum())


def _diagonal(n: int, m: int) -> np.ndarray:
    if n != m:
        raise ShapeMismatchError("Unaligned comparison needs equal lengths")
    idx = np.arange(n)
    return np.stack([idx, idx], axis=1)


def mcd(a: Sequence2D, b: Sequence2D, path: Optional[np.ndarray] = None) -> float:
    """
    Mel-cepstral distortion in dB over the aligned path, c0 excluded

    (10 / ln 10) * sqrt(2 * sum_d (c_d - c'_d)^2), averaged over path pairs
    """
    fa, fb = _frames(a), _frames(b)
    if fa.shape[1] != fb.shape[1]:
        raise ShapeMismatchError(f"Mel-cepstral orders differ: {fa.shape[1]} vs {fb.shape[1]}")
    if path is None:
        path = _diagonal(fa.shape[0], fb.shape[0])
    diff = fa[path[:, 0]] - fb[path[:, 1]]
    return float(np.mean(MCD_CONST * np.sqrt(2.0 * np.sum(diff ** 2, axis=1))))


def lsd(a: Union[SpectralEnvelope, np.ndarray], b: Union[SpectralEnvelope, np.ndarray],
        path: Optional[np.ndarray] = None) -> float:
    """Log-spectral distortion in dB: per-frame RMS of 20 log10 amplitude ratios, path mean"""
    la = a.log_amp if isinstance(a, SpectralEnvelope) else np.asarray(a, dtype=np.float64)
    lb = b.log_amp if isinstance(b, SpectralEnvelope) else np.asarray(b, dtype=np.float64)
    if la.shape[1] != lb.shape[1]:
        raise ShapeMismatchError(f"Envelope widths differ: {la.shape[1]} vs {lb.shape[1]}")
    if path is None:
        path = _diagonal(la.shape[0], lb.shape[0])
    la, lb = np.maximum(la, LOG_FLOOR), np.maximum(lb, LOG_FLOOR)
    diff_db = DB_PER_NEPER * (la[path[:, 0]] - lb[path[:, 1]])
    return float(np.mean(np.sqrt(np.mean(diff_db ** 2, axis=1))))


def voiced_pairs(a: F0Contour, b: F0Contour, path: Optional[np.ndarray] = None
                 ) -> Tuple[np.ndarray, np.ndarray]:
    """F0 values of aligned frame pairs voiced in both contours"""
    if path is None:
        path = _diagonal(a.num_frames, b.num_frames)
    xa = a.values_hz[path[:, 0]]
    xb = b.values_hz[path[:, 1]]
    joint = (xa > 0) & (xb > 0)
    return xa[joint], xb[joint]


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation, exactly 1.0 for identical inputs"""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size != y.size or x.size < 2:
        raise DegenerateVarianceError("Correlation needs at least two paired values")
    xc, yc = x - x.mean(), y - y.mean()
    nx, ny = np.linalg.norm(xc), np.linalg.norm(yc)
    if nx < 1e-12 or ny < 1e-12:
        raise DegenerateVarianceError("Correlation of a constant sequence")
    r = 1.0 - 0.5 * float(np.sum((xc / nx - yc / ny) ** 2))
    return float(np.clip(r, -1.0, 1.0))


def pcc(a: F0Contour, b: F0Contour, path: Optional[np.ndarray] = None) -> float:
    """Pearson correlation over jointly voiced aligned frames"""
    xa, xb = voiced_pairs(a, b, path)
    return pearson(xa, xb)


def rmse_f0(a: F0Contour, b: F0Contour, path: Optional[np.ndarray] = None) -> float:
    """Root mean squared Hz difference over jointly voiced aligned frames"""
    xa, xb = voiced_pairs(a, b, path)
    if xa.size == 0:
        raise DegenerateVarianceError("No jointly voiced frames")
    return float(np.sqrt(np.mean((xa - xb) ** 2)))


# Archive-level evaluation

def archive_mcep(archive: FeatureArchive) -> McepSequence:
    meta = archive.metadata
    order = int(meta.get("mcep_order", "24"))
    alpha = float(meta.get("mcep_alpha", "0.42"))
    fft_size = int(meta.get("fft_size", "1024"))
    rate = int(meta.get("sample_rate", "16000"))
    if "mcep" in archive:
        coeffs = archive["mcep"].astype(np.float64)
        return McepSequence(coeffs, coeffs.shape[1] - 1, alpha, fft_size, rate)
    env = SpectralEnvelope(archive["sp"].astype(np.float64), fft_size, rate)
    return mcep_from_envelope(env, order, alpha)


def spectral_mcd(sp_a: np.ndarray, sp_b: np.ndarray, reference: FeatureArchive) -> float:
    """DTW-aligned MCD between two log envelopes, cepstral settings from `reference`"""
    meta = reference.metadata
    order = int(meta.get("mcep_order", "24"))
    alpha = float(meta.get("mcep_alpha", "0.42"))
    fft_size = int(meta.get("fft_size", "1024"))
    rate = int(meta.get("sample_rate", "16000"))
    ma = mcep_from_envelope(SpectralEnvelope(np.asarray(sp_a, dtype=np.float64), fft_size, rate), order, alpha)
    mb = mcep_from_envelope(SpectralEnvelope(np.asarray(sp_b, dtype=np.float64), fft_size, rate), order, alpha)
    return mcd(ma, mb, dtw_align(ma, mb))


def _guarded(fn, *args) -> float:
    try:
        return fn(*args)
    except DegenerateVarianceError:
        return float("nan")


def evaluate_pair(a: FeatureArchive, b: FeatureArchive) -> Dict[str, float]:
    """All four metrics for one archive pair, aligned by DTW on mel-cepstra"""
    ma, mb = archive_mcep(a), archive_mcep(b)
    path = dtw_align(ma, mb)
    metrics = {"mcd_db": mcd(ma, mb, path)}
    if "sp" in a and "sp" in b:
        metrics["lsd_db"] = lsd(a["sp"].astype(np.float64), b["sp"].astype(np.float64), path)
    else:
        metrics["lsd_db"] = float("nan")
    fa = F0Contour(a["f0"].astype(np.float64))
    fb = F0Contour(b["f0"].astype(np.float64))
    metrics["pcc"] = _guarded(pcc, fa, fb, path)
    metrics["rmse_hz"] = _guarded(rmse_f0, fa, fb, path)
    return metrics


def pair_utterances(sources: Iterable[FeatureArchive], references: Iterable[FeatureArchive]
                    ) -> List[Tuple[FeatureArchive, FeatureArchive]]:
    """Match archives with the same speaker and content key, in source order"""
    index = {}
    for ref in references:
        key = (ref.metadata.get("speaker"), ref.metadata.get("content"))
        if key[1] is not None:
            index.setdefault(key, ref)
    pairs = []
    for src in sources:
        key = (src.metadata.get("speaker"), src.metadata.get("content"))
        if key[1] is not None and key in index:
            pairs.append((src, index[key]))
    return pairs


def corpus_hash(archives: Iterable[FeatureArchive]) -> str:
    digest = hashlib.sha256()
    for archive in sorted(archives, key=lambda a: a.metadata.get("id", "")):
        digest.update(encode_archive(archive))
    return digest.hexdigest()[:16]


@dataclass(frozen=True)
class EvalRow:
    system: str
    source_id: str
    reference_id: str
    seen: Optional[bool]
    mcd_db: float
    lsd_db: float
    pcc: float
    rmse_hz: float

    def metric(self, name: str) -> float:
        return getattr(self, name)


def _seen_label(seen: Optional[bool]) -> str:
    return "-" if seen is None else ("seen" if seen else "unseen")


def _fmt(value: float, digits: int) -> str:
    return "nan" if not np.isfinite(value) else f"{value:.{digits}f}"


@dataclass
class EvalReport:
    """Per-pair metric rows with per-system and per-seen-group means"""

    rows: List[EvalRow] = field(default_factory=list)
    metadata: Dict[str, str] = field(default_factory=dict)
    contours: List[Tuple[str, np.ndarray, np.ndarray]] = field(default_factory=list)

    def extend(self, other: "EvalReport") -> "EvalReport":
        self.rows.extend(other.rows)
        self.contours.extend(other.contours)
        for key, value in other.metadata.items():
            self.metadata.setdefault(key, value)
        return self

    @property
    def systems(self) -> List[str]:
        seen = []
        for row in self.rows:
            if row.system not in seen:
                seen.append(row.system)
        return seen

    def aggregate(self, system: str, group: Optional[bool] = None,
                  grouped: bool = False) -> Dict[str, float]:
        """Mean of each metric over a system's rows (optionally one seen/unseen group)"""
        rows = [r for r in self.rows if r.system == system and (not grouped or r.seen == group)]
        result = {}
        for name in METRICS:
            values = np.array([r.metric(name) for r in rows], dtype=np.float64)
            finite = values[np.isfinite(values)]
            result[name] = float(finite.mean()) if finite.size else float("nan")
        result["pairs"] = float(len(rows))
        return result

    def to_tsv(self) -> str:
        lines = ["system\tsource\treference\tspeakers\tmcd_db\tlsd_db\tpcc\trmse_hz"]
        for r in self.rows:
            lines.append(
                f"{r.system}\t{r.source_id}\t{r.reference_id}\t{_seen_label(r.seen)}\t"
                f"{_fmt(r.mcd_db, 3)}\t{_fmt(r.lsd_db, 3)}\t{_fmt(r.pcc, 3)}\t{_fmt(r.rmse_hz, 3)}"
            )
        for system in self.systems:
            agg = self.aggregate(system)
            lines.append(
                f"{system}\tMEAN\t-\tall\t{_fmt(agg['mcd_db'], 3)}\t{_fmt(agg['lsd_db'], 3)}\t"
                f"{_fmt(agg['pcc'], 3)}\t{_fmt(agg['rmse_hz'], 3)}"
            )
        return "\n".join(lines) + "\n"

    def to_key_values(self) -> str:
        lines = [f"{key}={value}" for key, value in sorted(self.metadata.items())
                 if "\n" not in value]
        for system in self.systems:
            groups = [(None, False)] + [
                (flag, True) for flag in (True, False)
                if any(r.system == system and r.seen is flag for r in self.rows)
            ]
            for group, grouped in groups:
                agg = self.aggregate(system, group, grouped)
                scope = system if not grouped else f"{system}.{_seen_label(group)}"
                for name in ("pairs",) + METRICS:
                    value = agg[name]
                    text = str(int(value)) if name == "pairs" else _fmt(value, 6)
                    lines.append(f"{scope}.{name}={text}")
        return "\n".join(lines) + "\n"

    def render(self) -> str:
        return self.to_tsv() + "\n" + self.to_key_values()

    def contour_dump(self) -> str:
        """gnuplot data blocks: frame, F0 a, F0 b per aligned pair, blocks split by two blank lines"""
        blocks = []
        for label, fa, fb in self.contours:
            rows = [f"# {label}"] + [
                f"{i}\t{x:.3f}\t{y:.3f}" for i, (x, y) in enumerate(zip(fa, fb))
            ]
            blocks.append("\n".join(rows))
        return "\n\n\n".join(blocks) + ("\n" if blocks else "")


def _speaker_seen(archive: FeatureArchive, seen_speakers: Optional[Sequence[str]]) -> Optional[bool]:
    if seen_speakers is None:
        return None
    return archive.metadata.get("speaker") in set(seen_speakers)


def compare_archives(pairs: Sequence[Tuple[FeatureArchive, FeatureArchive]], system: str,
                     seen_speakers: Optional[Sequence[str]] = None,
                     metadata: Optional[Mapping[str, str]] = None) -> EvalReport:
    """One report row per (candidate, reference) pair"""
    report = EvalReport(metadata=dict(metadata or {}))
    for a, b in pairs:
        metrics = evaluate_pair(a, b)
        row = EvalRow(
            system,
            a.metadata.get("id", "?"),
            b.metadata.get("id", "?"),
            _speaker_seen(a, seen_speakers),
            **metrics,
        )
        report.rows.append(row)
        path = dtw_align(archive_mcep(a), archive_mcep(b))
        report.contours.append((
            f"{system} {row.source_id} vs {row.reference_id}",
            a["f0"][path[:, 0]].astype(np.float64),
            b["f0"][path[:, 1]].astype(np.float64),
        ))
    logger.info(f"Evaluated {len(report.rows)} {system} pairs")
    return report


def zero_effort_report(sources: Sequence[FeatureArchive], targets: Sequence[FeatureArchive],
                       seen_speakers: Optional[Sequence[str]] = None) -> EvalReport:
    """Source-vs-target metrics with no conversion applied"""
    pairs = pair_utterances(sources, targets)
    report = compare_archives(pairs, "zero_effort", seen_speakers)
    report.metadata["corpus_hash"] = corpus_hash(list(sources) + list(targets))
    return report


def conversion_report(converted: Sequence[FeatureArchive], targets: Sequence[FeatureArchive],
                      system: str = "converted",
                      seen_speakers: Optional[Sequence[str]] = None) -> EvalReport:
    """Converted-vs-reference metrics for archives written by the conversion pipeline"""
    pairs = pair_utterances(converted, targets)
    report = compare_archives(pairs, system, seen_speakers)
    for key in ("spectrum_checkpoint", "prosody_checkpoint"):
        values = sorted({a.metadata.get(key, "") for a in converted} - {""})
        if values:
            report.metadata[key] = ",".join(values)
    return report
