import numpy as np
import numpy.testing as npt
import pytest
from scipy.special import i0

from core.analysis import F0Contour, McepSequence
from core.errors import DegenerateVarianceError, EmptySignalError, ShapeMismatchError
from core.evaluation import (
    MCD_CONST,
    EvalReport,
    EvalRow,
    compare_archives,
    conversion_report,
    corpus_hash,
    dtw_align,
    evaluate_pair,
    lsd,
    mcd,
    pair_utterances,
    path_cost,
    pcc,
    pearson,
    rmse_f0,
    zero_effort_report,
)
from core.signal_io import FeatureArchive
from tests.synth import utterance_archive


def _mcep_with(c1: float) -> McepSequence:
    coeffs = np.zeros((1, 25))
    coeffs[0, 0] = 3.0
    coeffs[0, 1] = c1
    return McepSequence(coeffs)


@pytest.mark.parametrize("delta", [0.01, 0.1, 1.0])
def test_mcd_single_coefficient(delta):
    value = mcd(_mcep_with(0.0), _mcep_with(delta))
    assert abs(value - (10.0 / np.log(10.0)) * np.sqrt(2.0 * delta ** 2)) <= 1e-9


def test_mcd_ignores_c0():
    a = McepSequence(np.zeros((4, 25)))
    b_coeffs = np.zeros((4, 25))
    b_coeffs[:, 0] = 5.0
    assert mcd(a, McepSequence(b_coeffs)) == 0.0


def test_identical_archives_score_perfectly(rng):
    archive = utterance_archive(rng, id="u")
    metrics = evaluate_pair(archive, archive)
    assert metrics["mcd_db"] == 0.0
    assert metrics["lsd_db"] == 0.0
    assert metrics["rmse_hz"] == 0.0
    assert metrics["pcc"] == 1.0


def test_dtw_on_identical_input_is_diagonal(rng):
    seq = McepSequence(rng.standard_normal((30, 25)))
    path = dtw_align(seq, seq)
    npt.assert_array_equal(path, np.stack([np.arange(30)] * 2, axis=1))


def test_dtw_small_example():
    path = dtw_align(np.array([0.0, 1.0, 2.0]), np.array([0.0, 0.0, 1.0, 2.0]))
    assert path.tolist() == [[0, 0], [0, 1], [1, 2], [2, 3]]


@pytest.mark.parametrize("seed", range(6))
def test_dtw_path_properties(seed):
    rng = np.random.default_rng(seed)
    n, m = (int(v) for v in rng.integers(5, 40, size=2))
    a, b = rng.standard_normal((n, 3)), rng.standard_normal((m, 3))
    path = dtw_align(a, b)
    assert path[0].tolist() == [0, 0]
    assert path[-1].tolist() == [n - 1, m - 1]
    steps = np.diff(path, axis=0)
    assert np.all((steps >= 0) & (steps <= 1))
    assert np.all(steps.sum(axis=1) >= 1)
    if n == m:
        diagonal = np.stack([np.arange(n)] * 2, axis=1)
        assert path_cost(a, b, path) <= path_cost(a, b, diagonal) + 1e-12


def test_dtw_errors():
    with pytest.raises(EmptySignalError):
        dtw_align(np.zeros((0, 2)), np.zeros((3, 2)))
    with pytest.raises(ShapeMismatchError):
        dtw_align(np.zeros((3, 2)), np.zeros((3, 4)))
    with pytest.raises(ShapeMismatchError):
        mcd(np.zeros((3, 2)), np.zeros((4, 2)))


def test_lsd_known_value():
    a = np.zeros((5, 9))
    b = np.full((5, 9), np.log(10.0))
    assert lsd(a, b) == pytest.approx(20.0, rel=1e-12)


def test_f0_metrics():
    a = F0Contour(np.array([100.0, 120.0, 0.0, 140.0]))
    b = F0Contour(np.array([110.0, 130.0, 200.0, 150.0]))
    assert rmse_f0(a, b) == pytest.approx(10.0)
    assert pcc(a, b) == pytest.approx(1.0)
    with pytest.raises(DegenerateVarianceError):
        pcc(F0Contour(np.full(4, 100.0)), b)
    with pytest.raises(DegenerateVarianceError):
        rmse_f0(F0Contour(np.zeros(4)), b)


def test_pearson_matches_numpy(rng):
    x = rng.standard_normal(50)
    y = 0.5 * x + rng.standard_normal(50)
    assert pearson(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-12)
    assert pearson(x, -x) == pytest.approx(-1.0)
    with pytest.raises(DegenerateVarianceError):
        pearson(np.ones(1), np.ones(1))


def test_lsd_missing_gives_nan(rng):
    full = utterance_archive(rng, id="u")
    bare = FeatureArchive({"f0": full["f0"], "mcep": full["mcep"]}, full.metadata)
    metrics = evaluate_pair(bare, full)
    assert np.isnan(metrics["lsd_db"])
    assert metrics["mcd_db"] == 0.0


def test_pair_utterances(rng):
    sources = [utterance_archive(rng, id=f"s{i}", speaker="spk1", content=f"c{i}") for i in range(3)]
    sources.append(utterance_archive(rng, id="loose", speaker="spk1"))
    refs = [utterance_archive(rng, id=f"r{i}", speaker="spk1", content=f"c{i}") for i in (2, 0)]
    refs.append(utterance_archive(rng, id="other", speaker="spk2", content="c1"))
    pairs = pair_utterances(sources, refs)
    assert [(s.metadata["id"], r.metadata["id"]) for s, r in pairs] == [("s0", "r0"), ("s2", "r2")]


def _corpus(rng):
    sources = [utterance_archive(rng, id=f"{spk}_n", speaker=spk, content="c1", emotion="neutral")
               for spk in ("spk1", "spk2")]
    targets = [utterance_archive(rng, id=f"{spk}_a", speaker=spk, content="c1", emotion="angry")
               for spk in ("spk1", "spk2")]
    return sources, targets


def test_zero_effort_report(rng):
    sources, targets = _corpus(rng)
    report = zero_effort_report(sources, targets, seen_speakers=["spk1"])
    assert [r.seen for r in report.rows] == [True, False]
    assert len(report.metadata["corpus_hash"]) == 16

    tsv = report.to_tsv().splitlines()
    assert tsv[0] == "system\tsource\treference\tspeakers\tmcd_db\tlsd_db\tpcc\trmse_hz"
    assert tsv[1].startswith("zero_effort\tspk1_n\tspk1_a\tseen\t")
    assert tsv[-1].startswith("zero_effort\tMEAN\t-\tall\t")

    kv = report.to_key_values()
    assert "zero_effort.pairs=2" in kv
    assert "zero_effort.seen.pairs=1" in kv
    assert "zero_effort.unseen.pairs=1" in kv
    assert f"corpus_hash={report.metadata['corpus_hash']}" in kv


def test_aggregate_skips_nan():
    rows = [
        EvalRow("sys", "a", "b", None, 1.0, float("nan"), 0.5, 10.0),
        EvalRow("sys", "c", "d", None, 3.0, 2.0, float("nan"), 20.0),
    ]
    agg = EvalReport(rows).aggregate("sys")
    assert agg == {"mcd_db": 2.0, "lsd_db": 2.0, "pcc": 0.5, "rmse_hz": 15.0, "pairs": 2.0}


def test_corpus_hash_is_order_free(rng):
    sources, targets = _corpus(rng)
    assert corpus_hash(sources + targets) == corpus_hash(targets[::-1] + sources)
    assert corpus_hash(sources) != corpus_hash(targets)


def test_conversion_report_and_extend(rng):
    sources, targets = _corpus(rng)
    converted = [s.with_metadata(emotion="angry", spectrum_checkpoint="abc", prosody_checkpoint="")
                 for s in sources]
    report = zero_effort_report(sources, targets)
    report.extend(conversion_report(converted, targets))
    assert report.systems == ["zero_effort", "converted"]
    assert report.metadata["spectrum_checkpoint"] == "abc"
    assert "prosody_checkpoint" not in report.metadata
    assert "converted.mcd_db=" in report.to_key_values()
    # identical spectra and contours
    assert report.aggregate("converted")["mcd_db"] == report.aggregate("zero_effort")["mcd_db"]


def test_contour_dump(rng):
    archive = utterance_archive(rng, id="u")
    report = compare_archives([(archive, archive), (archive, archive)], "pair")
    dump = report.contour_dump()
    blocks = dump.rstrip("\n").split("\n\n\n")
    assert len(blocks) == 2
    first = blocks[0].splitlines()
    assert first[0] == "# pair u vs u"
    assert len(first) == 1 + archive["f0"].shape[0]
    assert EvalReport().contour_dump() == ""


def test_mcd_constant():
    assert MCD_CONST == pytest.approx(4.342944819, rel=1e-9)


def test_zero_effort_rmse_for_scaled_contour(rng):
    source = utterance_archive(rng, id="n", speaker="spk1", content="s01")
    arrays = dict(source.arrays)
    arrays["f0"] = 1.4 * arrays["f0"]
    target = FeatureArchive(arrays, {**source.metadata, "id": "a"})
    report = zero_effort_report([source], [target])
    # 150 Hz * exp(0.15 sin) raised by 40%: rms offset 0.4 * 150 * sqrt(I0(0.3))
    expected = 0.4 * 150.0 * np.sqrt(i0(0.3))
    assert report.rows[0].rmse_hz == pytest.approx(expected, rel=0.05)
    assert report.rows[0].mcd_db == 0.0
