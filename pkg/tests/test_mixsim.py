import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from sqwhisper.features import Waveform, num_frames
from sqwhisper.mixsim import (CorpusConfig, DataError, Manifest, SyntheticSpeaker, build_corpus,
                              enrollment_speaker, mismatched_enrollment_variant, mix_at_snr, sample_snr)

from tolerances import CLT_SIGMAS, SNR_DB


def clt_bounds(mean, std, n):
    """3-sigma half-widths for the sample mean and the sample std of n normal draws."""
    return CLT_SIGMAS * std / np.sqrt(n), CLT_SIGMAS * std / np.sqrt(2 * (n - 1))


@pytest.mark.parametrize("condition,mean,std", [("clean", 0.0, 4.1), ("noisy", -2.0, 3.6)])
def test_snr_distribution_within_clt_bounds(condition, mean, std):
    rng = np.random.default_rng(7)
    draws = np.array([sample_snr(condition, rng) for _ in range(10_000)])
    dm, ds = clt_bounds(mean, std, len(draws))
    assert abs(draws.mean() - mean) <= dm
    assert abs(draws.std(ddof=1) - std) <= ds


def test_snr_draws_deterministic():
    a = [sample_snr("clean", np.random.default_rng(3)) for _ in range(1)]
    r1, r2 = np.random.default_rng(11), np.random.default_rng(11)
    assert [sample_snr("clean", r1) for _ in range(20)] == [sample_snr("clean", r2) for _ in range(20)]
    assert a == [sample_snr("clean", np.random.default_rng(3))]
    with pytest.raises(ValueError):
        sample_snr("reverberant", r1)


def test_mix_scale_closed_forms(rng):
    a = rng.standard_normal(1000)
    b = rng.standard_normal(1000)
    b *= np.sqrt(np.sum(a ** 2) / np.sum(b ** 2))
    assert mix_at_snr(Waveform(a), Waveform(b), 0.0).scale == pytest.approx(1.0, abs=1e-12)
    assert mix_at_snr(Waveform(a), Waveform(b), 20.0).scale == pytest.approx(0.1, abs=1e-12)


def _recomputed_snr(target, interferer, result):
    n = min(len(target), len(interferer))
    scaled = result.mixture.samples[:n] - target[:n]
    return 10 * np.log10(np.sum(target[:n] ** 2) / np.sum(scaled ** 2))


@settings(max_examples=1000, deadline=None)
@given(st.integers(50, 3000), st.integers(50, 3000), st.floats(-10, 10), st.sampled_from(["min", "max"]),
       st.integers(0, 2 ** 32 - 1))
def test_realized_snr_matches_request(la, lb, snr, mode, seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal(la) * r.uniform(0.1, 3), r.standard_normal(lb) * r.uniform(0.1, 3)
    res = mix_at_snr(Waveform(a), Waveform(b), snr, mode)
    assert abs(_recomputed_snr(a, b, res) - snr) <= SNR_DB
    assert abs(res.realized_snr - snr) <= SNR_DB
    assert len(res.mixture) == (max(la, lb) if mode == "max" else min(la, lb))


def test_mix_errors(rng):
    with pytest.raises(ValueError):
        mix_at_snr(Waveform(np.zeros(100)), Waveform(rng.standard_normal(100)), 0.0)
    with pytest.raises(ValueError):
        mix_at_snr(Waveform(rng.standard_normal(100)), Waveform(np.zeros(100)), 0.0)
    with pytest.raises(ValueError):
        mix_at_snr(Waveform(rng.standard_normal(10)), Waveform(rng.standard_normal(10)), 0.0, "mid")


def test_speakers_deterministic_and_distinct():
    s0 = SyntheticSpeaker.create(0, 4, 8, seed=1)
    again = SyntheticSpeaker.create(0, 4, 8, seed=1)
    s1 = SyntheticSpeaker.create(1, 4, 8, seed=1)
    toks = [3, 1, 4, 1]
    assert np.array_equal(s0.render(toks).samples, again.render(toks).samples)
    assert s0.fundamentals != s1.fundamentals and s0.harmonics != s1.harmonics
    assert s0.fundamental_range[1] < s1.fundamental_range[0]
    assert len(s0.render(toks)) == 4 * 1600


def test_two_by_two_corpus_enforces_enrollment_rule():
    corpus = build_corpus(CorpusConfig(n_speakers=2, utts_per_speaker=2, n_mixtures=20, n_mels=20))
    for r in corpus.manifest.records:
        assert r.enrollment_utt != r.target_utt
        assert enrollment_speaker(r) == r.target_speaker_id
        assert r.target_speaker_id != r.interferer_speaker_id
        assert np.isfinite(r.snr_db)


def test_corpus_errors():
    with pytest.raises(DataError):
        build_corpus(CorpusConfig(n_speakers=3, utts_per_speaker=1))
    with pytest.raises(DataError):
        build_corpus(CorpusConfig(n_speakers=1, utts_per_speaker=5))


def test_manifest_byte_identical_across_runs(tmp_path):
    cfg = CorpusConfig(n_speakers=3, utts_per_speaker=6, seed=5, n_mels=20)
    build_corpus(cfg, tmp_path / "a")
    build_corpus(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "manifest.tsv").read_bytes() == (tmp_path / "b" / "manifest.tsv").read_bytes()
    for rel in ("mix/mix00000.feat", "utts/spk00-000.feat"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


@pytest.mark.parametrize("mode", ["min", "max"])
def test_per_sample_overlap_lengths(mode):
    cfg = CorpusConfig(n_speakers=4, utts_per_speaker=50, mode=mode, n_mixtures=200, n_mels=20, max_tokens=6)
    corpus = build_corpus(cfg)
    assert len(corpus.manifest.records) == 200
    for r in corpus.manifest.records:
        nt = 1600 * len(corpus.utterances[r.target_utt][1])
        ni = 1600 * len(corpus.utterances[r.interferer_utt][1])
        expected = max(nt, ni) if mode == "max" else min(nt, ni)
        assert corpus.features[r.mixture_path].shape[0] == num_frames(expected, 400, 160)
        assert r.mode == mode


def test_sample_content_independent_of_corpus_size():
    small = build_corpus(CorpusConfig(n_speakers=3, utts_per_speaker=10, n_mixtures=8, n_mels=20))
    large = build_corpus(CorpusConfig(n_speakers=3, utts_per_speaker=10, n_mixtures=25, n_mels=20))
    for a, b in zip(small.manifest.records, large.manifest.records):
        assert (a.target_utt, a.interferer_utt, a.enrollment_utt, a.snr_db) == \
            (b.target_utt, b.interferer_utt, b.enrollment_utt, b.snr_db)
        assert np.array_equal(small.features[a.mixture_path], large.features[b.mixture_path])


def test_splits_disjoint_and_manifest_round_trip(tmp_path):
    corpus = build_corpus(CorpusConfig(n_speakers=3, utts_per_speaker=20, n_mels=20), tmp_path)
    ids = {s: {r.mixture_id for r in corpus.manifest.split(s)} for s in ("train", "dev", "test")}
    assert not (ids["train"] & ids["dev"]) and not (ids["train"] & ids["test"]) and not (ids["dev"] & ids["test"])
    assert sum(map(len, ids.values())) == len(corpus.manifest.records)
    back = Manifest.read(tmp_path / "manifest.tsv")
    assert back.records == corpus.manifest.records
    for r in back.records[:5]:
        assert np.array_equal(back.features(r.mixture_path), corpus.features[r.mixture_path])
    line = (tmp_path / "manifest.tsv").read_text().splitlines()[0].split("\t")
    assert line[0].startswith("mix/") and line[1].startswith("utts/") and line[4] in ("train", "dev", "test")


def test_disjoint_test_speakers_flag():
    corpus = build_corpus(CorpusConfig(n_speakers=4, utts_per_speaker=10, n_mels=20, disjoint_test_speakers=True))
    train_spk = {r.target_speaker_id for r in corpus.manifest.split("train")}
    test_spk = {r.target_speaker_id for r in corpus.manifest.split("test")}
    assert corpus.manifest.speakers_disjoint and not (train_spk & test_spk)


def test_manifest_read_errors(tmp_path):
    with pytest.raises(DataError):
        Manifest.read(tmp_path / "missing.tsv")
    bad = tmp_path / "bad.tsv"
    bad.write_text("only\ttwo\n")
    with pytest.raises(DataError):
        Manifest.read(bad)


def test_noisy_condition_adds_noise():
    clean = build_corpus(CorpusConfig(n_speakers=3, utts_per_speaker=4, n_mels=20))
    noisy = build_corpus(CorpusConfig(n_speakers=3, utts_per_speaker=4, n_mels=20, condition="noisy"))
    r = clean.manifest.records[0]
    assert not np.array_equal(clean.features[r.mixture_path], noisy.features[r.mixture_path])


def test_mismatched_variant_constraints_and_determinism():
    corpus = build_corpus(CorpusConfig(n_speakers=3, utts_per_speaker=10, n_mels=20))
    a = mismatched_enrollment_variant(corpus.manifest, np.random.default_rng(0))
    b = mismatched_enrollment_variant(corpus.manifest, np.random.default_rng(0))
    assert a.records == b.records
    for orig, r in zip(corpus.manifest.records, a.records):
        assert enrollment_speaker(r) not in (r.target_speaker_id, r.interferer_speaker_id)
        assert (r.mixture_path, r.transcript) == (orig.mixture_path, orig.transcript)


def test_mismatched_variant_needs_three_speakers():
    corpus = build_corpus(CorpusConfig(n_speakers=2, utts_per_speaker=5, n_mels=20))
    with pytest.raises(DataError):
        mismatched_enrollment_variant(corpus.manifest, np.random.default_rng(0))


def test_mismatched_replacement_speakers_uniform():
    corpus = build_corpus(CorpusConfig(n_speakers=5, utts_per_speaker=40, n_mixtures=1000, n_mels=20))
    variant = mismatched_enrollment_variant(corpus.manifest, np.random.default_rng(1))
    speakers = sorted({r.target_speaker_id for r in corpus.manifest.records})
    counts = np.zeros(3)
    for r in variant.records:
        eligible = [s for s in speakers if s not in (r.target_speaker_id, r.interferer_speaker_id)]
        counts[eligible.index(enrollment_speaker(r))] += 1
    assert counts.sum() == 1000
    assert chisquare(counts).pvalue > 0.01


def test_mismatched_variant_pool_from_full_corpus():
    corpus = build_corpus(CorpusConfig(n_speakers=3, utts_per_speaker=10, n_mels=20))
    few = Manifest(corpus.manifest.records[:1], corpus.manifest.root)
    with pytest.raises(DataError):
        mismatched_enrollment_variant(few, np.random.default_rng(0))
    out = mismatched_enrollment_variant(few, np.random.default_rng(0), pool_from=corpus.manifest)
    r = out.records[0]
    assert enrollment_speaker(r) not in (r.target_speaker_id, r.interferer_speaker_id)
