"""Seeded synthetic speakers, SNR-controlled two-speaker mixtures and the
corpus/manifest plumbing around them.

Each vocabulary token is a 100 ms tone complex.  A speaker owns a private
band of fundamentals (one per token) and a set of harmonic amplitudes, so a
mixture can only be transcribed for one talker by knowing which band that
talker uses; the enrollment is what reveals it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .features import FeatureConfig, Waveform, compute_features, read_features, write_features

SAMPLE_RATE = 16000
TOKEN_SECONDS = 0.1
SNR_PARAMS = {"clean": (0.0, 4.1), "noisy": (-2.0, 3.6)}
PITCH_LO, PITCH_HI = 250.0, 6000.0
MANIFEST_COLUMNS = ("mixture_path", "enrollment_path", "transcript", "target_speaker_id", "split")
EXTRA_COLUMNS = ("mixture_id", "interferer_speaker_id", "target_utt", "enrollment_utt",
                 "interferer_utt", "snr_db", "mode")


class DataError(RuntimeError):
    """Corpus cannot be built or read (CLI exit code 3)."""


def _mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def pitch_grid(n_slots: int) -> np.ndarray:
    return _hz(np.linspace(_mel(PITCH_LO), _mel(PITCH_HI), n_slots))


@dataclass(frozen=True)
class SyntheticSpeaker:
    speaker_id: str
    seed: int
    fundamentals: tuple[float, ...]   # one per vocabulary token
    harmonics: tuple[float, ...]      # amplitudes of partials 2, 3, ...

    @classmethod
    def create(cls, index: int, n_speakers: int, vocab: int, seed: int, n_harmonics: int = 2
               ) -> "SyntheticSpeaker":
        grid = pitch_grid(n_speakers * vocab)
        rng = np.random.default_rng([seed, 7, index])
        harm = tuple(float(a) for a in rng.uniform(0.02, 0.08, size=n_harmonics))
        return cls(f"spk{index:02d}", seed, tuple(float(f) for f in grid[index * vocab:(index + 1) * vocab]), harm)

    @property
    def fundamental_range(self) -> tuple[float, float]:
        return min(self.fundamentals), max(self.fundamentals)

    def token_segment(self, token: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
        n = int(round(TOKEN_SECONDS * sample_rate))
        t = np.arange(n) / sample_rate
        f0 = self.fundamentals[token]
        wave = np.sin(2 * np.pi * f0 * t)
        for k, amp in enumerate(self.harmonics, start=2):
            if f0 * k < sample_rate / 2:
                wave += amp * np.sin(2 * np.pi * f0 * k * t)
        ramp = int(0.01 * sample_rate)
        env = np.ones(n)
        env[:ramp] = np.linspace(0.0, 1.0, ramp)
        env[-ramp:] = np.linspace(1.0, 0.0, ramp)
        return 0.5 * wave * env

    def render(self, tokens, sample_rate: int = SAMPLE_RATE) -> Waveform:
        if len(tokens) == 0:
            return Waveform(np.zeros(0), sample_rate)
        return Waveform(np.concatenate([self.token_segment(int(k), sample_rate) for k in tokens]), sample_rate)


def sample_snr(condition: str, rng: np.random.Generator) -> float:
    try:
        mean, std = SNR_PARAMS[condition]
    except KeyError:
        raise ValueError(f"condition must be one of {sorted(SNR_PARAMS)}") from None
    return float(rng.normal(mean, std))


class MixResult(NamedTuple):
    mixture: Waveform
    realized_snr: float
    scale: float


def mix_at_snr(target: Waveform, interferer: Waveform, snr_db: float, mode: str = "max") -> MixResult:
    """Rescale the interferer so target/interferer energy over the overlap equals ``snr_db``.

    ``min`` truncates to the shorter source, ``max`` zero-pads to the longer.
    """
    if mode not in ("min", "max"):
        raise ValueError(f"mode must be min|max, got {mode!r}")
    a = np.asarray(target.samples, dtype=np.float64)
    b = np.asarray(interferer.samples, dtype=np.float64)
    n = min(len(a), len(b))
    ea = float(np.sum(a[:n] ** 2))
    eb = float(np.sum(b[:n] ** 2))
    if ea <= 0 or eb <= 0:
        raise ValueError("both sources need positive energy over the overlapped region")
    scale = float(np.sqrt(ea / (eb * 10.0 ** (snr_db / 10.0))))
    if mode == "min":
        mix = a[:n] + scale * b[:n]
    else:
        total = max(len(a), len(b))
        mix = np.zeros(total)
        mix[:len(a)] += a
        mix[:len(b)] += scale * b
    realized = 10.0 * np.log10(ea / (scale * scale * eb))
    return MixResult(Waveform(mix, target.sample_rate), float(realized), scale)


def add_noise(w: Waveform, snr_db: float, reference_energy: float, rng: np.random.Generator) -> Waveform:
    noise = rng.standard_normal(len(w))
    noise *= np.sqrt(reference_energy / (np.sum(noise ** 2) * 10.0 ** (snr_db / 10.0)))
    return Waveform(w.samples + noise, w.sample_rate)


@dataclass(frozen=True)
class CorpusConfig:
    n_speakers: int = 4
    utts_per_speaker: int = 60
    vocab: int = 8
    min_tokens: int = 2
    max_tokens: int = 4
    seed: int = 0
    condition: str = "clean"
    mode: str = "max"
    n_mixtures: int = 0  # 0: one mixture per utterance
    splits: tuple[float, float, float] = (0.8, 0.1, 0.1)
    n_mels: int = 40
    disjoint_test_speakers: bool = False

    @property
    def features(self) -> FeatureConfig:
        return FeatureConfig(n_mels=self.n_mels)


@dataclass
class ManifestRecord:
    mixture_path: str
    enrollment_path: str
    transcript: list[int]
    target_speaker_id: str
    split: str
    mixture_id: str = ""
    interferer_speaker_id: str = ""
    target_utt: str = ""
    enrollment_utt: str = ""
    interferer_utt: str = ""
    snr_db: float = float("nan")
    mode: str = ""


@dataclass
class Manifest:
    records: list[ManifestRecord]
    root: Path | None = None
    speakers_disjoint: bool = False
    _cache: dict = field(default_factory=dict, repr=False)

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def features(self, rel_path: str) -> np.ndarray:
        if rel_path not in self._cache:
            if self.root is None:
                raise DataError(f"no root directory to resolve {rel_path}")
            path = self.root / rel_path
            if not path.exists():
                raise DataError(f"missing feature file {path}")
            self._cache[rel_path] = read_features(path)
        return self._cache[rel_path]

    def write(self, path: str | Path) -> None:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, delimiter="\t", lineterminator="\n")
            for r in self.records:
                out.writerow([r.mixture_path, r.enrollment_path, " ".join(map(str, r.transcript)),
                              r.target_speaker_id, r.split, r.mixture_id, r.interferer_speaker_id,
                              r.target_utt, r.enrollment_utt, r.interferer_utt, repr(float(r.snr_db)), r.mode])

    @classmethod
    def read(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest {path} not found")
        records = []
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), 1):
                if len(row) < len(MANIFEST_COLUMNS):
                    raise DataError(f"{path}:{lineno}: expected at least 5 tab-separated fields")
                base = dict(zip(MANIFEST_COLUMNS, row))
                base["transcript"] = [int(t) for t in base["transcript"].split()]
                extra = dict(zip(EXTRA_COLUMNS, row[len(MANIFEST_COLUMNS):]))
                if "snr_db" in extra:
                    extra["snr_db"] = float(extra["snr_db"])
                records.append(ManifestRecord(**base, **extra))
        return cls(records, path.parent)


@dataclass
class Corpus:
    """A manifest plus the speakers and utterance tokens it was generated from."""

    config: CorpusConfig
    manifest: Manifest
    speakers: list[SyntheticSpeaker]
    utterances: dict[str, tuple[str, list[int]]]  # utt id -> (speaker id, tokens)
    features: dict[str, np.ndarray]               # relative path -> log-Mel matrix

    def load(self, rel_path: str) -> np.ndarray:
        if rel_path in self.features:
            return self.features[rel_path]
        return self.manifest.features(rel_path)


def _utt_path(utt: str) -> str:
    return f"utts/{utt}.feat"


def build_corpus(cfg: CorpusConfig, out_dir: str | Path | None = None) -> Corpus:
    """Generate utterances, mixtures, features and a manifest.

    Mixture i is built from ``default_rng([seed, 1, i])`` alone, so its content
    does not depend on generation order.
    """
    if cfg.n_speakers < 2:
        raise DataError("need at least two speakers")
    if cfg.utts_per_speaker < 2:
        raise DataError("every speaker needs >= 2 utterances so enrollment differs from the target")
    if not 1 <= cfg.min_tokens <= cfg.max_tokens:
        raise DataError("invalid token-length range")
    speakers = [SyntheticSpeaker.create(i, cfg.n_speakers, cfg.vocab, cfg.seed) for i in range(cfg.n_speakers)]
    fcfg = cfg.features
    utterances: dict[str, tuple[str, list[int]]] = {}
    by_speaker: dict[str, list[str]] = {}
    for si, spk in enumerate(speakers):
        for j in range(cfg.utts_per_speaker):
            rng = np.random.default_rng([cfg.seed, 0, si, j])
            n = int(rng.integers(cfg.min_tokens, cfg.max_tokens + 1))
            utt = f"{spk.speaker_id}-{j:03d}"
            utterances[utt] = (spk.speaker_id, [int(t) for t in rng.integers(0, cfg.vocab, size=n)])
            by_speaker.setdefault(spk.speaker_id, []).append(utt)
    spk_index = {s.speaker_id: s for s in speakers}
    all_utts = list(utterances)
    n_mix = cfg.n_mixtures or len(all_utts)

    test_speakers: set[str] = set()
    if cfg.disjoint_test_speakers:
        test_speakers = {speakers[-1].speaker_id, speakers[-2].speaker_id} if cfg.n_speakers >= 4 else set()

    features: dict[str, np.ndarray] = {}

    def feats_for(utt: str) -> str:
        path = _utt_path(utt)
        if path not in features:
            sid, toks = utterances[utt]
            features[path] = compute_features(spk_index[sid].render(toks), fcfg).astype(np.float32)
        return path

    split_rng = np.random.default_rng([cfg.seed, 2])
    order = split_rng.permutation(n_mix)
    n_train = int(round(cfg.splits[0] * n_mix))
    n_dev = int(round(cfg.splits[1] * n_mix))
    split_of = np.empty(n_mix, dtype=object)
    split_of[order[:n_train]] = "train"
    split_of[order[n_train:n_train + n_dev]] = "dev"
    split_of[order[n_train + n_dev:]] = "test"

    records = []
    for i in range(n_mix):
        rng = np.random.default_rng([cfg.seed, 1, i])
        target_utt = all_utts[i % len(all_utts)]
        tsid, ttoks = utterances[target_utt]
        others = [s.speaker_id for s in speakers if s.speaker_id != tsid]
        isid = others[int(rng.integers(len(others)))]
        interferer_utt = by_speaker[isid][int(rng.integers(len(by_speaker[isid])))]
        pool = [u for u in by_speaker[tsid] if u != target_utt]
        enroll_utt = pool[int(rng.integers(len(pool)))]
        snr = sample_snr(cfg.condition, rng)
        tw = spk_index[tsid].render(ttoks)
        iw = spk_index[isid].render(utterances[interferer_utt][1])
        mix = mix_at_snr(tw, iw, snr, cfg.mode)
        wave = mix.mixture
        if cfg.condition == "noisy":
            louder = max(float(np.sum(tw.samples ** 2)), float(np.sum((mix.scale * iw.samples) ** 2)))
            wave = add_noise(wave, sample_snr("noisy", rng), louder, rng)
        mid = f"mix{i:05d}"
        mpath = f"mix/{mid}.feat"
        features[mpath] = compute_features(wave, fcfg).astype(np.float32)
        split = split_of[i]
        if test_speakers:
            split = "test" if tsid in test_speakers else ("train" if split == "test" else split)
        records.append(ManifestRecord(mpath, feats_for(enroll_utt), list(ttoks), tsid, split, mid, isid,
                                      target_utt, enroll_utt, interferer_utt, mix.realized_snr, cfg.mode))
        feats_for(target_utt)

    manifest = Manifest(records, Path(out_dir) if out_dir else None, bool(test_speakers))
    corpus = Corpus(cfg, manifest, speakers, utterances, features)
    if out_dir is not None:
        write_corpus(corpus, out_dir)
    return corpus


def write_corpus(corpus: Corpus, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "mix").mkdir(parents=True, exist_ok=True)
    (out / "utts").mkdir(parents=True, exist_ok=True)
    for rel, mat in sorted(corpus.features.items()):
        write_features(out / rel, mat)
    corpus.manifest.root = out
    corpus.manifest.write(out / "manifest.tsv")
    return out / "manifest.tsv"


def mismatched_enrollment_variant(manifest: Manifest, rng: np.random.Generator,
                                  pool_from: Manifest | None = None) -> Manifest:
    """Swap each enrollment for an utterance of a speaker absent from the mixture.

    Replacement enrollments are drawn from ``pool_from`` (default: ``manifest``).
    """
    pool: dict[str, list[tuple[str, str]]] = {}
    for r in (pool_from or manifest).records:
        pool.setdefault(r.target_speaker_id, [])
        if (r.enrollment_utt, r.enrollment_path) not in pool[r.target_speaker_id]:
            pool[r.target_speaker_id].append((r.enrollment_utt, r.enrollment_path))
    speakers = sorted(pool)
    if len(speakers) < 3:
        raise DataError("mismatched enrollment needs at least three speakers")
    out = []
    for r in manifest.records:
        eligible = [s for s in speakers if s not in (r.target_speaker_id, r.interferer_speaker_id) and pool[s]]
        if not eligible:
            raise DataError(f"{r.mixture_id}: no speaker outside the mixture has an enrollment")
        spk = eligible[int(rng.integers(len(eligible)))]
        utt, path = pool[spk][int(rng.integers(len(pool[spk])))]
        out.append(replace(r, enrollment_utt=utt, enrollment_path=path))
    return Manifest(out, manifest.root, manifest.speakers_disjoint, manifest._cache)


def enrollment_speaker(record: ManifestRecord) -> str:
    return record.enrollment_utt.rsplit("-", 1)[0] if record.enrollment_utt else record.target_speaker_id
