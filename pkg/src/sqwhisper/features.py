"""Log-Mel filterbank front end: framing, Hann window, naive DFT, mel pooling.

Also holds the little binary container used to cache feature matrices:
an 8-byte magic, little-endian uint32 rows and cols, then float32 payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

ENERGY_FLOOR = 1e-10
FEATURE_MAGIC = b"SQWFEAT\x00"
_HEADER = struct.Struct("<8sII")


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    frame_len: int = 400
    frame_shift: int = 160
    n_mels: int = 20
    fmin: float = 0.0
    fmax: float | None = None
    floor: float = ENERGY_FLOOR

    @property
    def upper(self) -> float:
        return self.sample_rate / 2 if self.fmax is None else self.fmax


def num_frames(n_samples: int, frame_len: int, frame_shift: int) -> int:
    if n_samples < frame_len:
        return 0
    return (n_samples - frame_len) // frame_shift + 1


@lru_cache(maxsize=16)
def hann(n: int) -> np.ndarray:
    return np.hanning(n + 1)[:-1] if n > 1 else np.ones(n)


def frame_signal(w: Waveform | np.ndarray, frame_len: int = 400, frame_shift: int = 160) -> np.ndarray:
    """Cut into Hann-windowed frames of shape (count, frame_len)."""
    if not frame_len >= frame_shift > 0:
        raise ValueError("need frame_len >= frame_shift > 0")
    x = np.asarray(w.samples if isinstance(w, Waveform) else w, dtype=np.float64)
    count = num_frames(len(x), frame_len, frame_shift)
    if count == 0:
        return np.zeros((0, frame_len))
    idx = frame_shift * np.arange(count)[:, None] + np.arange(frame_len)[None, :]
    return x[idx] * hann(frame_len)


@lru_cache(maxsize=8)
def _dft_basis(n: int) -> tuple[np.ndarray, np.ndarray]:
    k = np.arange(n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    ang = 2 * np.pi * k * t / n
    return np.cos(ang).T, np.sin(ang).T


def power_spectrum(frames: np.ndarray) -> np.ndarray:
    """|DFT|^2 for bins 0..N/2 by direct summation (no FFT)."""
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    cos_b, sin_b = _dft_basis(frames.shape[-1])
    re = frames @ cos_b
    im = frames @ sin_b
    return re * re + im * im


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Center frequencies (Hz) of the ``n_mels`` triangular filters."""
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return edges[1:-1]


@lru_cache(maxsize=16)
def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular filters on the mel scale, shape (n_fft//2 + 1, n_mels)."""
    if n_mels < 1:
        raise ValueError("need at least one mel filter")
    if not 0 <= fmin < fmax <= sample_rate / 2:
        raise ValueError(f"invalid band edges fmin={fmin}, fmax={fmax} for rate {sample_rate}")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling)).T


def log_mel(power: np.ndarray, n_mels: int = 20, fmin: float = 0.0, fmax: float | None = None,
            floor: float = ENERGY_FLOOR, sample_rate: int = 16000) -> np.ndarray:
    """ln(max(mel energy, floor)) for power bins of shape (..., n_fft//2 + 1)."""
    power = np.asarray(power, dtype=np.float64)
    n_fft = 2 * (power.shape[-1] - 1)
    fmax = sample_rate / 2 if fmax is None else fmax
    fb = mel_filterbank(n_mels, n_fft, sample_rate, float(fmin), float(fmax))
    return np.log(np.maximum(power @ fb, floor))


def compute_features(w: Waveform | np.ndarray, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Waveform -> (frames, n_mels) log-Mel matrix."""
    frames = frame_signal(w, cfg.frame_len, cfg.frame_shift)
    if len(frames) == 0:
        return np.zeros((0, cfg.n_mels))
    return log_mel(power_spectrum(frames), cfg.n_mels, cfg.fmin, cfg.upper, cfg.floor, cfg.sample_rate)


def write_features(path: str | Path, feats: np.ndarray) -> None:
    feats = np.asarray(feats, dtype="<f4")
    if feats.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, feats.shape[0], feats.shape[1]))
        fh.write(feats.tobytes())


def read_features(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, rows, cols = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature container")
    body = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    if body.size != rows * cols:
        raise ValueError(f"{path}: payload has {body.size} values, header says {rows}x{cols}")
    return body.reshape(rows, cols).astype(np.float32)
