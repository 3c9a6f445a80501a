"""
MFCC features for the recurrent stream.

Per frame: Hamming window, power spectrum, triangular mel filterbank, log,
orthonormal DCT-II, first ``n_coeffs`` coefficients. No liftering, deltas or
mean normalisation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
import scipy.signal as ss

from .errors import DomainError, ResolutionError, SignalTooShort
from .preprocess import TARGET_RATE


@dataclass(frozen=True)
class MfccConfig:
    frame_len: int = 256
    hop: int = 128
    fft_len: int = 256
    n_mels: int = 26
    n_coeffs: int = 13
    f_min: float = 0.0
    f_max: float = 500.0
    log_floor: float = 1e-10

    def validate(self, sample_rate: float) -> None:
        if self.fft_len < self.frame_len or self.fft_len & (self.fft_len - 1):
            raise ValueError("fft_len must be a power of two no smaller than frame_len")
        if not 0 < self.hop <= self.frame_len:
            raise ValueError("hop must lie in (0, frame_len]")
        if not 0 < self.n_coeffs <= self.n_mels:
            raise ValueError("n_coeffs must lie in (0, n_mels]")
        if not 0 <= self.f_min < self.f_max <= sample_rate / 2:
            raise ValueError(f"mel band {self.f_min}-{self.f_max} Hz invalid at {sample_rate} Hz")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    def n_frames(self, n_samples: int) -> int:
        return 1 + (n_samples - self.frame_len) // self.hop

    def to_dict(self):
        return asdict(self)

    def digest(self) -> str:
        """Short stable hash used to refuse mismatched feature archives."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class MfccMatrix:
    values: np.ndarray
    frame_times: np.ndarray

    @property
    def shape(self):
        return self.values.shape


def hz_to_mel(f):
    """2595 * log10(1 + f / 700)."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise DomainError("frequency must be non-negative")
    out = 2595.0 * np.log10(1.0 + f / 700.0)
    return float(out) if out.ndim == 0 else out


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    if np.any(m < 0):
        raise DomainError("mel value must be non-negative")
    out = 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    return float(out) if out.ndim == 0 else out


def mel_points(config: MfccConfig) -> np.ndarray:
    """``n_mels + 2`` edge/center frequencies (Hz), equally spaced in mel."""
    lo, hi = hz_to_mel(config.f_min), hz_to_mel(config.f_max)
    return mel_to_hz(np.linspace(lo, hi, config.n_mels + 2))


def mel_centers(config: MfccConfig) -> np.ndarray:
    return mel_points(config)[1:-1]


def mel_filterbank(config: MfccConfig = MfccConfig(), sample_rate: float = TARGET_RATE):
    """Triangular filters on the rfft bin grid, one per row, each peaking at 1."""
    config.validate(sample_rate)
    pts = mel_points(config)
    freqs = np.fft.rfftfreq(config.fft_len, 1.0 / sample_rate)
    bins = np.round(pts[1:-1] * config.fft_len / sample_rate).astype(int)
    if np.any(np.diff(bins) == 0):
        raise ResolutionError(
            f"{config.n_mels} mel filters too dense for fft_len {config.fft_len}")
    left, center, right = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    rising = (freqs - left) / (center - left)
    falling = (right - freqs) / (right - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    peak = fb.max(axis=1, keepdims=True)
    if np.any(peak <= 0):
        raise ResolutionError("a mel filter covers no FFT bin")
    return fb / peak


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis; row k is the k-th cosine."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    basis = np.cos(np.pi * k * (2 * i + 1) / (2 * n)) * np.sqrt(2.0 / n)
    basis[0] /= np.sqrt(2.0)
    return basis


def power_spectrum(frames: np.ndarray, config: MfccConfig) -> np.ndarray:
    window = ss.get_window("hamming", config.frame_len)
    return np.abs(np.fft.rfft(frames * window, n=config.fft_len, axis=-1)) ** 2


def frame_signal(samples, config: MfccConfig) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if x.shape[-1] < config.frame_len:
        raise SignalTooShort(f"{x.shape[-1]} samples; need at least {config.frame_len}")
    n = config.n_frames(x.shape[-1])
    view = np.lib.stride_tricks.sliding_window_view(x, config.frame_len, axis=-1)
    return view[..., : (n - 1) * config.hop + 1: config.hop, :]


class MfccExtractor:
    """Reusable MFCC computation with the filterbank and DCT precomputed."""

    def __init__(self, config: MfccConfig = MfccConfig(), sample_rate: float = TARGET_RATE):
        self.config = config
        self.sample_rate = sample_rate
        self.filterbank = mel_filterbank(config, sample_rate)
        self.dct = dct_matrix(config.n_mels)[: config.n_coeffs]

    def __call__(self, samples) -> np.ndarray:
        """MFCC values for one signal (frames x coeffs) or a batch (batch x frames x coeffs)."""
        frames = frame_signal(samples, self.config)
        energies = power_spectrum(frames, self.config) @ self.filterbank.T
        return np.log(energies + self.config.log_floor) @ self.dct.T

    def frame_times(self, n_samples: int) -> np.ndarray:
        c = self.config
        starts = np.arange(c.n_frames(n_samples)) * c.hop
        return (starts + c.frame_len / 2) / self.sample_rate


def mfcc(samples, config: MfccConfig = MfccConfig(),
         sample_rate: float = TARGET_RATE) -> MfccMatrix:
    ext = MfccExtractor(config, sample_rate)
    x = np.asarray(samples, dtype=np.float64)
    return MfccMatrix(ext(x), ext.frame_times(x.shape[-1]))
