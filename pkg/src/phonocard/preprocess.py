"""
Recording -> fixed-length heart-sound cycles.

The chain is: resample to 1000 Hz, zero-phase Butterworth band-pass, windowed
spike removal, envelope based S1-to-S1 segmentation, and truncation or
right zero-padding to 2500 samples. ``scale_for_conv`` prepares a cycle for the
convolutional stream only.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
import scipy.signal as ss

from .errors import NoCyclesFound, SignalTooShort, UpsampleUnsupported
from .signal_io import Label, Recording

log = logging.getLogger(__name__)

TARGET_RATE = 1000
CYCLE_LENGTH = 2500


@dataclass(frozen=True)
class FilterSpec:
    low_cut: float = 25.0
    high_cut: float = 400.0
    order: int = 4
    kind: str = "bandpass"

    def validate(self, sample_rate: float) -> None:
        if not 0 < self.low_cut < self.high_cut < sample_rate / 2:
            raise ValueError(
                f"band {self.low_cut}-{self.high_cut} Hz invalid at {sample_rate} Hz")
        if self.order < 2 or self.order % 2:
            raise ValueError(f"filter order must be even and >= 2, got {self.order}")
        if self.kind != "bandpass":
            raise ValueError(f"unsupported filter kind {self.kind!r}")


@dataclass(frozen=True)
class PreprocessConfig:
    target_rate: int = TARGET_RATE
    cycle_length: int = CYCLE_LENGTH
    filter: FilterSpec = field(default_factory=FilterSpec)
    spike_window: float = 0.5
    spike_factor: float = 3.0
    min_cycle: int = 300
    max_cycle: int = CYCLE_LENGTH

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["filter"] = FilterSpec(**d.get("filter", {}))
        return cls(**d)


@dataclass
class Cycle:
    samples: np.ndarray
    patient_id: str
    record_id: str
    label: Label
    cycle_index: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("cycle samples must be one-dimensional")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError(f"non-finite samples in cycle {self.record_id}:{self.cycle_index}")


@dataclass(frozen=True)
class CycleBoundaries:
    starts: np.ndarray
    ends: np.ndarray

    def __len__(self):
        return len(self.starts)

    def __iter__(self):
        return iter(zip(self.starts.tolist(), self.ends.tolist()))


def resample(samples, src_rate: int, dst_rate: int = TARGET_RATE) -> np.ndarray:
    """Downsample with an anti-alias FIR (cutoff at 90% of the new Nyquist).

    Output length is ``round(len * dst_rate / src_rate)``; equal rates return
    the input unchanged.
    """
    x = np.asarray(samples, dtype=np.float64)
    if dst_rate <= 0:
        raise ValueError(f"destination rate must be positive, got {dst_rate}")
    if src_rate < dst_rate:
        raise UpsampleUnsupported(f"cannot upsample {src_rate} Hz -> {dst_rate} Hz")
    if src_rate == dst_rate:
        return x.copy()
    ratio = Fraction(int(dst_rate), int(src_rate))
    up, down = ratio.numerator, ratio.denominator
    half_len = 10 * max(up, down)
    taps = ss.firwin(2 * half_len + 1, 0.9 * dst_rate / 2, window=("kaiser", 5.0),
                     fs=src_rate * up)
    y = ss.resample_poly(x, up, down, window=taps)
    n_out = int(np.floor(x.size * dst_rate / src_rate + 0.5))
    if y.size < n_out:
        y = np.pad(y, (0, n_out - y.size))
    return y[:n_out]


def _design(spec: FilterSpec, sample_rate: float):
    spec.validate(sample_rate)
    # scipy doubles the prototype order for band-pass designs
    return ss.butter(spec.order // 2, [spec.low_cut, spec.high_cut], btype="bandpass",
                     fs=sample_rate, output="sos")


def bandpass(samples, spec: FilterSpec = FilterSpec(), sample_rate: float = TARGET_RATE):
    """Zero-phase (forward-backward) Butterworth band-pass."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 3 * spec.order:
        raise SignalTooShort(f"{x.size} samples; need at least {3 * spec.order}")
    sos = _design(spec, sample_rate)
    padlen = min(3 * (2 * len(sos) + 1), x.size - 1)
    return ss.sosfiltfilt(sos, x, padlen=padlen)


def _window_maxima(x, win):
    n_win = -(-x.size // win)
    padded = np.zeros(n_win * win)
    padded[: x.size] = np.abs(x)
    return padded.reshape(n_win, win).max(axis=1)


def remove_spikes(samples, sample_rate: float = TARGET_RATE, window: float = 0.5,
                  factor: float = 3.0) -> np.ndarray:
    """Zero out impulsive artefacts.

    The signal is cut into ``window``-second frames. While some frame's peak
    absolute value exceeds ``factor`` times the median of all frame peaks,
    the loudest such frame has its spike (from the last zero crossing before
    the peak to the first one after it) set to zero. Everything else is left
    bit-identical.
    """
    x = np.array(samples, dtype=np.float64, copy=True)
    if x.size == 0:
        raise ValueError("empty signal")
    win = max(1, int(round(window * sample_rate)))
    # every pass zeroes at least one sample, so this bound is never binding
    for _ in range(x.size):
        maxima = _window_maxima(x, win)
        med = np.median(maxima)
        if med <= 0:
            break
        over = np.flatnonzero(maxima > factor * med)
        if over.size == 0:
            break
        w = over[np.argmax(maxima[over])]
        lo, hi = w * win, min((w + 1) * win, x.size)
        peak = lo + int(np.argmax(np.abs(x[lo:hi])))
        sign = np.sign(x[peak])
        left = peak
        while left > 0 and np.sign(x[left - 1]) == sign:
            left -= 1
        right = peak + 1
        while right < x.size and np.sign(x[right]) == sign:
            right += 1
        x[left:right] = 0.0
    return x


def homomorphic_envelope(samples, sample_rate: float = TARGET_RATE, cutoff: float = 15.0):
    """exp(low-pass(log|analytic signal|)), zero-phase first-order low-pass."""
    mag = np.abs(ss.hilbert(np.asarray(samples, dtype=np.float64)))
    floor = max(mag.max(), 1e-300) * 1e-6
    sos = ss.butter(1, cutoff, btype="low", fs=sample_rate, output="sos")
    return np.exp(ss.sosfiltfilt(sos, np.log(mag + floor)))


def estimate_period(envelope, sample_rate: float = TARGET_RATE, min_lag: float = 0.375,
                    max_lag: float = 1.5, min_corr: float = 0.2) -> int:
    """Heart period in samples from the envelope autocorrelation.

    Returns the lag of the highest local maximum of the normalized
    autocorrelation inside ``[min_lag, max_lag]`` seconds; raises
    NoCyclesFound when no such maximum reaches ``min_corr``.
    """
    env = np.asarray(envelope, dtype=np.float64)
    env = env - env.mean()
    energy = np.dot(env, env)
    if energy <= 0:
        raise NoCyclesFound("flat envelope")
    ac = ss.correlate(env, env, mode="full", method="fft")[env.size - 1:] / energy
    lo = int(round(min_lag * sample_rate))
    hi = min(int(round(max_lag * sample_rate)), ac.size - 2)
    if hi <= lo:
        raise NoCyclesFound("signal too short for a period estimate")
    seg = ac[lo - 1: hi + 2]
    peaks, _ = ss.find_peaks(seg)
    if peaks.size == 0:
        raise NoCyclesFound("no periodicity in the envelope")
    best = peaks[np.argmax(seg[peaks])]
    if seg[best] < min_corr:
        raise NoCyclesFound(f"weak periodicity (autocorrelation {seg[best]:.3f})")
    return lo - 1 + int(best)


def _label_s1(peaks: np.ndarray, period: int) -> np.ndarray:
    """Pick S1 peaks: systole (S1->S2) is the shorter of the two gaps."""
    if peaks.size < 2:
        return peaks
    gaps = np.diff(peaks)
    is_s1 = np.zeros(peaks.size, dtype=bool)
    for i in range(peaks.size):
        nxt = gaps[i] if i < gaps.size else None
        prev = gaps[i - 1] if i > 0 else None
        if nxt is not None and prev is not None:
            is_s1[i] = nxt < prev
        elif nxt is not None:
            is_s1[i] = nxt < 0.5 * period
        else:
            is_s1[i] = prev > 0.5 * period
    return peaks[is_s1]


def _onset(envelope, peak, limit):
    half = 0.5 * envelope[peak]
    i = peak
    while i > max(peak - limit, 0) and envelope[i - 1] > half:
        i -= 1
    return i


def segment_cycles(samples, sample_rate: float = TARGET_RATE, min_cycle: int = 300,
                   max_cycle: int = CYCLE_LENGTH) -> CycleBoundaries:
    """S1-onset to next-S1-onset cycle boundaries.

    The homomorphic envelope gives the heart period (autocorrelation peak in
    0.375-1.5 s). Envelope peaks above 10% of the maximum are picked greedily
    by height at a separation of 0.2 periods, which keeps S1 and S2 apart;
    each peak whose following gap is shorter than the preceding one is an S1.
    S1 peaks closer than 0.7 periods are thinned the same greedy way.
    Cycles outside ``[min_cycle, max_cycle]`` samples (scaled to 1000 Hz) are
    dropped.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 2 * sample_rate:
        raise SignalTooShort(f"{x.size / sample_rate:.2f} s of signal; need at least 2 s")
    if not np.any(x):
        raise NoCyclesFound("silent signal")
    env = homomorphic_envelope(x, sample_rate)
    period = estimate_period(env, sample_rate)
    peaks, _ = ss.find_peaks(env, height=0.1 * env.max(),
                                 distance=max(1, int(0.2 * period)))
    if peaks.size == 0:
        raise NoCyclesFound("no envelope peaks above 10% of maximum")
    s1 = _label_s1(peaks, period)
    if s1.size > 1:
        heights = env[s1]
        order = np.argsort(-heights, kind="stable")
        chosen = []
        for i in order:
            if all(abs(s1[i] - s1[j]) >= 0.7 * period for j in chosen):
                chosen.append(i)
        s1 = np.sort(s1[chosen])
    onsets = np.array([_onset(env, p, int(0.25 * period)) for p in s1], dtype=int)
    scale = sample_rate / TARGET_RATE
    lo, hi = min_cycle * scale, max_cycle * scale
    starts, ends = onsets[:-1], onsets[1:]
    ok = ((ends - starts) >= lo) & ((ends - starts) <= hi)
    if not np.any(ok):
        raise NoCyclesFound(f"no cycles of {min_cycle}-{max_cycle} samples")
    return CycleBoundaries(starts[ok], ends[ok])


def fix_length(cycle_samples, target: int = CYCLE_LENGTH) -> np.ndarray:
    """Keep the first ``target`` samples, or right-pad with zeros."""
    x = np.asarray(cycle_samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty cycle")
    if x.size >= target:
        return x[:target].copy()
    return np.concatenate([x, np.zeros(target - x.size)])


def scale_waveforms(waves: np.ndarray) -> np.ndarray:
    """Row-wise peak normalization followed by a +1 offset; all-zero rows become ones."""
    w = np.asarray(waves)
    peak = np.max(np.abs(w), axis=-1, keepdims=True)
    peak = np.where(peak > 0, peak, 1)
    return w / peak + 1


def scale_for_conv(cycle: Cycle) -> Cycle:
    return Cycle(scale_waveforms(cycle.samples), cycle.patient_id, cycle.record_id,
                 cycle.label, cycle.cycle_index)


def denoise(recording: Recording, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    x = resample(recording.samples, recording.sample_rate, config.target_rate)
    x = bandpass(x, config.filter, config.target_rate)
    return remove_spikes(x, config.target_rate, config.spike_window, config.spike_factor)


def extract_cycles(recording: Recording,
                   config: PreprocessConfig = PreprocessConfig()) -> list[Cycle]:
    """Full chain from a raw recording to labelled fixed-length cycles."""
    x = denoise(recording, config)
    bounds = segment_cycles(x, config.target_rate, config.min_cycle, config.max_cycle)
    return [Cycle(fix_length(x[s:e], config.cycle_length), recording.patient_id,
                  recording.id, recording.label, i)
            for i, (s, e) in enumerate(bounds)]
