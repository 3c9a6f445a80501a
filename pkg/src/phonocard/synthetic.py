"""
Synthetic heart-sound generators used by the test suite, the acceptance
benchmark and the ``make-synthetic`` command.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .preprocess import CYCLE_LENGTH, TARGET_RATE
from .signal_io import LABEL_FILE, PATIENT_FILE, Label, write_wav


def burst(freq: float, duration: float, sample_rate: float, phase: float = 0.0):
    """Hann-windowed sine burst."""
    n = max(2, int(round(duration * sample_rate)))
    t = np.arange(n) / sample_rate
    return np.hanning(n) * np.sin(2 * np.pi * freq * t + phase)


def click_train(bpm: float = 60.0, duration: float = 10.0, sample_rate: float = TARGET_RATE,
                systole: float | None = None, s1_freq: float = 50.0, s2_freq: float = 70.0,
                s1_len: float = 0.1, s2_len: float = 0.08, s2_gain: float = 0.8,
                noise: float = 0.01, offset: float = 0.2, rng=None):
    """Periodic S1/S2 burst train.

    Returns ``(signal, s1_onsets)`` with onsets in samples. Systole defaults
    to 30% of the period (300 ms at 60 bpm).
    """
    rng = np.random.default_rng(rng)
    period = 60.0 / bpm
    systole = 0.3 * period if systole is None else systole
    n = int(round(duration * sample_rate))
    x = noise * rng.standard_normal(n)
    s1 = burst(s1_freq, s1_len, sample_rate)
    s2 = s2_gain * burst(s2_freq, s2_len, sample_rate)
    onsets = []
    t = offset
    while True:
        i1 = int(round(t * sample_rate))
        i2 = int(round((t + systole) * sample_rate))
        if i2 + s2.size > n:
            break
        x[i1:i1 + s1.size] += s1
        x[i2:i2 + s2.size] += s2
        onsets.append(i1)
        t += period
    return np.clip(x, -1, 1), np.asarray(onsets)


def toy_cycle(label: Label, rng, length: int = CYCLE_LENGTH,
              sample_rate: float = TARGET_RATE) -> np.ndarray:
    """One fixed-length cycle: Normal carries 60 Hz bursts, Abnormal 150 Hz bursts plus noise.

    Cycle duration (0.6-1.2 s), systole fraction and burst phases are drawn
    from ``rng``; the tail past the cycle end is zero, as after ``fix_length``.
    """
    dur = rng.uniform(0.6, 1.2)
    n = int(dur * sample_rate)
    freq = 60.0 if label is Label.NORMAL else 150.0
    x = np.zeros(length)
    s1 = burst(freq, rng.uniform(0.08, 0.12), sample_rate, rng.uniform(0, 2 * np.pi))
    s2 = burst(freq, rng.uniform(0.06, 0.1), sample_rate, rng.uniform(0, 2 * np.pi))
    i2 = int(rng.uniform(0.28, 0.4) * n)
    x[: s1.size] += rng.uniform(0.7, 1.0) * s1
    x[i2: i2 + s2.size] += rng.uniform(0.4, 0.8) * s2
    if label is Label.ABNORMAL:
        x[:n] += 0.1 * rng.standard_normal(n)
    return x


def toy_dataset(n_cycles: int = 400, seed: int = 0, patients: int = 40):
    """Balanced labelled toy corpus.

    Returns ``(waves, labels, patient_ids)``; labels are 0/1 targets and each
    patient holds cycles of a single class.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n_cycles) % 2
    rng.shuffle(labels)
    waves = np.stack([toy_cycle(Label.from_target(y), rng) for y in labels])
    per_class = max(1, patients // 2)
    pid = np.array([f"{'ab' if y else 'no'}{rng.integers(per_class):03d}" for y in labels])
    return waves, labels, pid


def write_synthetic_corpus(root, n_records: int = 12, sample_rate: int = 2000,
                           duration: float = 8.0, seed: int = 0, records_per_patient: int = 1):
    """Write a small PhysioNet-style corpus: WAV files plus REFERENCE.csv.

    Normal records carry 50/70 Hz heart sounds, abnormal ones 150 Hz sounds
    with a murmur-like noise floor.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    ref_lines, patient_lines = [], []
    for i in range(n_records):
        abnormal = i % 2 == 1
        bpm = rng.uniform(55, 85)
        if abnormal:
            x, _ = click_train(bpm, duration, sample_rate, s1_freq=150, s2_freq=150,
                               noise=0.05, rng=rng)
        else:
            x, _ = click_train(bpm, duration, sample_rate, rng=rng)
        rid = f"s{i:04d}"
        write_wav(root / f"{rid}.wav", 0.9 * x, sample_rate)
        ref_lines.append(f"{rid},{1 if abnormal else -1}")
        patient_lines.append(f"{rid},{'a' if abnormal else 'n'}{(i // 2) // records_per_patient:04d}")
    (root / LABEL_FILE).write_text("\n".join(ref_lines) + "\n")
    if records_per_patient > 1:
        (root / PATIENT_FILE).write_text("\n".join(patient_lines) + "\n")
    return root
