"""
Recording ingestion: PCM-16 WAV files, reference label files, dataset
manifests and patient-disjoint train/test folds.
"""

from __future__ import annotations

import csv
import enum
import logging
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DuplicateRecord,
    EmptyRecording,
    FormatError,
    InsufficientData,
    LabelError,
    UnsupportedChannels,
)

log = logging.getLogger(__name__)

PCM_SCALE = 32768.0
LABEL_FILE = "REFERENCE.csv"
PATIENT_FILE = "PATIENTS.csv"
MANIFEST_FIELDS = ("id", "path", "patient", "label")


class Label(str, enum.Enum):
    NORMAL = "Normal"
    ABNORMAL = "Abnormal"

    @property
    def target(self) -> int:
        """Binary training target; Abnormal is the positive class."""
        return 1 if self is Label.ABNORMAL else 0

    @classmethod
    def from_target(cls, value) -> "Label":
        return cls.ABNORMAL if int(value) == 1 else cls.NORMAL


_CODES = {-1: Label.NORMAL, 1: Label.ABNORMAL}


@dataclass
class Recording:
    """One labelled audio record."""

    samples: np.ndarray
    sample_rate: int
    id: str = ""
    patient_id: str = ""
    label: Label | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.size == 0:
            raise EmptyRecording(f"recording {self.id!r} has no samples")
        if self.sample_rate <= 0:
            raise FormatError(f"sample rate must be positive, got {self.sample_rate}")
        if np.max(np.abs(self.samples)) > 1.0:
            raise FormatError(f"recording {self.id!r} has amplitudes outside [-1, 1]")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def read_wav(path) -> Recording:
    """Read a mono 16-bit PCM WAV file.

    Integer sample ``s`` maps to ``s / 32768``. Record id, patient and label
    are left for the caller to fill in.
    """
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if width != 2:
        raise FormatError(f"{path}: expected 16-bit samples, got {8 * width}-bit")
    if channels != 1:
        raise UnsupportedChannels(f"{path}: expected 1 channel, got {channels}")
    if not raw:
        raise EmptyRecording(f"{path}: empty data chunk")
    ints = np.frombuffer(raw, dtype="<i2")
    return Recording(samples=ints / PCM_SCALE, sample_rate=rate, id=Path(path).stem)


def write_wav(path, samples, sample_rate: int) -> None:
    """Write amplitudes in [-1, 1] as mono PCM-16, rounding to the nearest code."""
    ints = np.clip(np.round(np.asarray(samples) * PCM_SCALE), -32768, 32767)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(sample_rate))
        fh.writeframes(ints.astype("<i2").tobytes())


def parse_label_lines(lines: Iterable[str], source: str = "<labels>") -> dict[str, Label]:
    labels: dict[str, Label] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) < 2:
            raise LabelError(f"{source}:{lineno}: expected 'record_id,code', got {line!r}")
        record_id, code = parts[0], parts[1]
        try:
            value = int(code)
        except ValueError:
            if lineno == 1:
                continue  # header row
            raise LabelError(f"{source}:{lineno}: non-numeric code {code!r}") from None
        if value not in _CODES:
            raise LabelError(f"{source}:{lineno}: code {value} not in {{-1, 1}}")
        if record_id in labels:
            raise DuplicateRecord(f"{source}:{lineno}: duplicate record {record_id!r}")
        labels[record_id] = _CODES[value]
    return labels


def read_labels(path) -> dict[str, Label]:
    """Read a ``record_id,code`` reference file (-1 Normal, 1 Abnormal)."""
    with open(path, encoding="utf-8") as fh:
        return parse_label_lines(fh, source=str(path))


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    patient_id: str
    label: Label

    def load(self) -> Recording:
        rec = read_wav(self.path)
        rec.id = self.id
        rec.patient_id = self.patient_id
        rec.label = self.label
        return rec


@dataclass
class DatasetManifest:
    recordings: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        ids = [r.id for r in self.recordings]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DuplicateRecord(f"duplicate record ids in manifest: {dup[:5]}")

    @property
    def class_counts(self) -> dict[Label, int]:
        counts = {Label.NORMAL: 0, Label.ABNORMAL: 0}
        for r in self.recordings:
            counts[r.label] += 1
        return counts

    @property
    def patients(self) -> list[str]:
        return sorted({r.patient_id for r in self.recordings})

    def __len__(self):
        return len(self.recordings)

    def by_patients(self, patients) -> list[ManifestEntry]:
        wanted = set(patients)
        return [r for r in self.recordings if r.patient_id in wanted]


def _read_patient_table(path: Path) -> dict[str, str]:
    table = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh):
            if len(row) >= 2 and row[0].strip() and not row[0].startswith("#"):
                table[row[0].strip()] = row[1].strip()
    return table


def build_manifest(data_root) -> DatasetManifest:
    """Scan ``data_root`` for reference label files and their WAV recordings.

    Every directory holding a ``REFERENCE.csv`` contributes the recordings it
    lists. Patient ids come from an optional ``PATIENTS.csv`` at the root
    (``record_id,patient_id``); otherwise each recording is its own patient.
    """
    root = Path(data_root)
    label_files = sorted(root.rglob(LABEL_FILE))
    if not label_files:
        raise FileNotFoundError(f"no {LABEL_FILE} found under {root}")
    patient_table = {}
    if (root / PATIENT_FILE).exists():
        patient_table = _read_patient_table(root / PATIENT_FILE)
    entries = []
    for lf in label_files:
        for record_id, label in read_labels(lf).items():
            wav = lf.parent / f"{record_id}.wav"
            if not wav.exists():
                log.warning("missing audio for %s (%s)", record_id, wav)
                continue
            entries.append(ManifestEntry(record_id, str(wav),
                                         patient_table.get(record_id, record_id), label))
    return DatasetManifest(entries)


def write_manifest(manifest: DatasetManifest, path) -> None:
    """Tab-separated, one recording per line: id, path, patient, label."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in manifest.recordings:
            w.writerow((r.id, r.path, r.patient_id, r.label.value))


def read_manifest(path) -> DatasetManifest:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    return DatasetManifest([ManifestEntry(r["id"], r["path"], r["patient"], Label(r["label"]))
                            for r in rows])


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_patients: frozenset
    test_patients: frozenset
    seed: int


def _patients_of(source) -> list[str]:
    if isinstance(source, DatasetManifest):
        return source.patients
    return sorted(set(source))


def make_folds(manifest: DatasetManifest | Sequence[str], n_folds: int = 4,
               train_frac: float = 0.9, seed: int = 0) -> list[FoldSplit]:
    """Independent seeded patient-level shuffles, each split train/test.

    ``manifest`` may also be a plain collection of patient ids.
    """
    if n_folds < 1:
        raise ValueError(f"n_folds must be >= 1, got {n_folds}")
    if not 0.0 < train_frac < 1.0:
        raise ValueError(f"train_frac must lie in (0, 1), got {train_frac}")
    patients = _patients_of(manifest)
    if len(patients) < 2:
        raise InsufficientData(f"need at least 2 patients to split, got {len(patients)}")
    n_test = int(np.floor((1.0 - train_frac) * len(patients) + 0.5))
    n_test = min(max(n_test, 1), len(patients) - 1)
    folds = []
    for k in range(n_folds):
        rng = np.random.default_rng([seed, k])
        order = rng.permutation(len(patients))
        test = frozenset(patients[i] for i in order[:n_test])
        train = frozenset(patients[i] for i in order[n_test:])
        folds.append(FoldSplit(k, train, test, seed))
    return folds


def patient_groups(patient_ids: Sequence[str]) -> Mapping[str, np.ndarray]:
    """Map patient id to the indices where it occurs, in first-seen order."""
    groups: dict[str, list[int]] = {}
    for i, p in enumerate(patient_ids):
        groups.setdefault(p, []).append(i)
    return {p: np.asarray(ix) for p, ix in groups.items()}
