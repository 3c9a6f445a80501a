"""
On-disk cycle and MFCC archives shared by the CLI commands.

A work directory holds::

    cycles.f32          float32 little-endian, row-major (n_cycles, cycle_length)
    cycles_index.csv    record_id, patient_id, label, cycle_index (one row per cycle)
    cycles.json         preprocessing config, its digest, shape and per-record skips
    mfcc.f32            float32 little-endian, row-major (n_cycles, frames, coeffs)
    mfcc.json           MFCC config, its digest, shape and the cycle archive digest

Every file is written to a temporary name and renamed into place.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .features import MfccConfig
from .nn.checkpoint import atomic_write_bytes
from .preprocess import PreprocessConfig
from .signal_io import Label

CYCLES_BIN = "cycles.f32"
CYCLES_INDEX = "cycles_index.csv"
CYCLES_META = "cycles.json"
MFCC_BIN = "mfcc.f32"
MFCC_META = "mfcc.json"
INDEX_COLUMNS = ("record_id", "patient_id", "label", "cycle_index")


def config_digest(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"missing {path}")
    return json.loads(path.read_text())


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write_bytes(path, buf.getvalue().encode())


def _write_f32(path, arr) -> str:
    blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    atomic_write_bytes(path, blob)
    return hashlib.sha256(blob).hexdigest()[:16]


def _read_f32(path, shape) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"missing {path}")
    data = np.fromfile(path, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise FormatError(f"{path.name} holds {data.size} values, expected shape {tuple(shape)}")
    return data.reshape(shape).astype(np.float32)


@dataclass
class CycleArchive:
    waves: np.ndarray           # (n, cycle_length) float32
    record_ids: np.ndarray
    patient_ids: np.ndarray
    labels: np.ndarray          # 0 Normal, 1 Abnormal
    cycle_index: np.ndarray
    preprocess: PreprocessConfig
    digest: str = ""

    def __len__(self):
        return len(self.labels)

    def select_patients(self, patients) -> np.ndarray:
        """Row indices of cycles whose patient is in ``patients``."""
        wanted = set(patients)
        return np.flatnonzero([p in wanted for p in self.patient_ids])


def save_cycles(work_dir, waves, rows, preprocess: PreprocessConfig, skipped=None) -> str:
    """Write the cycle archive; ``rows`` are (record_id, patient_id, Label, cycle_index)."""
    work_dir = Path(work_dir)
    waves = np.asarray(waves, dtype=np.float32).reshape(len(rows), preprocess.cycle_length)
    digest = _write_f32(work_dir / CYCLES_BIN, waves)
    write_csv(work_dir / CYCLES_INDEX, INDEX_COLUMNS,
              [(r, p, Label(lab).value, i) for r, p, lab, i in rows])
    write_json(work_dir / CYCLES_META, {
        "shape": list(waves.shape),
        "preprocess": preprocess.to_dict(),
        "preprocess_digest": config_digest(preprocess.to_dict()),
        "data_digest": digest,
        "skipped": skipped or {},
    })
    return digest


def load_cycles(work_dir) -> CycleArchive:
    work_dir = Path(work_dir)
    meta = read_json(work_dir / CYCLES_META)
    waves = _read_f32(work_dir / CYCLES_BIN, meta["shape"])
    with open(work_dir / CYCLES_INDEX, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != waves.shape[0]:
        raise FormatError(f"{CYCLES_INDEX} has {len(rows)} rows for {waves.shape[0]} cycles")
    return CycleArchive(
        waves=waves,
        record_ids=np.array([r["record_id"] for r in rows]),
        patient_ids=np.array([r["patient_id"] for r in rows]),
        labels=np.array([Label(r["label"]).target for r in rows], dtype=np.int64),
        cycle_index=np.array([int(r["cycle_index"]) for r in rows]),
        preprocess=PreprocessConfig.from_dict(meta["preprocess"]),
        digest=meta["data_digest"],
    )


def save_mfcc(work_dir, values, config: MfccConfig, cycles_digest: str) -> None:
    work_dir = Path(work_dir)
    values = np.asarray(values, dtype=np.float32)
    digest = _write_f32(work_dir / MFCC_BIN, values)
    write_json(work_dir / MFCC_META, {
        "shape": list(values.shape),
        "mfcc": config.to_dict(),
        "mfcc_digest": config.digest(),
        "cycles_digest": cycles_digest,
        "data_digest": digest,
    })


def load_mfcc(work_dir, cycles: CycleArchive | None = None):
    """Return ``(values, MfccConfig)``, refusing features computed from other cycles."""
    work_dir = Path(work_dir)
    meta = read_json(work_dir / MFCC_META)
    if cycles is not None and meta["cycles_digest"] != cycles.digest:
        raise ConfigError("MFCC archive was computed from a different cycle archive; "
                          "rerun extract-features")
    return _read_f32(work_dir / MFCC_BIN, meta["shape"]), MfccConfig(**meta["mfcc"])
