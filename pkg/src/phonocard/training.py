"""
Training loop, balanced batch sampling, and cycle- and patient-level
evaluation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ClassMissing, ConfigError, DivergenceError, InsufficientData
from .model import VARIANTS, DualStreamModel
from .nn.layers import bce_loss
from .nn.optim import AdamState, adam_step
from .signal_io import Label, patient_groups

log = logging.getLogger(__name__)

THRESHOLD = 0.5


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0
    variant: str = "Full"
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError(f"batch size must be even and >= 2, got {self.batch_size}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class Metrics:
    """Confusion counts and derived percentages; Abnormal is the positive class."""

    tp: int
    tn: int
    fp: int
    fn: int
    accuracy: float
    sensitivity: float
    specificity: float
    macc: float
    precision: dict
    recall: dict
    f1: dict
    undefined: tuple = ()

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    def class_rows(self):
        """(class, precision, recall, f1) rows: Abnormal, Normal, Average."""
        rows = [(c.value, self.precision[c.value], self.recall[c.value], self.f1[c.value])
                for c in (Label.ABNORMAL, Label.NORMAL)]
        avg = tuple(float(np.mean([r[i] for r in rows])) for i in (1, 2, 3))
        return rows + [("Average", *avg)]

    def summary(self):
        return {"accuracy": self.accuracy, "sensitivity": self.sensitivity,
                "specificity": self.specificity, "macc": self.macc}

    def to_dict(self):
        return asdict(self)


def _pct(num, den, name, undefined):
    if den == 0:
        undefined.append(name)
        return 0.0
    return 100.0 * num / den


def _f1(p, r):
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def compute_metrics(tp: int, tn: int, fp: int, fn: int) -> Metrics:
    """Percent metrics from confusion counts.

    Empty denominators yield 0 and are listed in ``Metrics.undefined``.
    """
    counts = (tp, tn, fp, fn)
    if any(c < 0 for c in counts):
        raise ValueError(f"negative confusion counts {counts}")
    total = sum(counts)
    if total == 0:
        raise InsufficientData("no predictions to score")
    undef: list[str] = []
    sens = _pct(tp, tp + fn, "sensitivity", undef)
    spec = _pct(tn, tn + fp, "specificity", undef)
    prec_a = _pct(tp, tp + fp, "precision_abnormal", undef)
    prec_n = _pct(tn, tn + fn, "precision_normal", undef)
    return Metrics(
        tp, tn, fp, fn,
        accuracy=100.0 * (tp + tn) / total,
        sensitivity=sens,
        specificity=spec,
        macc=(sens + spec) / 2,
        precision={"Abnormal": prec_a, "Normal": prec_n},
        recall={"Abnormal": sens, "Normal": spec},
        f1={"Abnormal": _f1(prec_a, sens), "Normal": _f1(prec_n, spec)},
        undefined=tuple(undef),
    )


def confusion_counts(predicted, truth):
    predicted = np.asarray(predicted).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if predicted.shape != truth.shape:
        raise ValueError("prediction and truth lengths differ")
    return (int(np.sum(predicted & truth)), int(np.sum(~predicted & ~truth)),
            int(np.sum(predicted & ~truth)), int(np.sum(~predicted & truth)))


def metrics_from_predictions(predicted, truth) -> Metrics:
    return compute_metrics(*confusion_counts(predicted, truth))


def average_rows(rows: Sequence[dict]) -> dict:
    """Column-wise mean of metric rows (e.g. per-fold results)."""
    if not rows:
        raise InsufficientData("nothing to average")
    keys = rows[0].keys()
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


def balanced_batches(labels, batch_size: int, rng) -> list[np.ndarray]:
    """Index batches with exactly ``batch_size / 2`` items from each class.

    One epoch is one pass over the larger class, whose items appear at most
    once (a remainder smaller than half a batch is dropped). The smaller
    class is cycled through fresh permutations until the epoch is filled, so
    its items repeat as evenly as possible.
    """
    labels = np.asarray(labels)
    if batch_size < 2 or batch_size % 2:
        raise ValueError(f"batch size must be even and >= 2, got {batch_size}")
    rng = np.random.default_rng(rng)
    half = batch_size // 2
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if pos.size == 0 or neg.size == 0:
        raise ClassMissing("both classes need at least one example")
    major, minor = (neg, pos) if neg.size >= pos.size else (pos, neg)
    n_batches = max(1, major.size // half)

    def draw(pool, count):
        reps = math.ceil(count / pool.size)
        return np.concatenate([rng.permutation(pool) for _ in range(reps)])[:count]

    major_idx = draw(major, n_batches * half)
    minor_idx = draw(minor, n_batches * half)
    batches = []
    for b in range(n_batches):
        idx = np.concatenate([major_idx[b * half:(b + 1) * half],
                              minor_idx[b * half:(b + 1) * half]])
        batches.append(rng.permutation(idx))
    return batches


def _take(arr, idx):
    return None if arr is None else arr[idx]


@dataclass
class TrainResult:
    model: DualStreamModel
    history: list = field(default_factory=list)
    optimizer: AdamState | None = None


def train(model: DualStreamModel, waves, mfccs, labels, config: TrainConfig,
          on_epoch: Callable | None = None) -> TrainResult:
    """Adam + binary cross-entropy over balanced batches.

    ``on_epoch(epoch, model, record)`` is called after every epoch, which is
    where the caller writes checkpoints. History records hold the mean epoch
    loss and metrics of the training-mode predictions seen in that epoch.
    """
    labels = np.asarray(labels)
    dt = model.dtype
    waves = None if waves is None else np.asarray(waves, dtype=dt)
    mfccs = None if mfccs is None else np.asarray(mfccs, dtype=dt)
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    history = []
    for epoch in range(1, config.epochs + 1):
        losses, preds, truth = [], [], []
        for b, idx in enumerate(balanced_batches(labels, config.batch_size, rng)):
            y = labels[idx]
            p, cache = model.forward(_take(waves, idx), _take(mfccs, idx), training=True)
            loss, dp = bce_loss(p, y)
            if not np.isfinite(loss):
                raise DivergenceError(epoch, b, loss)
            grads = model.backward(cache, dp)
            del cache
            adam_step(model.parameters(), grads, state, config.learning_rate)
            losses.append(loss)
            preds.append(p >= THRESHOLD)
            truth.append(y)
        m = metrics_from_predictions(np.concatenate(preds), np.concatenate(truth))
        record = {"epoch": epoch, "loss": float(np.mean(losses)), **m.summary()}
        history.append(record)
        log.info("epoch %d loss %.4f acc %.2f", epoch, record["loss"], record["accuracy"])
        if on_epoch is not None:
            on_epoch(epoch, model, record)
    return TrainResult(model, history, state)


def evaluate_cycles(model: DualStreamModel, waves, mfccs, labels, batch_size=64):
    """Eval-mode cycle metrics at the 0.5 threshold; also returns the probabilities."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise InsufficientData("empty test set")
    probs = model.predict_proba(waves, mfccs, batch_size)
    return metrics_from_predictions(probs >= THRESHOLD, labels == 1), probs


@dataclass
class PatientPrediction:
    patient_id: str
    cycle_probabilities: np.ndarray
    predicted: Label
    truth: Label | None = None


def aggregate_patient(cycle_probabilities, patient_id: str = "", truth: Label | None = None,
                      rule: str = "majority") -> PatientPrediction:
    """Patient verdict from its cycles.

    ``majority``: Abnormal iff at least as many cycles score >= 0.5 as below
    (ties go to Abnormal). ``mean``: Abnormal iff the mean probability is >= 0.5.
    """
    probs = np.asarray(cycle_probabilities, dtype=np.float64)
    if probs.size == 0:
        raise InsufficientData(f"patient {patient_id!r} has no cycles")
    if rule == "majority":
        n_abn = int(np.sum(probs >= THRESHOLD))
        abnormal = n_abn >= probs.size - n_abn
    elif rule == "mean":
        abnormal = probs.mean() >= THRESHOLD
    else:
        raise ConfigError(f"unknown aggregation rule {rule!r}")
    return PatientPrediction(patient_id, probs, Label.ABNORMAL if abnormal else Label.NORMAL,
                             truth)


def aggregate_patients(probs, labels, patient_ids, rule="majority") -> list[PatientPrediction]:
    labels = np.asarray(labels)
    out = []
    for pid, idx in patient_groups(patient_ids).items():
        truth = set(labels[idx].tolist())
        if len(truth) != 1:
            raise ValueError(f"patient {pid!r} has cycles of both classes")
        out.append(aggregate_patient(np.asarray(probs)[idx], pid,
                                     Label.from_target(truth.pop()), rule))
    return out


def patient_metrics(patients: Sequence[PatientPrediction]) -> Metrics:
    if not patients:
        raise InsufficientData("no patients")
    pred = [p.predicted is Label.ABNORMAL for p in patients]
    truth = [p.truth is Label.ABNORMAL for p in patients]
    return metrics_from_predictions(pred, truth)


def evaluate_patients(model: DualStreamModel, waves, mfccs, labels, patient_ids,
                      rule="majority", batch_size=64):
    """Patient-level metrics; returns ``(metrics, patient_predictions)``."""
    if len(labels) == 0:
        raise InsufficientData("empty test set")
    probs = model.predict_proba(waves, mfccs, batch_size)
    patients = aggregate_patients(probs, labels, patient_ids, rule)
    return patient_metrics(patients), patients
