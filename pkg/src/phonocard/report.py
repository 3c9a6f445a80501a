"""
Result tables as comma-separated files and aligned plain-text tables.

Layouts follow the usual reporting for this task: per-class precision,
recall and F1 (cycle or patient level), one summary row per fold with an
average row, and one summary row per ablation variant.
"""

from __future__ import annotations

import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .archive import read_json, write_csv, write_json
from .training import Metrics

SUMMARY_COLUMNS = ("Accuracy", "Sensitivity", "Specificity", "MACC")
CLASS_COLUMNS = ("Class", "Precision", "Recall", "F1-Score")
HISTORY_COLUMNS = ("epoch", "loss", "accuracy", "sensitivity", "specificity", "macc")


def _fmt(v):
    return f"{v:.2f}" if isinstance(v, (float, np.floating)) else str(v)


def format_table(header, rows) -> str:
    """Fixed-width text table with a rule under the header."""
    cells = [[_fmt(c) for c in header]] + [[_fmt(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                       for i, (c, w) in enumerate(zip(r, widths))) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def summary_row(label: str, m: Metrics):
    return (label, m.accuracy, m.sensitivity, m.specificity, m.macc)


def class_rows(m: Metrics):
    return m.class_rows()


def fold_table(per_fold: list[tuple[str, Metrics]]):
    """Rows for every fold followed by their column-wise average."""
    rows = [summary_row(name, m) for name, m in per_fold]
    if len(rows) > 1:
        avg = np.mean([r[1:] for r in rows], axis=0)
        rows.append(("Average", *map(float, avg)))
    return rows


def write_class_report(path, m: Metrics) -> None:
    write_csv(path, CLASS_COLUMNS, [(c, *(round(v, 4) for v in vals))
                                    for c, *vals in class_rows(m)])


def write_summary(path, first_column: str, rows) -> None:
    write_csv(path, (first_column, *SUMMARY_COLUMNS),
              [(r[0], *(round(v, 4) for v in r[1:])) for r in rows])


def write_confusion(path, m: Metrics) -> None:
    write_csv(path, ("truth", "predicted_Abnormal", "predicted_Normal"),
              [("Abnormal", m.tp, m.fn), ("Normal", m.fp, m.tn)])


def write_history(path, history) -> None:
    write_csv(path, HISTORY_COLUMNS, [[rec[k] for k in HISTORY_COLUMNS] for rec in history])


def write_predictions(path, record_ids, patient_ids, cycle_index, labels, probs) -> None:
    rows = [(r, p, int(c), "Abnormal" if y else "Normal", f"{q:.6f}")
            for r, p, c, y, q in zip(record_ids, patient_ids, cycle_index, labels, probs)]
    write_csv(path, ("record_id", "patient_id", "cycle_index", "label", "p_abnormal"), rows)


def provenance(config: dict, **extra) -> dict:
    """Resolved config plus the code and library versions that produced an artifact."""
    return {
        "config": config,
        "seed": config.get("seed"),
        "version": __version__,
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "platform": platform.platform(terse=True),
        **extra,
    }


def write_provenance(directory, stage: str, config: dict, **extra) -> None:
    """Record ``stage``'s provenance in the directory's provenance.json.

    The file maps stage name to record, so a work directory shared by
    ``prepare`` and ``extract-features`` keeps both.
    """
    path = Path(directory) / "provenance.json"
    doc = read_json(path) if path.exists() else {}
    doc[stage] = provenance(config, **extra)
    write_json(path, doc)
