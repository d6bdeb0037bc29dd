"""Evaluation criterion: 0.67 * macro-F1 + 0.33 * accuracy.

All scores derive from a 7x7 confusion matrix indexed [true, predicted].
Per-class F1 uses the 0/0 -> 0 convention for classes absent from both
truth and predictions. Matrices merge by cell-wise addition, so sharded
evaluation and whole-set evaluation agree exactly. Reports are rounded
half-up to two decimals only at display time; stored values keep full
precision.
"""

import csv
import json
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from .errors import ContractError, DomainError, FormatError
from .labels import CLASS_NAMES, NUM_CLASSES

F1_WEIGHT = 0.67
ACCURACY_WEIGHT = 0.33

REPORT_SCHEMA_VERSION = 1

PREDICTIONS_HEADER = ("path", "frame_index", "true_label", "predicted_label")


def round2(x) -> float:
    """Round half up to 2 decimals (0.005 -> 0.01), on the decimal value."""
    return float(Decimal(repr(float(x))).quantize(Decimal("0.01"),
                                                  rounding=ROUND_HALF_UP))


class ConfusionMatrix:
    """Integer counts, rows = true class, columns = predicted class."""

    def __init__(self, cells=None):
        if cells is None:
            self.cells = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
        else:
            cells = np.asarray(cells)
            if cells.shape != (NUM_CLASSES, NUM_CLASSES):
                raise ContractError(f"confusion matrix must be "
                                    f"{NUM_CLASSES}x{NUM_CLASSES}, got {cells.shape}")
            if np.any(cells < 0) or not np.issubdtype(cells.dtype, np.integer):
                raise ContractError("confusion matrix cells must be non-negative "
                                    "integers")
            self.cells = cells.astype(np.int64).copy()

    def update(self, true_labels, predicted_labels):
        t = np.asarray(true_labels, dtype=np.int64).ravel()
        p = np.asarray(predicted_labels, dtype=np.int64).ravel()
        if t.shape != p.shape:
            raise ContractError(f"label arrays differ in length: "
                                f"{t.shape[0]} vs {p.shape[0]}")
        for arr, kind in ((t, "true"), (p, "predicted")):
            if arr.size and (arr.min() < 0 or arr.max() >= NUM_CLASSES):
                bad = arr[(arr < 0) | (arr >= NUM_CLASSES)][0]
                raise ContractError(f"{kind} label {bad} outside 0..{NUM_CLASSES - 1}")
        np.add.at(self.cells, (t, p), 1)
        return self

    @classmethod
    def from_pairs(cls, true_labels, predicted_labels):
        return cls().update(true_labels, predicted_labels)

    def __add__(self, other):
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return ConfusionMatrix(self.cells + other.cells)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(
            self.cells, other.cells)

    @property
    def total(self) -> int:
        return int(self.cells.sum())

    @property
    def support(self):
        return tuple(int(n) for n in self.cells.sum(axis=1))


def per_class_f1(matrix: ConfusionMatrix) -> np.ndarray:
    """F1 per class; a class with no true and no predicted samples scores 0."""
    cells = matrix.cells.astype(np.float64)
    tp = np.diag(cells)
    fp = cells.sum(axis=0) - tp
    fn = cells.sum(axis=1) - tp
    denom = 2.0 * tp + fp + fn
    return np.where(denom > 0, 2.0 * tp / np.where(denom > 0, denom, 1.0), 0.0)


@dataclass(frozen=True)
class EvalReport:
    per_class_f1: tuple
    macro_f1: float
    total_accuracy: float
    expression_criterion: float
    support: tuple

    def to_json_dict(self):
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "class_names": list(CLASS_NAMES),
            "per_class_f1": list(self.per_class_f1),
            "macro_f1": self.macro_f1,
            "total_accuracy": self.total_accuracy,
            "expression_criterion": self.expression_criterion,
            "support": list(self.support),
        }

    @classmethod
    def from_json_dict(cls, d):
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise FormatError(f"unsupported report schema_version "
                              f"{d.get('schema_version')!r}")
        return cls(per_class_f1=tuple(d["per_class_f1"]),
                   macro_f1=d["macro_f1"],
                   total_accuracy=d["total_accuracy"],
                   expression_criterion=d["expression_criterion"],
                   support=tuple(d["support"]))


def expression_criterion(matrix: ConfusionMatrix) -> EvalReport:
    """Score a confusion matrix; empty matrices have no defined score."""
    if matrix.total == 0:
        raise DomainError("cannot score an empty confusion matrix")
    f1 = per_class_f1(matrix)
    macro = float(f1.mean())
    accuracy = float(np.diag(matrix.cells).sum() / matrix.total)
    criterion = F1_WEIGHT * macro + ACCURACY_WEIGHT * accuracy
    return EvalReport(per_class_f1=tuple(float(v) for v in f1),
                      macro_f1=macro,
                      total_accuracy=accuracy,
                      expression_criterion=float(criterion),
                      support=matrix.support)


def combine_scores(macro_f1: float, accuracy: float) -> float:
    """The scalar criterion on already-computed components."""
    if not 0.0 <= macro_f1 <= 1.0 or not 0.0 <= accuracy <= 1.0:
        raise DomainError(f"scores must lie in [0, 1], got "
                          f"macro_f1={macro_f1}, accuracy={accuracy}")
    return F1_WEIGHT * macro_f1 + ACCURACY_WEIGHT * accuracy


def emit_report(report: EvalReport, format: str = "json") -> str:
    """Render a report; "json" keeps full precision plus the schema tag,
    "table" rounds everything half-up to two decimals."""
    if format == "json":
        return json.dumps(report.to_json_dict(), indent=2)
    if format == "table":
        names = " ".join(CLASS_NAMES)
        f1_row = " ".join(f"{round2(v):.2f}" for v in report.per_class_f1)
        summary = (f"macro_f1 {round2(report.macro_f1):.2f}  "
                   f"total_accuracy {round2(report.total_accuracy):.2f}  "
                   f"expression_criterion {round2(report.expression_criterion):.2f}")
        return "\n".join([names, f1_row, summary])
    raise DomainError(f"unknown report format {format!r}")


def write_predictions(records, path):
    """records: iterable of (path, frame_index_or_None, true, predicted)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(PREDICTIONS_HEADER)
        for image_path, frame_index, true_label, predicted in records:
            writer.writerow([image_path,
                             "" if frame_index is None else frame_index,
                             int(true_label), int(predicted)])
    return path


def read_predictions(path):
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = tuple(next(reader))
        except StopIteration:
            raise FormatError(f"{path}: missing predictions header")
        if header != PREDICTIONS_HEADER:
            raise FormatError(f"{path}: bad predictions header {header!r}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise FormatError(f"{path}: line {lineno}: expected 4 fields")
            p, frame_s, true_s, pred_s = row
            try:
                frame = None if frame_s == "" else int(frame_s)
                records.append((p, frame, int(true_s), int(pred_s)))
            except ValueError:
                raise FormatError(f"{path}: line {lineno}: non-integer field")
    return records
