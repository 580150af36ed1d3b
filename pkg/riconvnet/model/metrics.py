"""
Accuracy, part IoU and the CSV files they are reported in.

Every CSV starts with a schema comment line followed by a header row. Floats
are written with 17 significant digits so that reruns are byte-identical.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from riconvnet.constants import METRICS_SCHEMA_VERSION
from riconvnet.helpers import format_float, mean

logger = logging.getLogger("riconvnet")

Labels = NDArray[np.int64]


@dataclass
class Metrics:
    overall_accuracy: float
    per_class_accuracy: Dict[str, float] = field(default_factory=dict)
    accuracy_std_across_regimes: float = 0.0
    mean_per_class_iou: Optional[float] = None
    loss: Optional[float] = None

    def __post_init__(self):
        fractions = [self.overall_accuracy, *self.per_class_accuracy.values()]
        if self.mean_per_class_iou is not None:
            fractions.append(self.mean_per_class_iou)
        assert all(0.0 <= value <= 1.0 for value in fractions), fractions

    def summary(self) -> str:
        text = f"accuracy {self.overall_accuracy:.4f}"
        if self.mean_per_class_iou is not None:
            text += f", mIoU {self.mean_per_class_iou:.4f}"
        if self.loss is not None:
            text += f", loss {self.loss:.4f}"
        return text


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    validation: Optional[Metrics] = None


# Accuracy
# \________


def accuracy(predicted: Labels, expected: Labels) -> float:
    predicted, expected = np.asarray(predicted), np.asarray(expected)
    if expected.size == 0:
        return 0.0
    return float(np.mean(predicted == expected))


def per_class_accuracy(
    predicted: Labels, expected: Labels, class_names: Sequence[str]
) -> Dict[str, float]:
    # Classes without samples are left out
    predicted, expected = np.asarray(predicted), np.asarray(expected)
    return {
        name: accuracy(predicted[expected == label], expected[expected == label])
        for label, name in enumerate(class_names)
        if np.any(expected == label)
    }


def accuracy_std(accuracies: Sequence[float]) -> float:
    # Population standard deviation over the regimes
    if not accuracies:
        return 0.0
    return float(np.std(np.asarray(accuracies, dtype=np.float64)))


# Part IoU
# \________


def shape_iou(predicted: Labels, expected: Labels, parts: Sequence[int]) -> float:
    """
    Mean IoU over the parts of the shape category. A part absent from both
    prediction and ground truth counts as a perfect match.
    """
    ious = []
    for part in parts:
        predicted_mask = predicted == part
        expected_mask = expected == part
        union = np.sum(predicted_mask | expected_mask)
        if union == 0:
            ious.append(1.0)
        else:
            ious.append(float(np.sum(predicted_mask & expected_mask) / union))
    return mean(ious)


def mean_per_class_iou(
    predicted: Sequence[Labels],
    expected: Sequence[Labels],
    class_labels: Sequence[int],
    class_parts: Sequence[Sequence[int]],
) -> float:
    # Shape IoUs averaged per class, then over the classes present
    per_class: Dict[int, List[float]] = {}
    for shape_predicted, shape_expected, label in zip(
        predicted, expected, class_labels
    ):
        per_class.setdefault(label, []).append(
            shape_iou(
                np.asarray(shape_predicted),
                np.asarray(shape_expected),
                class_parts[label],
            )
        )
    return mean([mean(ious) for _, ious in sorted(per_class.items())])


# CSV files
# \_________


def schema_line(kind: str) -> str:
    return f"# riconvnet {kind} metrics v{METRICS_SCHEMA_VERSION}"


def format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return format_float(float(value))
    return str(value)


def write_csv(
    path: str, kind: str, header: Sequence[str], rows: Sequence[Sequence]
) -> None:
    directory = os.path.dirname(path)
    if directory and not os.path.exists(directory):
        os.makedirs(directory)
    try:
        with open(path, "w", newline="") as outfile:
            outfile.write(schema_line(kind) + "\n")
            writer = csv.writer(outfile, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([format_cell(value) for value in row])
    except EnvironmentError as err:
        logger.error(err)
        raise
    logger.info(f"📊 {kind.capitalize()} metrics written to {path}")


def read_csv(path: str) -> List[Dict[str, str]]:
    with open(path, "r", newline="") as infile:
        lines = [line for line in infile if not line.startswith("#")]
    return list(csv.DictReader(lines))


def write_history_csv(path: str, history: Sequence[EpochRecord]) -> None:
    rows = [
        [
            record.epoch,
            record.train_loss,
            record.train_accuracy,
            None if record.validation is None else record.validation.overall_accuracy,
            None
            if record.validation is None
            else record.validation.mean_per_class_iou,
        ]
        for record in history
    ]
    write_csv(
        path,
        "training",
        ["epoch", "train_loss", "train_accuracy", "val_accuracy", "val_miou"],
        rows,
    )


def write_evaluation_csv(
    path: str, regime: str, metrics: Metrics, class_names: Sequence[str]
) -> None:
    header = ["regime", "overall_accuracy", "mean_per_class_iou", "loss"]
    header += [f"accuracy_{name}" for name in class_names]
    row = [
        regime,
        metrics.overall_accuracy,
        metrics.mean_per_class_iou,
        metrics.loss,
    ]
    row += [metrics.per_class_accuracy.get(name) for name in class_names]
    write_csv(path, "evaluation", header, [row])
