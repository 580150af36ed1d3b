"""
Rotation regime experiment: train on one rotation side, test on the other.

    regime     train   test
    z/z        z       z
    SO3/SO3    so3     so3
    z/SO3      z       so3
    none       none    none

Regimes sharing a training side share one trained model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Sequence

from riconvnet.constants import ROTATION_REGIMES
from riconvnet.data import Dataset
from riconvnet.exceptions import ModelException
from riconvnet.model.metrics import Metrics, accuracy_std, write_csv
from riconvnet.model.networks import NetworkConfig
from riconvnet.model.trainer import TrainConfig, TrainResult, evaluate, train

logger = logging.getLogger("riconvnet")


@dataclass
class RegimeRow:
    regime: str
    train_rotation: str
    test_rotation: str
    metrics: Metrics


@dataclass
class ExperimentResult:
    rows: List[RegimeRow] = field(default_factory=list)
    accuracy_std: float = 0.0
    # Trained models by training side
    trained: Dict[str, TrainResult] = field(default_factory=dict)

    def accuracies(self) -> Dict[str, float]:
        return {row.regime: row.metrics.overall_accuracy for row in self.rows}

    def max_gap(self) -> float:
        values = list(self.accuracies().values())
        return max(values) - min(values) if values else 0.0

    def table(self) -> str:
        lines = [f"{'regime':<10} {'train':<6} {'test':<6} {'accuracy':>9}"]
        for row in self.rows:
            line = (
                f"{row.regime:<10} {row.train_rotation:<6} {row.test_rotation:<6}"
                f" {row.metrics.overall_accuracy:>9.4f}"
            )
            if row.metrics.mean_per_class_iou is not None:
                line += f"  mIoU {row.metrics.mean_per_class_iou:.4f}"
            lines.append(line)
        lines.append(f"{'acc. std':<24} {self.accuracy_std:>9.4f}")
        return "\n".join(lines)


def run_experiment(
    net: NetworkConfig,
    tcfg: TrainConfig,
    dataset: Dataset,
    regimes: Sequence[str],
) -> ExperimentResult:
    if not regimes:
        raise ModelException("An experiment needs at least one rotation regime.")
    unknown = [regime for regime in regimes if regime not in ROTATION_REGIMES]
    if unknown:
        raise ModelException(
            f"Unknown rotation regime(s) {unknown}, expected {list(ROTATION_REGIMES)}."
        )
    result = ExperimentResult()
    for regime in regimes:
        train_side, test_side = ROTATION_REGIMES[regime]
        if train_side not in result.trained:
            logger.info(f"🔁 Training for the '{train_side}' side ({regime})")
            result.trained[train_side] = train(
                net, replace(tcfg, rotation_regime=regime), dataset
            )
        trained = result.trained[train_side]
        metrics = evaluate(
            trained.params, net, dataset, regime, tcfg.seed, tcfg.batch_size
        )
        result.rows.append(RegimeRow(regime, train_side, test_side, metrics))
    result.accuracy_std = accuracy_std(
        [row.metrics.overall_accuracy for row in result.rows]
    )
    for row in result.rows:
        row.metrics.accuracy_std_across_regimes = result.accuracy_std
    logger.info(f"📋 Regime table\n{result.table()}")
    return result


def write_experiment_csv(path: str, result: ExperimentResult) -> None:
    rows = [
        [
            row.regime,
            row.train_rotation,
            row.test_rotation,
            row.metrics.overall_accuracy,
            row.metrics.mean_per_class_iou,
            result.accuracy_std,
        ]
        for row in result.rows
    ]
    write_csv(
        path,
        "experiment",
        [
            "regime",
            "train_rotation",
            "test_rotation",
            "overall_accuracy",
            "mean_per_class_iou",
            "accuracy_std",
        ],
        rows,
    )
