from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from riconvnet.autodiff import AdamHyper, AdamState, Mode, SoftmaxCrossEntropy, adam_step
from riconvnet.constants import (
    ADAM_LEARNING_RATE,
    CLS_BATCH_SIZE,
    ROTATION_REGIMES,
    SEG_BATCH_SIZE,
    VALIDATION_FRACTION,
)
from riconvnet.data import Dataset
from riconvnet.exceptions import DivergenceException, ModelException
from riconvnet.geom import PointCloud, sample_rotation
from riconvnet.helpers import make_rng
from riconvnet.model.metrics import (
    EpochRecord,
    Metrics,
    accuracy,
    mean_per_class_iou,
    per_class_accuracy,
)
from riconvnet.model.networks import (
    Network,
    NetworkConfig,
    NetworkParams,
    build_network,
    init_network_params,
)

logger = logging.getLogger("riconvnet")


@dataclass
class TrainConfig:
    batch_size: int = CLS_BATCH_SIZE
    epochs: int = 1
    learning_rate: float = ADAM_LEARNING_RATE
    seed: int = 0
    rotation_regime: str = "z/z"
    validation_fraction: float = VALIDATION_FRACTION

    @classmethod
    def for_task(cls, task: str, **kwargs) -> TrainConfig:
        batch_size = SEG_BATCH_SIZE if task == "segmentation" else CLS_BATCH_SIZE
        return cls(**{"batch_size": batch_size, **kwargs})

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ModelException(f"Batch size must be positive, got {self.batch_size}.")
        if self.epochs < 1:
            raise ModelException(f"Need at least one epoch, got {self.epochs}.")
        if self.learning_rate <= 0:
            raise ModelException(
                f"Learning rate must be positive: {self.learning_rate}."
            )
        if self.seed < 0:
            raise ModelException(f"Seeds are non-negative, got {self.seed}.")
        if self.rotation_regime not in ROTATION_REGIMES:
            raise ModelException(
                f"Unknown rotation regime '{self.rotation_regime}', expected one of"
                f" {list(ROTATION_REGIMES)}."
            )
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ModelException(
                f"Validation fraction {self.validation_fraction} not in [0, 1)."
            )

    @property
    def train_rotation(self) -> str:
        return ROTATION_REGIMES[self.rotation_regime][0]


@dataclass
class TrainResult:
    params: NetworkParams
    history: List[EpochRecord] = field(default_factory=list)
    # 1-based epoch whose parameters were kept
    best_epoch: int = 0


# Batches
# \_______


def rotated_points(
    clouds: Sequence[PointCloud], rotation: str, rng: np.random.Generator
) -> np.ndarray:
    return np.stack(
        [sample_rotation(rotation, rng).apply(cloud.points) for cloud in clouds]
    )


def batch_targets(net: NetworkConfig, clouds: Sequence[PointCloud]) -> np.ndarray:
    if net.task == "classification":
        return np.array([cloud.class_label for cloud in clouds], dtype=np.int64)
    if any(cloud.part_labels is None for cloud in clouds):
        raise ModelException("Segmentation needs part labels on every cloud.")
    return np.stack([cloud.part_labels for cloud in clouds])


def loss_layer(logits: np.ndarray, targets: np.ndarray) -> SoftmaxCrossEntropy:
    if targets.ndim == 1:
        # Every final vector of a cloud carries the cloud label
        targets = np.broadcast_to(targets[:, None], logits.shape[:2])
    return SoftmaxCrossEntropy(targets)


def predictions(logits: np.ndarray, task: str) -> np.ndarray:
    if task == "classification":
        return np.argmax(logits.mean(axis=1), axis=-1)
    return np.argmax(logits, axis=-1)


# Evaluation
# \__________


def evaluate_clouds(
    network: Network,
    dataset: Dataset,
    clouds: Sequence[PointCloud],
    rotation: str,
    rng: np.random.Generator,
    batch_size: int,
) -> Metrics:
    net = network.net
    network.set_mode(Mode.INFERENCE)
    predicted: List[np.ndarray] = []
    losses: List[Tuple[float, int]] = []
    for start in range(0, len(clouds), batch_size):
        batch = clouds[start : start + batch_size]
        logits = network.forward(rotated_points(batch, rotation, rng))
        targets = batch_targets(net, batch)
        losses.append((float(loss_layer(logits, targets).forward(logits)), len(batch)))
        predicted += list(predictions(logits, net.task))
    class_labels = np.array([cloud.class_label for cloud in clouds], dtype=np.int64)
    loss = sum(value * count for value, count in losses) / max(len(clouds), 1)
    if net.task == "classification":
        prediction_array = np.array(predicted, dtype=np.int64)
        return Metrics(
            overall_accuracy=accuracy(prediction_array, class_labels),
            per_class_accuracy=per_class_accuracy(
                prediction_array, class_labels, dataset.class_names
            ),
            loss=loss,
        )
    expected = [cloud.part_labels for cloud in clouds]
    point_accuracy = {
        name: accuracy(
            np.concatenate([p for p, c in zip(predicted, class_labels) if c == label]),
            np.concatenate([e for e, c in zip(expected, class_labels) if c == label]),
        )
        for label, name in enumerate(dataset.class_names)
        if np.any(class_labels == label)
    }
    return Metrics(
        overall_accuracy=accuracy(np.concatenate(predicted), np.concatenate(expected)),
        per_class_accuracy=point_accuracy,
        mean_per_class_iou=mean_per_class_iou(
            predicted, expected, list(class_labels), dataset.class_parts
        ),
        loss=loss,
    )


def evaluate(
    params: NetworkParams,
    net: NetworkConfig,
    dataset: Dataset,
    rotation_regime: str,
    seed: int = 0,
    batch_size: Optional[int] = None,
) -> Metrics:
    """
    Metrics on the test split, every cloud rotated by the test side of the
    regime.
    """
    if rotation_regime not in ROTATION_REGIMES:
        raise ModelException(f"Unknown rotation regime '{rotation_regime}'.")
    if not dataset.test:
        raise ModelException("Cannot evaluate on an empty test split.")
    network = build_network(net, params, seed)
    batch_size = batch_size or TrainConfig.for_task(net.task).batch_size
    metrics = evaluate_clouds(
        network,
        dataset,
        dataset.test,
        ROTATION_REGIMES[rotation_regime][1],
        make_rng(seed, "evaluate", rotation_regime),
        batch_size,
    )
    logger.info(f"🧪 {rotation_regime}: {metrics.summary()}")
    return metrics


# Training
# \________


def split_validation(
    clouds: Sequence[PointCloud], fraction: float, rng: np.random.Generator
) -> Tuple[List[PointCloud], List[PointCloud]]:
    order = rng.permutation(len(clouds))
    n_validation = math.floor(fraction * len(clouds))
    validation = [clouds[i] for i in sorted(order[:n_validation])]
    train = [clouds[i] for i in sorted(order[n_validation:])]
    return train, validation


def train(
    net: NetworkConfig,
    tcfg: TrainConfig,
    dataset: Dataset,
    params: Optional[NetworkParams] = None,
) -> TrainResult:
    net.validate()
    tcfg.validate()
    if not dataset.train:
        raise ModelException("Cannot train on an empty dataset.")
    rng = make_rng(tcfg.seed, "split")
    train_clouds, validation_clouds = split_validation(
        dataset.train, tcfg.validation_fraction, rng
    )
    if not train_clouds:
        raise ModelException("The validation split leaves no training cloud.")
    if not validation_clouds:
        logger.warning(
            "⚠️ Empty validation split, the last epoch parameters are kept."
        )
    params = params if params is not None else init_network_params(net, tcfg.seed)
    network = build_network(net, params, tcfg.seed)
    hyper = AdamHyper(learning_rate=tcfg.learning_rate)
    state = AdamState()
    result = TrainResult(params=params)
    best_accuracy = -1.0
    best_snapshot = None
    logger.info(
        f"🏋️ Training {net.describe()} for {tcfg.epochs} epoch(s),"
        f" {len(train_clouds)} clouds, regime {tcfg.rotation_regime}"
    )

    for epoch in range(1, tcfg.epochs + 1):
        epoch_rng = make_rng(tcfg.seed, "epoch", epoch)
        order = epoch_rng.permutation(len(train_clouds))
        losses, correct, seen = [], 0.0, 0
        for start in range(0, len(order), tcfg.batch_size):
            batch = [train_clouds[i] for i in order[start : start + tcfg.batch_size]]
            points = rotated_points(batch, tcfg.train_rotation, epoch_rng)
            targets = batch_targets(net, batch)
            network.set_mode(Mode.TRAINING)
            network.zero_grad()
            logits = network.forward(points)
            loss = loss_layer(logits, targets)
            value = float(loss.forward(logits))
            if not math.isfinite(value):
                raise DivergenceException(
                    f"Loss became {value} at epoch {epoch}, batch"
                    f" {start // tcfg.batch_size} (seed {tcfg.seed})."
                )
            network.backward(loss.backward())
            adam_step(network.parameters(), state, hyper)
            losses.append(value * len(batch))
            batch_accuracy = accuracy(predictions(logits, net.task), targets)
            correct += batch_accuracy * len(batch)
            seen += len(batch)
            logger.debug(
                f"epoch {epoch} batch {start // tcfg.batch_size}: loss {value:.6f}"
            )

        record = EpochRecord(
            epoch=epoch, train_loss=sum(losses) / seen, train_accuracy=correct / seen
        )
        if validation_clouds:
            record.validation = evaluate_clouds(
                network,
                dataset,
                validation_clouds,
                tcfg.train_rotation,
                make_rng(tcfg.seed, "validation"),
                tcfg.batch_size,
            )
            if record.validation.overall_accuracy > best_accuracy:
                best_accuracy = record.validation.overall_accuracy
                best_snapshot = params.copy()
                result.best_epoch = epoch
        result.history.append(record)
        logger.info(
            f"epoch {epoch}/{tcfg.epochs}: loss {record.train_loss:.4f}, accuracy"
            f" {record.train_accuracy:.4f}"
            + (
                f", validation {record.validation.summary()}"
                if record.validation
                else ""
            )
        )

    if best_snapshot is None:
        result.best_epoch = tcfg.epochs
    else:
        params.restore(best_snapshot)
        logger.info(
            f"🏁 Keeping epoch {result.best_epoch} (validation {best_accuracy:.4f})"
        )
    params.set_mode(Mode.INFERENCE)
    return result
