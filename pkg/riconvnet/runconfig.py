"""
Run configuration: one JSON document with the sections network, train,
dataset, experiment and output.

A file only lists the keys it changes, the rest comes from DEFAULT_CONFIG.
Unknown keys and wrongly typed values are rejected with their dotted path
(e.g. `train.epochs`). Empty per-layer lists and zero counts are derived:

    network.n_points          0  -> dataset.n_points
    network.n_classes         0  -> number of dataset classes
    network.n_parts           0  -> number of dataset parts
    network.<per-layer list>  [] -> default plan for n_points/n_layers
    train.batch_size          0  -> 32 (classification), 16 (segmentation)
"""

from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import replace
from typing import (
    Any,
    Dict,
    List,
    Optional,
    Tuple,
    TypedDict,
    cast,
    get_args,
    get_origin,
    get_type_hints,
    is_typeddict,
)

from riconvnet.constants import (
    ADAM_LEARNING_RATE,
    CLS_HEAD_WIDTHS,
    LIFT_MLP_WIDTHS,
    RESULTS_DIR,
    SEG_DECODER_BINS,
    SEG_DECODER_K_NEIGHBORS,
    SHAPE_CLASSES,
    TABLE_REGIMES,
    VALIDATION_FRACTION,
)
from riconvnet.data import (
    Dataset,
    ShapeSpec,
    load_dataset,
    make_dataset,
    part_layout,
    read_manifest,
)
from riconvnet.exceptions import (
    ConfigValueException,
    DataException,
    GeometryException,
    LayerException,
    MissingPathException,
    ModelException,
    UnknownConfigKeyException,
)
from riconvnet.geom import PointCloud, normalize_unit_sphere
from riconvnet.model.networks import (
    NetworkConfig,
    classification_config,
    segmentation_config,
)
from riconvnet.model.trainer import TrainConfig

logger = logging.getLogger("riconvnet")


# Schema
# \______


class NetworkSection(TypedDict):
    task: str
    n_points: int
    n_layers: int
    classifier_mode: str
    feature_mode: str
    use_lift_mlp: bool
    lift_mlp_widths: List[int]
    n_representatives: List[int]
    k_neighbors: List[int]
    n_bins: List[int]
    out_channels: List[int]
    head_widths: List[int]
    dropout: float
    n_classes: int
    n_parts: int
    decoder_k_neighbors: int
    decoder_n_bins: int
    decoder_mlp_widths: List[int]
    decoder_out_channels: List[int]


class TrainSection(TypedDict):
    batch_size: int
    epochs: int
    learning_rate: float
    seed: int
    rotation_regime: str
    validation_fraction: float


class DatasetSection(TypedDict):
    classes: List[str]
    n_points: int
    per_class_train: int
    per_class_test: int
    jitter_sigma: float
    seed: int
    with_parts: bool
    normalize: bool
    data_dir: str


class ExperimentSection(TypedDict):
    regimes: List[str]


class OutputSection(TypedDict):
    dir: str
    checkpoint: str
    metrics_csv: str


class RunConfig(TypedDict):
    network: NetworkSection
    train: TrainSection
    dataset: DatasetSection
    experiment: ExperimentSection
    output: OutputSection


DEFAULT_CONFIG: RunConfig = {
    "network": {
        "task": "classification",
        "n_points": 0,
        "n_layers": 3,
        "classifier_mode": "multi_vector",
        "feature_mode": "full",
        "use_lift_mlp": True,
        "lift_mlp_widths": list(LIFT_MLP_WIDTHS),
        "n_representatives": [],
        "k_neighbors": [],
        "n_bins": [],
        "out_channels": [],
        "head_widths": list(CLS_HEAD_WIDTHS),
        "dropout": 0.0,
        "n_classes": 0,
        "n_parts": 0,
        "decoder_k_neighbors": SEG_DECODER_K_NEIGHBORS,
        "decoder_n_bins": SEG_DECODER_BINS,
        "decoder_mlp_widths": [],
        "decoder_out_channels": [],
    },
    "train": {
        "batch_size": 0,
        "epochs": 50,
        "learning_rate": ADAM_LEARNING_RATE,
        "seed": 0,
        "rotation_regime": "z/z",
        "validation_fraction": VALIDATION_FRACTION,
    },
    "dataset": {
        "classes": list(SHAPE_CLASSES),
        "n_points": 1024,
        "per_class_train": 40,
        "per_class_test": 20,
        "jitter_sigma": 0.01,
        "seed": 0,
        "with_parts": False,
        "normalize": True,
        "data_dir": "",
    },
    "experiment": {"regimes": list(TABLE_REGIMES)},
    "output": {
        "dir": RESULTS_DIR,
        "checkpoint": "model.npz",
        "metrics_csv": "metrics.csv",
    },
}


# Loading
# \_______


def check_value(value: Any, hint: Any, path: str) -> Any:
    if is_typeddict(hint):
        if not isinstance(value, dict):
            raise ConfigValueException(f"'{path}' should be a section (JSON object).")
        return value
    origin = get_origin(hint)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigValueException(f"'{path}' should be a list, got {value!r}.")
        (item_hint,) = get_args(hint)
        return [
            check_value(item, item_hint, f"{path}[{i}]")
            for i, item in enumerate(value)
        ]
    if hint is bool:
        valid = isinstance(value, bool)
    elif hint is int:
        valid = isinstance(value, int) and not isinstance(value, bool)
    elif hint is float:
        valid = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if valid else value
    else:
        valid = isinstance(value, hint)
    if not valid:
        raise ConfigValueException(
            f"'{path}' should be of type {hint.__name__}, got {value!r}."
        )
    return value


def merge_section(defaults: Dict, values: Dict, schema: Any, prefix: str = "") -> Dict:
    merged = copy.deepcopy(defaults)
    hints = get_type_hints(schema)
    for key, value in values.items():
        path = f"{prefix}{key}"
        if key not in hints:
            raise UnknownConfigKeyException(
                f"Unknown configuration key '{path}', expected one of"
                f" {sorted(hints)}."
            )
        value = check_value(value, hints[key], path)
        if is_typeddict(hints[key]):
            value = merge_section(defaults[key], value, hints[key], f"{path}.")
        merged[key] = value
    return merged


def parse_config(document: Dict) -> RunConfig:
    if not isinstance(document, dict):
        raise ConfigValueException("A configuration is a JSON object of sections.")
    merged = merge_section(dict(DEFAULT_CONFIG), document, RunConfig)
    return cast(RunConfig, merged)


def load_config(config_file: str) -> RunConfig:
    if not os.path.exists(config_file):
        raise MissingPathException(f"Configuration file '{config_file}' does not exist.")
    try:
        with open(config_file, "r") as config:
            document = json.load(config)
    except json.JSONDecodeError as err:
        raise ConfigValueException(
            f"{config_file}:{err.lineno}: invalid JSON ({err.msg})."
        ) from err
    except EnvironmentError as err:
        logger.error(err)
        raise
    logger.debug(f"Configuration loaded from {config_file}")
    return parse_config(document)


def apply_overrides(
    config: RunConfig,
    seed: Optional[int] = None,
    epochs: Optional[int] = None,
    regime: Optional[str] = None,
) -> RunConfig:
    config = copy.deepcopy(config)
    if seed is not None:
        config["train"]["seed"] = seed
        config["dataset"]["seed"] = seed
    if epochs is not None:
        config["train"]["epochs"] = epochs
    if regime is not None:
        config["train"]["rotation_regime"] = regime
        config["experiment"]["regimes"] = [regime]
    return config


# Building
# \________


def build_dataset(config: RunConfig) -> Dataset:
    section = config["dataset"]
    try:
        if section["data_dir"]:
            if not os.path.isdir(section["data_dir"]):
                raise MissingPathException(
                    f"dataset.data_dir '{section['data_dir']}' is not a directory."
                )
            dataset = load_dataset(section["data_dir"])
            if section["normalize"]:
                dataset.train = [normalized(cloud) for cloud in dataset.train]
                dataset.test = [normalized(cloud) for cloud in dataset.test]
            return dataset
        return make_dataset(
            section["classes"],
            section["per_class_train"],
            section["per_class_test"],
            section["jitter_sigma"],
            section["seed"],
            n_points=section["n_points"],
            with_parts=section["with_parts"],
        )
    except (DataException, GeometryException) as err:
        raise ConfigValueException(f"dataset: {err}") from err


def dataset_counts(config: RunConfig) -> Tuple[int, int]:
    """
    Number of classes and parts of the configured dataset, read from the
    manifest or the shape classes without generating any cloud.
    """
    section = config["dataset"]
    try:
        if section["data_dir"]:
            manifest = read_manifest(section["data_dir"])
            return len(manifest["class_names"]), len(manifest["part_names"])
        for name in section["classes"]:
            ShapeSpec(name, section["n_points"])
        part_names = part_layout(section["classes"])[0] if section["with_parts"] else []
        return len(section["classes"]), len(part_names)
    except DataException as err:
        raise ConfigValueException(f"dataset: {err}") from err


def normalized(cloud: PointCloud) -> PointCloud:
    points = normalize_unit_sphere(cloud).points
    return PointCloud(
        points=points, part_labels=cloud.part_labels, class_label=cloud.class_label
    )


def dataset_points(dataset: Dataset) -> int:
    sizes = {len(cloud) for cloud in dataset.train + dataset.test}
    if len(sizes) != 1:
        raise ConfigValueException(
            f"dataset: clouds of a dataset share one size, got {sorted(sizes)}."
        )
    return sizes.pop()


PER_LAYER_KEYS = ("n_representatives", "k_neighbors", "n_bins", "out_channels")


def build_network_config(config: RunConfig, dataset: Dataset) -> NetworkConfig:
    section = config["network"]
    net = network_config(
        config,
        section["n_points"] or dataset_points(dataset),
        section["n_classes"] or dataset.n_classes,
        section["n_parts"] or dataset.n_parts,
    )
    if net.n_points != dataset_points(dataset):
        raise ConfigValueException(
            f"network.n_points {net.n_points} does not match the"
            f" {dataset_points(dataset)} point dataset."
        )
    return net


def network_config(
    config: RunConfig, n_points: int, n_classes: int, n_parts: int
) -> NetworkConfig:
    section = config["network"]
    try:
        if section["task"] == "segmentation":
            net = segmentation_config(
                n_classes,
                n_parts,
                n_points=n_points,
                n_layers=section["n_layers"],
                feature_mode=section["feature_mode"],
                use_lift_mlp=section["use_lift_mlp"],
                lift_mlp_widths=section["lift_mlp_widths"],
                decoder_k_neighbors=section["decoder_k_neighbors"],
                decoder_n_bins=section["decoder_n_bins"],
                decoder_mlp_widths=section["decoder_mlp_widths"] or None,
                decoder_out_channels=section["decoder_out_channels"] or None,
            )
        elif section["task"] == "classification":
            net = classification_config(
                n_classes,
                n_points=n_points,
                n_layers=section["n_layers"],
                classifier_mode=section["classifier_mode"],
                feature_mode=section["feature_mode"],
                use_lift_mlp=section["use_lift_mlp"],
                lift_mlp_widths=section["lift_mlp_widths"],
                head_widths=section["head_widths"],
                dropout=section["dropout"],
            )
        else:
            raise ConfigValueException(
                f"network.task should be 'classification' or 'segmentation', got"
                f" '{section['task']}'."
            )
        for key in PER_LAYER_KEYS:
            values = section[key]  # type: ignore[literal-required]
            if not values:
                continue
            if len(values) != net.n_layers:
                raise ConfigValueException(
                    f"network.{key} lists {len(values)} values for {net.n_layers}"
                    " layers."
                )
            net.layer_configs = [
                replace(cfg, **{key: value})
                for cfg, value in zip(net.layer_configs, values)
            ]
        if net.task == "segmentation":
            sizes = net.stage_sizes
            for j, decoder in enumerate(net.decoder_configs):
                fine = sizes[net.n_layers - 1 - j]
                k = min(decoder.conv.k_neighbors, fine)
                decoder.conv = replace(
                    decoder.conv,
                    n_representatives=fine,
                    k_neighbors=k,
                    n_bins=min(decoder.conv.n_bins, k),
                )
        net.validate()
    except (ModelException, LayerException) as err:
        raise ConfigValueException(f"network: {err}") from err
    return net


def build_train_config(config: RunConfig, task: str) -> TrainConfig:
    section = config["train"]
    values = dict(section)
    if not values["batch_size"]:
        values["batch_size"] = TrainConfig.for_task(task).batch_size
    tcfg = TrainConfig(**values)  # type: ignore[arg-type]
    try:
        tcfg.validate()
    except ModelException as err:
        raise ConfigValueException(f"train: {err}") from err
    return tcfg


def output_path(config: RunConfig, key: str) -> str:
    section = config["output"]
    return os.path.join(section["dir"], section[key])  # type: ignore[literal-required]
