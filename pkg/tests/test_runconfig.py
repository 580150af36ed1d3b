import glob
import json

import pytest

from riconvnet.constants import CONFIG_DIR
from riconvnet.data import make_dataset, write_dataset
from riconvnet.exceptions import (
    ConfigValueException,
    MissingPathException,
    UnknownConfigKeyException,
)
from riconvnet.runconfig import (
    DEFAULT_CONFIG,
    apply_overrides,
    build_dataset,
    build_network_config,
    build_train_config,
    load_config,
    output_path,
    parse_config,
)

SMOKE_CONFIG = CONFIG_DIR + "smoke.json"


def write_config(tmp_path, document, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(document, indent=4))
    return str(path)


def smoke_document(**sections):
    with open(SMOKE_CONFIG) as infile:
        document = json.load(infile)
    for section, values in sections.items():
        document.setdefault(section, {}).update(values)
    return document


# =================================
#             Parsing
# =================================


def test_empty_document_is_the_default():
    assert parse_config({}) == DEFAULT_CONFIG


def test_partial_sections_are_merged():
    config = parse_config({"train": {"epochs": 3}})
    assert config["train"]["epochs"] == 3
    assert config["train"]["seed"] == DEFAULT_CONFIG["train"]["seed"]
    assert DEFAULT_CONFIG["train"]["epochs"] == 50


@pytest.mark.parametrize(
    "document,path",
    [
        ({"train": {"epoch": 3}}, "train.epoch"),
        ({"trainer": {}}, "trainer"),
        ({"network": {"bins": [1]}}, "network.bins"),
    ],
)
def test_unknown_keys(document, path):
    with pytest.raises(UnknownConfigKeyException, match=f"'{path}'"):
        parse_config(document)


@pytest.mark.parametrize(
    "document,path",
    [
        ({"train": {"epochs": "3"}}, "train.epochs"),
        ({"train": {"epochs": True}}, "train.epochs"),
        ({"train": {"epochs": 2.5}}, "train.epochs"),
        ({"network": {"out_channels": [16, "a"]}}, r"network.out_channels\[1\]"),
        ({"network": {"use_lift_mlp": 1}}, "network.use_lift_mlp"),
        ({"dataset": {"classes": "sphere"}}, "dataset.classes"),
        ({"train": 3}, "train"),
    ],
)
def test_wrong_types(document, path):
    with pytest.raises(ConfigValueException, match=f"'{path}'"):
        parse_config(document)


def test_integers_are_accepted_as_floats():
    config = parse_config({"train": {"learning_rate": 1}})
    assert config["train"]["learning_rate"] == 1.0
    assert isinstance(config["train"]["learning_rate"], float)


def test_document_must_be_an_object():
    with pytest.raises(ConfigValueException):
        parse_config([])


def test_json_errors_carry_the_line(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{\n    "train": {\n        "epochs": ,\n    }\n}\n')
    with pytest.raises(ConfigValueException, match=":3:"):
        load_config(str(path))


def test_missing_config_file(tmp_path):
    with pytest.raises(MissingPathException):
        load_config(str(tmp_path / "nowhere.json"))


def test_overrides():
    config = load_config(SMOKE_CONFIG)
    overridden = apply_overrides(config, seed=4, epochs=7, regime="z/SO3")
    assert overridden["train"]["seed"] == 4
    assert overridden["dataset"]["seed"] == 4
    assert overridden["train"]["epochs"] == 7
    assert overridden["train"]["rotation_regime"] == "z/SO3"
    assert overridden["experiment"]["regimes"] == ["z/SO3"]
    assert config["train"]["epochs"] == 1
    assert apply_overrides(config) == config


def test_output_path():
    config = parse_config({"output": {"dir": "out/run/"}})
    assert output_path(config, "checkpoint") == "out/run/model.npz"


# =================================
#             Building
# =================================


@pytest.mark.parametrize("config_file", sorted(glob.glob(CONFIG_DIR + "*.json")))
def test_shipped_configs_build(config_file):
    config = load_config(config_file)
    dataset = build_dataset(config)
    net = build_network_config(config, dataset)
    tcfg = build_train_config(config, net.task)
    assert net.n_points == config["dataset"]["n_points"]
    assert net.task == config["network"]["task"]
    assert tcfg.epochs == config["train"]["epochs"]


def test_per_layer_lists_are_applied(tmp_path):
    config = load_config(write_config(tmp_path, smoke_document()))
    net = build_network_config(config, build_dataset(config))
    assert [cfg.out_channels for cfg in net.layer_configs] == [16, 32]
    assert [cfg.lift_mlp_widths for cfg in net.layer_configs] == [[8], [8]]
    assert net.head_widths == [16]
    assert net.n_classes == 2


def test_derived_counts(tmp_path):
    document = smoke_document(network={"n_points": 0, "n_classes": 0})
    config = load_config(write_config(tmp_path, document))
    net = build_network_config(config, build_dataset(config))
    assert net.n_points == 64
    assert net.n_classes == 2


@pytest.mark.parametrize(
    "network,message",
    [
        ({"out_channels": [16]}, "network.out_channels"),
        ({"task": "detection"}, "network.task"),
        ({"classifier_mode": "attention"}, "network:"),
        ({"n_points": 128}, "network.n_points"),
        ({"k_neighbors": [64, 32]}, "network:"),
    ],
)
def test_network_errors(tmp_path, network, message):
    config = load_config(write_config(tmp_path, smoke_document(network=network)))
    with pytest.raises(ConfigValueException, match=message):
        build_network_config(config, build_dataset(config))


def test_segmentation_decoder_follows_encoder(tmp_path):
    document = smoke_document(
        network={
            "task": "segmentation",
            "n_representatives": [16, 4],
            "k_neighbors": [16, 4],
            "n_bins": [2, 1],
            "decoder_mlp_widths": [8, 8],
            "decoder_out_channels": [8, 8],
        },
        dataset={"classes": ["cylinder"], "with_parts": True},
    )
    config = load_config(write_config(tmp_path, document))
    net = build_network_config(config, build_dataset(config))
    assert net.stage_sizes == [64, 16, 4]
    assert [cfg.conv.n_representatives for cfg in net.decoder_configs] == [16, 64]
    assert net.n_parts == 2


def test_batch_size_default_per_task():
    config = parse_config({"network": {"task": "segmentation"}})
    assert build_train_config(config, "segmentation").batch_size == 16
    assert build_train_config(parse_config({}), "classification").batch_size == 32


def test_train_errors():
    with pytest.raises(ConfigValueException, match="train:"):
        build_train_config(parse_config({"train": {"epochs": 0}}), "classification")


def test_dataset_errors(tmp_path):
    with pytest.raises(ConfigValueException, match="dataset:"):
        build_dataset(parse_config({"dataset": {"classes": ["pyramid"]}}))
    with pytest.raises(MissingPathException):
        build_dataset(parse_config({"dataset": {"data_dir": str(tmp_path / "none")}}))


def test_dataset_from_directory(tmp_path):
    dataset = make_dataset(["cone"], 2, 1, 0.0, 0, n_points=32, with_parts=True)
    write_dataset(dataset, str(tmp_path / "cones"))
    config = parse_config({"dataset": {"data_dir": str(tmp_path / "cones")}})
    loaded = build_dataset(config)
    assert loaded.class_names == ["cone"]
    assert len(loaded.train) == 2
    assert loaded.part_names == ["cone/lateral", "cone/base"]
