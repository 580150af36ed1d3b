import json

import numpy as np
import pytest

from riconvnet.cli import Parser, main
from riconvnet.constants import (
    CONFIG_DIR,
    EXIT_CONFIG_ERROR,
    EXIT_OK,
    EXIT_RUNTIME_ERROR,
)
from riconvnet.data import write_xyz
from riconvnet.geom import PointCloud
from riconvnet.model.metrics import read_csv


@pytest.fixture
def smoke_config(tmp_path):
    with open(CONFIG_DIR + "smoke.json") as infile:
        document = json.load(infile)
    document["output"]["dir"] = str(tmp_path / "out")
    path = tmp_path / "smoke.json"
    path.write_text(json.dumps(document, indent=4))
    return str(path)


@pytest.fixture
def trained(smoke_config, tmp_path):
    assert main(["train", "-f", smoke_config]) == EXIT_OK
    return tmp_path / "out"


@pytest.fixture
def cloud_file(tmp_path, rng):
    path = str(tmp_path / "cloud.xyz")
    write_xyz(PointCloud(points=rng.standard_normal((64, 3))), path)
    return path


def test_main_default():
    assert main([]) == EXIT_OK


def test_unknown_regime_is_rejected(smoke_config):
    with pytest.raises(SystemExit):
        main(["train", "-f", smoke_config, "-r", "SO3/z"])


def test_gradcheck(capsys):
    assert main(["gradcheck"]) == EXIT_OK
    output = capsys.readouterr().out
    assert "RIConv" in output
    assert "FAILED" not in output


def test_missing_config_file(tmp_path):
    assert main(["train", "-f", str(tmp_path / "none.json")]) == EXIT_CONFIG_ERROR


def test_invalid_config(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"train": {"epochz": 1}}))
    assert main(["experiment", "-f", str(path)]) == EXIT_CONFIG_ERROR


def test_eval_without_checkpoint(smoke_config):
    assert main(["eval", "-f", smoke_config]) == EXIT_CONFIG_ERROR


def test_gen_data(smoke_config, tmp_path):
    out = tmp_path / "dataset"
    assert main(["gen-data", "-f", smoke_config, "-o", str(out)]) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["train"]) == 8
    assert len(manifest["test"]) == 4


def test_train_outputs(trained):
    assert (trained / "model.npz").exists()
    rows = read_csv(str(trained / "metrics.csv"))
    assert [row["epoch"] for row in rows] == ["1"]


def test_train_is_byte_identical(smoke_config, trained):
    first = (trained / "metrics.csv").read_bytes()
    checkpoint = np.load(str(trained / "model.npz"))
    weights = checkpoint["head1/weights"].copy()
    checkpoint.close()
    assert main(["train", "-f", smoke_config]) == EXIT_OK
    assert (trained / "metrics.csv").read_bytes() == first
    with np.load(str(trained / "model.npz")) as rerun:
        assert np.array_equal(rerun["head1/weights"], weights)


def test_eval(smoke_config, trained, capsys):
    assert main(["eval", "-f", smoke_config, "-r", "z/SO3"]) == EXIT_OK
    (row,) = read_csv(str(trained / "eval_z_SO3.csv"))
    assert row["regime"] == "z/SO3"
    assert 0.0 <= float(row["overall_accuracy"]) <= 1.0
    assert "z/SO3" in capsys.readouterr().out


def test_eval_checkpoint_of_another_network(smoke_config, trained, tmp_path):
    path = tmp_path / "wide.json"
    with open(smoke_config) as infile:
        document = json.load(infile)
    document["network"]["head_widths"] = [32]
    path.write_text(json.dumps(document))
    checkpoint = str(trained / "model.npz")
    assert main(["eval", "-f", str(path), "-c", checkpoint]) == EXIT_RUNTIME_ERROR


def test_experiment(smoke_config, tmp_path, capsys):
    assert main(["experiment", "-f", smoke_config, "-s", "3"]) == EXIT_OK
    rows = read_csv(str(tmp_path / "out" / "experiment.csv"))
    assert [row["regime"] for row in rows] == ["z/z"]
    assert "acc. std" in capsys.readouterr().out


def test_features(smoke_config, cloud_file, tmp_path):
    out = str(tmp_path / "features.csv")
    assert main(["features", "-f", smoke_config, cloud_file, "-o", out]) == EXIT_OK
    rows = read_csv(out)
    assert len(rows) == 16
    assert list(rows[0]) == ["index", "x", "y", "z"] + [f"f{c}" for c in range(16)]


def test_features_of_trained_layer(smoke_config, trained, cloud_file):
    checkpoint = str(trained / "model.npz")
    args = ["features", "-f", smoke_config, cloud_file, "-l", "2", "-c", checkpoint]
    assert main(args) == EXIT_OK
    rows = read_csv(str(trained / "features_layer2.csv"))
    assert len(rows) == 8
    assert len(rows[0]) == 4 + 32


def test_features_errors(smoke_config, cloud_file, tmp_path):
    too_deep = ["features", "-f", smoke_config, cloud_file, "-l", "3"]
    assert main(too_deep) == EXIT_CONFIG_ERROR
    missing = str(tmp_path / "missing.xyz")
    assert main(["features", "-f", smoke_config, missing]) == EXIT_CONFIG_ERROR
    broken = tmp_path / "broken.xyz"
    broken.write_text("0 0 0\n1 1\n")
    assert main(["features", "-f", smoke_config, str(broken)]) == EXIT_RUNTIME_ERROR


def edited_config(smoke_config, tmp_path, name, **sections):
    with open(smoke_config) as infile:
        document = json.load(infile)
    for section, values in sections.items():
        document[section].update(values)
    path = tmp_path / name
    path.write_text(json.dumps(document))
    return str(path)


@pytest.mark.parametrize(
    "argv,command",
    [
        (["gen-data", "-o", "dataset"], "gen-data"),
        (["train", "-e", "2"], "train"),
        (["eval", "-r", "z/SO3", "-c", "model.npz"], "eval"),
        (["experiment", "-s", "1"], "experiment"),
        (["features", "cloud.xyz", "-l", "2"], "features"),
        (["gradcheck", "-s", "3"], "gradcheck"),
    ],
)
def test_parser_builds_every_command(argv, command):
    args = Parser().parse(argv)
    assert args.command == command


def test_commands_chain_through_a_dataset_directory(
    smoke_config, tmp_path, cloud_file, capsys
):
    out = tmp_path / "out"
    assert main(["gen-data", "-f", smoke_config]) == EXIT_OK
    assert (out / "dataset" / "manifest.json").exists()
    dataset = {"data_dir": str(out / "dataset")}
    config = edited_config(smoke_config, tmp_path, "from_dir.json", dataset=dataset)
    assert main(["train", "-f", config]) == EXIT_OK
    assert main(["eval", "-f", config]) == EXIT_OK
    assert (out / "eval_z_z.csv").exists()
    checkpoint = str(out / "model.npz")
    assert main(["features", "-f", config, cloud_file, "-c", checkpoint]) == EXIT_OK
    assert len(read_csv(str(out / "features_layer1.csv"))) == 16
    assert main(["experiment", "-f", config]) == EXIT_OK
    assert main(["gradcheck"]) == EXIT_OK
    assert "z/z" in capsys.readouterr().out


def test_features_does_not_generate_the_dataset(smoke_config, tmp_path, cloud_file):
    # A dataset too small to generate still gives its class count
    config = edited_config(
        smoke_config, tmp_path, "empty.json", dataset={"per_class_train": 0}
    )
    assert main(["train", "-f", config]) == EXIT_CONFIG_ERROR
    assert main(["features", "-f", config, cloud_file]) == EXIT_OK


def test_features_unknown_shape_class(smoke_config, tmp_path, cloud_file):
    config = edited_config(
        smoke_config, tmp_path, "pyramid.json", dataset={"classes": ["pyramid"]}
    )
    assert main(["features", "-f", config, cloud_file]) == EXIT_CONFIG_ERROR


def test_features_of_binary_file(smoke_config, tmp_path):
    binary = tmp_path / "binary.xyz"
    binary.write_bytes(b"0 0 0\n\xff\xfe 1 1\n")
    assert main(["features", "-f", smoke_config, str(binary)]) == EXIT_RUNTIME_ERROR


@pytest.mark.parametrize(
    "network,dataset",
    [
        ({"feature_mode": "distances_only"}, {}),
        ({"feature_mode": "angles_only"}, {}),
        ({"use_lift_mlp": False}, {}),
        ({"classifier_mode": "single_vector"}, {}),
        ({"n_layers": 1, "out_channels": [16]}, {}),
        ({"n_layers": 3, "out_channels": [16, 32, 32]}, {}),
        ({"n_layers": 4, "out_channels": [8, 16, 32, 32]}, {}),
        ({"n_points": 128}, {"n_points": 128}),
    ],
)
def test_ablations_run(tmp_path, network, dataset):
    with open(CONFIG_DIR + "smoke.json") as infile:
        document = json.load(infile)
    document["network"].update(network)
    document["dataset"].update(dataset)
    document["output"]["dir"] = str(tmp_path / "ablation")
    path = tmp_path / "ablation.json"
    path.write_text(json.dumps(document))
    assert main(["experiment", "-f", str(path)]) == EXIT_OK
    assert (tmp_path / "ablation" / "experiment.csv").exists()
