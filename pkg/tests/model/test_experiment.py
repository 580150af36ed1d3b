import numpy as np
import pytest

from riconvnet.autodiff import Mode
from riconvnet.constants import CONFIG_DIR
from riconvnet.exceptions import ModelException
from riconvnet.geom import RigidTransform, apply_rigid, sample_rotation_so3
from riconvnet.helpers import make_rng
from riconvnet.model.experiment import run_experiment, write_experiment_csv
from riconvnet.model.metrics import read_csv
from riconvnet.model.networks import build_network
from riconvnet.model.trainer import TrainConfig, evaluate
from riconvnet.runconfig import (
    build_dataset,
    build_network_config,
    build_train_config,
    load_config,
)
from tests.model.conftest import tiny_classification_config


def tiny_train_config(**kwargs):
    values = dict(batch_size=4, epochs=1, seed=2, validation_fraction=0.25)
    values.update(kwargs)
    return TrainConfig(**values)


def test_single_regime_has_zero_std(tiny_dataset):
    result = run_experiment(
        tiny_classification_config(), tiny_train_config(), tiny_dataset, ["z/z"]
    )
    assert len(result.rows) == 1
    assert result.accuracy_std == 0.0
    assert result.max_gap() == 0.0
    assert result.rows[0].metrics.accuracy_std_across_regimes == 0.0


def test_regimes_share_the_training_side(tiny_dataset):
    result = run_experiment(
        tiny_classification_config(),
        tiny_train_config(),
        tiny_dataset,
        ["z/z", "z/SO3", "SO3/SO3"],
    )
    assert sorted(result.trained) == ["so3", "z"]
    assert [(row.train_rotation, row.test_rotation) for row in result.rows] == [
        ("z", "z"),
        ("z", "so3"),
        ("so3", "so3"),
    ]
    accuracies = list(result.accuracies().values())
    assert result.accuracy_std == pytest.approx(np.std(accuracies))
    assert "acc. std" in result.table()


def test_experiment_csv(tiny_dataset, tmp_path):
    result = run_experiment(
        tiny_classification_config(), tiny_train_config(), tiny_dataset, ["none"]
    )
    path = str(tmp_path / "experiment.csv")
    write_experiment_csv(path, result)
    (row,) = read_csv(path)
    assert row["regime"] == "none"
    assert row["accuracy_std"] == "0"
    assert row["mean_per_class_iou"] == ""


@pytest.mark.parametrize("regimes", [[], ["z/z", "SO3/z"]])
def test_experiment_regime_errors(tiny_dataset, regimes):
    with pytest.raises(ModelException):
        run_experiment(
            tiny_classification_config(), tiny_train_config(), tiny_dataset, regimes
        )


def test_trained_network_stays_invariant(tiny_dataset):
    net = tiny_classification_config()
    result = run_experiment(net, tiny_train_config(), tiny_dataset, ["SO3/SO3"])
    params = result.trained["so3"].params
    params.set_mode(Mode.INFERENCE)
    network = build_network(net, params)
    rng = make_rng(0, "trained-invariance")
    for cloud in tiny_dataset.test:
        labels, logits = network.predict(cloud.points[None])
        moved = apply_rigid(cloud, sample_rotation_so3(rng))
        moved_labels, moved_logits = network.predict(moved.points[None])
        assert np.allclose(moved_logits, logits, rtol=0, atol=1e-4)
        assert np.array_equal(moved_labels, labels)


# =================================
#       Desk-scale experiments
# =================================


def run_config_file(name):
    config = load_config(CONFIG_DIR + name)
    dataset = build_dataset(config)
    net = build_network_config(config, dataset)
    tcfg = build_train_config(config, net.task)
    return config, dataset, net, tcfg


@pytest.mark.slow
def test_consistency_across_regimes():
    config, dataset, net, tcfg = run_config_file("desk_consistency.json")
    result = run_experiment(net, tcfg, dataset, config["experiment"]["regimes"])
    assert all(value >= 0.85 for value in result.accuracies().values())
    assert result.max_gap() <= 0.03
    # The loss goes down
    history = result.trained["z"].history
    assert history[-1].train_loss < history[0].train_loss


@pytest.mark.slow
def test_raw_coordinates_do_not_generalize():
    config, dataset, net, tcfg = run_config_file("desk_raw_xyz.json")
    accuracies = run_experiment(
        net, tcfg, dataset, config["experiment"]["regimes"]
    ).accuracies()
    assert accuracies["z/z"] - accuracies["z/SO3"] >= 0.15


@pytest.mark.slow
def test_segmentation_of_cylinders():
    config, dataset, net, tcfg = run_config_file("desk_segmentation.json")
    result = run_experiment(net, tcfg, dataset, config["experiment"]["regimes"])
    metrics = evaluate(result.trained["so3"].params, net, dataset, "SO3/SO3")
    assert metrics.mean_per_class_iou >= 0.80
    network = build_network(net, result.trained["so3"].params)
    rng = make_rng(0, "segmentation-invariance")
    for cloud in dataset.test[:20]:
        labels, _ = network.predict(cloud.points[None])
        transform = RigidTransform(sample_rotation_so3(rng).rotation, rng.normal(size=3))
        moved = apply_rigid(cloud, transform)
        moved_labels, _ = network.predict(moved.points[None])
        assert np.array_equal(moved_labels, labels)
