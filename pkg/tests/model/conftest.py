from dataclasses import replace

import pytest

from riconvnet.data import make_dataset
from riconvnet.model.networks import classification_config, segmentation_config

TINY_POINTS = 64


def tiny_classification_config(n_classes=2, **kwargs):
    net = classification_config(
        n_classes,
        n_points=TINY_POINTS,
        n_layers=2,
        lift_mlp_widths=[8],
        head_widths=[16],
        **kwargs,
    )
    # 64 -> 16 -> 8 points
    net.layer_configs = [
        replace(net.layer_configs[0], k_neighbors=16, out_channels=16),
        replace(net.layer_configs[1], k_neighbors=8, out_channels=32),
    ]
    net.validate()
    return net


def tiny_segmentation_config(n_classes=2, n_parts=4):
    net = segmentation_config(
        n_classes,
        n_parts,
        n_points=TINY_POINTS,
        n_layers=2,
        lift_mlp_widths=[6],
        decoder_mlp_widths=[8, 8],
        decoder_out_channels=[8, 8],
    )
    # 64 -> 16 -> 4 points
    net.layer_configs = [
        replace(net.layer_configs[0], k_neighbors=16, out_channels=8),
        replace(net.layer_configs[1], k_neighbors=8, out_channels=16),
    ]
    net.validate()
    return net


@pytest.fixture(scope="module")
def tiny_dataset():
    return make_dataset(["sphere", "cube"], 4, 2, 0.01, 7, n_points=TINY_POINTS)


@pytest.fixture(scope="module")
def tiny_part_dataset():
    return make_dataset(
        ["cylinder", "cone"], 2, 1, 0.01, 7, n_points=TINY_POINTS, with_parts=True
    )
