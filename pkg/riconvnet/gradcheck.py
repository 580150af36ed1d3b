"""
Gradient check suite behind `riconvnet gradcheck`: every primitive layer and
the composed RIConv/RIDeconv blocks, on small inputs drawn from one seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np

from riconvnet.autodiff import (
    BatchNorm,
    Conv1d,
    Dense,
    Layer,
    MaxPoolGroups,
    Mode,
    ReLU,
    SoftmaxCrossEntropy,
    grad_check,
    init_conv1d_params,
    init_dense_params,
)
from riconvnet.constants import (
    GRADCHECK_BLOCK_TOLERANCE,
    GRADCHECK_PRIMITIVE_TOLERANCE,
)
from riconvnet.helpers import make_rng
from riconvnet.riconv import (
    RIConv,
    RIConvConfig,
    RIConvProbe,
    RIDeconv,
    RIDeconvConfig,
    RIDeconvProbe,
    init_riconv_params,
    init_rideconv_params,
)

logger = logging.getLogger("riconvnet")

Case = Tuple[Layer, Sequence[Tuple[int, ...]], float]


@dataclass
class GradCheckReport:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance

    def line(self) -> str:
        status = "ok" if self.passed else "FAILED"
        return (
            f"{self.name:<24} {self.error:>10.3e}  (tolerance {self.tolerance:.0e})"
            f"  {status}"
        )


# Cases
# \_____


def dense_case(rng: np.random.Generator) -> Case:
    return (
        Dense(init_dense_params("dense", 8, 6, rng)),
        [(4, 8)],
        GRADCHECK_PRIMITIVE_TOLERANCE,
    )


def relu_case(rng: np.random.Generator) -> Case:
    return ReLU(), [(6, 5)], GRADCHECK_PRIMITIVE_TOLERANCE


def batchnorm_case(rng: np.random.Generator) -> Case:
    params = init_dense_params("bn", 5, 5, rng, batchnorm=True)
    assert params.bn_gamma is not None and params.bn_beta is not None
    params.bn_gamma.data = rng.uniform(0.5, 1.5, size=5)
    params.bn_beta.data = rng.standard_normal(5)
    return BatchNorm(params), [(16, 5)], GRADCHECK_PRIMITIVE_TOLERANCE


def batchnorm_inference_case(rng: np.random.Generator) -> Case:
    params = init_dense_params("bn_inference", 5, 5, rng, batchnorm=True)
    assert params.bn_running_mean is not None and params.bn_running_var is not None
    params.bn_running_mean.data = rng.standard_normal(5)
    params.bn_running_var.data = rng.uniform(0.5, 2.0, size=5)
    params.mode = Mode.INFERENCE
    return BatchNorm(params), [(8, 5)], GRADCHECK_PRIMITIVE_TOLERANCE


def maxpool_case(rng: np.random.Generator) -> Case:
    groups = rng.integers(0, 3, size=(2, 10))
    return MaxPoolGroups(groups, 3), [(2, 10, 4)], GRADCHECK_PRIMITIVE_TOLERANCE


def conv1d_case(rng: np.random.Generator) -> Case:
    return (
        Conv1d(init_conv1d_params("conv", 2, 3, 5, rng)),
        [(6, 4, 3)],
        GRADCHECK_PRIMITIVE_TOLERANCE,
    )


def conv1d_full_span_case(rng: np.random.Generator) -> Case:
    return (
        Conv1d(init_conv1d_params("conv_full", 4, 3, 5, rng)),
        [(6, 4, 3)],
        GRADCHECK_PRIMITIVE_TOLERANCE,
    )


def softmax_case(rng: np.random.Generator) -> Case:
    labels = rng.integers(0, 5, size=6)
    return SoftmaxCrossEntropy(labels), [(6, 5)], GRADCHECK_PRIMITIVE_TOLERANCE


def riconv_case(rng: np.random.Generator) -> Case:
    cfg = RIConvConfig(
        n_representatives=8,
        k_neighbors=8,
        n_bins=2,
        out_channels=6,
        lift_mlp_widths=[5],
    )
    layer = RIConv(cfg, init_riconv_params("riconv", cfg, 3, rng))
    points = rng.standard_normal((1, 32, 3))
    return RIConvProbe(layer, points), [(1, 32, 3)], GRADCHECK_BLOCK_TOLERANCE


def rideconv_case(rng: np.random.Generator) -> Case:
    conv = RIConvConfig(
        n_representatives=24,
        k_neighbors=6,
        n_bins=2,
        out_channels=5,
        lift_mlp_widths=[4],
        sample_representatives=False,
    )
    cfg = RIDeconvConfig(mlp_widths=[6], conv=conv)
    layer = RIDeconv(cfg, init_rideconv_params("rideconv", cfg, 4, 3, rng))
    coarse_points = rng.standard_normal((1, 8, 3))
    fine_points = rng.standard_normal((1, 24, 3))
    return (
        RIDeconvProbe(layer, coarse_points, fine_points),
        [(1, 8, 4), (1, 24, 3)],
        GRADCHECK_BLOCK_TOLERANCE,
    )


CASES: List[Tuple[str, Callable[[np.random.Generator], Case]]] = [
    ("Dense", dense_case),
    ("ReLU", relu_case),
    ("BatchNorm (training)", batchnorm_case),
    ("BatchNorm (inference)", batchnorm_inference_case),
    ("MaxPoolGroups", maxpool_case),
    ("Conv1d", conv1d_case),
    ("Conv1d (full span)", conv1d_full_span_case),
    ("SoftmaxCrossEntropy", softmax_case),
    ("RIConv", riconv_case),
    ("RIDeconv", rideconv_case),
]


def run_gradcheck(seed: int = 0) -> List[GradCheckReport]:
    reports = []
    for name, build in CASES:
        layer, input_shapes, tolerance = build(make_rng(seed, "gradcheck", name))
        error = grad_check(
            layer,
            input_shapes,
            tolerance=tolerance,
            rng=make_rng(seed, "gradcheck-inputs", name),
        )
        reports.append(GradCheckReport(name, error, tolerance))
        logger.info(f"🔎 {reports[-1].line()}")
    return reports
