"""
The rotation invariant convolution and its decoder counterpart.

RIConv, for every representative point p of a cloud:

    1. K nearest neighbors, centroid m and reference vector pm
    2. rotation invariant features of every neighbor (or an ablated variant)
    3. optional shared lift MLP (dense -> batch-norm -> ReLU)
    4. concatenation with the previous layer features gathered at the neighbors
    5. max pooling of the neighbors falling in each bin along pm
    6. full-span 1D convolution over the bins -> batch-norm -> ReLU

Geometry (sampling, neighborhoods, bins) carries no gradient: it is computed
once per input cloud and reused by the backward pass.

RIDeconv propagates coarse features onto a finer cloud by inverse distance
interpolation, concatenates the skip features of the encoder stage, applies an
MLP and a RIConv over every fine point.

Layers work on batches of clouds of equal size: points (B, N, 3), features
(B, N, C). The riconv_forward/rideconv_forward helpers wrap a single cloud.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.typing import NDArray

from riconvnet.autodiff import (
    Array,
    BatchNorm,
    Conv1d,
    Layer,
    LayerParams,
    MaxPoolGroups,
    ReLU,
    Sequential,
    Tensor,
    dense_unit,
    init_conv1d_params,
    init_dense_params,
)
from riconvnet.constants import (
    COINCIDENT_DISTANCE,
    FEATURE_CHANNELS,
    FEATURE_MODES,
    LIFT_MLP_WIDTHS,
    SEG_INTERPOLATION_NEIGHBORS,
)
from riconvnet.exceptions import (
    NonFiniteActivationException,
    RIConvConfigException,
    ShapeMismatchException,
)
from riconvnet.geom import PointCloud, Points
from riconvnet.rif import bin_indices, build_frames, local_features
from riconvnet.sampling import farthest_point_sampling, knn_indices

logger = logging.getLogger("riconvnet")

# coarse points, fine points, neighbor indices, weights
Interpolation = Tuple[Array, Array, NDArray[np.int64], Array]


# =================================
#          Configuration
# =================================


@dataclass
class RIConvConfig:
    n_representatives: int
    k_neighbors: int
    n_bins: int
    out_channels: int
    lift_mlp_widths: List[int] = field(default_factory=lambda: list(LIFT_MLP_WIDTHS))
    feature_mode: str = "full"
    use_lift_mlp: bool = True
    # False: every input point is a representative, in input order
    sample_representatives: bool = True

    @property
    def local_channels(self) -> int:
        if self.use_lift_mlp and self.lift_mlp_widths:
            return self.lift_mlp_widths[-1]
        return FEATURE_CHANNELS[self.feature_mode]

    def validate(self, n_points: Optional[int] = None) -> None:
        if self.feature_mode not in FEATURE_MODES:
            raise RIConvConfigException(
                f"Unknown feature mode '{self.feature_mode}', expected one of"
                f" {FEATURE_MODES}."
            )
        if self.n_bins < 1:
            raise RIConvConfigException(f"Need at least one bin, got {self.n_bins}.")
        if self.k_neighbors < self.n_bins:
            raise RIConvConfigException(
                f"{self.k_neighbors} neighbors cannot fill {self.n_bins} bins."
            )
        if self.n_representatives < 1 or self.out_channels < 1:
            raise RIConvConfigException(
                f"Representatives ({self.n_representatives}) and output channels"
                f" ({self.out_channels}) must be positive."
            )
        if self.use_lift_mlp and any(width < 1 for width in self.lift_mlp_widths):
            raise RIConvConfigException(
                f"Lift MLP widths must be positive, got {self.lift_mlp_widths}."
            )
        if n_points is None:
            return
        if self.k_neighbors > n_points:
            raise RIConvConfigException(
                f"{self.k_neighbors} neighbors requested from a {n_points} point cloud."
            )
        if self.sample_representatives and self.n_representatives > n_points:
            raise RIConvConfigException(
                f"{self.n_representatives} representatives requested from a"
                f" {n_points} point cloud."
            )
        if not self.sample_representatives and self.n_representatives != n_points:
            raise RIConvConfigException(
                f"Unsampled layer keeps all {n_points} points, configured for"
                f" {self.n_representatives}."
            )


@dataclass
class RIDeconvConfig:
    mlp_widths: List[int]
    conv: RIConvConfig
    interpolation_neighbors: int = SEG_INTERPOLATION_NEIGHBORS

    def validate(self, n_fine: Optional[int] = None) -> None:
        if self.conv.sample_representatives:
            raise RIConvConfigException(
                "The convolution of a deconvolution runs on every fine point."
            )
        if self.interpolation_neighbors < 1:
            raise RIConvConfigException(
                f"Interpolation needs a neighbor, got {self.interpolation_neighbors}."
            )
        if any(width < 1 for width in self.mlp_widths):
            raise RIConvConfigException(
                f"MLP widths must be positive, got {self.mlp_widths}."
            )
        self.conv.validate(n_fine)


# =================================
#           Parameters
# =================================


@dataclass
class RIConvParams:
    lift: List[LayerParams]
    conv: LayerParams

    def named(self) -> Dict[str, LayerParams]:
        named = {params.name: params for params in self.lift}
        named[self.conv.name] = self.conv
        return named


@dataclass
class RIDeconvParams:
    mlp: List[LayerParams]
    conv: RIConvParams

    def named(self) -> Dict[str, LayerParams]:
        named = {params.name: params for params in self.mlp}
        named.update(self.conv.named())
        return named


def init_riconv_params(
    name: str, cfg: RIConvConfig, prev_channels: int, rng: np.random.Generator
) -> RIConvParams:
    lift = []
    width = FEATURE_CHANNELS[cfg.feature_mode]
    if cfg.use_lift_mlp:
        for i, next_width in enumerate(cfg.lift_mlp_widths):
            lift.append(
                init_dense_params(
                    f"{name}.lift{i}", width, next_width, rng, batchnorm=True
                )
            )
            width = next_width
    conv = init_conv1d_params(
        f"{name}.conv",
        cfg.n_bins,
        width + prev_channels,
        cfg.out_channels,
        rng,
        batchnorm=True,
    )
    return RIConvParams(lift=lift, conv=conv)


def init_rideconv_params(
    name: str,
    cfg: RIDeconvConfig,
    coarse_channels: int,
    skip_channels: int,
    rng: np.random.Generator,
) -> RIDeconvParams:
    mlp = []
    width = coarse_channels + skip_channels
    for i, next_width in enumerate(cfg.mlp_widths):
        mlp.append(
            init_dense_params(f"{name}.mlp{i}", width, next_width, rng, batchnorm=True)
        )
        width = next_width
    return RIDeconvParams(
        mlp=mlp, conv=init_riconv_params(f"{name}.riconv", cfg.conv, width, rng)
    )


# =================================
#             Outputs
# =================================


@dataclass
class LayerOutput:
    # points (B, R, 3), features (B, R, C), indices into the input cloud (B, R)
    points: Array
    features: Array
    indices: NDArray[np.int64]

    @property
    def batch_size(self) -> int:
        return self.points.shape[0]

    def cloud(self, batch_index: int = 0) -> PointCloud:
        return PointCloud(points=self.points[batch_index])

    @property
    def representative_cloud(self) -> PointCloud:
        if self.batch_size != 1:
            raise ShapeMismatchException(
                f"Output holds {self.batch_size} clouds, select one with cloud(i)."
            )
        return self.cloud(0)


@dataclass
class Neighborhoods:
    """
    Geometry of a RIConv over B clouds of N points, R representatives with K
    neighbors each.
    """

    points: Array
    indices: NDArray[np.int64]
    neighbor_indices: NDArray[np.int64]
    local: Array
    bins: NDArray[np.int64]
    fallback_count: int = 0
    degenerate_count: int = 0

    def representatives(self) -> Array:
        batch = np.arange(len(self.points))[:, None]
        return self.points[batch, self.indices]

    def matches(self, points: Array) -> bool:
        return self.points.shape == points.shape and np.array_equal(
            self.points, points
        )


def compute_neighborhoods(points: Array, cfg: RIConvConfig) -> Neighborhoods:
    if points.ndim != 3 or points.shape[-1] != 3:
        raise ShapeMismatchException(f"Expected points (B, N, 3), got {points.shape}.")
    cfg.validate(points.shape[1])
    indices, neighbor_indices, local, bins = [], [], [], []
    fallback_count = degenerate_count = 0
    for cloud_points in points:
        if cfg.sample_representatives:
            representatives = farthest_point_sampling(
                cloud_points, cfg.n_representatives
            ).indices
        else:
            representatives = np.arange(len(cloud_points))
        frames = build_frames(cloud_points, representatives, cfg.k_neighbors, False)
        indices.append(representatives)
        neighbor_indices.append(frames.neighbor_indices)
        # Coincident neighborhoods: all distances and angles vanish, bin 0
        local.append(local_features(frames, cfg.feature_mode))
        bins.append(bin_indices(frames.p, frames.m, frames.neighbors, cfg.n_bins))
        fallback_count += int(frames.fallback.sum())
        degenerate_count += int(frames.degenerate.sum())
    return Neighborhoods(
        points=points,
        indices=np.stack(indices),
        neighbor_indices=np.stack(neighbor_indices),
        local=np.stack(local),
        bins=np.stack(bins),
        fallback_count=fallback_count,
        degenerate_count=degenerate_count,
    )


def gather(features: Array, indices: NDArray[np.int64]) -> Array:
    # features (B, N, C), indices (B, ...) -> (B, ..., C)
    batch = np.arange(len(features)).reshape((-1,) + (1,) * (indices.ndim - 1))
    return features[batch, indices]


def scatter_add(grad: Array, indices: NDArray[np.int64], n_points: int) -> Array:
    # Adjoint of gather: (B, ..., C) -> (B, N, C)
    result = np.zeros((len(grad), n_points, grad.shape[-1]))
    batch = np.arange(len(grad)).reshape((-1,) + (1,) * (indices.ndim - 1))
    np.add.at(result, (np.broadcast_to(batch, indices.shape), indices), grad)
    return result


def check_finite(name: str, activations: Array) -> None:
    if not np.all(np.isfinite(activations)):
        bad = int(np.sum(~np.isfinite(activations)))
        raise NonFiniteActivationException(
            f"{name}: {bad} non-finite activations out of {activations.size}."
        )


# =================================
#              RIConv
# =================================


class RIConv(Layer):
    def __init__(self, cfg: RIConvConfig, params: RIConvParams):
        cfg.validate()
        if cfg.use_lift_mlp and len(params.lift) != len(cfg.lift_mlp_widths):
            raise RIConvConfigException(
                f"{params.conv.name}: {len(params.lift)} lift layers for widths"
                f" {cfg.lift_mlp_widths}."
            )
        kernel, c_in, c_out = params.conv.weights.shape
        if kernel != cfg.n_bins or c_out != cfg.out_channels:
            raise RIConvConfigException(
                f"{params.conv.name}: kernel {kernel} -> {c_out} channels, configured"
                f" for {cfg.n_bins} bins -> {cfg.out_channels}."
            )
        self.cfg: RIConvConfig = cfg
        self.params: RIConvParams = params
        self.prev_channels: int = c_in - cfg.local_channels
        if self.prev_channels < 0:
            raise RIConvConfigException(
                f"{params.conv.name}: {c_in} input channels for"
                f" {cfg.local_channels} local channels."
            )
        self.lift: Sequential = Sequential(
            [dense_unit(lift) for lift in params.lift] if cfg.use_lift_mlp else []
        )
        self.conv: Conv1d = Conv1d(params.conv)
        self.norm: BatchNorm = BatchNorm(params.conv)
        self.relu: ReLU = ReLU()
        self.geometry: Optional[Neighborhoods] = None
        self.pool: Optional[MaxPoolGroups] = None

    @property
    def name(self) -> str:
        return self.params.conv.name.rsplit(".", 1)[0]

    def neighborhoods(self, points: Array) -> Neighborhoods:
        if self.geometry is None or not self.geometry.matches(points):
            self.geometry = compute_neighborhoods(points, self.cfg)
            if self.geometry.degenerate_count:
                logger.warning(
                    f"⚠️ {self.name}: {self.geometry.degenerate_count} collapsed"
                    " neighborhood(s) replaced by zero features."
                )
        return self.geometry

    def forward(
        self, points: Array, prev_features: Optional[Array] = None
    ) -> LayerOutput:
        geometry = self.neighborhoods(points)
        if self.prev_channels and prev_features is None:
            raise ShapeMismatchException(
                f"{self.name} expects {self.prev_channels} previous feature channels."
            )
        features = self.lift.forward(geometry.local)
        if prev_features is not None:
            if prev_features.shape != points.shape[:2] + (self.prev_channels,):
                raise ShapeMismatchException(
                    f"{self.name}: previous features {prev_features.shape} for points"
                    f" {points.shape} and {self.prev_channels} channels."
                )
            features = np.concatenate(
                [features, gather(prev_features, geometry.neighbor_indices)], axis=-1
            )
        self.pool = MaxPoolGroups(geometry.bins, self.cfg.n_bins)
        binned = self.pool.forward(features)
        if self.pool.empty_count:
            logger.debug(f"{self.name}: {self.pool.empty_count} empty bin(s) zeroed")
        convolved = self.conv.forward(binned)[..., 0, :]
        output = self.relu.forward(self.norm.forward(convolved))
        check_finite(self.name, output)
        logger.debug(
            f"{self.name}: {points.shape[:2]} -> {output.shape}"
            f" (k={self.cfg.k_neighbors}, bins={self.cfg.n_bins})"
        )
        return LayerOutput(
            points=geometry.representatives(),
            features=output,
            indices=geometry.indices,
        )

    def backward(self, output_grad: Array) -> Optional[Array]:
        assert self.geometry is not None and self.pool is not None
        grad = self.norm.backward(self.relu.backward(output_grad))
        grad = self.pool.backward(self.conv.backward(grad[..., None, :]))
        local_channels = self.cfg.local_channels
        self.lift.backward(grad[..., :local_channels])
        if not self.prev_channels:
            return None
        return scatter_add(
            grad[..., local_channels:],
            self.geometry.neighbor_indices,
            self.geometry.points.shape[1],
        )

    def parameters(self) -> List[Tensor]:
        return self.lift.parameters() + self.conv.parameters() + self.norm.parameters()

    def __repr__(self) -> str:
        return (
            f"RIConv {self.name} (R={self.cfg.n_representatives},"
            f" k={self.cfg.k_neighbors}, bins={self.cfg.n_bins},"
            f" {self.prev_channels}+{self.cfg.local_channels} ->"
            f" {self.cfg.out_channels})"
        )


# =================================
#             RIDeconv
# =================================


def interpolation_weights(
    coarse_points: Points, fine_points: Points, n_neighbors: int
) -> Tuple[NDArray[np.int64], Array]:
    """
    Inverse distance weights of the nearest coarse points of every fine point.
    A fine point on top of a coarse point takes its feature unchanged.
    """
    n_neighbors = min(n_neighbors, len(coarse_points))
    indices, distances = knn_indices(coarse_points, fine_points, n_neighbors)
    coincident = distances[:, 0] <= COINCIDENT_DISTANCE
    inverse = 1.0 / np.where(coincident[:, None], 1.0, distances)
    weights = inverse / inverse.sum(axis=1, keepdims=True)
    weights[coincident] = 0.0
    weights[coincident, 0] = 1.0
    return indices, weights


class RIDeconv(Layer):
    def __init__(self, cfg: RIDeconvConfig, params: RIDeconvParams):
        cfg.validate()
        if len(params.mlp) != len(cfg.mlp_widths):
            raise RIConvConfigException(
                f"{len(params.mlp)} MLP layers for widths {cfg.mlp_widths}."
            )
        self.cfg: RIDeconvConfig = cfg
        self.params: RIDeconvParams = params
        self.mlp: Sequential = Sequential([dense_unit(mlp) for mlp in params.mlp])
        self.riconv: RIConv = RIConv(cfg.conv, params.conv)
        self.input_channels: int = (
            params.mlp[0].weights.shape[0] if params.mlp else self.riconv.prev_channels
        )
        self.interpolation: Optional[Interpolation] = None
        self.coarse_shape: Tuple[int, ...] = ()

    def weights(
        self, coarse_points: Array, fine_points: Array
    ) -> Tuple[NDArray[np.int64], Array]:
        cached = self.interpolation
        if (
            cached is None
            or cached[0].shape != coarse_points.shape
            or cached[1].shape != fine_points.shape
            or not np.array_equal(cached[0], coarse_points)
            or not np.array_equal(cached[1], fine_points)
        ):
            per_cloud = [
                interpolation_weights(coarse, fine, self.cfg.interpolation_neighbors)
                for coarse, fine in zip(coarse_points, fine_points)
            ]
            cached = (
                coarse_points,
                fine_points,
                np.stack([indices for indices, _ in per_cloud]),
                np.stack([weights for _, weights in per_cloud]),
            )
            self.interpolation = cached
        return cached[2], cached[3]

    def forward(
        self,
        coarse_points: Array,
        coarse_features: Array,
        fine_points: Array,
        skip_features: Optional[Array] = None,
    ) -> LayerOutput:
        batch, n_fine = fine_points.shape[:2]
        if coarse_points.shape[0] != batch or coarse_features.shape[:2] != (
            coarse_points.shape[:2]
        ):
            raise ShapeMismatchException(
                f"Coarse stage {coarse_points.shape}/{coarse_features.shape} does not"
                f" match fine stage {fine_points.shape}."
            )
        if skip_features is None:
            skip_features = np.zeros((batch, n_fine, 0))
        if skip_features.shape[:2] != (batch, n_fine):
            raise ShapeMismatchException(
                f"Skip features {skip_features.shape} for fine points"
                f" {fine_points.shape}."
            )
        if coarse_features.shape[-1] + skip_features.shape[-1] != self.input_channels:
            raise ShapeMismatchException(
                f"{coarse_features.shape[-1]}+{skip_features.shape[-1]} channels,"
                f" expected {self.input_channels}."
            )
        indices, weights = self.weights(coarse_points, fine_points)
        self.coarse_shape = coarse_features.shape
        interpolated = np.einsum(
            "bnj,bnjc->bnc", weights, gather(coarse_features, indices)
        )
        features = self.mlp.forward(
            np.concatenate([interpolated, skip_features], axis=-1)
        )
        return self.riconv.forward(fine_points, features)

    def backward(self, output_grad: Array) -> Tuple[Array, Array]:
        assert self.interpolation is not None
        _, _, indices, weights = self.interpolation
        grad = self.riconv.backward(output_grad)
        assert grad is not None
        grad = self.mlp.backward(grad)
        coarse_channels = self.coarse_shape[-1]
        coarse_grad = scatter_add(
            weights[..., None] * grad[:, :, None, :coarse_channels],
            indices,
            self.coarse_shape[1],
        )
        return coarse_grad, grad[..., coarse_channels:]

    def parameters(self) -> List[Tensor]:
        return self.mlp.parameters() + self.riconv.parameters()

    def __repr__(self) -> str:
        return f"RIDeconv {self.mlp!r} | {self.riconv!r}"


# =================================
#       Single cloud helpers
# =================================


def riconv_forward(
    cloud: PointCloud,
    prev_features: Optional[Array],
    cfg: RIConvConfig,
    params: RIConvParams,
) -> LayerOutput:
    layer = RIConv(cfg, params)
    prev = None if prev_features is None else prev_features[None]
    return layer.forward(cloud.points[None], prev)


def rideconv_forward(
    coarse: LayerOutput,
    fine_cloud: PointCloud,
    skip_features: Optional[Array],
    cfg: RIDeconvConfig,
    params: RIDeconvParams,
) -> LayerOutput:
    layer = RIDeconv(cfg, params)
    skip = None if skip_features is None else skip_features[None]
    return layer.forward(
        coarse.points[:1], coarse.features[:1], fine_cloud.points[None], skip
    )


# =================================
#    Fixed geometry for grad checks
# =================================


class RIConvProbe(Layer):
    """
    RIConv with its input cloud bound: a function of the previous features.
    """

    def __init__(self, layer: RIConv, points: Array):
        self.layer: RIConv = layer
        self.points: Array = points

    def forward(self, *prev_features: Array) -> Array:
        prev = prev_features[0] if prev_features else None
        return self.layer.forward(self.points, prev).features

    def backward(self, output_grad: Array):
        return self.layer.backward(output_grad)

    def parameters(self) -> List[Tensor]:
        return self.layer.parameters()

    def __repr__(self) -> str:
        return repr(self.layer)


class RIDeconvProbe(Layer):
    """
    RIDeconv with both clouds bound: a function of the coarse and skip features.
    """

    def __init__(self, layer: RIDeconv, coarse_points: Array, fine_points: Array):
        self.layer: RIDeconv = layer
        self.coarse_points: Array = coarse_points
        self.fine_points: Array = fine_points

    def forward(self, coarse_features: Array, skip_features: Array) -> Array:
        return self.layer.forward(
            self.coarse_points, coarse_features, self.fine_points, skip_features
        ).features

    def backward(self, output_grad: Array):
        return self.layer.backward(output_grad)

    def parameters(self) -> List[Tensor]:
        return self.layer.parameters()

    def __repr__(self) -> str:
        return repr(self.layer)
