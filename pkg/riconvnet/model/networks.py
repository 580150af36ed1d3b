"""
Classification and segmentation networks.

Classification stacks RIConv layers (1024 -> 256 -> 128 -> 64 by default)
followed by a shared fully connected head. In multi_vector mode the head runs
on every final representative and the predictions are averaged, in
single_vector mode the final features are max pooled into one vector first.

Segmentation is an encoder (2048 -> 512 -> 128 -> 32) and a decoder of
RIDeconv layers going back up the same stages with skip connections, ending
in a per-point head over all part labels (the category is not an input).
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.typing import NDArray

from riconvnet.autodiff import (
    Array,
    Dense,
    Dropout,
    Layer,
    LayerParams,
    MaxPoolGroups,
    Mode,
    ReLU,
    Sequential,
    Tensor,
    init_dense_params,
)
from riconvnet.constants import (
    CLASSIFIER_MODES,
    CLS_BINS,
    CLS_HEAD_WIDTHS,
    CLS_K_NEIGHBORS,
    CLS_OUT_CHANNELS,
    CLS_POINTS,
    CLS_REPRESENTATIVES,
    FRONT_BINS,
    FRONT_K_NEIGHBORS,
    FRONT_OUT_CHANNELS,
    LIFT_MLP_WIDTHS,
    SEG_BINS,
    SEG_DECODER_BINS,
    SEG_DECODER_K_NEIGHBORS,
    SEG_DECODER_MLP_WIDTHS,
    SEG_DECODER_OUT_CHANNELS,
    SEG_K_NEIGHBORS,
    SEG_OUT_CHANNELS,
    SEG_POINTS,
    SEG_REPRESENTATIVES,
    TASKS,
)
from riconvnet.exceptions import (
    NetworkConfigException,
    RIConvConfigException,
    ShapeMismatchException,
)
from riconvnet.geom import PointCloud
from riconvnet.helpers import make_rng
from riconvnet.riconv import (
    LayerOutput,
    RIConv,
    RIConvConfig,
    RIConvParams,
    RIDeconv,
    RIDeconvConfig,
    RIDeconvParams,
    init_riconv_params,
    init_rideconv_params,
)

logger = logging.getLogger("riconvnet")

MAX_LAYERS: int = 4
MAX_SEGMENTATION_LAYERS: int = 3


# =================================
#          Configuration
# =================================


@dataclass
class NetworkConfig:
    task: str
    n_points: int
    layer_configs: List[RIConvConfig]
    n_classes: int
    n_parts: int = 0
    classifier_mode: str = "multi_vector"
    head_widths: List[int] = field(default_factory=lambda: list(CLS_HEAD_WIDTHS))
    dropout: float = 0.0
    decoder_configs: List[RIDeconvConfig] = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.layer_configs)

    @property
    def stage_sizes(self) -> List[int]:
        sizes = [self.n_points]
        for cfg in self.layer_configs:
            sizes.append(
                cfg.n_representatives if cfg.sample_representatives else sizes[-1]
            )
        return sizes

    def validate(self) -> None:
        if self.task not in TASKS:
            raise NetworkConfigException(
                f"Unknown task '{self.task}', expected one of {TASKS}."
            )
        if not 1 <= self.n_layers <= MAX_LAYERS:
            raise NetworkConfigException(
                f"Networks have 1 to {MAX_LAYERS} layers, got {self.n_layers}."
            )
        if self.n_classes < 1:
            raise NetworkConfigException(
                f"Need at least one class, got {self.n_classes}."
            )
        if self.classifier_mode not in CLASSIFIER_MODES:
            raise NetworkConfigException(
                f"Unknown classifier mode '{self.classifier_mode}', expected one of"
                f" {CLASSIFIER_MODES}."
            )
        if not 0.0 <= self.dropout < 1.0:
            raise NetworkConfigException(f"Dropout rate {self.dropout} not in [0, 1).")
        sizes = self.stage_sizes
        try:
            for size, cfg in zip(sizes, self.layer_configs):
                cfg.validate(size)
        except RIConvConfigException as err:
            raise NetworkConfigException(f"Encoder: {err}") from err
        if self.task == "segmentation":
            if self.n_parts < 1:
                raise NetworkConfigException("Segmentation needs at least one part.")
            if len(self.decoder_configs) != self.n_layers:
                raise NetworkConfigException(
                    f"{len(self.decoder_configs)} decoder stages for {self.n_layers}"
                    " encoder stages."
                )
            try:
                for j, cfg in enumerate(self.decoder_configs):
                    cfg.validate(sizes[self.n_layers - 1 - j])
            except RIConvConfigException as err:
                raise NetworkConfigException(f"Decoder: {err}") from err

    def describe(self) -> str:
        stages = " -> ".join(str(size) for size in self.stage_sizes)
        return f"{self.task} network, {self.n_layers} layer(s), points {stages}"


def scaled_representatives(n_points: int, plan: List[int], reference: int) -> List[int]:
    return [max(1, n_points * count // reference) for count in plan]


def encoder_configs(
    n_points: int,
    representatives: List[int],
    k_neighbors: List[int],
    n_bins: List[int],
    out_channels: List[int],
    feature_mode: str,
    use_lift_mlp: bool,
    lift_mlp_widths: List[int],
) -> List[RIConvConfig]:
    configs = []
    previous = n_points
    for count, k, bins, channels in zip(
        representatives, k_neighbors, n_bins, out_channels
    ):
        # Neighbors are drawn from the previous stage
        k = min(k, previous)
        configs.append(
            RIConvConfig(
                n_representatives=count,
                k_neighbors=k,
                n_bins=min(bins, k),
                out_channels=channels,
                lift_mlp_widths=list(lift_mlp_widths),
                feature_mode=feature_mode,
                use_lift_mlp=use_lift_mlp,
            )
        )
        previous = count
    return configs


def front_config(
    n_points: int, feature_mode: str, use_lift_mlp: bool, lift_mlp_widths: List[int]
) -> RIConvConfig:
    k = min(FRONT_K_NEIGHBORS, n_points)
    return RIConvConfig(
        n_representatives=n_points,
        k_neighbors=k,
        n_bins=min(FRONT_BINS, k),
        out_channels=FRONT_OUT_CHANNELS,
        lift_mlp_widths=list(lift_mlp_widths),
        feature_mode=feature_mode,
        use_lift_mlp=use_lift_mlp,
        sample_representatives=False,
    )


def classification_config(
    n_classes: int,
    n_points: int = CLS_POINTS,
    n_layers: int = 3,
    classifier_mode: str = "multi_vector",
    feature_mode: str = "full",
    use_lift_mlp: bool = True,
    lift_mlp_widths: Optional[List[int]] = None,
    head_widths: Optional[List[int]] = None,
    dropout: float = 0.0,
) -> NetworkConfig:
    """
    Default plan scaled to `n_points`. Fewer layers keep the first stages, the
    4-layer network adds an unsampled layer in front.
    """
    if not 1 <= n_layers <= MAX_LAYERS:
        raise NetworkConfigException(
            f"Networks have 1 to {MAX_LAYERS} layers, got {n_layers}."
        )
    lift = list(LIFT_MLP_WIDTHS if lift_mlp_widths is None else lift_mlp_widths)
    sampled = min(n_layers, len(CLS_REPRESENTATIVES))
    configs = encoder_configs(
        n_points,
        scaled_representatives(n_points, CLS_REPRESENTATIVES, CLS_POINTS)[:sampled],
        CLS_K_NEIGHBORS[:sampled],
        CLS_BINS[:sampled],
        CLS_OUT_CHANNELS[:sampled],
        feature_mode,
        use_lift_mlp,
        lift,
    )
    if n_layers == MAX_LAYERS:
        configs.insert(0, front_config(n_points, feature_mode, use_lift_mlp, lift))
    net = NetworkConfig(
        task="classification",
        n_points=n_points,
        layer_configs=configs,
        n_classes=n_classes,
        classifier_mode=classifier_mode,
        head_widths=list(CLS_HEAD_WIDTHS if head_widths is None else head_widths),
        dropout=dropout,
    )
    net.validate()
    return net


def segmentation_config(
    n_classes: int,
    n_parts: int,
    n_points: int = SEG_POINTS,
    n_layers: int = 3,
    feature_mode: str = "full",
    use_lift_mlp: bool = True,
    lift_mlp_widths: Optional[List[int]] = None,
    decoder_k_neighbors: int = SEG_DECODER_K_NEIGHBORS,
    decoder_n_bins: int = SEG_DECODER_BINS,
    decoder_mlp_widths: Optional[List[int]] = None,
    decoder_out_channels: Optional[List[int]] = None,
) -> NetworkConfig:
    if not 1 <= n_layers <= MAX_SEGMENTATION_LAYERS:
        raise NetworkConfigException(
            f"Segmentation networks have 1 to {MAX_SEGMENTATION_LAYERS} layers, got"
            f" {n_layers}."
        )
    lift = list(LIFT_MLP_WIDTHS if lift_mlp_widths is None else lift_mlp_widths)
    mlp_widths = list(
        SEG_DECODER_MLP_WIDTHS if decoder_mlp_widths is None else decoder_mlp_widths
    )
    out_channels = list(
        SEG_DECODER_OUT_CHANNELS
        if decoder_out_channels is None
        else decoder_out_channels
    )
    configs = encoder_configs(
        n_points,
        scaled_representatives(n_points, SEG_REPRESENTATIVES, SEG_POINTS)[:n_layers],
        SEG_K_NEIGHBORS[:n_layers],
        SEG_BINS[:n_layers],
        SEG_OUT_CHANNELS[:n_layers],
        feature_mode,
        use_lift_mlp,
        lift,
    )
    sizes = [n_points] + [cfg.n_representatives for cfg in configs]
    # Decoder stage j brings the features of stage n_layers - j back one stage
    decoders = []
    offset = len(mlp_widths) - n_layers
    for j in range(n_layers):
        fine = sizes[n_layers - 1 - j]
        k = min(decoder_k_neighbors, fine)
        decoders.append(
            RIDeconvConfig(
                mlp_widths=[mlp_widths[offset + j]],
                conv=RIConvConfig(
                    n_representatives=fine,
                    k_neighbors=k,
                    n_bins=min(decoder_n_bins, k),
                    out_channels=out_channels[offset + j],
                    lift_mlp_widths=list(lift),
                    feature_mode=feature_mode,
                    use_lift_mlp=use_lift_mlp,
                    sample_representatives=False,
                ),
            )
        )
    net = NetworkConfig(
        task="segmentation",
        n_points=n_points,
        layer_configs=configs,
        n_classes=n_classes,
        n_parts=n_parts,
        decoder_configs=decoders,
    )
    net.validate()
    return net


# =================================
#           Parameters
# =================================


@dataclass
class NetworkParams:
    encoder: List[RIConvParams]
    head: List[LayerParams]
    decoder: List[RIDeconvParams] = field(default_factory=list)

    def named(self) -> Dict[str, LayerParams]:
        named: Dict[str, LayerParams] = OrderedDict()
        for encoder in self.encoder:
            named.update(encoder.named())
        for decoder in self.decoder:
            named.update(decoder.named())
        for head in self.head:
            named[head.name] = head
        return named

    def set_mode(self, mode: Mode) -> None:
        for params in self.named().values():
            params.mode = mode

    def tensors(self) -> List[Tensor]:
        return [
            tensor
            for params in self.named().values()
            for tensor in params.trainable()
        ]

    def copy(self) -> Dict[str, Dict[str, Array]]:
        return {
            name: {
                field_name: array.copy()
                for field_name, array in params.arrays().items()
            }
            for name, params in self.named().items()
        }

    def restore(self, snapshot: Dict[str, Dict[str, Array]]) -> None:
        for name, params in self.named().items():
            for field_name, array in snapshot[name].items():
                getattr(params, field_name).data = array.copy()


def init_network_params(net: NetworkConfig, seed: int) -> NetworkParams:
    net.validate()
    rng = make_rng(seed, "params")
    encoder = []
    channels = 0
    for i, cfg in enumerate(net.layer_configs):
        encoder.append(init_riconv_params(f"encoder{i}", cfg, channels, rng))
        channels = cfg.out_channels
    decoder = []
    head = []
    if net.task == "classification":
        for i, width in enumerate(net.head_widths):
            head.append(init_dense_params(f"head{i}", channels, width, rng))
            channels = width
        head.append(
            init_dense_params(
                f"head{len(net.head_widths)}", channels, net.n_classes, rng
            )
        )
    else:
        encoder_channels = [0] + [cfg.out_channels for cfg in net.layer_configs]
        coarse = encoder_channels[-1]
        for j, cfg in enumerate(net.decoder_configs):
            skip = encoder_channels[net.n_layers - 1 - j]
            decoder.append(init_rideconv_params(f"decoder{j}", cfg, coarse, skip, rng))
            coarse = cfg.conv.out_channels
        head.append(init_dense_params("head0", coarse, net.n_parts, rng))
    return NetworkParams(encoder=encoder, head=head, decoder=decoder)


# =================================
#             Networks
# =================================


class Network:
    def __init__(self, net: NetworkConfig, params: NetworkParams, seed: int = 0):
        net.validate()
        self.net: NetworkConfig = net
        self.params: NetworkParams = params
        self.encoder: List[RIConv] = [
            RIConv(cfg, layer_params)
            for cfg, layer_params in zip(net.layer_configs, params.encoder)
        ]
        self.dropout_rng: np.random.Generator = make_rng(seed, "dropout")
        self.outputs: List[LayerOutput] = []

    def set_mode(self, mode: Mode) -> None:
        self.params.set_mode(mode)

    def parameters(self) -> List[Tensor]:
        return self.params.tensors()

    def zero_grad(self) -> None:
        for tensor in self.parameters():
            tensor.zero_grad()

    def check_points(self, points: Array) -> None:
        if points.ndim != 3 or points.shape[1:] != (self.net.n_points, 3):
            raise ShapeMismatchException(
                f"{self.net.task} network expects (B, {self.net.n_points}, 3) points,"
                f" got {points.shape}."
            )

    def encode(self, points: Array) -> List[LayerOutput]:
        self.check_points(points)
        self.outputs = []
        current_points, features = points, None
        for layer in self.encoder:
            output = layer.forward(current_points, features)
            self.outputs.append(output)
            current_points, features = output.points, output.features
        return self.outputs

    def encoder_backward(self, grads: List[Optional[Array]]) -> None:
        # grads[i]: gradient of the output features of encoder layer i
        for i in reversed(range(len(self.encoder))):
            grad = grads[i]
            if grad is None:
                continue
            previous = self.encoder[i].backward(grad)
            if i > 0 and previous is not None:
                above = grads[i - 1]
                grads[i - 1] = previous if above is None else above + previous


class ClassificationNetwork(Network):
    def __init__(self, net: NetworkConfig, params: NetworkParams, seed: int = 0):
        super().__init__(net, params, seed)
        layers: List[Layer] = []
        for head_params in params.head[:-1]:
            layers += [
                Dense(head_params),
                ReLU(),
                Dropout(net.dropout, self.dropout_rng),
            ]
        layers.append(Dense(params.head[-1]))
        self.head: Sequential = Sequential(layers)
        self.pool: Optional[MaxPoolGroups] = None

    def set_mode(self, mode: Mode) -> None:
        super().set_mode(mode)
        for layer in self.head.layers:
            if isinstance(layer, Dropout):
                layer.mode = mode

    def forward(self, points: Array) -> Array:
        """
        Logits of every final vector (B, V, n_classes), V the number of final
        representatives (multi_vector) or 1 (single_vector).
        """
        features = self.encode(points)[-1].features
        if self.net.classifier_mode == "single_vector":
            groups = np.zeros(features.shape[:2], dtype=np.int64)
            self.pool = MaxPoolGroups(groups, 1)
            features = self.pool.forward(features)
        return self.head.forward(features)

    def backward(self, logits_grad: Array) -> None:
        grad = self.head.backward(logits_grad)
        if self.net.classifier_mode == "single_vector":
            assert self.pool is not None
            grad = self.pool.backward(grad)
        grads: List[Optional[Array]] = [None] * len(self.encoder)
        grads[-1] = grad
        self.encoder_backward(grads)

    def predict(self, points: Array) -> Tuple[NDArray[np.int64], Array]:
        mean_logits = self.forward(points).mean(axis=1)
        # argmax keeps the lowest class index on ties
        return np.argmax(mean_logits, axis=-1), mean_logits


class SegmentationNetwork(Network):
    def __init__(self, net: NetworkConfig, params: NetworkParams, seed: int = 0):
        super().__init__(net, params, seed)
        self.decoder: List[RIDeconv] = [
            RIDeconv(cfg, layer_params)
            for cfg, layer_params in zip(net.decoder_configs, params.decoder)
        ]
        self.head: Dense = Dense(params.head[0])

    def forward(self, points: Array) -> Array:
        """
        Part logits of every input point (B, N, n_parts), in input order.
        """
        levels = self.encode(points)
        stage_points = [points] + [level.points for level in levels]
        stage_features: List[Optional[Array]] = [None] + [
            level.features for level in levels
        ]
        coarse_points, coarse_features = stage_points[-1], stage_features[-1]
        assert coarse_features is not None
        for j, layer in enumerate(self.decoder):
            fine = self.net.n_layers - 1 - j
            output = layer.forward(
                coarse_points, coarse_features, stage_points[fine], stage_features[fine]
            )
            coarse_points, coarse_features = output.points, output.features
        return self.head.forward(coarse_features)

    def backward(self, logits_grad: Array) -> None:
        grad = self.head.backward(logits_grad)
        grads: List[Optional[Array]] = [None] * len(self.encoder)
        for j in reversed(range(len(self.decoder))):
            grad, skip_grad = self.decoder[j].backward(grad)
            fine = self.net.n_layers - 1 - j
            if fine > 0:
                level = fine - 1
                above = grads[level]
                grads[level] = skip_grad if above is None else above + skip_grad
        grads[-1] = grad if grads[-1] is None else grads[-1] + grad
        self.encoder_backward(grads)

    def predict(self, points: Array) -> Tuple[NDArray[np.int64], Array]:
        logits = self.forward(points)
        return np.argmax(logits, axis=-1), logits


def build_network(net: NetworkConfig, params: NetworkParams, seed: int = 0) -> Network:
    if net.task == "classification":
        return ClassificationNetwork(net, params, seed)
    return SegmentationNetwork(net, params, seed)


# =================================
#       Single cloud helpers
# =================================


def classify_forward(
    cloud: PointCloud, net: NetworkConfig, params: NetworkParams
) -> Tuple[Array, Array]:
    """
    Per-vector logits (V, n_classes) and their mean (n_classes,).
    """
    if net.task != "classification":
        raise NetworkConfigException(f"classify_forward on a {net.task} network.")
    logits = ClassificationNetwork(net, params).forward(cloud.points[None])[0]
    return logits, logits.mean(axis=0)


def segment_forward(
    cloud: PointCloud, net: NetworkConfig, params: NetworkParams
) -> Array:
    if net.task != "segmentation":
        raise NetworkConfigException(f"segment_forward on a {net.task} network.")
    return SegmentationNetwork(net, params).forward(cloud.points[None])[0]
