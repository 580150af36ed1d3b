"""
Dense tensor layers with hand-derived backward passes.

Every layer follows the same protocol:

    output = layer.forward(input)
    input_grad = layer.backward(output_grad)

`forward` caches what `backward` needs, `backward` returns the gradient with
respect to the input(s) and accumulates parameter gradients into the `grad`
buffer of the parameter tensors. Leading axes are shared: a dense layer maps
(..., C_in) -> (..., C_out) with the same weights for every leading index.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray

from riconvnet.constants import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPSILON,
    ADAM_LEARNING_RATE,
    BN_EPSILON,
    BN_MOMENTUM,
    CHECKPOINT_VERSION,
    GRADCHECK_STEP,
)
from riconvnet.exceptions import (
    CheckpointException,
    NonFiniteGradientException,
    ShapeMismatchException,
)
from riconvnet.helpers import relative_error

logger = logging.getLogger("riconvnet")

Array = NDArray[np.float64]

# =================================
#         Tensors and params
# =================================


@dataclass
class Tensor:
    data: Array
    grad: Optional[Array] = None
    name: str = ""

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate(self, gradient: Array) -> None:
        if gradient.shape != self.data.shape:
            raise ShapeMismatchException(
                f"Gradient {gradient.shape} does not match tensor {self.name}"
                f" {self.data.shape}."
            )
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += gradient


class Mode(Enum):
    TRAINING = "training"
    INFERENCE = "inference"


@dataclass
class LayerParams:
    name: str
    weights: Tensor
    biases: Tensor
    bn_gamma: Optional[Tensor] = None
    bn_beta: Optional[Tensor] = None
    bn_running_mean: Optional[Tensor] = None
    bn_running_var: Optional[Tensor] = None
    mode: Mode = Mode.TRAINING

    FIELDS = (
        "weights",
        "biases",
        "bn_gamma",
        "bn_beta",
        "bn_running_mean",
        "bn_running_var",
    )

    def __post_init__(self):
        out_channels = self.weights.shape[-1]
        if self.biases.shape != (out_channels,):
            raise ShapeMismatchException(
                f"{self.name}: biases {self.biases.shape} for {out_channels} outputs."
            )
        for name in LayerParams.FIELDS[2:]:
            tensor = getattr(self, name)
            if tensor is not None and tensor.shape != (out_channels,):
                raise ShapeMismatchException(
                    f"{self.name}: {name} {tensor.shape} for {out_channels} outputs."
                )
        if self.bn_running_var is not None and np.any(self.bn_running_var.data < 0):
            raise ShapeMismatchException(f"{self.name}: negative running variance.")
        for name in LayerParams.FIELDS:
            tensor = getattr(self, name)
            if tensor is not None:
                tensor.name = f"{self.name}/{name}"

    @property
    def has_batchnorm(self) -> bool:
        return self.bn_gamma is not None

    def trainable(self) -> List[Tensor]:
        tensors = [self.weights, self.biases]
        if self.bn_gamma is not None and self.bn_beta is not None:
            tensors += [self.bn_gamma, self.bn_beta]
        return tensors

    def arrays(self) -> Dict[str, Array]:
        return {
            name: getattr(self, name).data
            for name in LayerParams.FIELDS
            if getattr(self, name) is not None
        }


def init_params(
    name: str,
    weight_shape: Tuple[int, ...],
    rng: np.random.Generator,
    batchnorm: bool = False,
) -> LayerParams:
    fan_in = int(np.prod(weight_shape[:-1]))
    out_channels = weight_shape[-1]
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    params = LayerParams(
        name=name,
        weights=Tensor(rng.uniform(-bound, bound, size=weight_shape)),
        biases=Tensor(rng.uniform(-bound, bound, size=out_channels)),
    )
    if batchnorm:
        params.bn_gamma = Tensor(np.ones(out_channels), name=f"{name}/bn_gamma")
        params.bn_beta = Tensor(np.zeros(out_channels), name=f"{name}/bn_beta")
        params.bn_running_mean = Tensor(
            np.zeros(out_channels), name=f"{name}/bn_running_mean"
        )
        params.bn_running_var = Tensor(
            np.ones(out_channels), name=f"{name}/bn_running_var"
        )
    return params


def init_dense_params(
    name: str, c_in: int, c_out: int, rng: np.random.Generator, batchnorm: bool = False
) -> LayerParams:
    return init_params(name, (c_in, c_out), rng, batchnorm)


def init_conv1d_params(
    name: str,
    kernel_size: int,
    c_in: int,
    c_out: int,
    rng: np.random.Generator,
    batchnorm: bool = False,
) -> LayerParams:
    return init_params(name, (kernel_size, c_in, c_out), rng, batchnorm)


# =================================
#              Layers
# =================================


class Layer:
    def forward(self, *inputs):
        raise NotImplementedError

    def backward(self, output_grad: Array):
        raise NotImplementedError

    def parameters(self) -> List[Tensor]:
        return []

    def __repr__(self) -> str:
        return self.__class__.__name__


class Dense(Layer):
    def __init__(self, params: LayerParams):
        if params.weights.data.ndim != 2:
            raise ShapeMismatchException(
                f"{params.name}: dense weights are (C_in, C_out), got"
                f" {params.weights.shape}."
            )
        self.params: LayerParams = params
        self.input: Optional[Array] = None

    def forward(self, x: Array) -> Array:
        c_in = self.params.weights.shape[0]
        if x.shape[-1] != c_in:
            raise ShapeMismatchException(
                f"{self.params.name}: expected {c_in} input channels, got {x.shape}."
            )
        self.input = x
        return x @ self.params.weights.data + self.params.biases.data

    def backward(self, output_grad: Array) -> Array:
        assert self.input is not None
        c_in, c_out = self.params.weights.shape
        flat_input = self.input.reshape(-1, c_in)
        flat_grad = output_grad.reshape(-1, c_out)
        self.params.weights.accumulate(flat_input.T @ flat_grad)
        self.params.biases.accumulate(flat_grad.sum(axis=0))
        return output_grad @ self.params.weights.data.T

    def parameters(self) -> List[Tensor]:
        return [self.params.weights, self.params.biases]

    def __repr__(self) -> str:
        c_in, c_out = self.params.weights.shape
        return f"Dense {c_in} -> {c_out}"


class ReLU(Layer):
    def __init__(self):
        self.input: Optional[Array] = None

    def forward(self, x: Array) -> Array:
        self.input = x
        return np.maximum(x, 0.0)

    def backward(self, output_grad: Array) -> Array:
        assert self.input is not None
        return output_grad * (self.input > 0)


class BatchNorm(Layer):
    """
    Per-channel normalization over every leading axis. Training mode uses the
    batch statistics and updates the running ones, inference mode is the fixed
    affine map given by the running statistics.
    """

    def __init__(self, params: LayerParams, epsilon: float = BN_EPSILON):
        if not params.has_batchnorm:
            raise ShapeMismatchException(f"{params.name} holds no batch-norm tensors.")
        self.params: LayerParams = params
        self.epsilon: float = epsilon
        self.normalized: Optional[Array] = None
        self.inv_std: Optional[Array] = None
        self.batch_mode: Mode = params.mode

    def forward(self, x: Array) -> Array:
        params = self.params
        assert params.bn_gamma is not None and params.bn_beta is not None
        assert params.bn_running_mean is not None and params.bn_running_var is not None
        if x.shape[-1] != params.bn_gamma.shape[0]:
            raise ShapeMismatchException(
                f"{params.name}: batch-norm over {params.bn_gamma.shape[0]} channels,"
                f" got {x.shape}."
            )
        self.batch_mode = params.mode
        if params.mode is Mode.TRAINING:
            axes = tuple(range(x.ndim - 1))
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            running_mean = params.bn_running_mean.data
            running_var = params.bn_running_var.data
            running_mean *= BN_MOMENTUM
            running_mean += (1 - BN_MOMENTUM) * mean
            running_var *= BN_MOMENTUM
            running_var += (1 - BN_MOMENTUM) * var
        else:
            mean = params.bn_running_mean.data
            var = params.bn_running_var.data
        self.inv_std = 1.0 / np.sqrt(var + self.epsilon)
        self.normalized = (x - mean) * self.inv_std
        return self.normalized * params.bn_gamma.data + params.bn_beta.data

    def backward(self, output_grad: Array) -> Array:
        assert self.normalized is not None and self.inv_std is not None
        params = self.params
        assert params.bn_gamma is not None and params.bn_beta is not None
        axes = tuple(range(output_grad.ndim - 1))
        params.bn_gamma.accumulate((output_grad * self.normalized).sum(axis=axes))
        params.bn_beta.accumulate(output_grad.sum(axis=axes))
        normalized_grad = output_grad * params.bn_gamma.data
        if self.batch_mode is Mode.INFERENCE:
            return normalized_grad * self.inv_std
        count = int(np.prod(output_grad.shape[:-1]))
        return (self.inv_std / count) * (
            count * normalized_grad
            - normalized_grad.sum(axis=axes)
            - self.normalized * (normalized_grad * self.normalized).sum(axis=axes)
        )

    def parameters(self) -> List[Tensor]:
        assert self.params.bn_gamma is not None and self.params.bn_beta is not None
        return [self.params.bn_gamma, self.params.bn_beta]


class MaxPoolGroups(Layer):
    """
    (..., K, C) rows pooled into (..., n_groups, C) by their group index
    (..., K). An empty group yields the zero vector, the gradient of a group
    goes to its argmax row (lowest row on ties).
    """

    def __init__(self, groups: NDArray[np.int64], n_groups: int):
        self.groups: NDArray[np.int64] = groups
        self.n_groups: int = n_groups
        self.argmax: List[NDArray[np.int64]] = []
        self.nonempty: List[NDArray[np.bool_]] = []
        self.input_shape: Tuple[int, ...] = ()
        self.empty_count: int = 0

    def forward(self, x: Array) -> Array:
        if x.shape[:-1] != self.groups.shape:
            raise ShapeMismatchException(
                f"Group indices {self.groups.shape} do not match rows of {x.shape}."
            )
        self.input_shape = x.shape
        self.argmax, self.nonempty = [], []
        pooled = np.zeros(x.shape[:-2] + (self.n_groups, x.shape[-1]))
        for group in range(self.n_groups):
            member = self.groups == group
            masked = np.where(member[..., None], x, -np.inf)
            rows = np.argmax(masked, axis=-2)
            values = np.take_along_axis(masked, rows[..., None, :], axis=-2)[..., 0, :]
            nonempty = member.any(axis=-1)
            pooled[..., group, :] = np.where(nonempty[..., None], values, 0.0)
            self.argmax.append(rows)
            self.nonempty.append(nonempty)
        self.empty_count = int(sum((~n).sum() for n in self.nonempty))
        return pooled

    def backward(self, output_grad: Array) -> Array:
        input_grad = np.zeros(self.input_shape)
        for group in range(self.n_groups):
            routed = np.zeros(self.input_shape)
            contribution = np.where(
                self.nonempty[group][..., None], output_grad[..., group, :], 0.0
            )
            np.put_along_axis(
                routed,
                self.argmax[group][..., None, :],
                contribution[..., None, :],
                axis=-2,
            )
            input_grad += routed
        return input_grad


class Conv1d(Layer):
    """
    Valid 1D convolution along axis -2: (..., L, C_in) -> (..., L - k + 1, C_out)
    with weights (k, C_in, C_out), stride 1, no padding.
    """

    def __init__(self, params: LayerParams):
        if params.weights.data.ndim != 3:
            raise ShapeMismatchException(
                f"{params.name}: conv weights are (k, C_in, C_out), got"
                f" {params.weights.shape}."
            )
        self.params: LayerParams = params
        self.input: Optional[Array] = None

    def forward(self, x: Array) -> Array:
        kernel, c_in, _ = self.params.weights.shape
        if x.ndim < 2 or x.shape[-1] != c_in or x.shape[-2] < kernel:
            raise ShapeMismatchException(
                f"{self.params.name}: kernel ({kernel}, {c_in}) does not fit input"
                f" {x.shape}."
            )
        self.input = x
        positions = x.shape[-2] - kernel + 1
        outputs = [
            np.tensordot(x[..., o : o + kernel, :], self.params.weights.data, axes=2)
            for o in range(positions)
        ]
        return np.stack(outputs, axis=-2) + self.params.biases.data

    def backward(self, output_grad: Array) -> Array:
        assert self.input is not None
        kernel, c_in, c_out = self.params.weights.shape
        x = self.input
        input_grad = np.zeros_like(x)
        weights_grad = np.zeros_like(self.params.weights.data)
        for o in range(output_grad.shape[-2]):
            window = x[..., o : o + kernel, :].reshape(-1, kernel, c_in)
            grad = output_grad[..., o, :].reshape(-1, c_out)
            weights_grad += np.tensordot(window, grad, axes=([0], [0]))
            input_grad[..., o : o + kernel, :] += np.tensordot(
                output_grad[..., o, :], self.params.weights.data, axes=([-1], [2])
            )
        self.params.weights.accumulate(weights_grad)
        self.params.biases.accumulate(output_grad.reshape(-1, c_out).sum(axis=0))
        return input_grad

    def parameters(self) -> List[Tensor]:
        return [self.params.weights, self.params.biases]

    def __repr__(self) -> str:
        kernel, c_in, c_out = self.params.weights.shape
        return f"Conv1d k={kernel} {c_in} -> {c_out}"


class Dropout(Layer):
    def __init__(self, rate: float, rng: np.random.Generator):
        self.rate: float = rate
        self.rng: np.random.Generator = rng
        self.mode: Mode = Mode.TRAINING
        self.mask: Optional[Array] = None

    def forward(self, x: Array) -> Array:
        if self.mode is Mode.INFERENCE or self.rate == 0.0:
            self.mask = None
            return x
        self.mask = (self.rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self.mask

    def backward(self, output_grad: Array) -> Array:
        if self.mask is None:
            return output_grad
        return output_grad * self.mask


class SoftmaxCrossEntropy(Layer):
    """
    Mean cross entropy of logits (..., C) against integer labels (...).
    """

    def __init__(self, labels: NDArray[np.int64]):
        self.labels: NDArray[np.int64] = np.asarray(labels, dtype=np.int64)
        self.probabilities: Optional[Array] = None

    def forward(self, logits: Array) -> Array:
        if logits.shape[:-1] != self.labels.shape:
            raise ShapeMismatchException(
                f"Labels {self.labels.shape} do not match logits {logits.shape}."
            )
        shifted = logits - logits.max(axis=-1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        log_probabilities = shifted - log_norm
        self.probabilities = np.exp(log_probabilities)
        picked = np.take_along_axis(log_probabilities, self.labels[..., None], axis=-1)
        return np.asarray(-picked.mean())

    def backward(self, output_grad: Union[Array, float] = 1.0) -> Array:
        assert self.probabilities is not None
        grad = self.probabilities.copy()
        np.put_along_axis(
            grad,
            self.labels[..., None],
            np.take_along_axis(grad, self.labels[..., None], axis=-1) - 1.0,
            axis=-1,
        )
        return grad * (np.asarray(output_grad) / self.labels.size)


class Sequential(Layer):
    def __init__(self, layers: Sequence[Layer]):
        self.layers: List[Layer] = list(layers)

    def forward(self, x: Array) -> Array:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, output_grad: Array) -> Array:
        for layer in reversed(self.layers):
            output_grad = layer.backward(output_grad)
        return output_grad

    def parameters(self) -> List[Tensor]:
        return [tensor for layer in self.layers for tensor in layer.parameters()]

    def __repr__(self) -> str:
        return " | ".join(repr(layer) for layer in self.layers)


def dense_unit(params: LayerParams) -> Sequential:
    # dense -> batch-norm -> ReLU, the shared MLP building block
    layers: List[Layer] = [Dense(params)]
    if params.has_batchnorm:
        layers.append(BatchNorm(params))
    layers.append(ReLU())
    return Sequential(layers)


# =================================
#               Adam
# =================================


@dataclass(frozen=True)
class AdamHyper:
    learning_rate: float = ADAM_LEARNING_RATE
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON


@dataclass
class AdamState:
    step: int = 0
    first_moments: Dict[str, Array] = field(default_factory=dict)
    second_moments: Dict[str, Array] = field(default_factory=dict)


def adam_step(
    tensors: Sequence[Tensor], state: AdamState, hyper: AdamHyper = AdamHyper()
) -> AdamState:
    # Check every gradient before touching any parameter
    for tensor in tensors:
        if tensor.grad is not None and not np.all(np.isfinite(tensor.grad)):
            bad = int(np.sum(~np.isfinite(tensor.grad)))
            raise NonFiniteGradientException(
                f"{bad} non-finite gradient entries in {tensor.name or 'unnamed tensor'}"
                f" at step {state.step + 1}."
            )
    state.step += 1
    correction1 = 1 - hyper.beta1**state.step
    correction2 = 1 - hyper.beta2**state.step
    for tensor in tensors:
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        first = state.first_moments.setdefault(tensor.name, np.zeros_like(tensor.data))
        second = state.second_moments.setdefault(
            tensor.name, np.zeros_like(tensor.data)
        )
        first *= hyper.beta1
        first += (1 - hyper.beta1) * grad
        second *= hyper.beta2
        second += (1 - hyper.beta2) * grad**2
        tensor.data -= (
            hyper.learning_rate
            * (first / correction1)
            / (np.sqrt(second / correction2) + hyper.epsilon)
        )
    return state


# =================================
#          Gradient check
# =================================


def grad_check(
    layer: Layer,
    input_shapes: Sequence[Tuple[int, ...]],
    tolerance: Optional[float] = None,
    rng: Optional[np.random.Generator] = None,
    step: float = GRADCHECK_STEP,
) -> float:
    """
    Compares analytic gradients of sum(output * R), R a fixed random array,
    with central differences over every input and parameter entry. Returns the
    worst relative error; logs a warning when it exceeds `tolerance`.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    inputs = [rng.standard_normal(shape) for shape in input_shapes]
    projection = rng.standard_normal(np.shape(layer.forward(*inputs)))

    def objective() -> float:
        return float(np.sum(layer.forward(*inputs) * projection))

    parameters = layer.parameters()
    for tensor in parameters:
        tensor.zero_grad()
    layer.forward(*inputs)
    input_grads = layer.backward(projection)
    if not isinstance(input_grads, tuple):
        input_grads = (input_grads,)
    analytic = [g for g in input_grads if g is not None][: len(inputs)]
    analytic += [
        tensor.grad.copy() if tensor.grad is not None else np.zeros_like(tensor.data)
        for tensor in parameters
    ]
    targets = inputs[: len(analytic)] + [tensor.data for tensor in parameters]

    worst = 0.0
    for array, gradient in zip(targets, analytic):
        numeric = np.zeros_like(array)
        flat = array.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            plus = objective()
            flat[i] = original - step
            minus = objective()
            flat[i] = original
            numeric.reshape(-1)[i] = (plus - minus) / (2 * step)
        worst = max(worst, relative_error(gradient, numeric))
    if tolerance is not None and worst >= tolerance:
        logger.warning(f"❌ {layer!r}: gradient error {worst:.3e} >= {tolerance:.1e}")
    else:
        logger.debug(f"✅ {layer!r}: gradient error {worst:.3e}")
    return worst


# =================================
#            Checkpoints
# =================================


def save_checkpoint(path: str, params: Mapping[str, LayerParams]) -> None:
    arrays: Dict[str, Array] = {
        "__version__": np.array([CHECKPOINT_VERSION], dtype="<i8")
    }
    for layer_name, layer_params in params.items():
        for field_name, array in layer_params.arrays().items():
            arrays[f"{layer_name}/{field_name}"] = np.asarray(array, dtype="<f8")
    directory = os.path.dirname(path)
    if directory and not os.path.exists(directory):
        os.makedirs(directory)
    try:
        with open(path, "wb") as checkpoint:
            np.savez(checkpoint, **arrays)
    except EnvironmentError as err:
        logger.error(err)
        raise
    logger.debug(f"💾 Checkpoint with {len(arrays) - 1} arrays written to {path}")


def load_checkpoint(path: str) -> Dict[str, Array]:
    try:
        with np.load(path) as archive:
            arrays = {name: archive[name] for name in archive.files}
    except (EnvironmentError, ValueError) as err:
        logger.error(err)
        raise CheckpointException(f"Cannot read checkpoint {path}: {err}") from err
    version = arrays.pop("__version__", None)
    if version is None or int(version[0]) != CHECKPOINT_VERSION:
        raise CheckpointException(
            f"Checkpoint {path} has version {version}, expected {CHECKPOINT_VERSION}."
        )
    return arrays


def restore_params(params: Mapping[str, LayerParams], arrays: Mapping[str, Array]):
    expected = {
        f"{layer_name}/{field_name}"
        for layer_name, layer_params in params.items()
        for field_name in layer_params.arrays()
    }
    if expected != set(arrays):
        missing = sorted(expected - set(arrays))[:3]
        extra = sorted(set(arrays) - expected)[:3]
        raise CheckpointException(
            f"Checkpoint does not match the network (missing {missing}, extra {extra})."
        )
    for layer_name, layer_params in params.items():
        for field_name in layer_params.arrays():
            tensor: Tensor = getattr(layer_params, field_name)
            array = arrays[f"{layer_name}/{field_name}"]
            if array.shape != tensor.shape:
                raise CheckpointException(
                    f"{layer_name}/{field_name}: checkpoint shape {array.shape},"
                    f" network shape {tensor.shape}."
                )
            tensor.data = np.array(array, dtype=np.float64)
