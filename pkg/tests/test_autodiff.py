import math

import numpy as np
import pytest

from riconvnet.autodiff import (
    AdamHyper,
    AdamState,
    BatchNorm,
    Conv1d,
    Dense,
    Dropout,
    LayerParams,
    MaxPoolGroups,
    Mode,
    ReLU,
    Sequential,
    SoftmaxCrossEntropy,
    Tensor,
    adam_step,
    dense_unit,
    grad_check,
    init_conv1d_params,
    init_dense_params,
    load_checkpoint,
    restore_params,
    save_checkpoint,
)
from riconvnet.constants import (
    BN_EPSILON,
    GRADCHECK_PRIMITIVE_TOLERANCE,
)
from riconvnet.exceptions import (
    CheckpointException,
    NonFiniteGradientException,
    ShapeMismatchException,
)
from riconvnet.helpers import make_rng
from tests.conftest import SEED


@pytest.fixture
def layer_rng():
    return make_rng(SEED, "layers")


# =================================
#             Params
# =================================


def test_layer_params_names_tensors(layer_rng):
    params = init_dense_params("head0", 4, 3, layer_rng, batchnorm=True)
    assert params.weights.name == "head0/weights"
    assert params.bn_running_var.name == "head0/bn_running_var"
    assert params.has_batchnorm
    assert len(params.trainable()) == 4
    assert sorted(params.arrays()) == sorted(LayerParams.FIELDS)


def test_layer_params_shape_checks():
    with pytest.raises(ShapeMismatchException):
        LayerParams("bad", Tensor(np.zeros((4, 3))), Tensor(np.zeros(2)))
    with pytest.raises(ShapeMismatchException):
        LayerParams(
            "bad",
            Tensor(np.zeros((4, 3))),
            Tensor(np.zeros(3)),
            bn_running_var=Tensor(-np.ones(3)),
        )


def test_init_bounds(layer_rng):
    params = init_conv1d_params("conv", 2, 8, 5, layer_rng)
    assert params.weights.shape == (2, 8, 5)
    assert np.all(np.abs(params.weights.data) <= 1 / math.sqrt(16))


# =================================
#             Layers
# =================================


def test_dense_forward_backward(layer_rng):
    params = init_dense_params("dense", 3, 2, layer_rng)
    dense = Dense(params)
    x = layer_rng.standard_normal((5, 4, 3))
    out = dense.forward(x)
    assert out.shape == (5, 4, 2)
    assert np.allclose(out[1, 2], x[1, 2] @ params.weights.data + params.biases.data)
    grad = dense.backward(np.ones_like(out))
    assert grad.shape == x.shape
    assert np.allclose(params.biases.grad, [20.0, 20.0])


def test_dense_channel_mismatch(layer_rng):
    dense = Dense(init_dense_params("dense", 3, 2, layer_rng))
    with pytest.raises(ShapeMismatchException):
        dense.forward(np.zeros((2, 4)))


def test_gradients_accumulate(layer_rng):
    params = init_dense_params("dense", 3, 2, layer_rng)
    dense = Dense(params)
    x = layer_rng.standard_normal((4, 3))
    for _ in range(2):
        dense.forward(x)
        dense.backward(np.ones((4, 2)))
    assert np.allclose(params.biases.grad, [8.0, 8.0])
    params.biases.zero_grad()
    assert np.all(params.biases.grad == 0)


def test_relu():
    relu = ReLU()
    assert np.array_equal(relu.forward(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
    assert np.array_equal(relu.backward(np.ones(3)), [0.0, 0.0, 1.0])


def test_batchnorm_training_statistics(layer_rng):
    params = init_dense_params("bn", 3, 3, layer_rng, batchnorm=True)
    norm = BatchNorm(params)
    x = 3.0 + 2.0 * layer_rng.standard_normal((2, 50, 3))
    out = norm.forward(x)
    assert np.allclose(out.mean(axis=(0, 1)), 0.0, atol=1e-12)
    assert np.allclose(out.var(axis=(0, 1)), 1.0, atol=1e-3)
    # momentum 0.9 from the initial (0, 1) running statistics
    assert np.allclose(params.bn_running_mean.data, 0.1 * x.mean(axis=(0, 1)))
    assert np.allclose(params.bn_running_var.data, 0.9 + 0.1 * x.var(axis=(0, 1)))


def test_batchnorm_inference_is_affine(layer_rng):
    params = init_dense_params("bn", 2, 2, layer_rng, batchnorm=True)
    params.bn_running_mean.data = np.array([1.0, -1.0])
    params.bn_running_var.data = np.array([4.0, 0.25])
    params.bn_gamma.data = np.array([2.0, 1.0])
    params.bn_beta.data = np.array([0.5, 0.0])
    params.mode = Mode.INFERENCE
    out = BatchNorm(params).forward(np.array([[3.0, 0.0]]))
    expected = [
        2.0 * 2.0 / math.sqrt(4.0 + BN_EPSILON) + 0.5,
        1.0 / math.sqrt(0.25 + BN_EPSILON),
    ]
    assert np.allclose(out[0], expected)
    # Running statistics are left alone
    assert np.array_equal(params.bn_running_mean.data, [1.0, -1.0])


def test_batchnorm_needs_batchnorm_tensors(layer_rng):
    with pytest.raises(ShapeMismatchException):
        BatchNorm(init_dense_params("plain", 2, 2, layer_rng))


def test_maxpool_groups():
    x = np.array([[1.0, 5.0], [3.0, 2.0], [0.0, 7.0], [4.0, 4.0]])
    groups = np.array([0, 0, 2, 0])
    pool = MaxPoolGroups(groups, 3)
    pooled = pool.forward(x)
    assert np.array_equal(pooled, [[4.0, 5.0], [0.0, 0.0], [0.0, 7.0]])
    assert pool.empty_count == 1
    grad = pool.backward(np.ones((3, 2)))
    assert np.array_equal(grad, [[0, 1], [0, 0], [1, 1], [1, 0]])


def test_maxpool_ties_go_to_lowest_row():
    pool = MaxPoolGroups(np.array([0, 0, 0]), 1)
    pool.forward(np.array([[2.0], [2.0], [1.0]]))
    assert np.array_equal(pool.backward(np.ones((1, 1))), [[1.0], [0.0], [0.0]])


def test_maxpool_group_shape():
    with pytest.raises(ShapeMismatchException):
        MaxPoolGroups(np.zeros(3, dtype=np.int64), 1).forward(np.zeros((4, 2)))


def test_conv1d_matches_loop(layer_rng):
    params = init_conv1d_params("conv", 2, 3, 4, layer_rng)
    conv = Conv1d(params)
    x = layer_rng.standard_normal((2, 5, 3))
    out = conv.forward(x)
    assert out.shape == (2, 4, 4)
    w = params.weights.data
    for b in range(2):
        for o in range(4):
            expected = sum(x[b, o + j] @ w[j] for j in range(2)) + params.biases.data
            assert np.allclose(out[b, o], expected)


def test_conv1d_kernel_too_long(layer_rng):
    conv = Conv1d(init_conv1d_params("conv", 4, 3, 4, layer_rng))
    with pytest.raises(ShapeMismatchException):
        conv.forward(np.zeros((2, 3, 3)))


def test_dropout_modes(layer_rng):
    dropout = Dropout(0.5, layer_rng)
    x = np.ones((100, 10))
    out = dropout.forward(x)
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert np.array_equal(dropout.backward(x), out)
    dropout.mode = Mode.INFERENCE
    assert np.array_equal(dropout.forward(x), x)
    assert np.array_equal(Dropout(0.0, layer_rng).forward(x), x)


def test_softmax_cross_entropy():
    loss = SoftmaxCrossEntropy(np.array([0, 2]))
    value = loss.forward(np.zeros((2, 4)))
    assert math.isclose(float(value), math.log(4))
    grad = loss.backward()
    assert np.allclose(grad.sum(axis=-1), 0.0)
    assert np.allclose(grad[0], [-0.375, 0.125, 0.125, 0.125])


def test_softmax_cross_entropy_is_stable():
    loss = SoftmaxCrossEntropy(np.array([1]))
    value = float(loss.forward(np.array([[1000.0, 0.0]])))
    assert math.isclose(value, 1000.0)


def test_softmax_label_shape():
    with pytest.raises(ShapeMismatchException):
        SoftmaxCrossEntropy(np.array([0, 1, 2])).forward(np.zeros((2, 3)))


def test_dense_unit_layers(layer_rng):
    unit = dense_unit(init_dense_params("mlp", 3, 4, layer_rng, batchnorm=True))
    assert [type(layer) for layer in unit.layers] == [Dense, BatchNorm, ReLU]
    assert len(unit.parameters()) == 4
    plain = dense_unit(init_dense_params("mlp", 3, 4, layer_rng))
    assert [type(layer) for layer in plain.layers] == [Dense, ReLU]


# =================================
#          Gradient check
# =================================


def test_grad_check_sequential(layer_rng):
    model = Sequential(
        [
            Dense(init_dense_params("a", 4, 5, layer_rng)),
            BatchNorm(init_dense_params("b", 5, 5, layer_rng, batchnorm=True)),
            Dense(init_dense_params("c", 5, 3, layer_rng)),
        ]
    )
    error = grad_check(model, [(6, 4)], rng=make_rng(SEED, "sequential"))
    assert error < GRADCHECK_PRIMITIVE_TOLERANCE


def test_grad_check_detects_wrong_gradient(layer_rng):
    class Broken(Dense):
        def backward(self, output_grad):
            return 2 * super().backward(output_grad)

    broken = Broken(init_dense_params("broken", 3, 3, layer_rng))
    assert grad_check(broken, [(4, 3)], rng=make_rng(SEED, "broken")) > 1e-3


# =================================
#               Adam
# =================================


def test_adam_first_step_is_learning_rate_sized():
    tensor = Tensor(np.array([1.0, -2.0]), grad=np.array([0.5, -0.1]), name="w")
    state = adam_step([tensor], AdamState(), AdamHyper(learning_rate=0.01))
    assert state.step == 1
    assert np.allclose(tensor.data, [0.99, -1.99], atol=1e-6)


def test_adam_minimizes_quadratic():
    tensor = Tensor(np.array([3.0, -4.0]), name="x")
    state = AdamState()
    for _ in range(2000):
        tensor.grad = 2 * tensor.data
        adam_step([tensor], state, AdamHyper(learning_rate=0.05))
    assert np.all(np.abs(tensor.data) < 1e-2)


def test_adam_zero_gradient_keeps_parameters():
    tensor = Tensor(np.array([1.0, -2.0]), grad=np.zeros(2), name="w")
    state = AdamState()
    for step in range(1, 4):
        adam_step([tensor], state)
        assert state.step == step
    assert np.array_equal(tensor.data, [1.0, -2.0])


def test_adam_steps_decrease_quadratic():
    tensor = Tensor(np.array([1.0]), name="w")
    state = AdamState()
    losses = [float(tensor.data[0] ** 2)]
    for _ in range(10):
        tensor.grad = 2 * tensor.data
        adam_step([tensor], state)
        losses.append(float(tensor.data[0] ** 2))
    assert all(after < before for before, after in zip(losses, losses[1:]))


def test_adam_rejects_non_finite_gradients():
    good = Tensor(np.ones(2), grad=np.ones(2), name="good")
    bad = Tensor(np.ones(2), grad=np.array([np.nan, 0.0]), name="bad")
    state = AdamState()
    with pytest.raises(NonFiniteGradientException):
        adam_step([good, bad], state)
    assert np.array_equal(good.data, np.ones(2))
    assert state.step == 0


# =================================
#           Checkpoints
# =================================


def checkpoint_params(rng):
    return {
        "encoder0.conv": init_conv1d_params(
            "encoder0.conv", 2, 3, 4, rng, batchnorm=True
        ),
        "head0": init_dense_params("head0", 4, 2, rng),
    }


def test_checkpoint_restores_every_array(tmp_path, layer_rng):
    params = checkpoint_params(layer_rng)
    path = str(tmp_path / "model.npz")
    save_checkpoint(path, params)
    fresh = checkpoint_params(make_rng(SEED, "other"))
    restore_params(fresh, load_checkpoint(path))
    for name, layer_params in params.items():
        for field_name, array in layer_params.arrays().items():
            restored = fresh[name].arrays()[field_name]
            assert np.array_equal(restored, array)
            assert restored.dtype == np.float64


def test_checkpoint_key_names(tmp_path, layer_rng):
    path = str(tmp_path / "model.npz")
    save_checkpoint(path, checkpoint_params(layer_rng))
    with np.load(path) as archive:
        assert "__version__" in archive.files
        assert "encoder0.conv/bn_running_var" in archive.files
        assert archive["head0/weights"].dtype == np.dtype("<f8")


def test_checkpoint_version_mismatch(tmp_path):
    path = str(tmp_path / "old.npz")
    np.savez(path, __version__=np.array([0]), **{"head0/weights": np.zeros((4, 2))})
    with pytest.raises(CheckpointException):
        load_checkpoint(path)


def test_checkpoint_unreadable(tmp_path):
    path = tmp_path / "broken.npz"
    path.write_text("not a checkpoint")
    with pytest.raises(CheckpointException):
        load_checkpoint(str(path))


def test_checkpoint_does_not_match_network(tmp_path, layer_rng):
    path = str(tmp_path / "model.npz")
    save_checkpoint(path, checkpoint_params(layer_rng))
    arrays = load_checkpoint(path)
    other = {"head0": init_dense_params("head0", 4, 3, layer_rng)}
    with pytest.raises(CheckpointException):
        restore_params(other, arrays)
    resized = checkpoint_params(layer_rng)
    resized["head0"] = init_dense_params("head0", 4, 3, layer_rng)
    with pytest.raises(CheckpointException):
        restore_params(resized, arrays)
