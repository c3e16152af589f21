import numpy as np
import pytest
from pydantic import ValidationError

from core.gradcore import Adam, SoftmaxCrossEntropy
from core.resnet import Mode, ResidualBlock, build, expected_param_count
from models.config import ResNetSpec
from models.errors import DataValidationError, ShapeError, StateError


@pytest.mark.parametrize("kernel_size, count", [(5, 503810), (7, 700546), (9, 897282), (15, 1487490), (25, 2471170)])
def test_parameter_count_per_kernel(kernel_size, count):
    assert expected_param_count(kernel_size) == count
    assert build(ResNetSpec(kernel_size=kernel_size), seed=0).param_count == count


def test_spec_rejects_other_architectures():
    with pytest.raises(ValidationError):
        ResNetSpec(kernel_size=0)
    with pytest.raises(ValidationError):
        ResNetSpec(kernel_size=3, filters=(32, 64, 64))
    with pytest.raises(ValidationError):
        ResNetSpec(kernel_size=3, num_classes=3)


def test_shortcuts_only_where_channels_change():
    model = build(ResNetSpec(kernel_size=3), seed=0)
    assert model.blocks[0].shortcut is not None
    assert model.blocks[1].shortcut is not None
    assert model.blocks[2].shortcut is None


def test_forward_shapes(warm_model_factory):
    model = warm_model_factory(length=20)
    output = model.forward(np.random.default_rng(0).uniform(0, 2, (3, 1, 20)), Mode.EVAL)
    assert output.probabilities.shape == (3, 2)
    assert output.feature_maps.shape == (3, 128, 20)
    np.testing.assert_allclose(output.probabilities.sum(axis=1), 1.0, atol=1e-6)


def test_forward_errors(warm_model_factory):
    model = warm_model_factory()
    with pytest.raises(ShapeError):
        model.forward(np.ones((2, 16)), Mode.EVAL)
    with pytest.raises(ShapeError):
        model.forward(np.ones((2, 2, 16)), Mode.EVAL)
    with pytest.raises(StateError):
        build(ResNetSpec(kernel_size=3), seed=1).forward(np.ones((1, 1, 16)), Mode.EVAL)


@pytest.mark.parametrize("seed", range(5))
def test_cam_averages_to_logit_minus_bias_on_100_inputs(warm_model_factory, seed):
    model = warm_model_factory(kernel_size=3 + seed, seed=seed, length=24)
    x = np.random.default_rng(100 + seed).uniform(0, 3, (100, 1, 24))
    output = model.forward(x, Mode.EVAL)
    bias = model.head.params["bias"].value
    for class_id in (0, 1):
        cam = model.cam(output.feature_maps, class_id)
        np.testing.assert_allclose(cam.mean(axis=1) + bias[class_id], output.logits[:, class_id], rtol=1e-4, atol=1e-8)


def test_cam_with_zero_and_one_hot_weights(warm_model_factory):
    model = warm_model_factory()
    output = model.forward(np.random.default_rng(1).uniform(0, 2, (2, 1, 16)), Mode.EVAL)
    model.head.params["weight"].value = np.zeros((2, 128))
    assert not model.cam(output.feature_maps).any()
    model.head.params["weight"].value[1, 17] = 1.0
    np.testing.assert_array_equal(model.cam(output.feature_maps, 1), output.feature_maps[:, 17, :])


def test_cam_errors(warm_model_factory):
    model = warm_model_factory()
    with pytest.raises(DataValidationError):
        model.cam(np.zeros((1, 128, 16)), class_id=2)
    with pytest.raises(ShapeError):
        model.cam(np.zeros((1, 64, 16)))


def test_training_reduces_loss_on_a_mislabeled_example():
    model = build(ResNetSpec(kernel_size=3), seed=3, dtype=np.float64)
    x = np.random.default_rng(3).uniform(0, 2, (1, 1, 32))
    output = model.forward(x, Mode.TRAIN)
    label = np.array([int(output.probabilities[0, 1] < 0.5)])
    optimizer = Adam(model.parameters(), lr=1e-3)
    first = model.train_step(x, label, optimizer)
    for _ in range(9):
        model.train_step(x, label, optimizer)
    _, last = SoftmaxCrossEntropy().forward(model.forward(x, Mode.TRAIN).logits, label)
    assert last < first


def test_eval_forward_keeps_no_activation_cache(warm_model_factory):
    model = warm_model_factory()
    model.forward(np.ones((1, 1, 16)), Mode.EVAL)
    conv = model.blocks[0].convs[0].conv
    # the warm-up batch left its own cache; eval must not overwrite it with a 1-window batch
    assert conv._cache.shape[0] == 4


def test_snapshot_restores_weights_and_statistics(warm_model_factory):
    model = warm_model_factory()
    x = np.random.default_rng(5).uniform(0, 2, (2, 1, 16))
    before = model.forward(x, Mode.EVAL).logits
    state, tracked = model.snapshot()
    optimizer = Adam(model.parameters(), lr=1e-2)
    model.train_step(x, np.array([0, 1]), optimizer)
    assert not np.allclose(model.forward(x, Mode.EVAL).logits, before)
    model.load_state_arrays(state, tracked)
    np.testing.assert_array_equal(model.forward(x, Mode.EVAL).logits, before)


def test_load_state_rejects_wrong_shapes(warm_model_factory):
    model = warm_model_factory(kernel_size=3)
    other = warm_model_factory(kernel_size=5)
    with pytest.raises(ShapeError):
        model.load_state_arrays(other.state_arrays())


def test_predict_proba_batches_consistently(warm_model_factory):
    model = warm_model_factory()
    windows = np.random.default_rng(6).uniform(0, 2, (7, 16))
    full = model.predict_proba(windows)
    chunked = model.predict_proba(windows, batch_size=3)
    np.testing.assert_allclose(full, chunked, rtol=1e-10)
    assert full.dtype == np.float64


def silence_main_path(block):
    for conv_block in block.convs:
        conv_block.conv.params["weight"].value[:] = 0.0
        conv_block.conv.params["bias"].value[:] = 0.0
        conv_block.bn.params["gamma"].value[:] = 0.0


def test_zeroed_residual_branch_leaves_relu_of_the_shortcut():
    x = np.random.default_rng(0).normal(size=(3, 64, 10))
    block = ResidualBlock(64, 128, 5, np.random.default_rng(1), np.float64, "res1")
    silence_main_path(block)
    out = block.forward(x, train=True)
    np.testing.assert_allclose(out, np.maximum(block.shortcut.forward(x, train=True), 0.0), atol=1e-12)

    x = np.random.default_rng(2).normal(size=(3, 128, 10))
    identity = ResidualBlock(128, 128, 3, np.random.default_rng(3), np.float64, "res2")
    silence_main_path(identity)
    np.testing.assert_allclose(identity.forward(x, train=True), np.maximum(x, 0.0), atol=1e-12)
    np.testing.assert_allclose(identity.forward(x, train=False), np.maximum(x, 0.0), atol=1e-12)


def test_thousand_random_training_steps_stay_finite():
    rng = np.random.default_rng(0)
    model = build(ResNetSpec(kernel_size=3), seed=0)
    optimizer = Adam(model.parameters())
    for step in range(1000):
        batch = rng.uniform(0.0, 10.0, (2, 1, 8)) * rng.integers(0, 2)
        loss = model.train_step(batch, rng.integers(0, 2, 2), optimizer)
        assert np.isfinite(loss)
        if step % 100 == 0:
            assert np.isfinite(model.forward(batch, Mode.EVAL).probabilities).all()
    assert all(np.isfinite(array).all() for array in model.state_arrays().values())
