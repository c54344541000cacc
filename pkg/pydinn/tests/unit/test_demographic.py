"""Module implementing unit tests for the demographic predictor"""

import re

import numpy as np
import pytest

from pydinn.demographic import (
    DemographicPredictor,
    DemoPredictorConfig,
    FrozenDemographicPredictor,
    freeze,
    predict_demographics,
)
from pydinn.errors import ConfigError, ShapeError
from pydinn.gradcheck import grad_check
from pydinn.losses import semantic_loss
from pydinn.tensor import Tensor, precision

SMALL = DemoPredictorConfig(height=16, width=16, f=5, channels=(4, 8))


def _images(seed: int, n: int = 2) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-1.0, 1.0, (n, 3, 16, 16))


def test_config_properties() -> None:
    """Unit tests for the derived config sizes"""
    assert SMALL.semantic_dim == 8
    assert SMALL.head_inputs == 16 * 16 * 4 + 8
    assert DemoPredictorConfig().head_inputs == 64 * 64 * 64 + 512
    assert SMALL.to_dict()["channels"] == [4, 8]


@pytest.mark.parametrize(
    "overrides, message",
    [
        pytest.param({"height": 18}, "demo input 18x16 must be divisible by 4", id="divisible"),
        pytest.param({"channels": ()}, "demo.channels must be a non-empty list", id="no_channels"),
        pytest.param({"channels": (4, 0)}, "demo.channels must be a non-empty list", id="zero_channels"),
        pytest.param({"f": 0}, "demo.f must be >= 1", id="f"),
    ],
)
def test_config_errors(overrides: dict, message: str) -> None:
    """Unit tests for DemoPredictorConfig validation"""
    settings = dict(height=16, width=16, f=5, channels=(4, 8))
    settings.update(overrides)
    with pytest.raises(ConfigError, match=re.escape(message)):
        DemoPredictorConfig(**settings)


def test_forward_dims() -> None:
    """Unit tests for the encoder, decoder and head output dims"""
    model = DemographicPredictor(SMALL, seed=0)
    x = _images(0)
    encoding = model.demo_encode(x)
    assert [skip.dims for skip in encoding.skips] == [[2, 4, 16, 16], [2, 8, 8, 8]]
    assert encoding.bottleneck.dims == [2, 8, 4, 4]
    assert model.demo_decode(encoding.bottleneck, encoding.skips).dims == [2, 4, 16, 16]
    out = model(x)
    assert out.prediction.dims == [2, 5]
    assert out.semantic.dims == [2, 8]
    assert out.decoder_semantic.dims == [2, 8]
    np.testing.assert_allclose(out.semantic.numpy(), encoding.bottleneck.numpy().mean(axis=(2, 3)), rtol=1e-5)


def test_input_validation() -> None:
    """Images of the wrong size or rank are rejected"""
    model = DemographicPredictor(SMALL, seed=0)
    with pytest.raises(ShapeError, match=re.escape("Demographic predictor expects [N, 3, 16, 16]")):
        model(np.zeros((2, 3, 8, 8)))
    with pytest.raises(ShapeError):
        model(np.zeros((3, 16, 16)))
    encoding = model.demo_encode(_images(1))
    with pytest.raises(ShapeError, match="demo_decode needs 2 skips, got 1"):
        model.demo_decode(encoding.bottleneck, encoding.skips[:1])


def test_literal_semantic_loss_is_zero() -> None:
    """With literal_semantic the semantic vector is compared against itself"""
    config = DemoPredictorConfig(height=16, width=16, f=5, channels=(4, 8), literal_semantic=True)
    out = DemographicPredictor(config, seed=0)(_images(2))
    assert out.decoder_semantic is out.semantic
    assert semantic_loss(out.semantic, out.decoder_semantic).item() == pytest.approx(0.0, abs=1e-6)
    default = DemographicPredictor(SMALL, seed=0)(_images(2))
    assert semantic_loss(default.semantic, default.decoder_semantic).item() > 0.0


def test_parameter_names_and_seeding() -> None:
    """Parameters carry dotted names and a seed fixes the initial weights"""
    model = DemographicPredictor(SMALL, seed=0)
    names = list(model.named_parameters())
    for name in ("demo.enc.0.conv1.w", "demo.bottleneck.conv2.b", "demo.dec.1.conv1.w", "demo.head.w"):
        assert name in names
    assert all(name.startswith("demo.") for name in names)
    assert model.named_parameters()["demo.head.w"].name == "demo.head.w"
    assert model.head.w.dims == [5, 1032]
    same, other = DemographicPredictor(SMALL, seed=0), DemographicPredictor(SMALL, seed=1)
    for name, value in model.state_dict().items():
        np.testing.assert_array_equal(same.state_dict()[name], value)
    assert not np.array_equal(other.state_dict()["demo.enc.0.conv1.w"], model.state_dict()["demo.enc.0.conv1.w"])


def test_frozen_predictor() -> None:
    """The frozen handle keeps its weights and passes gradients to its input only"""
    model = DemographicPredictor(SMALL, seed=0)
    frozen = freeze(model)
    assert isinstance(frozen, FrozenDemographicPredictor)
    assert frozen.config == SMALL
    assert not model.trainable_parameters()
    images = _images(3)
    np.testing.assert_array_equal(frozen.bottleneck(images).numpy(), model.demo_encode(images).bottleneck.numpy())
    x = Tensor(images, requires_grad=True)
    frozen(x).prediction.sum().backward()
    assert x.grad is not None and np.any(x.grad != 0)
    assert all(param.grad is None for param in model.parameters())


def test_predict_demographics() -> None:
    """Unit test for prediction from [N, H, W, 3] images, leaving the model mode as it was"""
    model = DemographicPredictor(SMALL, seed=0)
    images = np.random.default_rng(4).uniform(-1, 1, (3, 16, 16, 3))
    predicted = predict_demographics(model, images)
    assert predicted.shape == (3, 5)
    assert model.training
    model.eval()
    predict_demographics(model, images)
    assert not model.training
    np.testing.assert_allclose(predict_demographics(freeze(model), images), predicted)


def test_gradients() -> None:
    """64-bit finite-difference check of the whole predictor"""
    with precision(64):
        model = DemographicPredictor(SMALL, seed=0)
        x = Tensor(_images(5), requires_grad=True)
        report = grad_check(
            lambda t: model(t).prediction,
            [x],
            tol=1e-4,
            wrt=model.named_parameters(),
            n_samples=4,
            h=1e-5,
            floor=1e-4,
            skip_kinks=True,
        )
    assert report.passed, report.failures[:3]
    assert report.checked >= 30
