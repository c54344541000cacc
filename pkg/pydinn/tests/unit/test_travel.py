"""Module implementing unit tests for the travel behavior predictor"""

import re
from typing import Tuple

import numpy as np
import pytest

from pydinn.demographic import DemographicPredictor, DemoPredictorConfig, freeze
from pydinn.errors import ConfigError, ShapeError
from pydinn.gradcheck import grad_check
from pydinn.tensor import Tensor, precision
from pydinn.travel import (
    FrozenTravelPredictor,
    TravelPredictor,
    TravelPredictorConfig,
    predict_travel,
)
from pydinn.travel import freeze as freeze_travel

DEMO = DemoPredictorConfig(height=16, width=16, f=5, channels=(4, 8))
SMALL = TravelPredictorConfig(in_channels=8, spatial_channels=(4,), global_dims=(8, 4))


def _model(seed: int = 0) -> Tuple[TravelPredictor, DemographicPredictor]:
    demo = DemographicPredictor(DEMO, seed=seed)
    return TravelPredictor(SMALL, freeze(demo), seed=seed), demo


def _images(seed: int, n: int = 3) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-1.0, 1.0, (n, 3, 16, 16))


@pytest.mark.parametrize(
    "settings",
    [
        pytest.param({"in_channels": 0}, id="in_channels"),
        pytest.param({"spatial_channels": ()}, id="no_spatial"),
        pytest.param({"global_dims": (8, 0)}, id="zero_width"),
    ],
)
def test_config_errors(settings: dict) -> None:
    """Unit tests for TravelPredictorConfig validation"""
    with pytest.raises(ConfigError):
        TravelPredictorConfig(**settings)


def test_encoder_must_be_frozen_and_match() -> None:
    """The travel predictor only accepts a matching frozen encoder"""
    demo = DemographicPredictor(DEMO, seed=0)
    with pytest.raises(ConfigError, match="needs a frozen demographic predictor"):
        TravelPredictor(SMALL, demo)  # type: ignore[arg-type]
    wide = TravelPredictorConfig(in_channels=16, spatial_channels=(4,), global_dims=(8, 4))
    message = "travel.in_channels is 16, the encoder bottleneck has 8 channels."
    with pytest.raises(ConfigError, match=re.escape(message)):
        TravelPredictor(wide, freeze(demo))


def test_output_ranges() -> None:
    """Shares lie on the simplex, time is non-negative and the pattern in (0, 1)"""
    model, _ = _model()
    out = model(_images(0))
    np.testing.assert_allclose(out.mode.numpy().sum(axis=1), 1.0, rtol=1e-5)
    np.testing.assert_allclose(out.vehicles.numpy().sum(axis=1), 1.0, rtol=1e-5)
    assert out.mode.dims == [3, 9] and out.vehicles.dims == [3, 4]
    assert np.all(out.time.numpy() >= 0)
    assert np.all((out.pattern.numpy() > 0) & (out.pattern.numpy() < 1))
    vector = out.vector().numpy()
    assert vector.shape == (3, 15)
    np.testing.assert_array_equal(vector[:, 9:13], out.vehicles.numpy())


def test_zero_heads_give_uniform_outputs() -> None:
    """With zeroed heads the shares are uniform, time is 0 and the pattern 0.5"""
    model, _ = _model()
    for head in (model.mode_head, model.vehicle_head, model.time_head, model.pattern_head):
        head.w.data[...] = 0
        head.b.data[...] = 0
    vector = model.eval()(_images(1, n=1)).vector().numpy()[0]
    np.testing.assert_allclose(vector[:9], 1 / 9, rtol=1e-6)
    np.testing.assert_allclose(vector[9:13], 0.25, rtol=1e-6)
    assert vector[13] == 0.0
    assert vector[14] == pytest.approx(0.5)


def test_pathways() -> None:
    """Unit tests for the spatial and global pathway dims"""
    model, _ = _model()
    bottleneck = np.random.default_rng(2).standard_normal((2, 8, 4, 4))
    assert model.spatial_features(bottleneck).dims == [2, 4, 8, 8]
    assert model.spatial_pathway(bottleneck).dims == [2, 4]
    assert model.global_pathway(bottleneck).dims == [2, 4]
    message = "Travel pathways expect a [N, 8, h, w] bottleneck, got [2, 5, 4, 4]"
    with pytest.raises(ShapeError, match=re.escape(message)):
        model.global_pathway(np.zeros((2, 5, 4, 4)))


def test_parameters_exclude_the_encoder() -> None:
    """Only the travel layers are parameters; training them leaves the encoder untouched"""
    model, demo = _model()
    names = list(model.named_parameters())
    assert all(name.startswith("travel.") for name in names)
    for name in ("travel.spatial.0.up.w", "travel.spatial.0.bn.gamma", "travel.fc.1.w", "travel.mode_head.b"):
        assert name in names
    before = demo.state_dict()
    model(_images(3)).vector().sum().backward()
    assert all(param.grad is not None for param in model.parameters())
    assert all(param.grad is None for param in demo.parameters())
    for name, value in demo.state_dict().items():
        np.testing.assert_array_equal(value, before[name])


def test_predict_travel() -> None:
    """Unit test for prediction from [N, H, W, 3] images, leaving the model mode as it was"""
    model, _ = _model()
    images = np.random.default_rng(4).uniform(-1, 1, (2, 16, 16, 3))
    predicted = predict_travel(model, images)
    assert predicted.shape == (2, 15)
    assert model.training
    model.eval()
    predict_travel(model, images)
    assert not model.training
    frozen = freeze_travel(model)
    assert isinstance(frozen, FrozenTravelPredictor)
    np.testing.assert_allclose(predict_travel(frozen, images), predicted)


def test_gradients() -> None:
    """64-bit finite-difference check of the pathways and heads in eval mode"""
    with precision(64):
        model, _ = _model()
        model.eval()
        bottleneck = Tensor(np.random.default_rng(5).standard_normal((2, 8, 4, 4)), requires_grad=True)
        report = grad_check(
            lambda b: model.forward_bottleneck(b).vector(),
            [bottleneck],
            tol=1e-4,
            wrt=model.trainable_parameters(),
            n_samples=5,
            h=1e-5,
            floor=1e-4,
            skip_kinks=True,
        )
    assert report.passed, report.failures[:3]
    assert report.checked >= 30
