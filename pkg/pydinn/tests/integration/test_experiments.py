"""Module implementing the desk-scale experiments on synthetic data

These runs take minutes to hours on a CPU and only run with --runslow.
"""

import numpy as np
import pytest

from pydinn.data import SynthConfig, generate_synthetic, make_image_samples, make_sequences, to_nchw
from pydinn.demographic import DemoPredictorConfig, freeze, predict_demographics
from pydinn.evaluation import ABLATION_VARIANTS, image_metrics, run_ablation
from pydinn.losses import LossWeights, canonical_correlation, overall_r_squared
from pydinn.satellite import SatPredictorConfig, predict_image
from pydinn.tensor import no_grad
from pydinn.training import TrainingConfig, train_demo, train_sat, train_travel
from pydinn.travel import TravelPredictorConfig, predict_travel


@pytest.mark.slow
def test_overfit_four_samples() -> None:
    """The satellite predictor memorizes 4 samples in 500 full-batch steps"""
    manifest = generate_synthetic(0, SynthConfig(n_counties=12, height=64, width=64))
    batch = make_sequences(manifest, "train").subset([0, 1, 2, 3])
    config = SatPredictorConfig(
        base_channels=16, max_channels=64, growth_rate=8, dense_layers=2, demo_hidden=(64,), demo_embed_dim=64
    )
    training = TrainingConfig(lr=3e-4, overfit_samples=4, overfit_steps=500, demo_predictor=False)
    model = train_sat(batch, config, training, LossWeights()).model
    predicted = predict_image(model, batch.frames, batch.demographics)  # type: ignore[arg-type]
    for index in range(4):
        metrics = image_metrics(predicted[index : index + 1], batch.target_image[index : index + 1])
        assert metrics["MSE"] < 1e-3
        assert metrics["SSIM"] > 0.95


@pytest.mark.slow
def test_synthetic_recoverability() -> None:
    """Demographics and travel behavior are recovered from synthetic images of unseen counties"""
    manifest = generate_synthetic(0, SynthConfig(n_counties=200, height=32, width=32))
    train, test = make_image_samples(manifest, "train"), make_image_samples(manifest, "test")
    demo_config = DemoPredictorConfig(height=32, width=32, channels=(16, 32, 64, 128))
    training = TrainingConfig(batch_size=16, lr=1e-3, epochs=40)
    demo = train_demo(train, demo_config, training, LossWeights()).model
    assert overall_r_squared(predict_demographics(demo, test.images), test.demographics) > 0.9
    # Sanity direction: no worse on the training counties, up to noise.
    train_r2 = overall_r_squared(predict_demographics(demo, train.images), train.demographics)
    assert train_r2 >= overall_r_squared(predict_demographics(demo, test.images), test.demographics) - 0.05

    travel_config = TravelPredictorConfig(in_channels=128, spatial_channels=(64, 32), global_dims=(128, 64))
    encoder = freeze(demo)
    travel = train_travel(train, encoder, travel_config, training).model
    assert overall_r_squared(predict_travel(travel, test.images), test.travel) > 0.85

    with no_grad():
        embeddings = encoder.bottleneck(to_nchw(test.images)).numpy().mean(axis=(2, 3))
    assert abs(canonical_correlation(embeddings, test.travel)) > 0.8


@pytest.mark.slow
def test_ablation_direction() -> None:
    """The full model is at least as good as the baseline with shared data, seed and budget"""
    manifest = generate_synthetic(0, SynthConfig(n_counties=40, height=32, width=32))
    samples = make_image_samples(manifest, "train")
    demo_config = DemoPredictorConfig(height=32, width=32, channels=(16, 32, 64, 128))
    training = TrainingConfig(batch_size=8, lr=3e-4, epochs=30)
    demo = freeze(train_demo(samples, demo_config, training, LossWeights()).model)
    sat_config = SatPredictorConfig(
        height=32,
        width=32,
        depth=3,
        base_channels=16,
        max_channels=64,
        growth_rate=8,
        dense_layers=2,
        demo_hidden=(64,),
        demo_embed_dim=64,
    )
    variants = [ABLATION_VARIANTS[0], ABLATION_VARIANTS[-1]]
    table = run_ablation(manifest, sat_config, training, LossWeights(), demo, variants, seed=0)
    baseline, full = table.iloc[0], table.iloc[1]
    assert list(table["status"]) == ["ok", "ok"]
    assert full["MSE"] <= baseline["MSE"]
    assert full["SSIM"] >= baseline["SSIM"]
    assert np.isfinite(full["PSNR"])
