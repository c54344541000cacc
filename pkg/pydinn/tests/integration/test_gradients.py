"""Module implementing the end-to-end gradient check of the integrated objective"""

import numpy as np

from pydinn.data import SynthConfig, generate_synthetic, make_sequences
from pydinn.demographic import DemographicPredictor, DemoPredictorConfig, freeze
from pydinn.gradcheck import grad_check
from pydinn.losses import LossParts, LossWeights, image_loss, semantic_loss, total_loss, vector_mse
from pydinn.satellite import SatellitePredictor, SatPredictorConfig, build_input
from pydinn.tensor import Tensor, precision
from pydinn.travel import TravelPredictor, TravelPredictorConfig
from pydinn.travel import freeze as freeze_travel

DATA = SynthConfig(n_counties=6, years=(2012, 2013, 2014, 2015), height=16, width=16, f=5)
SAT = SatPredictorConfig(
    height=16,
    width=16,
    n_history=3,
    f=5,
    depth=3,
    base_channels=4,
    max_channels=16,
    growth_rate=2,
    dense_layers=2,
    demo_hidden=(8,),
    demo_embed_dim=16,
    dropout=0.0,
)
DEMO = DemoPredictorConfig(height=16, width=16, f=5, channels=(4, 8))
TRAVEL = TravelPredictorConfig(in_channels=8, spatial_channels=(4,), global_dims=(8, 4))


def test_integrated_objective_gradients() -> None:
    """64-bit finite differences of the full sat-stage loss at 16x16 and depth 3"""
    manifest = generate_synthetic(0, DATA)
    batch = make_sequences(manifest, "train", n_history=3).subset([0, 1])
    with precision(64):
        sat = SatellitePredictor(SAT, seed=0).eval()
        demo = freeze(DemographicPredictor(DEMO, seed=1))
        travel = freeze_travel(TravelPredictor(TRAVEL, demo, seed=2))
        x = build_input(batch.frames, 3)
        d = Tensor(batch.demographics)
        target = Tensor(np.moveaxis(batch.target_image, -1, 1))
        weights = LossWeights()

        def _objective(images: Tensor, demographics: Tensor) -> Tensor:
            generated = sat(images, demographics)
            verified = demo(generated)
            parts = LossParts(
                image=image_loss(generated, target, weights.lam),
                demo=vector_mse(verified.prediction, batch.target_demographics),
                travel=vector_mse(travel(generated).vector(), batch.target_travel),
                semantic=semantic_loss(verified.semantic, verified.decoder_semantic),
            )
            return total_loss(parts, weights)

        report = grad_check(
            _objective,
            [x, d],
            tol=1e-4,
            wrt=sat.named_parameters(),
            n_samples=2,
            h=1e-5,
            floor=1e-4,
            skip_kinks=True,
        )
    assert report.passed, report.failures[:3]
    assert report.checked >= 60
    assert all(name.startswith("sat.") for name in report.per_tensor)
