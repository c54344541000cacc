"""Module implementing the travel behavior predictor.

The frozen demographic encoder turns an image into its bottleneck. A spatial pathway of
transposed-convolution stages and a global pooled-MLP pathway summarize the bottleneck, and
four heads predict mode shares, vehicle shares, travel time and the departure pattern.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Tuple

import numpy as np

from pydinn import functional as F
from pydinn.data import N_MODES, N_VEHICLES, TRAVEL_DIM, to_nchw
from pydinn.demographic import FrozenDemographicPredictor
from pydinn.errors import ConfigError, ShapeError
from pydinn.nn import BatchNorm2d, ConvTranspose2d, FrozenModel, Linear, Module, evaluating
from pydinn.schema import to_plain
from pydinn.tensor import ArrayLike, Tensor, as_tensor, get_dtype, no_grad

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TravelPredictorConfig:
    """Travel predictor configuration.

    in_channels must equal the bottleneck channels of the demographic encoder.
    """

    in_channels: int = 512
    spatial_channels: Tuple[int, ...] = (256, 128)
    global_dims: Tuple[int, ...] = (512, 256, 128)

    def __post_init__(self) -> None:
        object.__setattr__(self, "spatial_channels", tuple(int(c) for c in self.spatial_channels))
        object.__setattr__(self, "global_dims", tuple(int(d) for d in self.global_dims))
        if self.in_channels < 1 or not self.spatial_channels or not self.global_dims:
            raise ConfigError("travel needs in_channels >= 1 and non-empty spatial_channels and global_dims.")
        if min(self.spatial_channels + self.global_dims) < 1:
            raise ConfigError("travel channel and layer widths must be positive.")

    @property
    def head_inputs(self) -> int:
        """Width of the joined pathway outputs."""
        return self.spatial_channels[-1] + self.global_dims[-1]

    def to_dict(self) -> Dict[str, Any]:
        """JSON form, stored with checkpoints."""
        return to_plain(self)


@dataclass
class TravelOutput:
    """Structured travel prediction for a batch."""

    mode: Tensor  # [N, 9], rows on the simplex
    vehicles: Tensor  # [N, 4], rows on the simplex
    time: Tensor  # [N, 1], >= 0
    pattern: Tensor  # [N, 1], in [0, 1]

    def vector(self) -> Tensor:
        """[N, 15] in the order mode, vehicles, time, pattern."""
        return F.concat([self.mode, self.vehicles, self.time, self.pattern])


class SpatialStage(Module):
    """ConvTranspose(ReLU(BN(x))), 2x upsampling."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.bn = BatchNorm2d(in_channels)
        self.up = ConvTranspose2d(in_channels, out_channels, rng)

    def forward(self, x: ArrayLike) -> Tensor:  # type: ignore[override]
        return self.up(F.relu(self.bn(x)))


class TravelPredictor(Module):
    """TravelPredictor class.

    Parameter names start with "travel"; the frozen encoder's parameters are not part of
    this model and are never updated through it.
    """

    prefix = "travel"

    def __init__(self, config: TravelPredictorConfig, encoder: FrozenDemographicPredictor, seed: int = 0) -> None:
        super().__init__()
        if not isinstance(encoder, FrozenDemographicPredictor):
            raise ConfigError("TravelPredictor needs a frozen demographic predictor, see demographic.freeze().")
        if encoder.config.semantic_dim != config.in_channels:
            raise ConfigError(
                f"travel.in_channels is {config.in_channels}, the encoder bottleneck has "
                f"{encoder.config.semantic_dim} channels."
            )
        self.config = config
        self.encoder = encoder
        rng = np.random.default_rng([seed, 13])
        widths = (config.in_channels,) + config.spatial_channels
        self.spatial = [SpatialStage(c_in, c_out, rng) for c_in, c_out in zip(widths[:-1], widths[1:])]
        dims = (config.in_channels,) + config.global_dims
        self.fc = [Linear(d_in, d_out, rng) for d_in, d_out in zip(dims[:-1], dims[1:])]
        self.mode_head = Linear(config.head_inputs, N_MODES, rng)
        self.vehicle_head = Linear(config.head_inputs, N_VEHICLES, rng)
        self.time_head = Linear(config.head_inputs, 1, rng)
        self.pattern_head = Linear(config.head_inputs, 1, rng)
        self.name_parameters()

    def _check_bottleneck(self, bottleneck: Tensor) -> None:
        if bottleneck.ndim != 4 or bottleneck.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"Travel pathways expect a [N, {self.config.in_channels}, h, w] bottleneck, got {bottleneck.dims}."
            )

    def spatial_features(self, bottleneck: ArrayLike) -> Tensor:
        """Spatial pathway before pooling, [N, c_last, h * 2^stages, w * 2^stages]."""
        x = as_tensor(bottleneck)
        self._check_bottleneck(x)
        for stage in self.spatial:
            x = stage(x)
        return x

    def spatial_pathway(self, bottleneck: ArrayLike) -> Tensor:
        """Globally pooled spatial pathway, [N, c_last]."""
        return F.adaptive_avg_pool(self.spatial_features(bottleneck))

    def global_pathway(self, bottleneck: ArrayLike) -> Tensor:
        """Pooled bottleneck through the MLP; ReLU between layers, none after the last."""
        x = as_tensor(bottleneck)
        self._check_bottleneck(x)
        x = F.adaptive_avg_pool(x)
        for index, layer in enumerate(self.fc):
            x = layer(x)
            if index < len(self.fc) - 1:
                x = F.relu(x)
        return x

    def forward_bottleneck(self, bottleneck: ArrayLike) -> TravelOutput:
        """Heads over the joined pathways of a precomputed bottleneck."""
        joined = F.concat([self.spatial_pathway(bottleneck), self.global_pathway(bottleneck)])
        return TravelOutput(
            mode=F.softmax(self.mode_head(joined)),
            vehicles=F.softmax(self.vehicle_head(joined)),
            time=F.relu(self.time_head(joined)),
            pattern=F.sigmoid(self.pattern_head(joined)),
        )

    def forward(self, x: ArrayLike) -> TravelOutput:  # type: ignore[override]
        return self.forward_bottleneck(self.encoder.bottleneck(x))


class FrozenTravelPredictor(FrozenModel):
    """FrozenTravelPredictor class."""

    def __call__(self, x: ArrayLike) -> TravelOutput:  # type: ignore[override]
        return self._model(x)


def freeze(model: TravelPredictor) -> FrozenTravelPredictor:
    """Freezes a trained travel predictor; see ``FrozenModel``."""
    return FrozenTravelPredictor(model)


def predict_travel(model: Any, images: np.ndarray) -> np.ndarray:
    """[N, 15] travel vectors for [N, H, W, 3] images."""
    with evaluating(model), no_grad():
        output = model(Tensor(to_nchw(images), dtype=get_dtype()))
    vector = output.vector().numpy()
    if vector.shape[1] != TRAVEL_DIM:
        raise ShapeError(f"Travel vectors must have {TRAVEL_DIM} entries, got {vector.shape[1]}.")
    return vector
