"""Module implementing the demographic predictor.

A U-shaped regression network mapping one satellite image to its demographic vector: four
conv-conv-maxpool encoder blocks, a bottleneck conv pair, four upsample-concat-conv-conv
decoder blocks back to full resolution and a linear head over the flattened decoder output
joined with the pooled bottleneck (the semantic vector).
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Tuple

import numpy as np

from pydinn import functional as F
from pydinn.data import to_nchw
from pydinn.errors import ConfigError, ShapeError
from pydinn.nn import Conv2d, FrozenModel, Linear, Module, evaluating
from pydinn.schema import to_plain
from pydinn.tensor import ArrayLike, Tensor, as_tensor, get_dtype, no_grad

logger = logging.getLogger(__name__)

# Seed of the fixed projection from decoder channels to semantic channels.
PROJECTION_SEED = 20120


@dataclass(frozen=True)
class DemoPredictorConfig:
    """Demographic predictor configuration.

    literal_semantic compares the semantic vector against itself instead of against the
    projected decoder semantics; the resulting loss is identically zero.
    """

    height: int = 64
    width: int = 64
    f: int = 25
    channels: Tuple[int, ...] = (64, 128, 256, 512)
    literal_semantic: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "channels", tuple(int(channel) for channel in self.channels))
        if not self.channels or min(self.channels) < 1:
            raise ConfigError(f"demo.channels must be a non-empty list of positive ints, got {list(self.channels)}.")
        factor = 2 ** len(self.channels)
        if self.height % factor or self.width % factor:
            raise ConfigError(
                f"demo input {self.height}x{self.width} must be divisible by {factor} "
                f"({len(self.channels)} 2x poolings)."
            )
        if self.f < 1:
            raise ConfigError(f"demo.f must be >= 1, got {self.f}.")

    @property
    def semantic_dim(self) -> int:
        """Channels of the bottleneck and length of the semantic vector."""
        return self.channels[-1]

    @property
    def head_inputs(self) -> int:
        """H * W * c1 + semantic_dim."""
        return self.height * self.width * self.channels[0] + self.semantic_dim

    def to_dict(self) -> Dict[str, Any]:
        """JSON form, stored with checkpoints."""
        return to_plain(self)


@dataclass
class DemoEncoding:
    """Pre-pool block outputs E1..E4 and the bottleneck B."""

    skips: List[Tensor]
    bottleneck: Tensor


@dataclass
class DemoOutput:
    """Outputs of one forward pass."""

    prediction: Tensor  # [N, f], z-score space
    semantic: Tensor  # [N, c4]
    decoder_semantic: Tensor  # [N, c4]
    bottleneck: Tensor


class ConvPair(Module):
    """Conv(ReLU(Conv(x))) with 3x3 kernels."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng)

    def forward(self, x: ArrayLike) -> Tensor:  # type: ignore[override]
        return self.conv2(F.relu(self.conv1(x)))


class DemographicPredictor(Module):
    """DemographicPredictor class.

    Parameter names start with "demo".
    """

    prefix = "demo"

    def __init__(self, config: DemoPredictorConfig, seed: int = 0) -> None:
        super().__init__()
        self.config = config
        rng = np.random.default_rng([seed, 11])
        channels = config.channels
        self.enc = [ConvPair(c_in, c_out, rng) for c_in, c_out in zip((3,) + channels[:-1], channels)]
        self.bottleneck = ConvPair(channels[-1], channels[-1], rng)
        # Decoder level i consumes the upsampled state of level i + 1 and skip E_i.
        upper = channels[1:] + (channels[-1],)
        self.dec = [ConvPair(c_up + c_skip, c_skip, rng) for c_up, c_skip in zip(upper, channels)]
        self.head = Linear(config.head_inputs, config.f, rng)
        projection = np.random.default_rng(PROJECTION_SEED).standard_normal((channels[-1], channels[0]))
        self._projection = projection / np.sqrt(channels[0])
        self.name_parameters()

    def _check_input(self, x: Tensor) -> None:
        expected = (3, self.config.height, self.config.width)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"Demographic predictor expects [N, {', '.join(map(str, expected))}], got {x.dims}.")

    def demo_encode(self, x: ArrayLike) -> DemoEncoding:
        """Encoder blocks MaxPool(Conv(ReLU(Conv(.)))) and the bottleneck conv pair."""
        x = as_tensor(x)
        self._check_input(x)
        skips = []
        for block in self.enc:
            skip = block(x)
            skips.append(skip)
            x = F.pool2d(skip, F.PoolKind.max)
        return DemoEncoding(skips=skips, bottleneck=self.bottleneck(x))

    def demo_decode(self, bottleneck: Tensor, skips: List[Tensor]) -> Tensor:
        """Mirror-paired decoder; returns D1 [N, c1, H, W]."""
        if len(skips) != len(self.dec):
            raise ShapeError(f"demo_decode needs {len(self.dec)} skips, got {len(skips)}.")
        state = bottleneck
        for block, skip in zip(reversed(self.dec), reversed(skips)):
            state = block(F.concat([F.upsample(state), skip]))
        return state

    @staticmethod
    def semantic_vector(bottleneck: ArrayLike) -> Tensor:
        """Per-channel global average of the bottleneck."""
        return F.adaptive_avg_pool(bottleneck)

    def decoder_semantics(self, d1: Tensor) -> Tensor:
        """Global average of D1 through the fixed projection to the semantic width."""
        projection = Tensor(self._projection, dtype=d1.dtype)
        return F.linear(F.adaptive_avg_pool(d1), projection)

    def forward(self, x: ArrayLike) -> DemoOutput:  # type: ignore[override]
        encoding = self.demo_encode(x)
        d1 = self.demo_decode(encoding.bottleneck, encoding.skips)
        semantic = self.semantic_vector(encoding.bottleneck)
        prediction = self.head(F.concat([F.flatten(d1), semantic]))
        decoder_semantic = semantic if self.config.literal_semantic else self.decoder_semantics(d1)
        return DemoOutput(
            prediction=prediction, semantic=semantic, decoder_semantic=decoder_semantic, bottleneck=encoding.bottleneck
        )


class FrozenDemographicPredictor(FrozenModel):
    """FrozenDemographicPredictor class.

    Verifier of generated images and encoder of the travel predictor.
    """

    def bottleneck(self, x: ArrayLike) -> Tensor:
        """Bottleneck B of the frozen encoder."""
        return self._model.demo_encode(x).bottleneck

    def __call__(self, x: ArrayLike) -> DemoOutput:  # type: ignore[override]
        return self._model(x)


def freeze(model: DemographicPredictor) -> FrozenDemographicPredictor:
    """Freezes a trained demographic predictor; see ``FrozenModel``."""
    return FrozenDemographicPredictor(model)


def predict_demographics(model: Any, images: np.ndarray) -> np.ndarray:
    """Demographics in z-score space for [N, H, W, 3] images.

    model is a DemographicPredictor (in eval mode for the call) or its frozen handle.
    """
    with evaluating(model), no_grad():
        output = model(Tensor(to_nchw(images), dtype=get_dtype()))
    return output.prediction.numpy()
