"""Module implementing the satellite image predictor.

The n+1 most recent frames are stacked along channels and encoded by DenseBlocks with 2x
average pooling after every level. The demographic sequence is embedded by an MLP,
broadcast over the bottleneck and fused by a 1x1 convolution. The decoder upsamples with
transposed convolutions and joins every level's encoder features through a sigmoid gate;
a 1x1 convolution with tanh produces the next frame.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from pydinn import functional as F
from pydinn.data import to_nchw, to_nhwc
from pydinn.errors import ConfigError, SequenceError, ShapeError
from pydinn.nn import BatchNorm2d, Conv2d, ConvBnRelu, ConvTranspose2d, Dropout, Linear, Module, evaluating
from pydinn.schema import to_plain
from pydinn.tensor import ArrayLike, Tensor, as_tensor, broadcast_to, get_dtype, no_grad, sqrt

logger = logging.getLogger(__name__)

SEQUENCE_EPS = 1e-8


class EncoderKind(Enum):
    """EncoderKind enum."""

    dense = "dense"
    conv2d = "conv2d"


@dataclass(frozen=True)
class SatPredictorConfig:
    """Satellite predictor configuration.

    n_history is the number of input frames (n + 1). Level i has min(base_channels * 2^(i-1),
    max_channels) channels; demo_embed_dim must equal the bottleneck channels.
    """

    height: int = 64
    width: int = 64
    n_history: int = 3
    f: int = 25
    depth: int = 4
    base_channels: int = 64
    max_channels: int = 512
    growth_rate: int = 32
    dense_layers: int = 4
    demo_hidden: Tuple[int, ...] = (256, 512)
    demo_embed_dim: int = 512
    dropout: float = 0.2
    encoder: EncoderKind = EncoderKind.dense
    gated_skip: bool = True
    normalize_sequence: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "encoder", EncoderKind(self.encoder))
        object.__setattr__(self, "demo_hidden", tuple(int(width) for width in self.demo_hidden))
        if self.depth < 1:
            raise ConfigError(f"sat.depth must be >= 1, got {self.depth}.")
        factor = 2**self.depth
        if self.height % factor or self.width % factor:
            raise ConfigError(f"sat input {self.height}x{self.width} must be divisible by 2^depth = {factor}.")
        for name in ("n_history", "f", "base_channels", "max_channels", "growth_rate", "dense_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"sat.{name} must be >= 1, got {getattr(self, name)}.")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"sat.dropout must lie in [0, 1), got {self.dropout}.")
        if self.demo_embed_dim != self.channels[-1]:
            raise ConfigError(
                f"sat.demo_embed_dim is {self.demo_embed_dim}, the bottleneck has {self.channels[-1]} channels."
            )

    @property
    def channels(self) -> List[int]:
        """Channel schedule c_1..c_L."""
        return [min(self.base_channels * 2**level, self.max_channels) for level in range(self.depth)]

    @property
    def bottleneck_dims(self) -> Tuple[int, int, int]:
        """Channels, height and width of the bottleneck."""
        return self.channels[-1], self.height // 2**self.depth, self.width // 2**self.depth

    def to_dict(self) -> Dict[str, Any]:
        """JSON form, stored with checkpoints."""
        return to_plain(self)


@dataclass
class EncoderFeatures:
    """Pre-pool level outputs E_1..E_L (skips), pooled maps F_1..F_L and the bottleneck F_L."""

    skips: List[Tensor]
    pooled: List[Tensor]

    @property
    def bottleneck(self) -> Tensor:
        """Deepest pooled map."""
        return self.pooled[-1]


def build_input(frames: Union[np.ndarray, Sequence[np.ndarray]], n_history: Optional[int] = None) -> Tensor:
    """Stacks frames oldest to newest along channels.

    Parameters
    ----------
    frames : Union[np.ndarray, Sequence[np.ndarray]]
        [N, T, H, W, 3] array, [T, H, W, 3] array of one sample, or a sequence of T
        frames each [N, H, W, 3] or [H, W, 3].
    n_history : Optional[int]
        Required number of frames T.
    Returns
    ----------
    : Tensor
        [N, 3T, H, W]; channels [3i, 3i + 3) hold frame i.
    :raises ShapeError: if frames differ in dims.
    :raises SequenceError: if the number of frames is not n_history.
    """
    if isinstance(frames, np.ndarray):
        stacked = frames if frames.ndim == 5 else frames[None]
    else:
        shapes = {np.shape(frame) for frame in frames}
        if len(shapes) > 1:
            raise ShapeError(f"All frames must share dims, got {sorted(shapes)}.")
        stacked = np.stack([np.asarray(frame) for frame in frames], axis=-4)
        if stacked.ndim == 4:
            stacked = stacked[None]
    if stacked.ndim != 5 or stacked.shape[-1] != 3:
        raise ShapeError(f"Frames must be [N, T, H, W, 3], got {list(stacked.shape)}.")
    n, count, height, width, _ = stacked.shape
    if n_history is not None and count != n_history:
        raise SequenceError(f"Expected {n_history} frames, got {count}.")
    channels_first = np.moveaxis(stacked, -1, 2).reshape(n, 3 * count, height, width)
    return Tensor(channels_first, dtype=get_dtype())


class DenseLayer(Module):
    """BN, ReLU and 3x3 conv emitting growth_rate channels."""

    def __init__(self, in_channels: int, growth_rate: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.bn = BatchNorm2d(in_channels)
        self.conv = Conv2d(in_channels, growth_rate, 3, rng)

    def forward(self, x: ArrayLike) -> Tensor:  # type: ignore[override]
        return self.conv(F.relu(self.bn(x)))


class DenseBlock(Module):
    """DenseBlock class.

    Layer l consumes the concatenation of the block input and all previous layer outputs;
    a 1x1 transition convolution maps the final concatenation to out_channels.
    """

    def __init__(
        self, in_channels: int, out_channels: int, layers: int, growth_rate: int, rng: np.random.Generator
    ) -> None:
        super().__init__()
        if layers < 1:
            raise ConfigError(f"A DenseBlock needs at least one layer, got {layers}.")
        self.in_channels = in_channels
        self.layers = [DenseLayer(in_channels + index * growth_rate, growth_rate, rng) for index in range(layers)]
        self.concat_channels = in_channels + layers * growth_rate
        self.transition = Conv2d(self.concat_channels, out_channels, 1, rng)

    def features(self, x: ArrayLike) -> Tensor:
        """Concatenation of the input and all layer outputs, before the transition."""
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"DenseBlock expects {self.in_channels} input channels, got dims {x.dims}.")
        collected = [x]
        for layer in self.layers:
            collected.append(layer(F.concat(collected) if len(collected) > 1 else x))
        return F.concat(collected)

    def forward(self, x: ArrayLike) -> Tensor:  # type: ignore[override]
        return self.transition(self.features(x))


def dense_block(x: ArrayLike, block: DenseBlock) -> Tensor:
    """Applies a DenseBlock."""
    return block(x)


class PlainBlock(Module):
    """Two conv-BN-ReLU layers, the encoder level of the conv2d ablation."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.first = ConvBnRelu(in_channels, out_channels, rng)
        self.second = ConvBnRelu(out_channels, out_channels, rng)

    def forward(self, x: ArrayLike) -> Tensor:  # type: ignore[override]
        return self.second(self.first(x))


class DemographicEncoder(Module):
    """MLP from the concatenated (n+1) * f demographic sequence to the embedding."""

    def __init__(self, config: SatPredictorConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.n_history = config.n_history
        self.f = config.f
        self.normalize_sequence = config.normalize_sequence
        dims = (config.n_history * config.f,) + config.demo_hidden
        self.hidden = [Linear(d_in, d_out, rng) for d_in, d_out in zip(dims[:-1], dims[1:])]
        self.drop = [Dropout(config.dropout, rng) for _ in self.hidden]
        self.out = Linear(dims[-1], config.demo_embed_dim, rng)

    def forward(self, demographics: ArrayLike) -> Tensor:  # type: ignore[override]
        d = as_tensor(demographics)
        if d.ndim != 3 or d.shape[1:] != (self.n_history, self.f):
            raise ShapeError(f"Demographic sequences must be [N, {self.n_history}, {self.f}], got {d.dims}.")
        if self.normalize_sequence:
            centered = d - d.mean(axis=1, keepdims=True)
            d = centered / (sqrt((centered * centered).mean(axis=1, keepdims=True)) + SEQUENCE_EPS)
        x = d.reshape(d.shape[0], self.n_history * self.f)
        for layer, drop in zip(self.hidden, self.drop):
            x = drop(F.relu(layer(x)))
        return self.out(x)


class Gate(Module):
    """sigmoid(BN(conv1x1(concat(E, D_up)))) with the channels of E."""

    def __init__(self, skip_channels: int, up_channels: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.conv = Conv2d(skip_channels + up_channels, skip_channels, 1, rng)
        self.bn = BatchNorm2d(skip_channels)

    def forward(self, skip: ArrayLike, up: ArrayLike) -> Tensor:  # type: ignore[override]
        skip, up = as_tensor(skip), as_tensor(up)
        if skip.shape[2:] != up.shape[2:]:
            raise ShapeError(f"gate needs equal spatial dims, got {skip.dims} and {up.dims}.")
        return F.sigmoid(self.bn(self.conv(F.concat([skip, up]))))


def gate(layer: Gate, skip: ArrayLike, up: ArrayLike) -> Tensor:
    """Gate values in (0, 1) with the dims of skip."""
    return layer(skip, up)


def gated_residual(skip: ArrayLike, up: ArrayLike, gates: Optional[ArrayLike] = None) -> Tensor:
    """concat(G * E, D_up); without gates the plain skip concatenation."""
    skip, up = as_tensor(skip), as_tensor(up)
    if gates is not None:
        gates = as_tensor(gates)
        if gates.shape != skip.shape:
            raise ShapeError(f"Gates must have the dims of the skip features, got {gates.dims} and {skip.dims}.")
        skip = gates * skip
    return F.concat([skip, up])


class DecoderBlock(Module):
    """Transposed-conv upsampling, optional gate against the skip, concat and conv-BN-ReLU."""

    def __init__(self, in_channels: int, channels: int, gated: bool, rng: np.random.Generator) -> None:
        super().__init__()
        self.up = ConvTranspose2d(in_channels, channels, rng)
        self.gate = Gate(channels, channels, rng) if gated else None
        self.conv = ConvBnRelu(2 * channels, channels, rng)

    def forward(self, state: ArrayLike, skip: ArrayLike) -> Tensor:  # type: ignore[override]
        up = self.up(state)
        gates = self.gate(skip, up) if self.gate is not None else None
        return self.conv(gated_residual(skip, up, gates))


class SatellitePredictor(Module):
    """SatellitePredictor class.

    Parameter names start with "sat".
    """

    prefix = "sat"

    def __init__(self, config: SatPredictorConfig, seed: int = 0) -> None:
        super().__init__()
        self.config = config
        rng = np.random.default_rng([seed, 17])
        channels = config.channels
        self.stem = Conv2d(3 * config.n_history, config.base_channels, 3, rng)
        inputs = [config.base_channels] + channels[:-1]
        if config.encoder is EncoderKind.dense:
            self.enc = [
                DenseBlock(c_in, c_out, config.dense_layers, config.growth_rate, rng)
                for c_in, c_out in zip(inputs, channels)
            ]
        else:
            self.enc = [PlainBlock(c_in, c_out, rng) for c_in, c_out in zip(inputs, channels)]
        self.demo = DemographicEncoder(config, rng)
        self.fusion = Conv2d(channels[-1] + config.demo_embed_dim, channels[-1], 1, rng)
        # Decoder level i upsamples the state of level i + 1 (the fused bottleneck for level L).
        states = channels[1:] + [channels[-1]]
        self.dec = [DecoderBlock(c_in, c, config.gated_skip, rng) for c_in, c in zip(states, channels)]
        self.head = Conv2d(channels[0], 3, 1, rng)
        self.name_parameters()
        logger.debug(
            "satellite predictor: %s encoder, channels %s, %d parameters",
            config.encoder.value,
            channels,
            sum(param.size for param in self.parameters()),
        )

    def encode_images(self, x: ArrayLike) -> EncoderFeatures:
        """Encoder levels with 2x average pooling after each."""
        x = as_tensor(x)
        expected = (3 * self.config.n_history, self.config.height, self.config.width)
        if x.ndim != 4:
            raise ShapeError(f"Satellite predictor expects [N, {', '.join(map(str, expected))}], got {x.dims}.")
        if x.shape[1] != expected[0]:
            raise SequenceError(
                f"Expected {self.config.n_history} stacked frames ({expected[0]} channels), got {x.shape[1]}."
            )
        if x.shape[2:] != expected[1:]:
            raise ShapeError(f"Satellite predictor expects [N, {', '.join(map(str, expected))}], got {x.dims}.")
        skips, pooled = [], []
        state = self.stem(x)
        for level in self.enc:
            skip = level(state)
            skips.append(skip)
            state = F.pool2d(skip, F.PoolKind.avg)
            pooled.append(state)
        return EncoderFeatures(skips=skips, pooled=pooled)

    def encode_demographics(self, demographics: ArrayLike) -> Tensor:
        """Embedding e_d [N, demo_embed_dim] of the demographic sequence."""
        return self.demo(demographics)

    def fuse(self, bottleneck: ArrayLike, embedding: ArrayLike) -> Tensor:
        """Broadcasts e_d over the bottleneck, concatenates and reduces with a 1x1 conv."""
        bottleneck, embedding = as_tensor(bottleneck), as_tensor(embedding)
        if embedding.ndim == 1:
            embedding = embedding.reshape(1, -1)
        n, _, height, width = bottleneck.shape
        if embedding.shape != (n, self.config.demo_embed_dim):
            raise ShapeError(
                f"fuse needs an embedding of dims [{n}, {self.config.demo_embed_dim}], got {embedding.dims}."
            )
        spread = broadcast_to(
            embedding.reshape(n, self.config.demo_embed_dim, 1, 1), (n, self.config.demo_embed_dim, height, width)
        )
        return self.fusion(F.concat([bottleneck, spread]))

    def decode(self, fused: ArrayLike, features: EncoderFeatures) -> Tensor:
        """Decoder levels L..1; returns D_1 at full resolution."""
        if len(features.skips) != len(self.dec):
            raise ShapeError(f"decode needs {len(self.dec)} encoder levels, got {len(features.skips)}.")
        state = as_tensor(fused)
        for block, skip in zip(reversed(self.dec), reversed(features.skips)):
            state = block(state, skip)
        return state

    def forward(self, x: ArrayLike, demographics: ArrayLike) -> Tensor:  # type: ignore[override]
        """Next frame [N, 3, H, W] in [-1, 1] from stacked frames and demographic sequences."""
        features = self.encode_images(x)
        fused = self.fuse(features.bottleneck, self.encode_demographics(demographics))
        return F.tanh(self.head(self.decode(fused, features)))


def predict_image(model: SatellitePredictor, frames: np.ndarray, demographics: np.ndarray) -> np.ndarray:
    """Eval-mode prediction (previous mode restored) of the next frames [N, H, W, 3] from [N, n+1, H, W, 3] frames."""
    with evaluating(model), no_grad():
        out = model(
            build_input(frames, model.config.n_history), Tensor(np.asarray(demographics), dtype=get_dtype())
        )
    return to_nhwc(out.numpy())


def nchw_images(images: np.ndarray) -> Tensor:
    """[N, H, W, 3] images as a Tensor in the current precision."""
    return Tensor(to_nchw(images), dtype=get_dtype())
