"""Module implementing the staged training of the three networks.

The demographic predictor is trained first (demo stage), then frozen. The travel predictor
learns on top of the frozen encoder (travel stage), and the satellite predictor learns with
the integrated objective whose demographic, travel and semantic terms run through the
frozen networks (sat stage).
"""

import logging
from dataclasses import dataclass
from enum import Enum
from os import makedirs
from os.path import abspath, dirname, isfile, join
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np
import pandas as pd

from pydinn.data import ImageSamples, SequenceBatch
from pydinn.demographic import DemographicPredictor, DemoPredictorConfig, FrozenDemographicPredictor
from pydinn.demographic import freeze as freeze_demo
from pydinn.errors import ConfigError, StageError
from pydinn.losses import (
    LossParts,
    LossWeights,
    SsimParams,
    image_loss,
    semantic_loss,
    total_loss,
    vector_mse,
)
from pydinn.nn import Module
from pydinn.optim import Adam
from pydinn.satellite import SatellitePredictor, SatPredictorConfig, build_input, nchw_images
from pydinn.schema import from_plain, to_plain
from pydinn.tensor import Tensor, backward, no_grad
from pydinn.tensorfile import CHECKPOINT_CONFIG, load_checkpoint, read_checkpoint_config, save_checkpoint
from pydinn.travel import FrozenTravelPredictor, TravelPredictor, TravelPredictorConfig
from pydinn.travel import freeze as freeze_travel

logger = logging.getLogger(__name__)

LOSS_COLUMNS: Tuple[str, ...] = ("epoch", "total", "image", "demo", "travel", "semantic")
FLOAT_FORMAT = "%.10g"


class Stage(Enum):
    """Stage enum."""

    demo = "demo"
    travel = "travel"
    sat = "sat"


@dataclass(frozen=True)
class TrainingConfig:
    """Training hyperparameters.

    overfit_samples > 0 switches to overfit mode: the first overfit_samples samples are
    fitted with overfit_steps full-batch updates. demo_predictor False drops the
    demographic and semantic terms of the sat stage.
    """

    batch_size: int = 8
    lr: float = 3e-4
    epochs: int = 200
    overfit_samples: int = 0
    overfit_steps: int = 500
    demo_predictor: bool = True

    def __post_init__(self) -> None:
        if self.batch_size < 2:
            raise ConfigError(f"training.batch_size must be >= 2 for batch normalization, got {self.batch_size}.")
        if self.epochs < 1:
            raise ConfigError(f"training.epochs must be >= 1, got {self.epochs}.")
        if self.lr <= 0:
            raise ConfigError(f"training.lr must be > 0, got {self.lr}.")
        if self.overfit_samples < 0 or self.overfit_samples == 1 or self.overfit_steps < 1:
            raise ConfigError("training.overfit_samples must be 0 or >= 2 and overfit_steps >= 1.")


@dataclass
class TrainResult:
    """Trained model with its per-epoch loss log."""

    model: Module
    history: pd.DataFrame


StepFn = Callable[[np.ndarray], Dict[str, float]]


def _batches(n_samples: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n_samples)
    for start in range(0, n_samples, batch_size):
        batch = order[start : start + batch_size]
        if len(batch) < 2:
            logger.debug("dropping a trailing batch of size %d", len(batch))
            continue
        yield batch


def _fit(step: StepFn, n_samples: int, config: TrainingConfig, seed: int, stage: Stage) -> pd.DataFrame:
    """Runs the epoch loop (or the overfit loop) and collects one loss row per epoch."""
    rows: List[Dict[str, float]] = []
    if config.overfit_samples:
        indices = np.arange(min(config.overfit_samples, n_samples))
        for index in range(config.overfit_steps):
            values = step(indices)
            rows.append(dict(values, epoch=index + 1))
            logger.debug("%s overfit step %d: %s", stage.value, index + 1, values)
        logger.info("%s overfit finished after %d steps, total loss %.6g", stage.value, len(rows), rows[-1]["total"])
        return pd.DataFrame(rows, columns=list(LOSS_COLUMNS))

    if n_samples < 2:
        raise StageError(f"The {stage.value} stage needs at least 2 training samples, got {n_samples}.")
    rng = np.random.default_rng([seed, 23])
    for epoch in range(1, config.epochs + 1):
        sums = dict.fromkeys(LOSS_COLUMNS[1:], 0.0)
        seen = 0
        for batch in _batches(n_samples, config.batch_size, rng):
            values = step(batch)
            for name in sums:
                sums[name] += values[name] * len(batch)
            seen += len(batch)
        row = {name: total / seen for name, total in sums.items()}
        rows.append(dict(row, epoch=epoch))
        logger.info("%s epoch %d/%d: total %.6g", stage.value, epoch, config.epochs, row["total"])
    return pd.DataFrame(rows, columns=list(LOSS_COLUMNS))


def _apply(loss: Tensor, parts: LossParts, optimizer: Adam) -> Dict[str, float]:
    optimizer.zero_grad()
    backward(loss)
    optimizer.step()
    return dict(parts.values(), total=loss.item())


def train_demo(
    samples: ImageSamples,
    model_config: DemoPredictorConfig,
    config: TrainingConfig,
    weights: LossWeights,
    seed: int = 0,
) -> TrainResult:
    """Trains the demographic predictor on true current-year images with L_demo + delta * L_semantic."""
    model = DemographicPredictor(model_config, seed=seed)
    model.train()
    optimizer = Adam(model.trainable_parameters(), lr=config.lr)
    stage_weights = LossWeights(alpha=0.0, beta=1.0, gamma_t=0.0, delta=weights.delta, lam=weights.lam)
    targets = samples.demographics

    def _step(indices: np.ndarray) -> Dict[str, float]:
        out = model(nchw_images(samples.images[indices]))
        parts = LossParts(
            demo=vector_mse(out.prediction, Tensor(targets[indices])),
            semantic=semantic_loss(out.semantic, out.decoder_semantic),
        )
        return _apply(total_loss(parts, stage_weights), parts, optimizer)

    history = _fit(_step, len(samples), config, seed, Stage.demo)
    return TrainResult(model=model.eval(), history=history)


def encoder_bottlenecks(encoder: FrozenDemographicPredictor, images: np.ndarray, chunk: int = 16) -> np.ndarray:
    """Bottlenecks of the frozen encoder for [N, H, W, 3] images."""
    with no_grad():
        parts = [
            encoder.bottleneck(nchw_images(images[start : start + chunk])).numpy()
            for start in range(0, len(images), chunk)
        ]
    return np.concatenate(parts)


def train_travel(
    samples: ImageSamples,
    encoder: FrozenDemographicPredictor,
    model_config: TravelPredictorConfig,
    config: TrainingConfig,
    seed: int = 0,
) -> TrainResult:
    """Trains the travel pathways and heads with L_travel; the encoder stays frozen."""
    model = TravelPredictor(model_config, encoder, seed=seed)
    model.train()
    optimizer = Adam(model.trainable_parameters(), lr=config.lr)
    bottlenecks = encoder_bottlenecks(encoder, samples.images)
    stage_weights = LossWeights(alpha=0.0, beta=0.0, gamma_t=1.0, delta=0.0)

    def _step(indices: np.ndarray) -> Dict[str, float]:
        out = model.forward_bottleneck(Tensor(bottlenecks[indices]))
        parts = LossParts(travel=vector_mse(out.vector(), Tensor(samples.travel[indices])))
        return _apply(total_loss(parts, stage_weights), parts, optimizer)

    history = _fit(_step, len(samples), config, seed, Stage.travel)
    return TrainResult(model=model.eval(), history=history)


def train_sat(
    sequences: SequenceBatch,
    model_config: SatPredictorConfig,
    config: TrainingConfig,
    weights: LossWeights,
    demo: Optional[FrozenDemographicPredictor] = None,
    travel: Optional[FrozenTravelPredictor] = None,
    ssim_params: Optional[SsimParams] = None,
    seed: int = 0,
) -> TrainResult:
    """Trains the satellite predictor with the integrated objective.

    The demographic and semantic terms evaluate the frozen demographic predictor on the
    generated image; the travel term evaluates the frozen travel predictor when given.

    :raises StageError: if demographic terms are enabled without a frozen demographic predictor.
    """
    if config.demo_predictor and demo is None:
        raise StageError("The sat stage needs a trained demographic predictor, run the demo stage first.")
    use_demo = config.demo_predictor
    stage_weights = LossWeights(
        alpha=weights.alpha,
        beta=weights.beta if use_demo else 0.0,
        gamma_t=weights.gamma_t if travel is not None else 0.0,
        delta=weights.delta if use_demo else 0.0,
        lam=weights.lam,
    )
    model = SatellitePredictor(model_config, seed=seed)
    model.train()
    optimizer = Adam(model.trainable_parameters(), lr=config.lr)

    def _step(indices: np.ndarray) -> Dict[str, float]:
        generated = model(build_input(sequences.frames[indices]), Tensor(sequences.demographics[indices]))
        target = nchw_images(sequences.target_image[indices])
        parts = LossParts(image=image_loss(generated, target, weights.lam, ssim_params))
        if use_demo and demo is not None:
            verified = demo(generated)
            parts.demo = vector_mse(verified.prediction, Tensor(sequences.target_demographics[indices]))
            parts.semantic = semantic_loss(verified.semantic, verified.decoder_semantic)
        if travel is not None:
            parts.travel = vector_mse(travel(generated).vector(), Tensor(sequences.target_travel[indices]))
        return _apply(total_loss(parts, stage_weights), parts, optimizer)

    history = _fit(_step, len(sequences), config, seed, Stage.sat)
    return TrainResult(model=model.eval(), history=history)


# artifacts


def write_loss_log(history: pd.DataFrame, filepath: str, exist_ok: bool = False) -> None:
    """Writes the loss log CSV (columns epoch, total, image, demo, travel, semantic)."""
    filepath_abs = abspath(filepath)
    if not exist_ok and isfile(filepath_abs):
        raise FileExistsError(f"{filepath_abs} already exists and exist_ok is False.")
    makedirs(dirname(filepath_abs), exist_ok=True)
    history.to_csv(filepath_abs, index=False, float_format=FLOAT_FORMAT)
    logger.info("wrote loss log with %d rows to %s", len(history), filepath_abs)


def checkpoint_dir(out: str, stage: Stage) -> str:
    """Checkpoint directory of a stage below the run output directory."""
    return join(out, "checkpoints", stage.value)


def loss_log_path(out: str, stage: Stage) -> str:
    """Loss log path of a stage below the run output directory."""
    return join(out, "logs", f"{stage.value}_loss.csv")


def save_model(directory: str, model: Module, exist_ok: bool = False) -> None:
    """Saves a trained model with its configuration echo."""
    save_checkpoint(directory, model, to_plain(model.config), exist_ok=exist_ok)  # type: ignore[attr-defined]


def _require(directory: str, stage: Stage) -> dict:
    if not isfile(join(directory, CHECKPOINT_CONFIG)):
        raise StageError(f"No {stage.value} checkpoint at {abspath(directory)}, run the {stage.value} stage first.")
    return read_checkpoint_config(directory)


def load_demo(directory: str) -> DemographicPredictor:
    """Loads a demographic predictor checkpoint.

    :raises StageError: if there is no checkpoint.
    """
    document = _require(directory, Stage.demo)
    model = DemographicPredictor(from_plain(DemoPredictorConfig, document["config"], "demo."))
    load_checkpoint(directory, model, expected_config=to_plain(model.config))
    return model.eval()  # type: ignore[return-value]


def load_frozen_demo(directory: str) -> FrozenDemographicPredictor:
    """Loads and freezes a demographic predictor checkpoint."""
    return freeze_demo(load_demo(directory))


def load_travel(directory: str, encoder: FrozenDemographicPredictor) -> TravelPredictor:
    """Loads a travel predictor checkpoint on top of a frozen encoder."""
    document = _require(directory, Stage.travel)
    model = TravelPredictor(from_plain(TravelPredictorConfig, document["config"], "travel."), encoder)
    load_checkpoint(directory, model, expected_config=to_plain(model.config))
    return model.eval()  # type: ignore[return-value]


def load_frozen_travel(directory: str, encoder: FrozenDemographicPredictor) -> FrozenTravelPredictor:
    """Loads and freezes a travel predictor checkpoint."""
    return freeze_travel(load_travel(directory, encoder))


def load_sat(directory: str) -> SatellitePredictor:
    """Loads a satellite predictor checkpoint."""
    document = _require(directory, Stage.sat)
    model = SatellitePredictor(from_plain(SatPredictorConfig, document["config"], "sat."))
    load_checkpoint(directory, model, expected_config=to_plain(model.config))
    return model.eval()  # type: ignore[return-value]
