"""Module implementing the run configuration read by the command-line interface.

A run is configured by one strict JSON document; every section maps onto a config
dataclass and missing keys take their defaults.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from os import makedirs
from os.path import abspath, dirname, isfile
from typing import Any, Dict, Optional, Tuple

from pydinn.data import SynthConfig
from pydinn.demographic import DemoPredictorConfig
from pydinn.errors import ConfigError
from pydinn.evaluation import ABLATION_VARIANTS, HeatmapKind
from pydinn.losses import LossWeights, SsimParams
from pydinn.satellite import SatPredictorConfig
from pydinn.schema import from_plain, to_plain
from pydinn.tensor import DTYPES
from pydinn.training import TrainingConfig
from pydinn.travel import TravelPredictorConfig

logger = logging.getLogger(__name__)

RESOLVED_CONFIG = "config.resolved.json"


@dataclass(frozen=True)
class EvaluationConfig:
    """Evaluation settings.

    tau None selects the 90th percentile of each county's heatmap values; base_year None the
    first study year. heatmap_counties is the number of split counties exported.
    """

    split: str = "test"
    horizons: Tuple[int, ...] = (1, 2, 3)
    tau: Optional[float] = None
    heatmap_kinds: Tuple[HeatmapKind, ...] = (HeatmapKind.target, HeatmapKind.forecast)
    base_year: Optional[int] = None
    heatmap_counties: int = 3
    qq_max_samples: int = 100_000

    def __post_init__(self) -> None:
        object.__setattr__(self, "heatmap_kinds", tuple(HeatmapKind(kind) for kind in self.heatmap_kinds))
        if not self.horizons or min(self.horizons) < 1:
            raise ConfigError(f"evaluation.horizons must be positive years, got {list(self.horizons)}.")
        if self.heatmap_counties < 1 or self.qq_max_samples < 100:
            raise ConfigError("evaluation.heatmap_counties must be >= 1 and qq_max_samples >= 100.")


@dataclass(frozen=True)
class AblationConfig:
    """Ablation settings; epochs overrides the training budget of every variant when set."""

    variants: Tuple[int, ...] = tuple(variant.id for variant in ABLATION_VARIANTS)
    epochs: Optional[int] = None

    def __post_init__(self) -> None:
        known = {variant.id for variant in ABLATION_VARIANTS}
        unknown = sorted(set(self.variants) - known)
        if unknown or not self.variants:
            raise ConfigError(
                f"ablation.variants must be a non-empty subset of {sorted(known)}, got {list(self.variants)}."
            )
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError(f"ablation.epochs must be >= 1, got {self.epochs}.")


@dataclass(frozen=True)
class RunConfig:
    """RunConfig class.

    dataset names a manifest directory; when it is None the synth section generates the
    dataset. All model sections must agree on image dims and the demographic feature count.
    """

    seed: int = 0
    out: str = "runs/default"
    precision: int = 32
    dataset: Optional[str] = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    sat: SatPredictorConfig = field(default_factory=SatPredictorConfig)
    demo: DemoPredictorConfig = field(default_factory=DemoPredictorConfig)
    travel: TravelPredictorConfig = field(default_factory=TravelPredictorConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    ssim: SsimParams = field(default_factory=SsimParams)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self) -> None:
        if self.precision not in DTYPES:
            raise ConfigError(f"precision must be one of {sorted(DTYPES)}, got {self.precision}.")
        dims = {
            "synth": (self.synth.height, self.synth.width),
            "sat": (self.sat.height, self.sat.width),
            "demo": (self.demo.height, self.demo.width),
        }
        if self.dataset is not None:
            dims.pop("synth")
        if len(set(dims.values())) != 1:
            raise ConfigError(f"Image dims differ between sections: {dims}")
        features = {"sat": self.sat.f, "demo": self.demo.f}
        if self.dataset is None:
            features["synth"] = self.synth.f
        if len(set(features.values())) != 1:
            raise ConfigError(f"Demographic feature counts differ between sections: {features}")
        if self.travel.in_channels != self.demo.semantic_dim:
            raise ConfigError(
                f"travel.in_channels is {self.travel.in_channels}, "
                f"demo bottleneck has {self.demo.semantic_dim} channels."
            )

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> "RunConfig":
        """Strict construction from a JSON object.

        :raises ConfigError: naming unknown keys and invalid values.
        """
        if not isinstance(document, dict):
            raise ConfigError(f"A run config must be a JSON object, got {type(document).__name__}.")
        return from_plain(cls, document)

    def to_dict(self) -> Dict[str, Any]:
        """Fully resolved JSON form."""
        return to_plain(self)

    def with_overrides(
        self, seed: Optional[int] = None, out: Optional[str] = None, precision: Optional[int] = None
    ) -> "RunConfig":
        """Copy with command-line overrides applied."""
        changes: Dict[str, Any] = {}
        if seed is not None:
            changes["seed"] = seed
        if out is not None:
            changes["out"] = out
        if precision is not None:
            changes["precision"] = precision
        return replace(self, **changes)


def load_config(filepath: str) -> RunConfig:
    """Reads a run config JSON file.

    :raises ConfigError: if the file is missing, not JSON or violates the schema.
    """
    filepath_abs = abspath(filepath)
    if not isfile(filepath_abs):
        raise ConfigError(f"{filepath_abs} does not exist.")
    with open(filepath_abs, encoding="utf-8") as config_file:
        try:
            document = json.load(config_file)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{filepath_abs} is not valid JSON: {err}") from err
    return RunConfig.from_dict(document)


def dump_config(config: RunConfig, filepath: str, exist_ok: bool = True) -> None:
    """Writes the resolved config next to the run outputs."""
    filepath_abs = abspath(filepath)
    if not exist_ok and isfile(filepath_abs):
        raise FileExistsError(f"{filepath_abs} already exists and exist_ok is False.")
    makedirs(dirname(filepath_abs), exist_ok=True)
    with open(filepath_abs, "w", encoding="utf-8") as config_file:
        json.dump(config.to_dict(), config_file, indent=2, sort_keys=True)
    logger.debug("wrote resolved config to %s", filepath_abs)
