"""Module implementing dataset construction and preprocessing.

Covers the preprocessing operators (median composite, gamma scaling, z-score, IQR
outliers, sentinel replacement), a synthetic county generator whose images, demographics
and travel behavior share known latent drivers, manifest IO and sequence assembly.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from os import makedirs
from os.path import abspath, dirname, isfile, join
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from matplotlib import image as mpimg

from pydinn.errors import (
    ConfigError,
    DataError,
    EmptyStackError,
    InsufficientDataError,
    SequenceError,
    ShapeError,
)
from pydinn.tensorfile import read_tensor, write_tensor
from pydinn.workers import map_ordered

logger = logging.getLogger(__name__)

SENTINELS: Tuple[int, ...] = (-666666666, -999999999)
EXCLUDED_YEAR = 2020
FIRST_YEAR, LAST_YEAR = 2012, 2023
STUDY_YEARS: Tuple[int, ...] = tuple(year for year in range(FIRST_YEAR, LAST_YEAR + 1) if year != EXCLUDED_YEAR)
ZSCORE_EPS = 1e-8
MANIFEST_FILENAME = "manifest.json"
MANIFEST_FORMAT_VERSION = "1.0"
SPLITS: Tuple[str, ...] = ("train", "val", "test")

DEMOGRAPHIC_FEATURES: Tuple[str, ...] = (
    "total_population",
    "total_male",
    "total_female",
    "median_age",
    "age_under_10",
    "age_10_to_17",
    "age_18_to_19",
    "age_20_to_29",
    "age_30_to_39",
    "age_40_to_49",
    "age_50_to_59",
    "age_60_to_69",
    "age_70_to_79",
    "age_80_and_over",
    "race_white_alone",
    "race_black_alone",
    "race_american_indian_alaska_native",
    "race_asian",
    "race_native_hawaiian_pacific_islander",
    "hispanic_latino",
    "education_total_population_25_plus",
    "education_bachelors_degree",
    "education_masters_degree",
    "education_professional_degree",
    "education_doctorate_degree",
)

# Census age columns summed into each merged age band.
AGE_BANDS: Dict[str, Tuple[str, ...]] = {
    "age_under_10": ("age_under_5_years", "age_5_to_9_years"),
    "age_10_to_17": ("age_10_to_14_years", "age_15_to_17_years"),
    "age_18_to_19": ("age_18_years", "age_19_years"),
    "age_20_to_29": ("age_20_to_24_years", "age_25_to_29_years"),
    "age_30_to_39": ("age_30_to_34_years", "age_35_to_39_years"),
    "age_40_to_49": ("age_40_to_44_years", "age_45_to_49_years"),
    "age_50_to_59": ("age_50_to_54_years", "age_55_to_59_years"),
    "age_60_to_69": ("age_60_to_64_years", "age_65_to_69_years"),
    "age_70_to_79": ("age_70_to_74_years", "age_75_to_79_years"),
    "age_80_and_over": ("age_80_to_84_years", "age_85_years_and_over"),
}

MODE_FEATURES: Tuple[str, ...] = (
    "transportation_drove_alone",
    "transportation_carpooled",
    "transportation_public_transit_total",
    "transportation_taxicab",
    "transportation_motorcycle",
    "transportation_bicycle",
    "transportation_walked",
    "transportation_other_means",
    "transportation_worked_at_home",
)
VEHICLE_FEATURES: Tuple[str, ...] = (
    "vehicles_available_no_vehicle",
    "vehicles_available_one_vehicle",
    "vehicles_available_two_vehicles",
    "vehicles_available_three_plus_vehicles",
)
TRAVEL_FEATURES: Tuple[str, ...] = MODE_FEATURES + VEHICLE_FEATURES + ("travel_time", "departure_pattern")
N_MODES, N_VEHICLES = len(MODE_FEATURES), len(VEHICLE_FEATURES)
TRAVEL_DIM = len(TRAVEL_FEATURES)

# Variables without which a county-year is excluded.
KEY_VARIABLES: Tuple[str, ...] = (
    "total_population",
    "transportation_total_workers",
    "vehicles_available_total_households",
)
# Minutes per unit of the normalized travel time.
TRAVEL_TIME_SCALE = 60.0


def feature_names(f: int) -> List[str]:
    """Names of the first f demographic features; features beyond the catalogue are numbered."""
    names = list(DEMOGRAPHIC_FEATURES[:f])
    names += [f"feature_{index}" for index in range(len(DEMOGRAPHIC_FEATURES), f)]
    return names


# preprocessing operators


@dataclass
class RawImageStack:
    """All acquisitions of one area of interest within one year, in raw reflectance units."""

    images: List[np.ndarray]
    timestamps: List[str] = field(default_factory=list)


def median_composite(stack: RawImageStack) -> np.ndarray:
    """Pixel-wise median over the acquisitions of a stack.

    Even counts take the lower-middle element, so every composite value was observed.

    Parameters
    ----------
    stack : RawImageStack
        H x W x 3 acquisitions.
    Returns
    ----------
    : np.ndarray
        H x W x 3 composite.
    :raises EmptyStackError: if the stack has no image.
    :raises ShapeError: if the images differ in dims.
    """
    if not stack.images:
        raise EmptyStackError("median_composite needs at least one acquisition.")
    shapes = {np.shape(image) for image in stack.images}
    if len(shapes) != 1:
        raise ShapeError(f"All acquisitions of a stack must share dims, got {sorted(shapes)}.")
    ordered = np.sort(np.stack([np.asarray(image) for image in stack.images]), axis=0)
    return ordered[(len(stack.images) - 1) // 2]


def gamma_scale(image: np.ndarray, v_min: float = 7000.0, v_max: float = 30000.0, gamma: float = 1.4) -> np.ndarray:
    """Clips raw reflectance to [v_min, v_max], scales by gamma and maps [gamma*v_min, gamma*v_max] onto [-1, 1].

    The clip stage is idempotent, the full operator is not.

    :raises ConfigError: if v_min >= v_max or gamma <= 0.
    """
    if v_min >= v_max or gamma <= 0:
        raise ConfigError(f"gamma_scale needs v_min < v_max and gamma > 0, got {v_min}, {v_max}, {gamma}.")
    scaled = gamma * np.clip(np.asarray(image, dtype=np.float64), v_min, v_max)
    low, high = gamma * v_min, gamma * v_max
    return np.clip(2.0 * (scaled - low) / (high - low) - 1.0, -1.0, 1.0)


@dataclass(frozen=True)
class ZScoreStats:
    """Per-feature mean and population standard deviation."""

    mu: np.ndarray
    sigma: np.ndarray

    def apply(self, features: np.ndarray) -> np.ndarray:
        """(x - mu) / (sigma + eps); constant columns map to 0."""
        return (np.asarray(features, dtype=np.float64) - self.mu) / (self.sigma + ZSCORE_EPS)

    def invert(self, normalized: np.ndarray) -> np.ndarray:
        """Inverse of ``apply``."""
        return self.mu + (self.sigma + ZSCORE_EPS) * np.asarray(normalized, dtype=np.float64)

    def to_dict(self) -> Dict[str, List[float]]:
        """JSON form."""
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist()}

    @classmethod
    def from_dict(cls, document: Dict[str, List[float]]) -> "ZScoreStats":
        """Inverse of ``to_dict``."""
        return cls(
            mu=np.asarray(document["mu"], dtype=np.float64), sigma=np.asarray(document["sigma"], dtype=np.float64)
        )


def zscore_fit(features: np.ndarray) -> ZScoreStats:
    """Fits per-column statistics.

    :raises InsufficientDataError: for fewer than 2 rows.
    """
    matrix = np.asarray(features, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] < 2:
        raise InsufficientDataError(f"zscore needs a matrix with at least 2 rows, got dims {list(matrix.shape)}.")
    return ZScoreStats(mu=matrix.mean(axis=0), sigma=matrix.std(axis=0))


def zscore_fit_apply(features: np.ndarray) -> Tuple[np.ndarray, ZScoreStats]:
    """Fits per-column statistics and returns the normalized matrix with them."""
    stats = zscore_fit(features)
    return stats.apply(features), stats


def temporal_zscore(sequence: np.ndarray) -> np.ndarray:
    """Normalizes demographic sequences [..., T, f] over their temporal axis."""
    values = np.asarray(sequence, dtype=np.float64)
    mean = values.mean(axis=-2, keepdims=True)
    std = values.std(axis=-2, keepdims=True)
    return (values - mean) / (std + ZSCORE_EPS)


def iqr_outliers(values: Sequence[float]) -> np.ndarray:
    """Flags values outside [Q1 - 1.5 IQR, Q3 + 1.5 IQR], quartiles by linear interpolation.

    :raises InsufficientDataError: for fewer than 4 values.
    """
    array = np.asarray(values, dtype=np.float64)
    if array.size < 4:
        raise InsufficientDataError(f"iqr_outliers needs at least 4 values, got {array.size}.")
    q1, q3 = np.percentile(array, [25, 75])
    spread = q3 - q1
    return (array < q1 - 1.5 * spread) | (array > q3 + 1.5 * spread)


def replace_sentinels(features: Union[np.ndarray, pd.DataFrame]) -> Union[np.ndarray, pd.DataFrame]:
    """Replaces census sentinel codes by NaN; other values, negative ones included, are kept."""
    if isinstance(features, pd.DataFrame):
        return features.mask(features.isin(SENTINELS))
    array = np.asarray(features, dtype=np.float64)
    return np.where(np.isin(array, SENTINELS), np.nan, array)


# records and manifest


@dataclass
class TravelCounts:
    """Raw census counts behind a travel vector."""

    total_workers: int
    modes: List[int]
    total_households: int
    vehicles: List[int]


@dataclass
class CountyYearRecord:
    """One county in one study year.

    image is H x W x 3 in [-1, 1]; demographics are raw (un-normalized) feature values.
    """

    county_id: str
    year: int
    image: np.ndarray
    demographics: np.ndarray
    travel: np.ndarray
    counts: Optional[TravelCounts] = None

    def __post_init__(self) -> None:
        if self.year == EXCLUDED_YEAR:
            raise DataError(f"{self.county_id}: {EXCLUDED_YEAR} is not a study year.")
        if np.ndim(self.image) != 3 or np.shape(self.image)[2] != 3:
            raise ShapeError(
                f"{self.county_id} {self.year}: image must be H x W x 3, got {list(np.shape(self.image))}."
            )
        if np.min(self.image) < -1.0 or np.max(self.image) > 1.0:
            raise DataError(f"{self.county_id} {self.year}: image values must lie in [-1, 1].")
        self.image = np.asarray(self.image, dtype=np.float32)
        self.demographics = np.asarray(self.demographics, dtype=np.float64)
        self.travel = np.asarray(self.travel, dtype=np.float64)


@dataclass
class DatasetManifest:
    """Records of all counties and years with normalization statistics and the county split."""

    records: List[CountyYearRecord]
    stats: ZScoreStats
    splits: Dict[str, List[str]]
    feature_names: List[str]
    travel_names: List[str] = field(default_factory=lambda: list(TRAVEL_FEATURES))

    def __post_init__(self) -> None:
        self._index = {(record.county_id, record.year): record for record in self.records}

    @property
    def years(self) -> List[int]:
        """Sorted study years present in the manifest."""
        return sorted({record.year for record in self.records})

    @property
    def counties(self) -> List[str]:
        """Sorted county ids present in the manifest."""
        return sorted({record.county_id for record in self.records})

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        """H, W, 3 of the images."""
        return tuple(self.records[0].image.shape)  # type: ignore[return-value]

    def record(self, county_id: str, year: int) -> CountyYearRecord:
        """Record of one county-year.

        :raises DataError: if the manifest lacks it.
        """
        try:
            return self._index[(county_id, year)]
        except KeyError:
            raise DataError(f"No record for county {county_id} in year {year}.") from KeyError

    def has_record(self, county_id: str, year: int) -> bool:
        """Whether the manifest holds the county-year."""
        return (county_id, year) in self._index

    def split_of(self, split: str) -> List[str]:
        """County ids of a split.

        :raises DataError: for an unknown split name.
        """
        try:
            return list(self.splits[split])
        except KeyError:
            raise DataError(f"Unknown split {split}, possible values are: {', '.join(self.splits)}") from KeyError

    def normalized_demographics(self, record: CountyYearRecord) -> np.ndarray:
        """Demographics of a record in z-score space."""
        return self.stats.apply(record.demographics)


def split_counties(
    county_ids: Sequence[str], seed: int, val_fraction: float = 0.15, test_fraction: float = 0.15
) -> Dict[str, List[str]]:
    """Deterministic disjoint train/val/test assignment of counties."""
    order = np.random.default_rng([seed, 7]).permutation(len(county_ids))
    shuffled = [county_ids[index] for index in order]
    n_total = len(shuffled)
    n_test = max(1, int(round(n_total * test_fraction))) if n_total >= 3 else 0
    n_val = max(1, int(round(n_total * val_fraction))) if n_total >= 3 else 0
    return {
        "train": sorted(shuffled[n_test + n_val :]),
        "val": sorted(shuffled[n_test : n_test + n_val]),
        "test": sorted(shuffled[:n_test]),
    }


def fit_train_stats(records: Sequence[CountyYearRecord], splits: Dict[str, List[str]]) -> ZScoreStats:
    """Z-score statistics of the training counties' demographics."""
    train = set(splits["train"])
    matrix = np.stack([record.demographics for record in records if record.county_id in train])
    return zscore_fit(matrix)


# synthetic generation


def _is_power_of_two(value: int) -> bool:
    return value > 0 and value & (value - 1) == 0


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic dataset configuration.

    max_growth bounds the yearly density increase of a county; 0 freezes every county.
    """

    n_counties: int = 200
    years: Tuple[int, ...] = STUDY_YEARS
    height: int = 64
    width: int = 64
    f: int = 25
    m: int = TRAVEL_DIM
    noise: float = 0.01
    max_growth: float = 0.04
    n_acquisitions: int = 3
    max_buildings: int = 40
    max_roads: int = 6
    val_fraction: float = 0.15
    test_fraction: float = 0.15

    def __post_init__(self) -> None:
        object.__setattr__(self, "years", tuple(int(year) for year in self.years))
        for name in ("height", "width"):
            value = getattr(self, name)
            if value < 16 or not _is_power_of_two(value):
                raise ConfigError(f"synth.{name} must be a power of two >= 16, got {value}.")
        if self.n_counties < 1:
            raise ConfigError(f"synth.n_counties must be >= 1, got {self.n_counties}.")
        if not self.years or len(set(self.years)) != len(self.years) or list(self.years) != sorted(self.years):
            raise ConfigError(f"synth.years must be a non-empty increasing list, got {list(self.years)}.")
        invalid = [year for year in self.years if year == EXCLUDED_YEAR or not FIRST_YEAR <= year <= LAST_YEAR]
        if invalid:
            raise ConfigError(f"synth.years must be study years {FIRST_YEAR}-{LAST_YEAR} without 2020, got {invalid}.")
        if self.f < 1:
            raise ConfigError(f"synth.f must be >= 1, got {self.f}.")
        if self.m != TRAVEL_DIM:
            raise ConfigError(
                f"synth.m must be {TRAVEL_DIM} ({N_MODES} modes, {N_VEHICLES} vehicle classes, time and pattern), "
                f"got {self.m}."
            )
        if self.noise < 0 or self.max_growth < 0:
            raise ConfigError("synth.noise and synth.max_growth must be >= 0.")
        if self.n_acquisitions < 3:
            raise ConfigError(f"synth.n_acquisitions must be >= 3, got {self.n_acquisitions}.")


@dataclass(frozen=True)
class _GenerativeLaw:
    """Dataset-wide loadings linking the latent drivers (density, affluence, diversity) to observations."""

    scales: np.ndarray  # [f]
    demographic_loadings: np.ndarray  # [f, 3]
    mode_loadings: np.ndarray  # [9, 3]
    mode_bias: np.ndarray  # [9]
    vehicle_loadings: np.ndarray  # [4, 3]


@dataclass(frozen=True)
class _CountyLatent:
    density0: float
    growth: float
    orientation: float
    affluence: float
    diversity: float
    texture_phase: Tuple[float, float]
    road_offsets: np.ndarray  # [max_roads]
    road_jitter: np.ndarray  # [max_roads]
    buildings: np.ndarray  # [max_buildings, 4] rows y, x, h, w in unit coordinates

    def density(self, year_index: int) -> float:
        return float(np.clip(self.density0 + self.growth * year_index, 0.0, 1.0))


_VEGETATION = np.array([8000.0, 10500.0, 7500.0])
_SOIL = np.array([15000.0, 13000.0, 11000.0])
_ROAD = np.array([21000.0, 21000.0, 20500.0])
_CLOUD = 32000.0


def _generative_law(seed: int, f: int) -> _GenerativeLaw:
    rng = np.random.default_rng([seed, 1])
    loadings = np.column_stack(
        [rng.uniform(0.5, 1.5, f), rng.uniform(-0.25, 0.25, f), rng.uniform(-0.25, 0.25, f)]
    )
    scales = np.where(np.arange(f) < 4, 1e5, 1e4) * rng.uniform(0.5, 2.0, f)
    if f > 3:
        scales[3] = 40.0  # median age
    mode_loadings = np.column_stack(
        [rng.uniform(-2.0, 2.0, N_MODES), rng.uniform(-0.3, 0.3, N_MODES), rng.uniform(-0.3, 0.3, N_MODES)]
    )
    vehicle_loadings = np.column_stack(
        [np.array([1.5, 0.5, -0.5, -1.5]), rng.uniform(-0.3, 0.3, N_VEHICLES), rng.uniform(-0.3, 0.3, N_VEHICLES)]
    )
    mode_bias = np.array([2.5, 0.8, 0.2, -1.5, -1.5, -1.0, 0.0, -0.8, 0.3])
    return _GenerativeLaw(scales, loadings, mode_loadings, mode_bias, vehicle_loadings)


def _county_latent(seed: int, index: int, config: SynthConfig) -> _CountyLatent:
    rng = np.random.default_rng([seed, 2, index])
    buildings = np.column_stack(
        [
            rng.uniform(0.0, 0.92, config.max_buildings),
            rng.uniform(0.0, 0.92, config.max_buildings),
            rng.uniform(0.03, 0.08, config.max_buildings),
            rng.uniform(0.03, 0.08, config.max_buildings),
        ]
    )
    return _CountyLatent(
        density0=float(rng.uniform(0.1, 0.6)),
        growth=float(rng.uniform(0.0, config.max_growth)),
        orientation=float(rng.uniform(0.0, np.pi)),
        affluence=float(rng.uniform(0.0, 1.0)),
        diversity=float(rng.uniform(0.0, 1.0)),
        texture_phase=(float(rng.uniform()), float(rng.uniform())),
        road_offsets=rng.uniform(-0.4, 0.4, config.max_roads),
        road_jitter=rng.uniform(-0.15, 0.15, config.max_roads),
        buildings=buildings,
    )


def render_reflectance(latent: _CountyLatent, density: float, config: SynthConfig) -> np.ndarray:
    """Cloud-free H x W x 3 reflectance scene of a county at the given density."""
    yy, xx = np.mgrid[0 : config.height, 0 : config.width]
    yy = (yy + 0.5) / config.height
    xx = (xx + 0.5) / config.width
    texture = 1.0 + 0.05 * np.sin(2 * np.pi * (2 * xx + latent.texture_phase[0])) * np.cos(
        2 * np.pi * (3 * yy + latent.texture_phase[1])
    )
    ground = (1.0 - latent.diversity) * _VEGETATION + latent.diversity * _SOIL
    scene = texture[..., None] * ground

    half_width = 0.75 / min(config.height, config.width)
    for offset, jitter in list(zip(latent.road_offsets, latent.road_jitter))[: int(round(density * config.max_roads))]:
        angle = latent.orientation + jitter
        distance = np.abs((xx - 0.5) * np.cos(angle) + (yy - 0.5) * np.sin(angle) - offset)
        scene[distance < half_width] = _ROAD

    roof = (17000.0 + 11000.0 * latent.affluence) * np.array([1.0, 0.96, 0.92])
    for y0, x0, h, w in latent.buildings[: int(round(density * config.max_buildings))]:
        scene[(yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)] = roof
    return scene


def _acquisitions(scene: np.ndarray, rng: np.random.Generator, config: SynthConfig, year: int) -> RawImageStack:
    """Acquisitions of a scene where every pixel is disturbed in at most one acquisition."""
    images = [scene.copy() for _ in range(config.n_acquisitions)]
    disturbed = rng.random(scene.shape[:2]) < 0.2
    which = rng.integers(0, config.n_acquisitions, scene.shape[:2])
    cloud = rng.random(scene.shape[:2]) < 0.7
    for index, image in enumerate(images):
        mask = disturbed & (which == index)
        image[mask & cloud] = _CLOUD
        image[mask & ~cloud] = 0.4 * scene[mask & ~cloud]
    days = np.sort(rng.choice(365, size=config.n_acquisitions, replace=False))
    timestamps = [str(np.datetime64(f"{year}-01-01") + int(day)) for day in days]
    return RawImageStack(images=images, timestamps=timestamps)


def _largest_remainder(shares: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to total, proportional to shares."""
    raw = shares * total
    counts = np.floor(raw).astype(np.int64)
    remainder = total - int(counts.sum())
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:remainder]] += 1
    return counts


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max())
    return shifted / shifted.sum()


def travel_from_demographics(
    demographics: np.ndarray, law: _GenerativeLaw, noise: float, rng: np.random.Generator
) -> Tuple[np.ndarray, TravelCounts]:
    """Travel vector and counts as a fixed function of raw demographics plus small noise."""
    relative = demographics / law.scales - 1.0
    drivers = np.linalg.lstsq(law.demographic_loadings, relative, rcond=None)[0]
    mode_shares = _softmax(law.mode_loadings @ drivers + law.mode_bias + noise * rng.standard_normal(N_MODES))
    vehicle_shares = _softmax(law.vehicle_loadings @ drivers + noise * rng.standard_normal(N_VEHICLES))
    total_workers = int(round(45000.0 * (1.0 + 2.0 * max(drivers[0], 0.0))))
    total_households = int(round(0.8 * total_workers))
    modes = _largest_remainder(mode_shares, total_workers)
    vehicles = _largest_remainder(vehicle_shares, total_households)
    mode_shares = modes / total_workers
    travel_time = max(0.0, 0.35 + 0.25 * drivers[0] + noise * rng.standard_normal())
    pattern = 1.0 - mode_shares[-1]
    travel = np.concatenate([mode_shares, vehicles / total_households, [travel_time, pattern]])
    counts = TravelCounts(
        total_workers=total_workers,
        modes=[int(value) for value in modes],
        total_households=total_households,
        vehicles=[int(value) for value in vehicles],
    )
    return travel, counts


def generate_synthetic(seed: int, config: SynthConfig) -> DatasetManifest:
    """Generates a synthetic dataset that is a pure function of (seed, config).

    Each county has latent density, road orientation, growth rate, affluence and diversity.
    Density grows linearly over the study years; the rendered scene shows roads and
    buildings in numbers proportional to density, roof brightness following affluence and
    ground colour following diversity. Raw acquisition stacks with transient clouds and
    shadows pass through ``median_composite`` and ``gamma_scale``. Demographics are a
    loading of the latent drivers, travel behavior a fixed function of the demographics.

    Parameters
    ----------
    seed : int
        Generator seed.
    config : SynthConfig
        Dataset dimensions.
    Returns
    ----------
    : DatasetManifest
        In-memory manifest with train-split normalization statistics.
    """
    law = _generative_law(seed, max(config.f, len(DEMOGRAPHIC_FEATURES)))

    def _county_records(index: int) -> List[CountyYearRecord]:
        county_id = f"C{index:04d}"
        latent = _county_latent(seed, index, config)
        records = []
        for year_index, year in enumerate(config.years):
            rng = np.random.default_rng([seed, 3, index, year])
            density = latent.density(year_index)
            scene = render_reflectance(latent, density, config)
            image = gamma_scale(median_composite(_acquisitions(scene, rng, config, year)))
            drivers = np.array([density, latent.affluence, latent.diversity])
            relative = law.demographic_loadings @ drivers
            demographics = law.scales * (1.0 + relative) * (1.0 + config.noise * rng.standard_normal(law.scales.size))
            travel, counts = travel_from_demographics(demographics, law, config.noise, rng)
            records.append(
                CountyYearRecord(
                    county_id=county_id,
                    year=year,
                    image=image,
                    demographics=demographics[: config.f],
                    travel=travel,
                    counts=counts,
                )
            )
        return records

    records = [record for chunk in map_ordered(_county_records, range(config.n_counties)) for record in chunk]
    splits = split_counties(
        [f"C{index:04d}" for index in range(config.n_counties)], seed, config.val_fraction, config.test_fraction
    )
    manifest = DatasetManifest(
        records=records,
        stats=fit_train_stats(records, splits),
        splits=splits,
        feature_names=feature_names(config.f),
    )
    logger.info(
        "generated %d records (%d counties x %d years, %dx%d)",
        len(records),
        config.n_counties,
        len(config.years),
        config.height,
        config.width,
    )
    return manifest


# validation


@dataclass
class Violation:
    """One internal-coherence violation."""

    county_id: str
    year: int
    check: str
    detail: str


@dataclass
class ValidationReport:
    """Outcome of ``validate_manifest``."""

    violations: List[Violation] = field(default_factory=list)
    incomplete: Dict[str, List[int]] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        """True if neither violations nor incomplete counties were found."""
        return not self.violations and not self.incomplete


def validate_manifest(manifest: DatasetManifest, tolerance: float = 1e-6) -> ValidationReport:
    """Checks internal coherence and year completeness; violations are reported, never raised.

    Share vectors must sum to 1, mode and vehicle counts to their totals, every county must be
    present in every study year and the splits must be disjoint.
    """
    report = ValidationReport()
    for record in manifest.records:
        modes = record.travel[:N_MODES]
        vehicles = record.travel[N_MODES : N_MODES + N_VEHICLES]
        if record.travel.size != len(manifest.travel_names):
            report.violations.append(
                Violation(record.county_id, record.year, "travel_dim", f"{record.travel.size} values")
            )
            continue
        if abs(modes.sum() - 1.0) > tolerance:
            report.violations.append(
                Violation(record.county_id, record.year, "mode_shares", f"sum {modes.sum():.9f}")
            )
        if abs(vehicles.sum() - 1.0) > tolerance:
            report.violations.append(
                Violation(record.county_id, record.year, "vehicle_shares", f"sum {vehicles.sum():.9f}")
            )
        if record.counts is not None:
            if abs(sum(record.counts.modes) - record.counts.total_workers) > tolerance:
                report.violations.append(
                    Violation(
                        record.county_id,
                        record.year,
                        "mode_counts",
                        f"modes sum to {sum(record.counts.modes)}, total workers {record.counts.total_workers}",
                    )
                )
            if abs(sum(record.counts.vehicles) - record.counts.total_households) > tolerance:
                report.violations.append(
                    Violation(
                        record.county_id,
                        record.year,
                        "vehicle_counts",
                        f"vehicles sum to {sum(record.counts.vehicles)}, "
                        f"total households {record.counts.total_households}",
                    )
                )
    years = manifest.years
    for county_id in manifest.counties:
        missing = [year for year in years if not manifest.has_record(county_id, year)]
        if missing:
            report.incomplete[county_id] = missing
    assigned: Dict[str, str] = {}
    for split, county_ids in manifest.splits.items():
        for county_id in county_ids:
            if county_id in assigned:
                report.violations.append(
                    Violation(county_id, 0, "splits", f"in both {assigned[county_id]} and {split}")
                )
            assigned[county_id] = split
    logger.info(
        "validated %d records: %d violations, %d incomplete counties",
        len(manifest.records),
        len(report.violations),
        len(report.incomplete),
    )
    return report


def outlier_report(manifest: DatasetManifest) -> Dict[str, List[Tuple[str, int]]]:
    """County-years flagged by the IQR rule, per demographic feature."""
    matrix = np.stack([record.demographics for record in manifest.records])
    flagged: Dict[str, List[Tuple[str, int]]] = {}
    for column, name in enumerate(manifest.feature_names):
        mask = iqr_outliers(matrix[:, column])
        flagged[name] = [
            (record.county_id, record.year) for record, hit in zip(manifest.records, mask) if hit
        ]
    return flagged


# manifest IO


def _record_document(record: CountyYearRecord) -> Dict[str, Any]:
    return {
        "county_id": record.county_id,
        "year": record.year,
        "demographics": record.demographics.tolist(),
        "travel": record.travel.tolist(),
        "counts": asdict(record.counts) if record.counts is not None else None,
    }


def image_filename(county_id: str, year: int) -> str:
    """Relative path of a record image inside a manifest directory."""
    return join("images", f"{county_id}_{year}.dinn")


def write_manifest(manifest: DatasetManifest, directory: str, exist_ok: bool = False) -> str:
    """Writes record images as DINN files and the manifest JSON into directory.

    Returns
    ----------
    : str
        Absolute path of the manifest JSON.
    :raises FileExistsError: If exist_ok is False and the manifest exists.
    """
    manifest_path = abspath(join(directory, MANIFEST_FILENAME))
    if not exist_ok and isfile(manifest_path):
        raise FileExistsError(f"{manifest_path} already exists and exist_ok is False.")
    makedirs(dirname(manifest_path), exist_ok=True)
    documents = []
    for record in manifest.records:
        relative = image_filename(record.county_id, record.year)
        write_tensor(join(directory, relative), record.image, exist_ok=exist_ok)
        documents.append(dict(_record_document(record), image=relative))
    document = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "feature_names": manifest.feature_names,
        "travel_names": manifest.travel_names,
        "stats": manifest.stats.to_dict(),
        "splits": manifest.splits,
        "records": documents,
    }
    with open(manifest_path, "w", encoding="utf-8") as manifest_file:
        json.dump(document, manifest_file, indent=1, sort_keys=True)
    logger.info("wrote manifest with %d records to %s", len(manifest.records), manifest_path)
    return manifest_path


def read_manifest(path: str) -> DatasetManifest:
    """Reads a manifest JSON (or the directory holding it) and its images."""
    manifest_path = path if path.endswith(".json") else join(path, MANIFEST_FILENAME)
    if not isfile(manifest_path):
        raise DataError(f"{abspath(manifest_path)} does not exist.")
    with open(manifest_path, encoding="utf-8") as manifest_file:
        document = json.load(manifest_file)
    base = dirname(abspath(manifest_path))
    records = [
        CountyYearRecord(
            county_id=entry["county_id"],
            year=int(entry["year"]),
            image=read_tensor(join(base, entry["image"])),
            demographics=np.asarray(entry["demographics"]),
            travel=np.asarray(entry["travel"]),
            counts=TravelCounts(**entry["counts"]) if entry.get("counts") else None,
        )
        for entry in document["records"]
    ]
    return DatasetManifest(
        records=records,
        stats=ZScoreStats.from_dict(document["stats"]),
        splits={split: list(ids) for split, ids in document["splits"].items()},
        feature_names=list(document["feature_names"]),
        travel_names=list(document["travel_names"]),
    )


def manifest_hash(manifest: DatasetManifest) -> str:
    """SHA-256 over the canonical manifest JSON and every image payload."""
    digest = hashlib.sha256()
    document = {
        "feature_names": manifest.feature_names,
        "travel_names": manifest.travel_names,
        "stats": manifest.stats.to_dict(),
        "splits": manifest.splits,
        "records": [_record_document(record) for record in manifest.records],
    }
    digest.update(json.dumps(document, sort_keys=True, separators=(",", ":")).encode("utf-8"))
    for record in manifest.records:
        digest.update(np.ascontiguousarray(record.image, dtype="<f4").tobytes())
    return digest.hexdigest()


def export_png(image: np.ndarray, filepath: str, exist_ok: bool = False) -> None:
    """Writes an H x W x 3 image in [-1, 1] as 8-bit PNG (lossy, for inspection)."""
    filepath_abs = abspath(filepath)
    if not exist_ok and isfile(filepath_abs):
        raise FileExistsError(f"{filepath_abs} already exists and exist_ok is False.")
    makedirs(dirname(filepath_abs), exist_ok=True)
    pixels = np.round((np.clip(image, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)
    mpimg.imsave(filepath_abs, pixels)


# census tables


def aggregate_census_frame(frame: pd.DataFrame) -> pd.DataFrame:
    """Turns a census table with Table-I style columns into demographic features and travel targets.

    Sentinel codes become missing; rows missing a key variable are dropped. Age columns are
    merged into ten bands, mode and vehicle counts become shares, travel time is the mean
    commute in hours and the departure pattern the share of workers who left home.
    """
    cleaned = replace_sentinels(frame.copy())
    cleaned = cleaned.dropna(subset=list(KEY_VARIABLES))
    out = pd.DataFrame({"county_id": cleaned["county_id"].astype(str), "year": cleaned["year"].astype(int)})
    for name in DEMOGRAPHIC_FEATURES:
        if name in AGE_BANDS:
            out[name] = cleaned[list(AGE_BANDS[name])].sum(axis=1, min_count=len(AGE_BANDS[name]))
        else:
            out[name] = cleaned[name]
    workers = cleaned["transportation_total_workers"]
    households = cleaned["vehicles_available_total_households"]
    for name in MODE_FEATURES:
        out[name] = cleaned[name] / workers
    for name in VEHICLE_FEATURES:
        out[name] = cleaned[name] / households
    out["travel_time"] = cleaned["travel_time_total"] / workers / TRAVEL_TIME_SCALE
    out["departure_pattern"] = (cleaned["departure_time_total"] / workers).clip(0.0, 1.0)
    out["transportation_total_workers"] = workers
    out["vehicles_available_total_households"] = households
    out = out.dropna()
    dropped = len(frame) - len(out)
    if dropped:
        logger.info("excluded %d county-years with missing census values", dropped)
    return out.reset_index(drop=True)


def load_acs_table(
    csv_path: str,
    stack_loader: Callable[[str, int], np.ndarray],
    seed: int = 0,
    val_fraction: float = 0.15,
    test_fraction: float = 0.15,
) -> DatasetManifest:
    """Builds a manifest from a census CSV and raw image stacks.

    Parameters
    ----------
    csv_path : str
        CSV with county_id, year and Table-I style variable columns.
    stack_loader : Callable[[str, int], np.ndarray]
        Returns the raw reflectance acquisitions [k, H, W, 3] of a county-year.
    seed : int
        Split seed.
    Returns
    ----------
    : DatasetManifest
        Manifest restricted to counties present in every year.
    """
    table = aggregate_census_frame(pd.read_csv(csv_path))
    table = table[table["year"] != EXCLUDED_YEAR]
    years = sorted(table["year"].unique())
    complete = table.groupby("county_id")["year"].nunique()
    keep = sorted(complete[complete == len(years)].index)
    table = table[table["county_id"].isin(keep)].sort_values(["county_id", "year"])
    records = []
    for row in table.itertuples(index=False):
        row_dict = row._asdict()
        stack = stack_loader(row_dict["county_id"], int(row_dict["year"]))
        image = gamma_scale(median_composite(RawImageStack(images=list(stack))))
        modes = [int(round(row_dict[name] * row_dict["transportation_total_workers"])) for name in MODE_FEATURES]
        vehicles = [
            int(round(row_dict[name] * row_dict["vehicles_available_total_households"])) for name in VEHICLE_FEATURES
        ]
        records.append(
            CountyYearRecord(
                county_id=row_dict["county_id"],
                year=int(row_dict["year"]),
                image=image,
                demographics=np.array([row_dict[name] for name in DEMOGRAPHIC_FEATURES]),
                travel=np.array([row_dict[name] for name in TRAVEL_FEATURES]),
                counts=TravelCounts(
                    total_workers=int(row_dict["transportation_total_workers"]),
                    modes=modes,
                    total_households=int(row_dict["vehicles_available_total_households"]),
                    vehicles=vehicles,
                ),
            )
        )
    splits = split_counties(keep, seed, val_fraction, test_fraction)
    logger.info("loaded %d counties x %d years from %s", len(keep), len(years), abspath(csv_path))
    return DatasetManifest(
        records=records,
        stats=fit_train_stats(records, splits),
        splits=splits,
        feature_names=list(DEMOGRAPHIC_FEATURES),
    )


# model inputs


def to_nchw(images: np.ndarray) -> np.ndarray:
    """[N, H, W, C] -> [N, C, H, W]."""
    return np.ascontiguousarray(np.moveaxis(np.asarray(images), -1, 1))


def to_nhwc(images: np.ndarray) -> np.ndarray:
    """[N, C, H, W] -> [N, H, W, C]."""
    return np.ascontiguousarray(np.moveaxis(np.asarray(images), 1, -1))


@dataclass
class SequenceBatch:
    """Forecasting samples: n+1 past frames and demographics with next-horizon targets."""

    frames: np.ndarray  # [S, n+1, H, W, 3]
    demographics: np.ndarray  # [S, n+1, f], z-score space
    target_image: np.ndarray  # [S, H, W, 3]
    target_demographics: np.ndarray  # [S, f], z-score space
    target_travel: np.ndarray  # [S, m]
    county_ids: List[str]
    target_years: List[int]

    def __len__(self) -> int:
        return int(self.frames.shape[0])

    def subset(self, indices: Sequence[int]) -> "SequenceBatch":
        """Samples at the given indices."""
        index = np.asarray(indices, dtype=np.int64)
        return SequenceBatch(
            frames=self.frames[index],
            demographics=self.demographics[index],
            target_image=self.target_image[index],
            target_demographics=self.target_demographics[index],
            target_travel=self.target_travel[index],
            county_ids=[self.county_ids[i] for i in index],
            target_years=[self.target_years[i] for i in index],
        )


@dataclass
class ImageSamples:
    """Single-image samples for the demographic and travel predictors."""

    images: np.ndarray  # [S, H, W, 3]
    demographics: np.ndarray  # [S, f], z-score space
    travel: np.ndarray  # [S, m]
    county_ids: List[str]
    years: List[int]

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def subset(self, indices: Sequence[int]) -> "ImageSamples":
        """Samples at the given indices."""
        index = np.asarray(indices, dtype=np.int64)
        return ImageSamples(
            images=self.images[index],
            demographics=self.demographics[index],
            travel=self.travel[index],
            county_ids=[self.county_ids[i] for i in index],
            years=[self.years[i] for i in index],
        )


def make_sequences(
    manifest: DatasetManifest,
    split: str = "train",
    n_history: int = 3,
    horizon: int = 1,
    temporal_normalization: bool = False,
) -> SequenceBatch:
    """Sliding windows of n_history consecutive study years with the target horizon years later.

    :raises SequenceError: if n_history < 1 or horizon < 1.
    :raises DataError: if no county of the split has enough years.
    """
    if n_history < 1 or horizon < 1:
        raise SequenceError(f"Need n_history >= 1 and horizon >= 1, got {n_history} and {horizon}.")
    years = manifest.years
    frames, demographics, targets, target_demographics, target_travel = [], [], [], [], []
    county_ids: List[str] = []
    target_years: List[int] = []
    for county_id in manifest.split_of(split):
        for start in range(len(years) - n_history - horizon + 1):
            window = [manifest.record(county_id, year) for year in years[start : start + n_history]]
            target = manifest.record(county_id, years[start + n_history - 1 + horizon])
            frames.append(np.stack([record.image for record in window]))
            demographics.append(np.stack([manifest.normalized_demographics(record) for record in window]))
            targets.append(target.image)
            target_demographics.append(manifest.normalized_demographics(target))
            target_travel.append(target.travel)
            county_ids.append(county_id)
            target_years.append(target.year)
    if not frames:
        raise DataError(
            f"Split {split} has no window of {n_history} years followed by a target {horizon} year(s) later."
        )
    demographic_array = np.stack(demographics)
    if temporal_normalization:
        demographic_array = temporal_zscore(demographic_array)
    return SequenceBatch(
        frames=np.stack(frames),
        demographics=demographic_array,
        target_image=np.stack(targets),
        target_demographics=np.stack(target_demographics),
        target_travel=np.stack(target_travel),
        county_ids=county_ids,
        target_years=target_years,
    )


def make_image_samples(manifest: DatasetManifest, split: str = "train") -> ImageSamples:
    """All county-years of a split as single-image samples."""
    wanted = set(manifest.split_of(split))
    records = [record for record in manifest.records if record.county_id in wanted]
    if not records:
        raise DataError(f"Split {split} holds no records.")
    return ImageSamples(
        images=np.stack([record.image for record in records]),
        demographics=np.stack([manifest.normalized_demographics(record) for record in records]),
        travel=np.stack([record.travel for record in records]),
        county_ids=[record.county_id for record in records],
        years=[record.year for record in records],
    )

