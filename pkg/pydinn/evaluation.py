"""Module implementing forecasting evaluation.

Change heatmaps and frequency maps, multi-year horizon errors with autoregressive rollout,
normality analysis of the errors, split metrics and the ablation harness.
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from os import makedirs
from os.path import abspath, dirname, isfile, join
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from matplotlib import image as mpimg
from matplotlib.colors import LinearSegmentedColormap
from matplotlib.figure import Figure

from pydinn.data import DatasetManifest, make_image_samples, make_sequences, manifest_hash
from pydinn.demographic import FrozenDemographicPredictor, predict_demographics
from pydinn.errors import DataError, DegenerateError, DinnError, DomainError, InsufficientDataError, ShapeError
from pydinn.losses import (
    LossWeights,
    SsimParams,
    canonical_correlation,
    demo_loss,
    mse_value,
    overall_r_squared,
    psnr,
    ssim_value,
)
from pydinn.satellite import EncoderKind, SatellitePredictor, SatPredictorConfig, predict_image
from pydinn.tensorfile import write_tensor
from pydinn.training import TrainingConfig, train_sat
from pydinn.travel import FrozenTravelPredictor, predict_travel
from pydinn.workers import map_ordered

logger = logging.getLogger(__name__)

HEATMAP_COLORMAP = LinearSegmentedColormap.from_list("blue_yellow_red", ["#2c3fb8", "#ffe945", "#d7191c"])
INDEX_FILENAME = "heatmap_index.json"
QQ_MIN_SAMPLES = 100
QQ_MAX_SAMPLES = 100_000
FLOAT_FORMAT = "%.10g"


class HeatmapKind(Enum):
    """HeatmapKind enum."""

    target = "target"  # Base year against the observed comparison year.
    forecast = "forecast"  # Base year against the forecast of the comparison year.


@dataclass
class ChangeHeatmap:
    """Per-pixel change magnitude between two images of one county."""

    values: np.ndarray  # [H, W], >= 0
    county_id: str = ""
    base_year: int = 0
    cmp_year: int = 0
    kind: HeatmapKind = HeatmapKind.target


@dataclass
class FrequencyMap:
    """Per-pixel fraction of comparison years whose heatmap exceeds tau."""

    values: np.ndarray  # [H, W], entries k / n
    tau: float
    n: int


def change_heatmap(base: np.ndarray, cmp: np.ndarray, **metadata: Any) -> ChangeHeatmap:
    """log(1 + sum over RGB of |cmp - base|) per pixel.

    Parameters
    ----------
    base, cmp : np.ndarray
        H x W x 3 images in [-1, 1].
    metadata
        county_id, base_year, cmp_year and kind of the heatmap.
    :raises ShapeError: if the dims differ.
    """
    first, second = np.asarray(base, dtype=np.float64), np.asarray(cmp, dtype=np.float64)
    if first.shape != second.shape or first.ndim != 3:
        raise ShapeError(
            f"change_heatmap needs two H x W x 3 images, got {list(first.shape)} and {list(second.shape)}."
        )
    return ChangeHeatmap(values=np.log1p(np.abs(second - first).sum(axis=-1)), **metadata)


def frequency_map(heatmaps: Sequence[Union[ChangeHeatmap, np.ndarray]], tau: Optional[float] = None) -> FrequencyMap:
    """Fraction of heatmaps above tau per pixel.

    Parameters
    ----------
    heatmaps : Sequence[Union[ChangeHeatmap, np.ndarray]]
        n >= 1 heatmaps of equal dims.
    tau : Optional[float]
        Change threshold; defaults to the 90th percentile of all heatmap values.
    :raises ShapeError: if the list is empty or dims differ.
    """
    stack = [np.asarray(heatmap.values if isinstance(heatmap, ChangeHeatmap) else heatmap) for heatmap in heatmaps]
    if not stack:
        raise ShapeError("frequency_map needs at least one heatmap.")
    if len({values.shape for values in stack}) != 1:
        raise ShapeError(f"frequency_map needs heatmaps of equal dims, got {sorted({v.shape for v in stack})}.")
    values = np.stack(stack)
    threshold = float(np.percentile(values, 90)) if tau is None else float(tau)
    counts = (values > threshold).sum(axis=0)
    return FrequencyMap(values=counts / len(stack), tau=threshold, n=len(stack))


# normal distribution

# Rational approximation coefficients of the normal quantile (Wichura, algorithm AS241).
_CENTRAL_NUM = (
    3.387132872796366608, 133.14166789178437745, 1971.5909503065514427, 13731.693765509461125,
    45921.953931549871457, 67265.770927008700853, 33430.575583588128105, 2509.0809287301226727,
)
_CENTRAL_DEN = (
    1.0, 42.313330701600911252, 687.1870074920579083, 5394.1960214247511077,
    21213.794301586595867, 39307.89580009271061, 28729.085735721942674, 5226.495278852854,
)
_NEAR_NUM = (
    1.42343711074968357734, 4.6303378461565452959, 5.7694972214606914055, 3.64784832476320460504,
    1.27045825245236838258, 0.24178072517745061177, 0.0227238449892691845833, 7.7454501427834140764e-4,
)
_NEAR_DEN = (
    1.0, 2.05319162663775882187, 1.6763848301838038494, 0.68976733498510000455,
    0.14810397642748007459, 0.0151986665636164571966, 5.475938084995344946e-4, 1.05075007164441684324e-9,
)
_TAIL_NUM = (
    6.6579046435011037772, 5.4637849111641143699, 1.7848265399172913358, 0.29656057182850489123,
    0.026532189526576123093, 0.0012426609473880784386, 2.71155556874348757815e-5, 2.01033439929228813265e-7,
)
_TAIL_DEN = (
    1.0, 0.59983220655588793769, 0.13692988092273580531, 0.0148753612908506148525,
    7.868691311456132591e-4, 1.8463183175100546818e-5, 1.4215117583164458887e-7, 2.04426310338993978564e-15,
)


def _polynomial(coefficients: Sequence[float], x: float) -> float:
    result = 0.0
    for coefficient in reversed(coefficients):
        result = result * x + coefficient
    return result


def inverse_phi(p: float) -> float:
    """Standard normal quantile in double precision.

    :raises DomainError: if p is not strictly between 0 and 1.
    """
    if not 0.0 < p < 1.0:
        raise DomainError(f"inverse_phi is defined on (0, 1), got {p}.")
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        return q * _polynomial(_CENTRAL_NUM, r) / _polynomial(_CENTRAL_DEN, r)
    r = math.sqrt(-math.log(p if q < 0 else 1.0 - p))
    if r <= 5.0:
        r -= 1.6
        value = _polynomial(_NEAR_NUM, r) / _polynomial(_NEAR_DEN, r)
    else:
        r -= 5.0
        value = _polynomial(_TAIL_NUM, r) / _polynomial(_TAIL_DEN, r)
    return -value if q < 0 else value


def normal_cdf(x: float) -> float:
    """Standard normal distribution function."""
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


@dataclass
class QQReport:
    """Error quantiles against normal quantiles for one horizon."""

    horizon: int
    sample_quantiles: np.ndarray
    theoretical_quantiles: np.ndarray
    r: float


def qq_analysis(errors: np.ndarray, horizon: int = 1, max_samples: int = QQ_MAX_SAMPLES) -> QQReport:
    """Pairs sorted standardized errors with normal quantiles at (i - 0.5) / n.

    Samples beyond max_samples are thinned by a fixed stride.

    :raises InsufficientDataError: for fewer than 100 errors.
    :raises DegenerateError: if the errors are constant.
    """
    sample = np.asarray(errors, dtype=np.float64).reshape(-1)
    if sample.size < QQ_MIN_SAMPLES:
        raise InsufficientDataError(f"qq_analysis needs at least {QQ_MIN_SAMPLES} errors, got {sample.size}.")
    if sample.size > max_samples:
        stride = int(math.ceil(sample.size / max_samples))
        sample = sample[::stride]
    sd = sample.std()
    if sd == 0.0:
        raise DegenerateError("qq_analysis is undefined for constant errors.")
    ordered = np.sort((sample - sample.mean()) / sd)
    n = ordered.size
    theoretical = np.array([inverse_phi((i - 0.5) / n) for i in range(1, n + 1)])
    r = float(np.clip(np.corrcoef(ordered, theoretical)[0, 1], -1.0, 1.0))
    return QQReport(horizon=horizon, sample_quantiles=ordered, theoretical_quantiles=theoretical, r=r)


def _check_new_file(filepath: str, exist_ok: bool) -> str:
    filepath_abs = abspath(filepath)
    if not exist_ok and isfile(filepath_abs):
        raise FileExistsError(f"{filepath_abs} already exists and exist_ok is False.")
    makedirs(dirname(filepath_abs), exist_ok=True)
    return filepath_abs


def qq_plot(report: QQReport, filepath: str, exist_ok: bool = False) -> None:
    """Writes the QQ scatter with its reference line as PNG."""
    filepath_abs = _check_new_file(filepath, exist_ok)
    figure = Figure(figsize=(4, 4), dpi=100)
    axes = figure.add_subplot()
    axes.scatter(report.theoretical_quantiles, report.sample_quantiles, s=2)
    bound = float(np.max(np.abs(report.theoretical_quantiles)))
    axes.plot([-bound, bound], [-bound, bound], color="black", linewidth=0.8)
    axes.set_xlabel("normal quantiles")
    axes.set_ylabel("standardized error quantiles")
    axes.set_title(f"{report.horizon}-year horizon, r = {report.r:.4f}")
    figure.savefig(filepath_abs)


# forecasting


class Forecaster(Protocol):
    """One-step forecaster of images and demographics."""

    def predict_next(self, frames: np.ndarray, demographics: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Next images [N, H, W, 3] and demographics [N, f] from [N, n+1, ...] sequences."""


class PersistenceForecaster:
    """Predicts that nothing changes: the newest frame and demographics are repeated."""

    def predict_next(self, frames: np.ndarray, demographics: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return np.array(frames[:, -1]), np.array(demographics[:, -1])


class DinnForecaster:
    """DinnForecaster class.

    Satellite predictor for the image, frozen demographic predictor applied to the predicted
    image for the demographics and, if present, frozen travel predictor for travel behavior.
    """

    def __init__(
        self,
        sat: SatellitePredictor,
        demo: FrozenDemographicPredictor,
        travel: Optional[FrozenTravelPredictor] = None,
    ) -> None:
        self.sat = sat.eval()
        self.demo = demo
        self.travel = travel

    def predict_next(self, frames: np.ndarray, demographics: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        images = predict_image(self.sat, frames, demographics)
        return images, predict_demographics(self.demo, images)

    def predict_travel(self, images: np.ndarray) -> np.ndarray:
        """Travel vectors of images; needs the travel predictor."""
        if self.travel is None:
            raise DataError("This forecaster has no travel predictor.")
        return predict_travel(self.travel, images)


def rollout(
    forecaster: Forecaster, frames: np.ndarray, demographics: np.ndarray, horizon: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Feeds each prediction back as the newest frame until horizon years ahead."""
    for _ in range(horizon):
        images, demos = forecaster.predict_next(frames, demographics)
        frames = np.concatenate([frames[:, 1:], images[:, None]], axis=1)
        demographics = np.concatenate([demographics[:, 1:], demos[:, None]], axis=1)
    return images, demos


def horizon_errors(
    forecaster: Forecaster, manifest: DatasetManifest, horizon: int, split: str = "test", n_history: int = 3
) -> np.ndarray:
    """Flat signed per-pixel errors of horizon-year-ahead forecasts over a split.

    :raises DataError: if no county has the target year for this horizon.
    """
    batch = make_sequences(manifest, split, n_history=n_history, horizon=horizon)
    images, _ = rollout(forecaster, batch.frames, batch.demographics, horizon)
    return (images.astype(np.float64) - batch.target_image).reshape(-1)


def horizon_table(
    forecaster: Forecaster,
    manifest: DatasetManifest,
    horizons: Sequence[int] = (1, 2, 3),
    split: str = "test",
    n_history: int = 3,
    qq_dir: Optional[str] = None,
    max_samples: int = QQ_MAX_SAMPLES,
) -> pd.DataFrame:
    """One row per horizon: h, r, error mean and sd; QQ plots go to qq_dir when given.

    The errors of each horizon are thinned to at most max_samples before the QQ analysis.
    """
    rows = []
    for horizon in horizons:
        errors = horizon_errors(forecaster, manifest, horizon, split, n_history)
        report = qq_analysis(errors, horizon, max_samples)
        if qq_dir is not None:
            qq_plot(report, join(qq_dir, f"qq_h{horizon}.png"), exist_ok=True)
        rows.append({"h": horizon, "r": report.r, "error_mean": float(errors.mean()), "error_sd": float(errors.std())})
        logger.info("horizon %d: r = %.4f over %d errors", horizon, report.r, errors.size)
    return pd.DataFrame(rows, columns=["h", "r", "error_mean", "error_sd"])


# metrics


def image_metrics(
    predicted: np.ndarray, target: np.ndarray, params: Optional[SsimParams] = None
) -> Dict[str, float]:
    """Mean per-sample MSE, SSIM and PSNR of [N, H, W, 3] images."""
    params = params or SsimParams()
    mses, ssims, psnrs = [], [], []
    for image, truth in zip(predicted, target):
        mses.append(mse_value(image, truth))
        ssims.append(ssim_value(np.moveaxis(image, -1, 0), np.moveaxis(truth, -1, 0), params))
        psnrs.append(psnr(image, truth, params.data_range))
    return {"MSE": float(np.mean(mses)), "SSIM": float(np.mean(ssims)), "PSNR": float(np.mean(psnrs))}


def split_metrics(
    manifest: DatasetManifest,
    split: str,
    forecaster: Optional[DinnForecaster] = None,
    demo: Optional[FrozenDemographicPredictor] = None,
    n_history: int = 3,
) -> Dict[str, float]:
    """Image, demographic and travel metrics of a split; absent models skip their metrics."""
    metrics: Dict[str, float] = {}
    samples = make_image_samples(manifest, split)
    metrics["demo_travel_correlation"] = canonical_correlation(samples.demographics, samples.travel)
    demo = demo or (forecaster.demo if forecaster is not None else None)
    if demo is not None:
        estimated = predict_demographics(demo, samples.images)
        metrics["demo_mse"] = mse_value(estimated, samples.demographics)
        metrics["demo_r2"] = overall_r_squared(estimated, samples.demographics)
    if forecaster is not None and forecaster.travel is not None:
        travel = forecaster.predict_travel(samples.images)
        metrics["travel_mse"] = mse_value(travel, samples.travel)
        metrics["travel_r2"] = overall_r_squared(travel, samples.travel)
    if forecaster is not None:
        batch = make_sequences(manifest, split, n_history=n_history)
        images, demos = forecaster.predict_next(batch.frames, batch.demographics)
        for name, value in image_metrics(images, batch.target_image).items():
            metrics[f"image_{name.lower()}"] = value
        metrics["demo_loss"] = demo_loss(demos, batch.target_demographics)
    return metrics


def metrics_frame(metrics_by_split: Dict[str, Dict[str, float]]) -> pd.DataFrame:
    """Long table with columns metric, split, value."""
    rows = [
        {"metric": metric, "split": split, "value": value}
        for split, metrics in metrics_by_split.items()
        for metric, value in metrics.items()
    ]
    return pd.DataFrame(rows, columns=["metric", "split", "value"])


def write_table(frame: pd.DataFrame, filepath: str, exist_ok: bool = False) -> None:
    """Writes a result table as CSV with a fixed float format."""
    filepath_abs = _check_new_file(filepath, exist_ok)
    frame.to_csv(filepath_abs, index=False, float_format=FLOAT_FORMAT)
    logger.info("wrote %s", filepath_abs)


def write_json(document: Any, filepath: str, exist_ok: bool = False) -> None:
    """Writes a JSON summary with sorted keys."""
    filepath_abs = _check_new_file(filepath, exist_ok)
    with open(filepath_abs, "w", encoding="utf-8") as json_file:
        json.dump(document, json_file, indent=2, sort_keys=True)
    logger.info("wrote %s", filepath_abs)


# heatmap artifacts


def heatmap_png(values: np.ndarray, filepath: str, exist_ok: bool = False) -> None:
    """Renders a map through the blue-yellow-red ramp, normalized to its own range."""
    filepath_abs = _check_new_file(filepath, exist_ok)
    low, high = float(values.min()), float(values.max())
    mpimg.imsave(filepath_abs, values, cmap=HEATMAP_COLORMAP, vmin=low, vmax=high if high > low else low + 1.0)


@dataclass
class HeatmapRun:
    """Heatmaps and frequency maps of one county."""

    heatmaps: List[ChangeHeatmap] = field(default_factory=list)
    frequency: Dict[HeatmapKind, FrequencyMap] = field(default_factory=dict)


def county_heatmaps(
    manifest: DatasetManifest,
    county_id: str,
    base_year: int,
    kinds: Sequence[HeatmapKind],
    forecaster: Optional[Forecaster] = None,
    n_history: int = 3,
    tau: Optional[float] = None,
) -> HeatmapRun:
    """Heatmaps from base_year to every later year, plus one frequency map per kind.

    Forecast heatmaps compare against the one-step forecast of the comparison year and need
    n_history observed years before it.
    """
    years = manifest.years
    if base_year not in years:
        raise DataError(f"Base year {base_year} is not in the manifest, possible values are: {years}")
    base = manifest.record(county_id, base_year).image
    run = HeatmapRun()
    for kind in (HeatmapKind(kind) for kind in kinds):
        maps = []
        for position, year in enumerate(years):
            if year <= base_year:
                continue
            if kind is HeatmapKind.target:
                comparison = manifest.record(county_id, year).image
            else:
                if forecaster is None:
                    raise DataError("Forecast heatmaps need a forecaster.")
                if position < n_history:
                    continue
                window = [manifest.record(county_id, past) for past in years[position - n_history : position]]
                frames = np.stack([record.image for record in window])[None]
                demos = np.stack([manifest.normalized_demographics(record) for record in window])[None]
                comparison = forecaster.predict_next(frames, demos)[0][0]
            maps.append(
                change_heatmap(base, comparison, county_id=county_id, base_year=base_year, cmp_year=year, kind=kind)
            )
        run.heatmaps.extend(maps)
        if maps:
            run.frequency[kind] = frequency_map(maps, tau)
    return run


def export_heatmaps(
    manifest: DatasetManifest,
    out_dir: str,
    county_ids: Sequence[str],
    kinds: Sequence[HeatmapKind] = (HeatmapKind.target,),
    base_year: Optional[int] = None,
    forecaster: Optional[Forecaster] = None,
    n_history: int = 3,
    tau: Optional[float] = None,
    exist_ok: bool = False,
) -> List[Dict[str, Any]]:
    """Writes PNG and raw DINN heatmaps named {county}_{base}_{cmp}_{kind} plus an index JSON.

    Returns
    ----------
    : List[Dict[str, Any]]
        Index entries with county, years, kind, png and raw paths relative to out_dir.
    """
    base = manifest.years[0] if base_year is None else base_year
    runs = map_ordered(
        lambda county_id: county_heatmaps(manifest, county_id, base, kinds, forecaster, n_history, tau), county_ids
    )
    index = []
    for run in runs:
        for heatmap in run.heatmaps:
            stem = f"{heatmap.county_id}_{heatmap.base_year}_{heatmap.cmp_year}_{heatmap.kind.value}"
            heatmap_png(heatmap.values, join(out_dir, stem + ".png"), exist_ok)
            write_tensor(join(out_dir, stem + ".dinn"), heatmap.values, exist_ok=exist_ok)
            index.append(
                {
                    "county": heatmap.county_id,
                    "base_year": heatmap.base_year,
                    "cmp_year": heatmap.cmp_year,
                    "kind": heatmap.kind.value,
                    "png": stem + ".png",
                    "raw": stem + ".dinn",
                }
            )
        for kind, frequency in run.frequency.items():
            county_id = run.heatmaps[0].county_id
            stem = f"{county_id}_{base}_frequency_{kind.value}"
            heatmap_png(frequency.values, join(out_dir, stem + ".png"), exist_ok)
            write_tensor(join(out_dir, stem + ".dinn"), frequency.values, exist_ok=exist_ok)
            index.append(
                {
                    "county": county_id,
                    "base_year": base,
                    "cmp_year": None,
                    "kind": f"frequency_{kind.value}",
                    "tau": frequency.tau,
                    "png": stem + ".png",
                    "raw": stem + ".dinn",
                }
            )
    write_json(index, join(out_dir, INDEX_FILENAME), exist_ok)
    logger.info("exported %d heatmap artifacts for %d counties to %s", len(index), len(county_ids), abspath(out_dir))
    return index


# ablation


@dataclass(frozen=True)
class AblationVariant:
    """One row of the ablation study."""

    id: int
    name: str
    encoder: EncoderKind
    gated_skip: bool
    demo_predictor: bool


ABLATION_VARIANTS: Tuple[AblationVariant, ...] = (
    AblationVariant(1, "baseline", EncoderKind.conv2d, gated_skip=False, demo_predictor=False),
    AblationVariant(2, "conv2d_gated_demo", EncoderKind.conv2d, gated_skip=True, demo_predictor=True),
    AblationVariant(3, "dense_demo", EncoderKind.dense, gated_skip=False, demo_predictor=True),
    AblationVariant(4, "dense_gated", EncoderKind.dense, gated_skip=True, demo_predictor=False),
    AblationVariant(5, "full", EncoderKind.dense, gated_skip=True, demo_predictor=True),
)

ABLATION_COLUMNS = ["variant", "MSE", "SSIM", "PSNR", "status"]


def variant_configs(
    variant: AblationVariant, sat_config: SatPredictorConfig, training: TrainingConfig
) -> Tuple[SatPredictorConfig, TrainingConfig]:
    """Model and training configuration of a variant; only the toggled components differ."""
    return (
        replace(sat_config, encoder=variant.encoder, gated_skip=variant.gated_skip),
        replace(training, demo_predictor=variant.demo_predictor),
    )


def run_ablation(
    manifest: DatasetManifest,
    sat_config: SatPredictorConfig,
    training: TrainingConfig,
    weights: LossWeights,
    demo: Optional[FrozenDemographicPredictor],
    variants: Sequence[AblationVariant] = ABLATION_VARIANTS,
    travel: Optional[FrozenTravelPredictor] = None,
    seed: int = 0,
    split: str = "test",
) -> pd.DataFrame:
    """Trains and scores every variant with the same data, seed and budget.

    A failing variant yields a row with status "failed: ..." and NaN metrics; the run goes on.

    :raises DataError: if the dataset changes between variants.
    """
    dataset_hash = manifest_hash(manifest)
    train_batch = make_sequences(manifest, "train", n_history=sat_config.n_history)
    eval_batch = make_sequences(manifest, split, n_history=sat_config.n_history)
    rows = []
    for variant in variants:
        model_config, variant_training = variant_configs(variant, sat_config, training)
        try:
            result = train_sat(
                train_batch,
                model_config,
                variant_training,
                weights,
                demo=demo if variant.demo_predictor else None,
                travel=travel,
                seed=seed,
            )
            model = result.model
            predicted = predict_image(model, eval_batch.frames, eval_batch.demographics)  # type: ignore[arg-type]
            rows.append(dict(image_metrics(predicted, eval_batch.target_image), variant=variant.id, status="ok"))
            logger.info("ablation variant %d (%s): MSE %.6g", variant.id, variant.name, rows[-1]["MSE"])
        except DinnError as err:
            failed = dict.fromkeys(("MSE", "SSIM", "PSNR"), math.nan)
            rows.append(dict(failed, variant=variant.id, status=f"failed: {err}"))
            logger.warning("ablation variant %d (%s) failed: %s", variant.id, variant.name, err)
        if manifest_hash(manifest) != dataset_hash:
            raise DataError(f"The dataset changed while training ablation variant {variant.id}.")
    return pd.DataFrame(rows, columns=ABLATION_COLUMNS)
