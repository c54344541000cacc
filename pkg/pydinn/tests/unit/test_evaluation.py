"""Module implementing unit tests for the forecasting evaluation"""

import json
import math
import re
import tempfile
from os.path import isfile, join
from typing import Any
from unittest import mock

import numpy as np
import pytest

from pydinn.data import SynthConfig, generate_synthetic, make_sequences
from pydinn.demographic import DemographicPredictor, DemoPredictorConfig, freeze
from pydinn.errors import DataError, DegenerateError, DomainError, InsufficientDataError, ShapeError
from pydinn.evaluation import (
    ABLATION_VARIANTS,
    INDEX_FILENAME,
    DinnForecaster,
    HeatmapKind,
    PersistenceForecaster,
    QQReport,
    change_heatmap,
    county_heatmaps,
    export_heatmaps,
    frequency_map,
    horizon_errors,
    horizon_table,
    image_metrics,
    inverse_phi,
    metrics_frame,
    normal_cdf,
    qq_analysis,
    qq_plot,
    rollout,
    run_ablation,
    split_metrics,
    variant_configs,
)
from pydinn.losses import LossWeights
from pydinn.satellite import EncoderKind, SatellitePredictor, SatPredictorConfig
from pydinn.training import TrainingConfig
from pydinn.travel import TravelPredictor, TravelPredictorConfig
from pydinn.travel import freeze as freeze_travel

DATA = SynthConfig(n_counties=6, years=(2012, 2013, 2014, 2015), height=16, width=16, f=5)
DEMO = DemoPredictorConfig(height=16, width=16, f=5, channels=(4, 8))
TRAVEL = TravelPredictorConfig(in_channels=8, spatial_channels=(4,), global_dims=(8, 4))
SAT = SatPredictorConfig(
    height=16,
    width=16,
    n_history=2,
    f=5,
    depth=2,
    base_channels=4,
    max_channels=8,
    growth_rate=2,
    dense_layers=1,
    demo_hidden=(8,),
    demo_embed_dim=8,
    dropout=0.0,
)


def _forecaster(with_travel: bool = True) -> DinnForecaster:
    demo = freeze(DemographicPredictor(DEMO, seed=0))
    travel = freeze_travel(TravelPredictor(TRAVEL, demo, seed=0)) if with_travel else None
    return DinnForecaster(SatellitePredictor(SAT, seed=0), demo, travel)


def test_change_heatmap() -> None:
    """A pixel changing by 1 in every channel scores log(4), unchanged pixels 0"""
    base = np.zeros((2, 2, 3))
    cmp = base.copy()
    cmp[0, 0] = 1.0
    heatmap = change_heatmap(base, cmp, county_id="C0001", base_year=2012, cmp_year=2013)
    np.testing.assert_allclose(heatmap.values, [[math.log(4.0), 0.0], [0.0, 0.0]])
    assert heatmap.kind is HeatmapKind.target
    assert np.all(change_heatmap(cmp, base).values == heatmap.values)
    with pytest.raises(ShapeError, match="change_heatmap needs two H x W x 3 images"):
        change_heatmap(base, np.zeros((2, 3, 3)))


def test_frequency_map() -> None:
    """A pixel above tau in 3 of 10 heatmaps has frequency 0.3"""
    heatmaps = [np.zeros((2, 2)) for _ in range(10)]
    for heatmap in heatmaps[:3]:
        heatmap[1, 0] = 1.0
    frequency = frequency_map(heatmaps, tau=0.5)
    np.testing.assert_allclose(frequency.values, [[0.0, 0.0], [0.3, 0.0]])
    assert frequency.n == 10
    assert frequency_map(heatmaps).tau == pytest.approx(float(np.percentile(np.stack(heatmaps), 90)))
    with pytest.raises(ShapeError, match="at least one heatmap"):
        frequency_map([])
    with pytest.raises(ShapeError, match="equal dims"):
        frequency_map([np.zeros((2, 2)), np.zeros((3, 3))])


@pytest.mark.parametrize(
    "p, expected",
    [
        pytest.param(0.5, 0.0, id="median"),
        pytest.param(0.975, 1.959963984540054, id="central"),
        pytest.param(0.025, -1.959963984540054, id="central_lower"),
        pytest.param(1e-3, -3.090232306167813, id="near_tail"),
        pytest.param(1e-20, -9.262340089798408, id="far_tail"),
    ],
)
def test_inverse_phi_values(p: float, expected: float) -> None:
    """Unit tests for inverse_phi against tabulated normal quantiles"""
    assert inverse_phi(p) == pytest.approx(expected, rel=1e-9, abs=1e-15)


def test_inverse_phi_round_trip() -> None:
    """normal_cdf inverts inverse_phi on (0, 1)"""
    for p in np.concatenate([np.geomspace(1e-10, 0.4, 40), np.linspace(0.01, 0.99, 99), [0.999999]]):
        assert normal_cdf(inverse_phi(float(p))) == pytest.approx(p, rel=1e-7)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
def test_inverse_phi_domain(p: float) -> None:
    """Unit tests for inverse_phi outside (0, 1)"""
    with pytest.raises(DomainError, match=re.escape(f"inverse_phi is defined on (0, 1), got {p}.")):
        inverse_phi(p)


def test_qq_analysis() -> None:
    """Normal errors lie on the reference line; affine maps do not change r"""
    errors = np.random.default_rng(0).standard_normal(5000)
    report = qq_analysis(errors, horizon=2)
    assert report.horizon == 2
    assert report.r > 0.99
    assert report.sample_quantiles.size == report.theoretical_quantiles.size == 5000
    np.testing.assert_allclose(report.theoretical_quantiles, -report.theoretical_quantiles[::-1], atol=1e-9)
    assert qq_analysis(3.0 * errors + 2.0).r == pytest.approx(report.r, rel=1e-12)
    skewed = np.random.default_rng(1).exponential(size=5000)
    assert qq_analysis(skewed).r < report.r
    assert qq_analysis(errors, max_samples=1000).sample_quantiles.size == 1000


def test_qq_analysis_errors() -> None:
    """Unit tests for qq_analysis with too few or constant errors"""
    with pytest.raises(InsufficientDataError, match="at least 100 errors, got 99"):
        qq_analysis(np.arange(99.0))
    with pytest.raises(DegenerateError):
        qq_analysis(np.ones(200))


def test_qq_plot() -> None:
    """Unit test for the QQ plot PNG"""
    report = qq_analysis(np.random.default_rng(2).standard_normal(200))
    with tempfile.TemporaryDirectory() as tmpdir:
        filepath = join(tmpdir, "plots", "qq.png")
        qq_plot(report, filepath)
        assert isfile(filepath)
        with pytest.raises(FileExistsError):
            qq_plot(report, filepath)


def test_persistence_rollout() -> None:
    """Rolled-out persistence keeps returning the newest observation"""
    rng = np.random.default_rng(3)
    frames, demographics = rng.uniform(-1, 1, (2, 3, 4, 4, 3)), rng.standard_normal((2, 3, 5))
    images, demos = rollout(PersistenceForecaster(), frames, demographics, horizon=3)
    np.testing.assert_array_equal(images, frames[:, -1])
    np.testing.assert_array_equal(demos, demographics[:, -1])


def test_horizon_errors_and_table() -> None:
    """Persistence errors are the change between the newest frame and the target"""
    manifest = generate_synthetic(0, DATA)
    for horizon in (1, 2):
        batch = make_sequences(manifest, "train", n_history=2, horizon=horizon)
        errors = horizon_errors(PersistenceForecaster(), manifest, horizon, split="train", n_history=2)
        np.testing.assert_allclose(errors, (batch.frames[:, -1] - batch.target_image).reshape(-1))
    with tempfile.TemporaryDirectory() as tmpdir:
        table = horizon_table(PersistenceForecaster(), manifest, (1, 2), split="train", n_history=2, qq_dir=tmpdir)
        assert isfile(join(tmpdir, "qq_h1.png")) and isfile(join(tmpdir, "qq_h2.png"))
    assert list(table.columns) == ["h", "r", "error_mean", "error_sd"]
    assert list(table["h"]) == [1, 2]
    assert np.all(table["r"].abs() <= 1.0)
    with pytest.raises(DataError, match="no window of 2 years"):
        horizon_errors(PersistenceForecaster(), manifest, 3, split="train", n_history=2)


def test_horizon_table_thins_errors() -> None:
    """max_samples bounds the sample quantiles of every horizon's QQ analysis"""
    manifest = generate_synthetic(0, DATA)
    reports = []

    def _capture(*args: Any, **kwargs: Any) -> QQReport:
        report = qq_analysis(*args, **kwargs)
        reports.append(report)
        return report

    with mock.patch("pydinn.evaluation.qq_analysis", side_effect=_capture):
        horizon_table(PersistenceForecaster(), manifest, (1, 2), split="train", n_history=2, max_samples=100)
    assert [report.horizon for report in reports] == [1, 2]
    for horizon, report in zip((1, 2), reports):
        n_errors = horizon_errors(PersistenceForecaster(), manifest, horizon, split="train", n_history=2).size
        assert n_errors > 100
        assert report.sample_quantiles.size <= 100


def test_image_metrics() -> None:
    """Identical images give MSE 0, SSIM 1 and infinite PSNR"""
    images = np.random.default_rng(4).uniform(-1, 1, (2, 16, 16, 3))
    metrics = image_metrics(images, images)
    assert metrics["MSE"] == 0.0
    assert metrics["SSIM"] == pytest.approx(1.0)
    assert metrics["PSNR"] == math.inf
    assert image_metrics(images, -images)["MSE"] > 0


def test_dinn_forecaster() -> None:
    """Unit tests for the one-step forecast of images, demographics and travel"""
    forecaster = _forecaster()
    rng = np.random.default_rng(5)
    images, demos = forecaster.predict_next(rng.uniform(-1, 1, (3, 2, 16, 16, 3)), rng.standard_normal((3, 2, 5)))
    assert images.shape == (3, 16, 16, 3)
    assert demos.shape == (3, 5)
    assert forecaster.predict_travel(images).shape == (3, 15)
    with pytest.raises(DataError, match="no travel predictor"):
        _forecaster(with_travel=False).predict_travel(images)


def test_split_metrics() -> None:
    """Models that are absent leave their metrics out"""
    manifest = generate_synthetic(0, DATA)
    data_only = split_metrics(manifest, "train")
    assert set(data_only) == {"demo_travel_correlation"}
    assert -1.0 <= data_only["demo_travel_correlation"] <= 1.0
    full = split_metrics(manifest, "train", _forecaster(), n_history=2)
    assert set(full) == {
        "demo_travel_correlation",
        "demo_mse",
        "demo_r2",
        "travel_mse",
        "travel_r2",
        "image_mse",
        "image_ssim",
        "image_psnr",
        "demo_loss",
    }
    frame = metrics_frame({"train": full, "test": data_only})
    assert list(frame.columns) == ["metric", "split", "value"]
    assert len(frame) == len(full) + 1


def test_county_heatmaps() -> None:
    """Persistence forecast heatmaps repeat the observed change of the previous year"""
    manifest = generate_synthetic(0, DATA)
    county = manifest.split_of("train")[0]
    run = county_heatmaps(
        manifest, county, 2012, [HeatmapKind.target, HeatmapKind.forecast], PersistenceForecaster(), n_history=2
    )
    target = {heatmap.cmp_year: heatmap for heatmap in run.heatmaps if heatmap.kind is HeatmapKind.target}
    forecast = {heatmap.cmp_year: heatmap for heatmap in run.heatmaps if heatmap.kind is HeatmapKind.forecast}
    assert sorted(target) == [2013, 2014, 2015]
    assert sorted(forecast) == [2014, 2015]
    np.testing.assert_allclose(forecast[2014].values, target[2013].values)
    np.testing.assert_allclose(forecast[2015].values, target[2014].values)
    assert run.frequency[HeatmapKind.target].n == 3
    with pytest.raises(DataError, match="Base year 2011 is not in the manifest"):
        county_heatmaps(manifest, county, 2011, [HeatmapKind.target])
    with pytest.raises(DataError, match="need a forecaster"):
        county_heatmaps(manifest, county, 2012, [HeatmapKind.forecast])


def test_export_heatmaps() -> None:
    """Every heatmap and frequency map is written as PNG and DINN tensor with an index"""
    manifest = generate_synthetic(0, DATA)
    counties = manifest.counties[:2]
    with tempfile.TemporaryDirectory() as tmpdir:
        index = export_heatmaps(manifest, tmpdir, counties)
        assert len(index) == 2 * (3 + 1)
        for entry in index:
            assert isfile(join(tmpdir, entry["png"])) and isfile(join(tmpdir, entry["raw"]))
        first = index[0]
        assert first["png"] == f"{counties[0]}_2012_2013_target.png"
        assert index[3]["kind"] == "frequency_target"
        with open(join(tmpdir, INDEX_FILENAME), encoding="utf-8") as index_file:
            assert json.load(index_file) == index
        with pytest.raises(FileExistsError):
            export_heatmaps(manifest, tmpdir, counties)


def test_variant_configs() -> None:
    """Variants toggle only the encoder, gated skips and the demographic predictor"""
    assert [variant.id for variant in ABLATION_VARIANTS] == [1, 2, 3, 4, 5]
    baseline, full = ABLATION_VARIANTS[0], ABLATION_VARIANTS[-1]
    sat_config, training = variant_configs(baseline, SAT, TrainingConfig(epochs=3))
    assert sat_config.encoder is EncoderKind.conv2d and not sat_config.gated_skip
    assert not training.demo_predictor and training.epochs == 3
    assert sat_config.channels == SAT.channels
    assert variant_configs(full, SAT, TrainingConfig())[0] == SAT


def test_run_ablation_records_failures() -> None:
    """Variants that need the missing demographic predictor fail without stopping the run"""
    manifest = generate_synthetic(0, DATA)
    training = TrainingConfig(batch_size=4, lr=1e-3, epochs=1)
    table = run_ablation(manifest, SAT, training, LossWeights(), demo=None, split="test")
    assert list(table["variant"]) == [1, 2, 3, 4, 5]
    assert list(table["status"][[0, 3]]) == ["ok", "ok"]
    for row in (1, 2, 4):
        assert table["status"][row].startswith("failed: The sat stage needs a trained demographic predictor")
        assert math.isnan(table["MSE"][row])
    assert np.all(table["MSE"][[0, 3]] > 0)


def test_run_ablation_with_demographic_predictor() -> None:
    """All five variants train and score with the frozen demographic predictor"""
    manifest = generate_synthetic(0, DATA)
    demo = freeze(DemographicPredictor(DEMO, seed=0))
    table = run_ablation(manifest, SAT, TrainingConfig(batch_size=4, lr=1e-3, epochs=1), LossWeights(), demo)
    assert list(table["status"]) == ["ok"] * 5
    assert np.all(np.isfinite(table[["MSE", "SSIM", "PSNR"]].to_numpy()))
