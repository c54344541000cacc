"""Module implementing unit tests for the run configuration"""

import copy
import json
import re
import tempfile
from os.path import join
from typing import Any, Dict

import pytest

from pydinn.config import AblationConfig, EvaluationConfig, RunConfig, dump_config, load_config
from pydinn.errors import ConfigError
from pydinn.evaluation import HeatmapKind
from pydinn.satellite import EncoderKind

SMALL_DOCUMENT: Dict[str, Any] = {
    "seed": 4,
    "out": "runs/small",
    "synth": {"n_counties": 6, "years": [2012, 2013, 2014, 2015], "height": 16, "width": 16, "f": 5},
    "sat": {
        "height": 16,
        "width": 16,
        "n_history": 2,
        "f": 5,
        "depth": 2,
        "base_channels": 4,
        "max_channels": 8,
        "growth_rate": 2,
        "dense_layers": 1,
        "demo_hidden": [8],
        "demo_embed_dim": 8,
        "encoder": "conv2d",
    },
    "demo": {"height": 16, "width": 16, "f": 5, "channels": [4, 8]},
    "travel": {"in_channels": 8, "spatial_channels": [4], "global_dims": [8, 4]},
    "training": {"batch_size": 4, "epochs": 1},
    "evaluation": {"heatmap_kinds": ["target"], "horizons": [1]},
}


def _document(**sections: Any) -> Dict[str, Any]:
    """SMALL_DOCUMENT with whole sections or top-level keys replaced."""
    document = copy.deepcopy(SMALL_DOCUMENT)
    document.update(sections)
    return document


def test_defaults_are_consistent() -> None:
    """The default config passes the cross-section checks"""
    config = RunConfig()
    assert config.precision == 32
    assert config.travel.in_channels == config.demo.semantic_dim == config.sat.demo_embed_dim
    assert RunConfig.from_dict({}) == config


def test_from_dict() -> None:
    """Sections map onto their dataclasses and the resolved form round-trips"""
    config = RunConfig.from_dict(_document())
    assert config.seed == 4
    assert config.sat.encoder is EncoderKind.conv2d
    assert config.sat.channels == [4, 8]
    assert config.demo.channels == (4, 8)
    assert config.evaluation.heatmap_kinds == (HeatmapKind.target,)
    assert config.training.lr == pytest.approx(3e-4)
    assert RunConfig.from_dict(config.to_dict()) == config
    assert config.to_dict()["sat"]["encoder"] == "conv2d"


@pytest.mark.parametrize(
    "document, message",
    [
        pytest.param([1, 2], "A run config must be a JSON object, got list.", id="not_object"),
        pytest.param(_document(colour="red"), "Unknown config keys: colour", id="unknown"),
        pytest.param(
            _document(demo={"height": 32, "width": 32, "f": 5, "channels": [4, 8]}),
            "Image dims differ between sections",
            id="dims",
        ),
        pytest.param(
            _document(demo={"height": 16, "width": 16, "f": 6, "channels": [4, 8]}),
            "Demographic feature counts differ between sections",
            id="features",
        ),
        pytest.param(
            _document(travel={"in_channels": 4}),
            "travel.in_channels is 4, demo bottleneck has 8 channels.",
            id="travel_width",
        ),
        pytest.param(_document(precision=16), "precision must be one of [32, 64], got 16.", id="precision"),
        pytest.param(_document(training={"batch_size": 1}), "training.batch_size must be >= 2", id="section_check"),
        pytest.param(_document(seed="one"), "seed must be an integer", id="type"),
    ],
)
def test_from_dict_errors(document: Any, message: str) -> None:
    """Unit tests for RunConfig validation"""
    with pytest.raises(ConfigError, match=re.escape(message)):
        RunConfig.from_dict(document)


def test_external_dataset_skips_synth_checks() -> None:
    """With a dataset directory the synth section is not compared"""
    document = _document(dataset="data/acs", synth={"height": 64, "width": 64, "f": 25})
    assert RunConfig.from_dict(document).dataset == "data/acs"


def test_with_overrides() -> None:
    """Command-line overrides replace only the given values"""
    config = RunConfig.from_dict(_document())
    assert config.with_overrides() == config
    changed = config.with_overrides(seed=9, out="elsewhere", precision=64)
    assert (changed.seed, changed.out, changed.precision) == (9, "elsewhere", 64)
    assert changed.sat == config.sat
    with pytest.raises(ConfigError):
        config.with_overrides(precision=8)


def test_section_configs() -> None:
    """Unit tests for the evaluation and ablation sections"""
    assert EvaluationConfig(heatmap_kinds=("forecast",)).heatmap_kinds == (HeatmapKind.forecast,)
    with pytest.raises(ConfigError, match="evaluation.horizons must be positive"):
        EvaluationConfig(horizons=(0, 1))
    with pytest.raises(ConfigError):
        EvaluationConfig(qq_max_samples=10)
    assert AblationConfig().variants == (1, 2, 3, 4, 5)
    message = "ablation.variants must be a non-empty subset of [1, 2, 3, 4, 5], got [6]."
    with pytest.raises(ConfigError, match=re.escape(message)):
        AblationConfig(variants=(6,))
    with pytest.raises(ConfigError):
        AblationConfig(epochs=0)


def test_load_and_dump_config() -> None:
    """Unit tests for reading and writing config files"""
    with tempfile.TemporaryDirectory() as tmpdir:
        with pytest.raises(ConfigError, match="does not exist"):
            load_config(join(tmpdir, "missing.json"))
        broken = join(tmpdir, "broken.json")
        with open(broken, "w", encoding="utf-8") as config_file:
            config_file.write("{'seed': 1}")
        with pytest.raises(ConfigError, match="is not valid JSON"):
            load_config(broken)
        source = join(tmpdir, "run.json")
        with open(source, "w", encoding="utf-8") as config_file:
            json.dump(_document(), config_file)
        config = load_config(source)
        resolved = join(tmpdir, "out", "config.resolved.json")
        dump_config(config, resolved)
        assert load_config(resolved) == config
        with pytest.raises(FileExistsError):
            dump_config(config, resolved, exist_ok=False)
