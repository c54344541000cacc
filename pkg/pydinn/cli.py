"""Command-line interface of pydinn.

Every command reads one JSON run config and writes its artifacts below the run's output
directory:

    out/dataset/                       synth
    out/checkpoints/{demo,travel,sat}/ train --stage
    out/logs/{stage}_loss.csv          train --stage
    out/eval/                          evaluate
    out/heatmaps/                      heatmap
    out/ablation/ablation.csv          ablate
"""

import argparse
import logging
import sys
from dataclasses import replace
from os.path import isfile, join
from typing import Callable, Dict, List, Optional

from pydinn.config import RESOLVED_CONFIG, RunConfig, dump_config, load_config
from pydinn.data import (
    MANIFEST_FILENAME,
    DatasetManifest,
    generate_synthetic,
    make_image_samples,
    make_sequences,
    manifest_hash,
    read_manifest,
    validate_manifest,
    write_manifest,
)
from pydinn.demographic import FrozenDemographicPredictor
from pydinn.errors import ConfigError, NumericsError, StageError
from pydinn.evaluation import (
    ABLATION_VARIANTS,
    DinnForecaster,
    HeatmapKind,
    export_heatmaps,
    horizon_table,
    metrics_frame,
    run_ablation,
    split_metrics,
    write_json,
    write_table,
)
from pydinn.tensor import precision
from pydinn.tensorfile import CHECKPOINT_CONFIG
from pydinn.training import (
    Stage,
    checkpoint_dir,
    load_frozen_demo,
    load_frozen_travel,
    load_sat,
    loss_log_path,
    save_model,
    train_demo,
    train_sat,
    train_travel,
    write_loss_log,
)
from pydinn.travel import FrozenTravelPredictor

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s : %(levelname)s - %(message)s"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_NUMERICS = 4


def dataset_dir(config: RunConfig) -> str:
    """Directory holding the run's manifest."""
    return config.dataset if config.dataset is not None else join(config.out, "dataset")


def _manifest(config: RunConfig) -> DatasetManifest:
    directory = dataset_dir(config)
    if not isfile(join(directory, MANIFEST_FILENAME)):
        raise StageError(f"No dataset manifest in {directory}, run the synth command first.")
    return read_manifest(directory)


def _frozen_demo(config: RunConfig) -> FrozenDemographicPredictor:
    return load_frozen_demo(checkpoint_dir(config.out, Stage.demo))


def _frozen_travel(config: RunConfig, encoder: FrozenDemographicPredictor) -> Optional[FrozenTravelPredictor]:
    """Frozen travel predictor if its stage has run, else None."""
    directory = checkpoint_dir(config.out, Stage.travel)
    if not isfile(join(directory, CHECKPOINT_CONFIG)):
        logger.info("no travel checkpoint in %s, travel terms are skipped", directory)
        return None
    return load_frozen_travel(directory, encoder)


def _forecaster(config: RunConfig) -> DinnForecaster:
    demo = _frozen_demo(config)
    sat = load_sat(checkpoint_dir(config.out, Stage.sat))
    return DinnForecaster(sat, demo, _frozen_travel(config, demo))


def command_synth(config: RunConfig, args: argparse.Namespace) -> None:
    """Generates the synthetic dataset and prints its manifest hash."""
    manifest = generate_synthetic(config.seed, config.synth)
    report = validate_manifest(manifest)
    if not report.ok:
        logger.warning("synthetic dataset has %d coherence violations", len(report.violations))
    write_manifest(manifest, join(config.out, "dataset"), exist_ok=True)
    print(manifest_hash(manifest))


def command_train(config: RunConfig, args: argparse.Namespace) -> None:
    """Trains one stage and writes its checkpoint and loss log."""
    stage = Stage(args.stage)
    manifest = _manifest(config)
    if stage is Stage.demo:
        samples = make_image_samples(manifest, "train")
        result = train_demo(samples, config.demo, config.training, config.loss, config.seed)
    elif stage is Stage.travel:
        encoder = _frozen_demo(config)
        samples = make_image_samples(manifest, "train")
        result = train_travel(samples, encoder, config.travel, config.training, config.seed)
    else:
        demo = _frozen_demo(config) if config.training.demo_predictor else None
        travel = _frozen_travel(config, demo) if demo is not None else None
        sequences = make_sequences(manifest, "train", n_history=config.sat.n_history)
        result = train_sat(
            sequences, config.sat, config.training, config.loss, demo, travel, config.ssim, config.seed
        )
    save_model(checkpoint_dir(config.out, stage), result.model, exist_ok=True)
    write_loss_log(result.history, loss_log_path(config.out, stage), exist_ok=True)


def command_evaluate(config: RunConfig, args: argparse.Namespace) -> None:
    """Writes per-split metrics and the horizon table with QQ plots."""
    manifest = _manifest(config)
    forecaster = _forecaster(config)
    eval_dir = join(config.out, "eval")
    metrics = {
        split: split_metrics(manifest, split, forecaster, n_history=config.sat.n_history)
        for split in ("train", "val", "test")
    }
    write_table(metrics_frame(metrics), join(eval_dir, "metrics.csv"), exist_ok=True)
    write_json(metrics, join(eval_dir, "metrics.json"), exist_ok=True)
    table = horizon_table(
        forecaster,
        manifest,
        config.evaluation.horizons,
        config.evaluation.split,
        config.sat.n_history,
        qq_dir=eval_dir,
        max_samples=config.evaluation.qq_max_samples,
    )
    write_table(table, join(eval_dir, "horizons.csv"), exist_ok=True)


def command_heatmap(config: RunConfig, args: argparse.Namespace) -> None:
    """Exports change heatmaps and frequency maps of the first counties of the evaluation split."""
    manifest = _manifest(config)
    settings = config.evaluation
    forecaster = _forecaster(config) if HeatmapKind.forecast in settings.heatmap_kinds else None
    counties = manifest.splits[settings.split][: settings.heatmap_counties]
    export_heatmaps(
        manifest,
        join(config.out, "heatmaps"),
        counties,
        kinds=settings.heatmap_kinds,
        base_year=settings.base_year,
        forecaster=forecaster,
        n_history=config.sat.n_history,
        tau=settings.tau,
        exist_ok=True,
    )


def command_ablate(config: RunConfig, args: argparse.Namespace) -> None:
    """Trains and scores the ablation variants and writes their table."""
    manifest = _manifest(config)
    variants = [variant for variant in ABLATION_VARIANTS if variant.id in config.ablation.variants]
    demo = _frozen_demo(config) if any(variant.demo_predictor for variant in variants) else None
    training = config.training
    if config.ablation.epochs is not None:
        training = replace(training, epochs=config.ablation.epochs)
    table = run_ablation(
        manifest,
        config.sat,
        training,
        config.loss,
        demo,
        variants,
        travel=_frozen_travel(config, demo) if demo is not None else None,
        seed=config.seed,
        split=config.evaluation.split,
    )
    write_table(table, join(config.out, "ablation", "ablation.csv"), exist_ok=True)


COMMANDS: Dict[str, Callable[[RunConfig, argparse.Namespace], None]] = {
    "synth": command_synth,
    "train": command_train,
    "evaluate": command_evaluate,
    "heatmap": command_heatmap,
    "ablate": command_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    """Parser with one subcommand per pipeline step; the common flags go after the subcommand."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="Path of the JSON run config.")
    common.add_argument("--seed", type=int, default=None, help="Overrides the seed of the config.")
    common.add_argument("--out", default=None, help="Overrides the output directory of the config.")
    common.add_argument("--precision", type=int, choices=(32, 64), default=None, help="Floating point bits.")
    common.add_argument("-v", "--verbose", action="store_true", help="Log per-step details.")

    parser = argparse.ArgumentParser(prog="pydinn", description=__doc__, formatter_class=argparse.RawTextHelpFormatter)
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("synth", parents=[common], help="Generate the synthetic dataset.")
    train = commands.add_parser("train", parents=[common], help="Train one stage.")
    train.add_argument("--stage", required=True, choices=[stage.value for stage in Stage])
    commands.add_parser("evaluate", parents=[common], help="Compute metrics, horizon errors and QQ plots.")
    commands.add_parser("heatmap", parents=[common], help="Export change heatmaps and frequency maps.")
    commands.add_parser("ablate", parents=[common], help="Run the ablation study.")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Runs one command and maps pydinn errors onto exit codes.

    Returns
    ----------
    : int
        0 on success, 2 for config errors, 3 for missing prerequisites, 4 for numerics errors.
    """
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)
    try:
        config = load_config(args.config).with_overrides(seed=args.seed, out=args.out, precision=args.precision)
        dump_config(config, join(config.out, RESOLVED_CONFIG))
        with precision(config.precision):
            COMMANDS[args.command](config, args)
    except ConfigError as err:
        logger.error("config error: %s", err)
        return EXIT_CONFIG
    except StageError as err:
        logger.error("missing prerequisite: %s", err)
        return EXIT_STAGE
    except NumericsError as err:
        logger.error("numerics error: %s", err)
        return EXIT_NUMERICS
    except (OSError, ValueError) as err:
        logger.error("%s failed: %s", args.command, err)
        return EXIT_FAILURE
    logger.info("%s finished, outputs in %s", args.command, config.out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
