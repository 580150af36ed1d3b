"""
Module that contains the command line app.

Why does this file exist, and why not put this in __main__?

You might be tempted to import things from __main__ later, but that will cause
problems: the code will get executed twice:

- When you run `python -m riconvnet` python will execute
``__main__.py`` as a script. That means there won't be any
``riconvnet.__main__`` in ``sys.modules``.
- When you import __main__ it will get executed again (as a module) because
there's no ``riconvnet.__main__`` in ``sys.modules``.

Also see (1) from http://click.pocoo.org/5/setuptools/#setuptools-integration
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

from riconvnet.autodiff import Mode, load_checkpoint, restore_params, save_checkpoint
from riconvnet.constants import (
    CONFIG_DIR,
    EXIT_CHECK_FAILED,
    EXIT_CONFIG_ERROR,
    EXIT_OK,
    EXIT_RUNTIME_ERROR,
    ROTATION_REGIMES,
)
from riconvnet.data import load_xyz, write_dataset
from riconvnet.exceptions import (
    ConfigException,
    ConfigValueException,
    DataException,
    FeatureException,
    GeometryException,
    LayerException,
    MissingPathException,
    ModelException,
    SamplingException,
)
from riconvnet.gradcheck import run_gradcheck
from riconvnet.model.experiment import run_experiment, write_experiment_csv
from riconvnet.model.metrics import (
    write_csv,
    write_evaluation_csv,
    write_history_csv,
)
from riconvnet.model.networks import (
    NetworkConfig,
    NetworkParams,
    build_network,
    init_network_params,
)
from riconvnet.model.trainer import evaluate, train
from riconvnet.runconfig import (
    RunConfig,
    apply_overrides,
    build_dataset,
    build_network_config,
    build_train_config,
    dataset_counts,
    load_config,
    network_config,
    output_path,
)

logger = logging.getLogger("riconvnet")

RUNTIME_EXCEPTIONS = (
    GeometryException,
    SamplingException,
    FeatureException,
    LayerException,
    ModelException,
    DataException,
    EnvironmentError,
)


class Parser(argparse.ArgumentParser):
    def __init__(self):
        super(Parser, self).__init__(
            prog="riconvnet",
            description="RIConvNet, rotation invariant point cloud convolutions",
        )
        self.add_parse_arguments()

    @staticmethod
    def run_arguments() -> argparse.ArgumentParser:
        # Shared by every command that reads a run configuration
        parent = argparse.ArgumentParser(add_help=False)
        parent.add_argument(
            "-f",
            "--config",
            type=str,
            default=CONFIG_DIR + "classification.json",
            help="JSON run configuration",
        )
        parent.add_argument(
            "-s", "--seed", type=int, default=None, help="Overrides the seeds"
        )
        parent.add_argument(
            "-e",
            "--epochs",
            type=int,
            default=None,
            help="Overrides the number of training epochs",
        )
        parent.add_argument(
            "-r",
            "--regime",
            type=str,
            default=None,
            choices=list(ROTATION_REGIMES),
            help="Overrides the rotation regime (train/test)",
        )
        return parent

    def add_parse_arguments(self):
        parent = Parser.run_arguments()
        commands = self.add_subparsers(
            dest="command", parser_class=argparse.ArgumentParser
        )

        gen_data = commands.add_parser(
            "gen-data", parents=[parent], help="Write the synthetic dataset to disk"
        )
        gen_data.add_argument(
            "-o",
            "--out",
            type=str,
            default=None,
            help="Dataset directory (default: <output dir>/dataset)",
        )

        commands.add_parser(
            "train",
            parents=[parent],
            help="Train a network, write its checkpoint and training metrics",
        )

        evaluation = commands.add_parser(
            "eval", parents=[parent], help="Evaluate a checkpoint on the test split"
        )
        evaluation.add_argument(
            "-c",
            "--checkpoint",
            type=str,
            default=None,
            help="Checkpoint file (default: the configured output checkpoint)",
        )

        commands.add_parser(
            "experiment",
            parents=[parent],
            help="Train and test over the rotation regimes",
        )

        features = commands.add_parser(
            "features",
            parents=[parent],
            help="Dump the per-representative features of an encoder layer",
        )
        features.add_argument("input", type=str, help="Input .xyz point cloud")
        features.add_argument(
            "-l",
            "--layer",
            type=int,
            default=1,
            help="Encoder layer, from 1 (first) to the number of layers",
        )
        features.add_argument(
            "-c",
            "--checkpoint",
            type=str,
            default=None,
            help="Checkpoint file (default: freshly initialized parameters)",
        )
        features.add_argument(
            "-o", "--out", type=str, default=None, help="Output CSV file"
        )

        gradcheck = commands.add_parser(
            "gradcheck", help="Finite-difference check of every layer gradient"
        )
        gradcheck.add_argument(
            "-s", "--seed", type=int, default=0, help="Seed of the checked inputs"
        )

    def parse(self, args: List[str]) -> argparse.Namespace:
        return self.parse_args(args)


# Commands
# \________


def run_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config)
    return apply_overrides(config, args.seed, args.epochs, args.regime)


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = run_config(args)
    dataset = build_dataset(config)
    directory = args.out or os.path.join(config["output"]["dir"], "dataset")
    write_dataset(dataset, directory)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = run_config(args)
    dataset = build_dataset(config)
    net = build_network_config(config, dataset)
    tcfg = build_train_config(config, net.task)
    result = train(net, tcfg, dataset)
    save_checkpoint(output_path(config, "checkpoint"), result.params.named())
    write_history_csv(output_path(config, "metrics_csv"), result.history)
    logger.info(f"💾 Checkpoint of epoch {result.best_epoch} saved")
    return EXIT_OK


def load_params(net: NetworkConfig, seed: int, checkpoint: str) -> NetworkParams:
    if not os.path.exists(checkpoint):
        raise MissingPathException(f"Checkpoint '{checkpoint}' does not exist.")
    params = init_network_params(net, seed)
    restore_params(params.named(), load_checkpoint(checkpoint))
    params.set_mode(Mode.INFERENCE)
    return params


def cmd_eval(args: argparse.Namespace) -> int:
    config = run_config(args)
    checkpoint = args.checkpoint or output_path(config, "checkpoint")
    if not os.path.exists(checkpoint):
        raise MissingPathException(f"Checkpoint '{checkpoint}' does not exist.")
    dataset = build_dataset(config)
    net = build_network_config(config, dataset)
    tcfg = build_train_config(config, net.task)
    params = load_params(net, tcfg.seed, checkpoint)
    regime = tcfg.rotation_regime
    metrics = evaluate(params, net, dataset, regime, tcfg.seed, tcfg.batch_size)
    path = os.path.join(
        config["output"]["dir"], f"eval_{regime.replace('/', '_')}.csv"
    )
    write_evaluation_csv(path, regime, metrics, dataset.class_names)
    print(f"{'regime':<10} {'accuracy':>9}")
    line = f"{regime:<10} {metrics.overall_accuracy:>9.4f}"
    if metrics.mean_per_class_iou is not None:
        line += f"  mIoU {metrics.mean_per_class_iou:.4f}"
    print(line)
    return EXIT_OK


def cmd_experiment(args: argparse.Namespace) -> int:
    config = run_config(args)
    dataset = build_dataset(config)
    net = build_network_config(config, dataset)
    tcfg = build_train_config(config, net.task)
    result = run_experiment(net, tcfg, dataset, config["experiment"]["regimes"])
    write_experiment_csv(
        os.path.join(config["output"]["dir"], "experiment.csv"), result
    )
    print(result.table())
    return EXIT_OK


def cmd_features(args: argparse.Namespace) -> int:
    config = run_config(args)
    if not os.path.exists(args.input):
        raise MissingPathException(f"Point cloud '{args.input}' does not exist.")
    cloud = load_xyz(args.input, normalize=config["dataset"]["normalize"])
    n_classes, n_parts = dataset_counts(config)
    section = config["network"]
    net = network_config(
        config,
        section["n_points"] or len(cloud),
        section["n_classes"] or n_classes,
        section["n_parts"] or n_parts,
    )
    if not 1 <= args.layer <= net.n_layers:
        raise ConfigValueException(
            f"--layer {args.layer} not in [1, {net.n_layers}]."
        )
    seed = config["train"]["seed"]
    if args.checkpoint is None:
        params = init_network_params(net, seed)
        params.set_mode(Mode.INFERENCE)
    else:
        params = load_params(net, seed, args.checkpoint)
    network = build_network(net, params, seed)
    output = network.encode(cloud.points[None])[args.layer - 1]
    features = output.features[0]
    header = ["index", "x", "y", "z"] + [f"f{c}" for c in range(features.shape[1])]
    rows = [
        [int(index), *point, *row]
        for index, point, row in zip(output.indices[0], output.points[0], features)
    ]
    path = args.out or os.path.join(
        config["output"]["dir"], f"features_layer{args.layer}.csv"
    )
    write_csv(path, "features", header, rows)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    reports = run_gradcheck(args.seed)
    for report in reports:
        print(report.line())
    failed = [report.name for report in reports if not report.passed]
    if failed:
        logger.error(f"❌ Gradient check failed for {failed}")
        return EXIT_CHECK_FAILED
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
    "features": cmd_features,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[List[str]] = None) -> int:
    if argv is None:
        argv = sys.argv[1:]

    parser = Parser()
    args = parser.parse(argv)

    if not argv or args.command is None:
        parser.print_help()
        return EXIT_OK

    if not logger.handlers and not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(message)s")

    logger.debug(f"🚀 Running '{args.command}'")
    try:
        return COMMANDS[args.command](args)
    except ConfigException as err:
        logger.error(f"⚙️ Configuration error: {err}")
        return EXIT_CONFIG_ERROR
    except RUNTIME_EXCEPTIONS as err:
        logger.error(f"💥 {err.__class__.__name__}: {err}")
        return EXIT_RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
