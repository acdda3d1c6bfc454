"""Command line: ``spagan {train,eval,paths,selftest}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .graph import LoadError, load_dataset
from .paths import NumericError, build_pathset, uniform_costs
from .training import (ConfigError, TrainingError, build_layer_paths, configs_for, evaluate,
                       iterative_train, load_model, multi_run, prepare_features, regenerate_costs,
                       save_model)

log = logging.getLogger("spagan")

# flag name -> config field
OVERRIDES = {
    "runs": "runs",
    "seed": "seed",
    "lr": "lr",
    "l2": "l2",
    "hidden": "hidden",
    "heads1": "heads1",
    "heads2": "heads2",
    "max_path_len": "max_len1",
    "sample_ratio": "ratio",
    "iterations": "iterations",
    "dropout_keep": "keep_prob",
    "patience": "patience",
    "max_epochs": "max_epochs",
    "dtype": "dtype",
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model and training overrides")
    g.add_argument("--runs", type=int, help="independent runs (default 10)")
    g.add_argument("--seed", type=int, help="base seed; run k uses seed + k (default 0)")
    g.add_argument("--lr", type=float, help="Adam learning rate (per-dataset default)")
    g.add_argument("--l2", type=float, help="L2 weight (per-dataset default)")
    g.add_argument("--hidden", type=int, help="features per head in the first layer (default 8)")
    g.add_argument("--heads1", type=int, help="heads in the first layer (default 8)")
    g.add_argument("--heads2", type=int, help="heads in the output layer (default 1; 8 for pubmed)")
    g.add_argument("--max-path-len", type=int, help="max path length C of the first layer, in nodes (default 3)")
    g.add_argument("--sample-ratio", type=float, help="paths kept per length = max(1, round(degree * r)) (default 1.0)")
    g.add_argument("--iterations", type=int, help="train / regenerate-paths cycles (default 2)")
    g.add_argument("--dropout-keep", type=float, help="dropout keep probability (default 0.4)")
    g.add_argument("--patience", type=int, help="early stopping patience in epochs (default 100)")
    g.add_argument("--max-epochs", type=int, help="epoch cap per phase (default 1000)")
    g.add_argument("--fix-beta", action="store_true", default=None,
                   help="average over path lengths instead of learning the second-level attention")
    g.add_argument("--dtype", choices=["float32", "float64"], help="floating point precision (default float32)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spagan", description="Shortest-path graph attention networks.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="multi-run training; writes metrics.json")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", default="metrics.json", help="metrics output path")
    p.add_argument("--save-model", help="also save the last run's model (.npz)")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a saved model on the train/val/test masks")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--model", required=True, help="model saved by 'train --save-model'")
    p.add_argument("--sample-ratio", type=float, default=1.0, help="path sample ratio (default 1.0)")
    p.add_argument("--out", default="eval.json", help="evaluation output path")

    p = sub.add_parser("paths", help="dump the sampled paths of one center; writes paths.json")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--center", type=int, required=True, help="center node id")
    p.add_argument("--costs", choices=["uniform", "trained"], default="uniform",
                   help="edge costs: all ones, or from the final layer attention of a trained model")
    p.add_argument("--model", help="trained model for --costs trained (otherwise one run is trained)")
    p.add_argument("--out", default="paths.json", help="paths output path")
    _add_config_flags(p)

    p = sub.add_parser("selftest", help="run the fast property suites")
    p.add_argument("--suite", action="append", choices=["gradient", "normalization", "dijkstra", "degeneration"],
                   help="run only this suite (repeatable)")
    return parser


def resolve_configs(args, dataset_name: str):
    """Command line > per-dataset defaults > global defaults."""
    overrides = {field: getattr(args, flag) for flag, field in OVERRIDES.items()}
    overrides["fix_beta"] = args.fix_beta
    return configs_for(dataset_name, **overrides)


def cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    mcfg, tcfg = resolve_configs(args, dataset.name)
    report = multi_run(dataset, mcfg, tcfg)
    report.write(args.out)
    if args.save_model:
        save_model(report.last_model, args.save_model)
    print(f"{dataset.name}: test accuracy {100 * report.mean_acc:.2f} +- {100 * report.std_acc:.2f} "
          f"over {len(report.runs)} run(s); wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    model = load_model(args.model, dataset)
    costs = model.costs if model.costs is not None else uniform_costs(dataset.graph)
    features = prepare_features(dataset, True, np.dtype(model.config.dtype))
    layer_paths = build_layer_paths(dataset, model.config, costs, args.sample_ratio)
    result = {}
    for split in ("train", "val", "test"):
        acc, loss = evaluate(model, dataset, features, layer_paths, getattr(dataset, split))
        result[split] = {"accuracy": acc, "loss": loss}
        print(f"{split:<5} accuracy {acc:.4f}  loss {loss:.4f}")
    Path(args.out).write_text(json.dumps(result, indent=2) + "\n")
    return 0


def trained_costs(args, dataset, mcfg, tcfg) -> np.ndarray:
    if args.model:
        model = load_model(args.model, dataset)
        base = model.costs if model.costs is not None else uniform_costs(dataset.graph)
    else:
        model, _, _ = iterative_train(dataset, mcfg, tcfg)
        base = model.costs
    features = prepare_features(dataset, tcfg.normalize_features, np.dtype(model.config.dtype))
    layer_paths = build_layer_paths(dataset, model.config, base, tcfg.ratio)
    return regenerate_costs(model, dataset, features, layer_paths)


def cmd_paths(args) -> int:
    dataset = load_dataset(args.data)
    if not 0 <= args.center < dataset.num_nodes:
        raise ConfigError(f"center {args.center} outside [0, {dataset.num_nodes})")
    mcfg, tcfg = resolve_configs(args, dataset.name)
    if args.costs == "uniform":
        costs = uniform_costs(dataset.graph)
    else:
        costs = trained_costs(args, dataset, mcfg, tcfg)
    pathset = build_pathset(dataset.graph, costs, mcfg.max_len1, tcfg.ratio)
    pathset.dump(args.out, [args.center])
    print(f"center {args.center}: {len(pathset.paths_for(args.center))} path(s) "
          f"({args.costs} costs); wrote {args.out}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_suites

    results = run_suites(args.suite)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "paths": cmd_paths, "selftest": cmd_selftest}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (LoadError, ConfigError, NumericError, TrainingError, ad.UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
