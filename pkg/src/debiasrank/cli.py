"""Operator command line: generate, train, evaluate, ablate, report-positions.

One JSON config file drives the whole generate -> train -> evaluate chain;
every run directory receives a copy of the exact config that produced it.
Exit codes: 0 success, 2 config/input error, 3 numerical abort, 4 integrity
error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager

from . import __version__
from .checkpoint import CheckpointError
from .encoders import EncoderConfigError
from .evaluation import (EVAL_TOWERS, EvalError, evaluate, serving_tower,
                         user_profiles, write_metrics_csv)
from .model import ModelError
from .synthgen import (SPLITS, GenConfig, GenConfigError, LogFormatError,
                       generate_dataset, position_report, read_catalog,
                       read_logs, write_catalog, write_logs,
                       write_position_report)
from .training import (TrainConfig, TrainError, TrainingAbort, load_model,
                       save_model, train, write_training_log)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_INTEGRITY = 4

CONFIG_ERRORS = (GenConfigError, LogFormatError, TrainError, EncoderConfigError,
                 ModelError, EvalError, FileNotFoundError, KeyError, ValueError)

LOCK_NAME = ".debiasrank.lock"


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


@contextmanager
def run_lock(directory: str):
    """One command owns a run directory at a time."""
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, LOCK_NAME)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(f"run directory {directory} is locked by another command "
                       f"(stale? remove {path})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        if os.path.exists(path):
            os.remove(path)


def default_config() -> dict:
    return {
        "run_id": "run-0",
        "gen": {k: v for k, v in GenConfig().__dict__.items()},
        "train": TrainConfig().to_dict(),
        "eval": {"split": "test_uniform", "tower": "serve"},
        "ablate": {"seeds": [0, 1, 2, 3, 4],
                   "alpha_grid": [0.0, 0.25, 0.5, 1.0, 2.0]},
    }


def load_config(path: str | None) -> dict:
    base = default_config()
    if path is None:
        return base
    with open(path, encoding="utf-8") as f:
        user = json.load(f)
    for key in user:
        if key not in base:
            raise CliError(f"unknown config section {key!r}")
        if isinstance(base[key], dict):
            unknown = set(user[key]) - set(base[key])
            if unknown:
                raise CliError(f"unknown {key} config field(s): {sorted(unknown)}")
            base[key].update(user[key])
        else:
            base[key] = user[key]
    return base


def _write_config_copy(out_dir: str, config: dict) -> None:
    with open(os.path.join(out_dir, "run_config.json"), "w", encoding="utf-8") as f:
        json.dump(config, f, indent=1, sort_keys=True)
        f.write("\n")


def _load_data_dir(data_dir: str, splits_needed: tuple[str, ...]):
    catalog_path = os.path.join(data_dir, "catalog.jsonl")
    if not os.path.exists(catalog_path):
        raise CliError(f"missing data file: {catalog_path}")
    catalog = read_catalog(catalog_path)
    splits = {}
    for split in splits_needed:
        path = os.path.join(data_dir, f"logs-{split}.jsonl")
        if not os.path.exists(path):
            raise CliError(f"missing data file: {path}")
        splits[split] = read_logs(path)
    return catalog, splits


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    if args.emit_template:
        json.dump(default_config(), sys.stdout, indent=1, sort_keys=True)
        sys.stdout.write("\n")
        return EXIT_OK
    config = load_config(args.config)
    if args.seed is not None:
        config["gen"]["seed"] = args.seed
    gen_cfg = GenConfig.from_dict(config["gen"])
    out = args.out
    with run_lock(out):
        catalog, splits = generate_dataset(gen_cfg)
        write_catalog(os.path.join(out, "catalog.jsonl"), catalog)
        for split in SPLITS:
            write_logs(os.path.join(out, f"logs-{split}.jsonl"), splits[split])
        rows = position_report(splits["train"]) if splits["train"] else []
        write_position_report(os.path.join(out, "positions.csv"), rows)
        _write_config_copy(out, config)
    for split in SPLITS:
        print(f"{split}: {len(splits[split])} impressions")
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config["train"]["seed"] = args.seed
    if args.alpha is not None:
        config["train"]["alpha"] = args.alpha
    if args.preset is not None:
        config["train"]["preset"] = args.preset
    train_cfg = TrainConfig.from_dict(config["train"])
    catalog, splits = _load_data_dir(args.data_dir, ("train", "valid"))
    out = args.out
    with run_lock(out):
        result = train(catalog, splits, train_cfg)
        save_model(os.path.join(out, "checkpoint"), result.model, train_cfg,
                   run_info={"run_id": config["run_id"],
                             "best_epoch": result.best_epoch,
                             "n_samples": result.n_samples,
                             "n_impressions_skipped": result.n_impressions_skipped})
        write_training_log(os.path.join(out, "training_log.csv"), result.epoch_log)
        _write_config_copy(out, config)
    best = result.epoch_log[result.best_epoch] if result.epoch_log else {}
    print(f"trained {train_cfg.method} for {train_cfg.epochs} epochs; "
          f"best epoch {result.best_epoch} "
          f"(valid AUC {best.get('valid_auc', float('nan')):.4f})")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.split not in SPLITS:
        raise CliError(f"unknown split {args.split!r}; expected one of {SPLITS}")
    model, extra = load_model(args.checkpoint)
    tower = args.tower
    if tower == "serve":
        tower = serving_tower(model.method)
    elif tower not in EVAL_TOWERS:
        raise CliError(f"unknown tower {tower!r}; expected 'serve' or one of {EVAL_TOWERS}")
    catalog, splits = _load_data_dir(args.data_dir, ("train", args.split))
    profiles = user_profiles(splits["train"])
    report = evaluate(model, catalog, splits[args.split], profiles, tower)
    run_id = extra.get("run_info", {}).get("run_id", "run-0")
    row = report.row(run_id, args.split, tower)
    if args.out:
        write_metrics_csv(args.out, [row])
    print(",".join(str(row[k]) for k in ("run_id", "split", "tower")) + ","
          + ",".join(f"{row[k]!r}" for k in ("auc", "mrr", "ndcg5", "ndcg10"))
          + f",{row['n_impressions']},{row['n_skipped']}")
    return EXIT_OK


ABLATION_VARIANTS = ("full", "no_adversarial", "mean_pooling", "identity_quantization")


def _variant_config(base: TrainConfig, variant: str, seed: int) -> TrainConfig:
    from dataclasses import replace
    cfg = replace(base, seed=seed)
    if variant == "full":
        return cfg
    if variant == "no_adversarial":
        return replace(cfg, alpha=0.0)
    if variant == "mean_pooling":
        return replace(cfg, pooling="mean")
    if variant == "identity_quantization":
        return replace(cfg, quantization="identity")
    if variant.startswith("alpha_"):
        return replace(cfg, alpha=float(variant.split("_", 1)[1]))
    raise CliError(f"unknown ablation variant {variant!r}")


def cmd_ablate(args) -> int:
    config = load_config(args.config)
    base = TrainConfig.from_dict(config["train"])
    seeds = config["ablate"]["seeds"]
    alpha_grid = config["ablate"]["alpha_grid"]
    catalog, splits = _load_data_dir(args.data_dir,
                                     ("train", "valid", "test_uniform"))
    profiles = user_profiles(splits["train"])
    variants = list(ABLATION_VARIANTS) + [f"alpha_{a}" for a in alpha_grid]
    out = args.out
    rows = []
    with run_lock(out):
        for variant in variants:
            for seed in seeds:
                cfg = _variant_config(base, variant, seed)
                result = train(catalog, splits, cfg)
                report = evaluate(result.model, catalog, splits["test_uniform"],
                                  profiles, serving_tower(cfg.method))
                rows.append({"variant": variant, "seed": seed,
                             "alpha": cfg.alpha, "test_uniform_auc": report.auc})
                print(f"{variant} seed={seed}: test_uniform AUC {report.auc!r}")
        with open(os.path.join(out, "ablation.csv"), "w", encoding="utf-8") as f:
            f.write("variant,seed,alpha,test_uniform_auc\n")
            for r in rows:
                f.write(f"{r['variant']},{r['seed']},{r['alpha']!r},"
                        f"{r['test_uniform_auc']!r}\n")
        _write_config_copy(out, config)
    return EXIT_OK


def cmd_report_positions(args) -> int:
    path = os.path.join(args.data_dir, f"logs-{args.split}.jsonl")
    if not os.path.exists(path):
        raise CliError(f"missing data file: {path}")
    impressions = read_logs(path)
    rows = position_report(impressions) if impressions else []
    write_position_report(args.out, rows)
    for pos, count, ctr in rows:
        print(f"{pos},{count},{ctr!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="debiasrank",
        description="Position-debiased click prediction at desk scale")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic dataset")
    p.add_argument("--config", default=None, help="JSON config path")
    p.add_argument("--out", default="data", help="output data directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--emit-template", action="store_true",
                   help="print the full default config and exit")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on generated logs")
    p.add_argument("--config", default=None)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", default="run", help="run directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--preset", choices=("desk", "paper"), default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", default="test_uniform")
    p.add_argument("--tower", default="serve")
    p.add_argument("--out", default=None, help="metrics.csv path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train ablation variants and an alpha sweep")
    p.add_argument("--config", default=None)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", default="ablation")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report-positions", help="per-position counts and CTR")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out", default="positions.csv")
    p.set_defaults(func=cmd_report_positions)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except TrainingAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as e:
        print(f"integrity error: {e}", file=sys.stderr)
        return EXIT_INTEGRITY
    except CONFIG_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
