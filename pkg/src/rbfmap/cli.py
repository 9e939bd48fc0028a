"""Command line entry point: ``rbfmap {train,attack,evaluate,diagnose,ablate,report}``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attacks import MNIST_ATTACKS, AttackConfig
from .errors import ConfigError, DataError, NumericalError
from .experiment import (
    EPS_GRID,
    ExperimentConfig,
    ablate,
    diagnose_gradient_masking,
    evaluate_attacks,
    load_split,
    run_experiment,
    train_or_load,
    write_csv,
)

log = logging.getLogger("rbfmap")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


def parse_attack(text: str) -> list[AttackConfig]:
    """``kind[:epsilon[:iterations]]``, or ``mnist`` for the standard MNIST suite."""
    if text == "mnist":
        return list(MNIST_ATTACKS.values())
    parts = text.split(":")
    kind = parts[0]
    if len(parts) == 1:
        if kind not in MNIST_ATTACKS:
            raise ConfigError(f"unknown attack {kind!r}")
        return [MNIST_ATTACKS[kind]]
    try:
        eps = float(parts[1])
        base = MNIST_ATTACKS.get(kind)
        iters = int(parts[2]) if len(parts) > 2 else (base.iterations if base else 1)
    except ValueError as exc:
        raise ConfigError(f"bad attack spec {text!r}: {exc}") from exc
    if base is not None:
        return [replace(base, epsilon=eps, iterations=iters)]
    return [AttackConfig(kind, eps, iterations=iters)]


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("experiment config (flags override --config)")
    g.add_argument("--config", help="JSON experiment config")
    g.add_argument("--model", choices=("orig", "prop"))
    g.add_argument("--P", type=_int_list, help="RBF centers per block, e.g. 8,8,8")
    g.add_argument("--no-learn-a", dest="learn_A", action="store_false", default=None)
    g.add_argument("--no-learn-beta", dest="learn_beta", action="store_false", default=None)
    g.add_argument("--last-only", action="store_true", default=None)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--train-seed", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--train-images")
    g.add_argument("--train-labels")
    g.add_argument("--test-images")
    g.add_argument("--test-labels")
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--full", action="store_true", default=None, help="use every available sample")
    g.add_argument("--checkpoint", help="load parameters instead of training")
    g.add_argument("--attack", action="append", default=None,
                   help="kind[:epsilon[:iterations]] or 'mnist'; repeatable")
    g.add_argument("--attack-samples", type=int)
    g.add_argument("--spsa-max-samples", type=int)
    g.add_argument("--separability-samples", type=int)
    g.add_argument("--out", dest="output_dir")


def config_from_args(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{args.config}: top level must be an object")
    sections = {"model": {}, "train": {}, "data": {}}
    for key in sections:
        sections[key] = dict(raw.get(key, {}))
    mapping = {
        "model": ("model", "kind"), "P": ("model", "P"), "learn_A": ("model", "learn_A"),
        "learn_beta": ("model", "learn_beta"), "last_only": ("model", "last_only"),
        "epochs": ("train", "epochs"), "batch_size": ("train", "batch_size"),
        "lr": ("train", "learning_rate"), "train_seed": ("train", "seed"),
        "train_images": ("data", "train_images"), "train_labels": ("data", "train_labels"),
        "test_images": ("data", "test_images"), "test_labels": ("data", "test_labels"),
        "n_train": ("data", "n_train"), "n_test": ("data", "n_test"), "full": ("data", "full"),
    }
    for arg, (section, key) in mapping.items():
        value = getattr(args, arg, None)
        if value is not None:
            sections[section][key] = value
    raw.update({k: v for k, v in sections.items() if v})
    for key in ("seed", "checkpoint", "attack_samples", "spsa_max_samples", "separability_samples", "output_dir"):
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
    config = ExperimentConfig.from_dict(raw)
    if args.attack:
        config.attacks = [a for text in args.attack for a in parse_attack(text)]
    return config


def load_run(run_dir):
    """Rebuild the trained model stored in a run directory."""
    run = Path(run_dir)
    if not (run / "config.json").exists() or not (run / "model.rbfm").exists():
        raise ConfigError(f"{run} is not a run directory (needs config.json and model.rbfm)")
    config = ExperimentConfig.from_json(run / "config.json")
    config.checkpoint = str(run / "model.rbfm")
    split = load_split(config.data, config.seed)
    model, _ = train_or_load(config, split)
    return config, model, split


def cmd_train(args) -> int:
    config = config_from_args(args)
    config = replace(config, data=config.data.resolved(), checkpoint=None)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    split = load_split(config.data, config.seed)
    model, trace = train_or_load(config, split, out)
    acc = float(np.mean(model.predict(split.x_test) == split.y_test))
    print(f"{model.name}: {len(split.y_train)} train / {len(split.y_test)} test, clean accuracy {acc:.4f}")
    print(f"wrote {out / 'model.rbfm'} and {out / 'trace.csv'}")
    return EXIT_OK


def cmd_attack(args) -> int:
    if args.run:
        config, model, split = load_run(args.run)
        if args.attack:
            config.attacks = [a for text in args.attack for a in parse_attack(text)]
        if args.attack_samples is not None:
            config.attack_samples = args.attack_samples
    else:
        config = config_from_args(args)
        if not config.checkpoint:
            raise ConfigError("attack needs --run DIR or --checkpoint PATH")
        split = load_split(config.data, config.seed)
        model, _ = train_or_load(config, split)
    if not config.attacks:
        raise ConfigError("no attacks configured (use --attack)")
    rows = evaluate_attacks(model, split.x_test, split.y_test, config.attacks,
                            config.attack_samples, config.spsa_max_samples)
    out = Path(args.output_dir or args.run or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    keys = list(rows[0])
    write_csv(out / "attacks.csv", keys, [[r[k] for k in keys] for r in rows])
    for r in rows:
        print(f"{r['attack']:>5} eps={r['epsilon']:<6g} acc={r['accuracy']:.4f} "
              f"linf={r['mean_linf']:.4f} l2={r['mean_l2']:.3f} n={r['n']}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = config_from_args(args)
    report = run_experiment(config)
    print(f"{report.model} [{report.data_mode}] clean accuracy {report.clean_accuracy:.4f}")
    for r in report.attacks:
        print(f"  {r['attack']:>5} eps={r['epsilon']:<6g} accuracy {r['accuracy']:.4f}")
    if report.separability:
        print("  separability " + ", ".join(f"{k}={v:.4f}" for k, v in report.separability.items()))
    print(f"wrote {Path(config.output_dir) / 'report.json'}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    models = {}
    split = None
    for name, run in (("orig", args.orig_run), ("prop", args.prop_run)):
        _, model, s = load_run(run)
        if split is not None and not np.array_equal(s.test_index, split.test_index):
            raise ConfigError("the two runs use different test subsets")
        split = s
        models[name] = model
    n = min(args.samples, len(split.y_test))
    diag = diagnose_gradient_masking(models, split.x_test[:n], split.y_test[:n],
                                     eps_grid=args.eps, out_dir=args.out)
    for key, value in diag.checks.items():
        print(f"{key}: {value}")
    print(f"wrote diagnostics CSVs to {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = config_from_args(args)
    attack = parse_attack(args.attack[0])[0] if args.attack else None
    rows = ablate(config, attack=attack)
    for r in rows:
        extra = "".join(f" {k}={v:.4f}" for k, v in r.items() if k.endswith("_accuracy") and k != "clean_accuracy")
        print(f"learn_A={r['learn_A']!s:<5} learn_beta={r['learn_beta']!s:<5} clean={r['clean_accuracy']:.4f}{extra}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .plotting import render_run

    for run in args.runs:
        made = render_run(run)
        report = Path(run) / "report.json"
        if report.exists():
            data = json.loads(report.read_text())
            print(f"{run}: {data['model']} clean {data['clean_accuracy']:.4f}")
            for r in data.get("attacks", []):
                print(f"  {r['attack']:>5} eps={r['epsilon']:<6g} accuracy {r['accuracy']:.4f}")
        for path in made:
            print(f"  figure {path}")
        if not made and not report.exists():
            raise DataError(f"{run}: nothing to report")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rbfmap", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and save its checkpoint")
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="attack a trained model")
    add_config_flags(p)
    p.add_argument("--run", help="run directory written by train/evaluate")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="train or load, attack, score separability, write report")
    add_config_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("diagnose", help="gradient-masking symptom checks on an ORIG/PROP pair")
    p.add_argument("--orig-run", required=True)
    p.add_argument("--prop-run", required=True)
    p.add_argument("--eps", type=_float_list, default=list(EPS_GRID))
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("ablate", help="train PROP under every {learn_A, learn_beta} setting")
    add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render figures and summaries from run directories")
    p.add_argument("runs", nargs="+")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except json.JSONDecodeError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
