"""Command-line entry point.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
Diagnostics and the resolved config go to stderr; stdout only lists the
paths of produced artifacts. Flags override config-file fields, which
override built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import harness
from .data import FORMATS, SyntheticSpec, generate_synthetic_dataset, save_dataset
from .zoo import ZooTrainConfig, save_zoo, train_zoo

log = logging.getLogger("peas")

COMMANDS = ("train-zoo", "gen-data", "attack", "peas", "ablate", "sweep-n", "sweep-eps", "sweep-aug", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; the contract here is 1
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _floats(text):
    return [float(eval_fraction(v)) for v in text.split(",") if v]


def _ints(text):
    return [int(v) for v in text.split(",") if v]


def eval_fraction(text: str) -> float:
    """``"2/255"`` or ``"0.0078"``."""
    text = str(text).strip()
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def _add_experiment_flags(p):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--zoo-dir", help="zoo checkpoint directory (trained and saved there if missing)")
    p.add_argument("--output-dir", help="parent directory for timestamped run directories")
    p.add_argument("--pool-size", type=int)
    p.add_argument("--epsilon", type=eval_fraction, help="L-inf budget, e.g. 2/255")
    p.add_argument("-n", "--n", type=int, dest="n", help="exploration size")
    p.add_argument("--sampling", choices=("S1", "S2", "noise"))
    p.add_argument("--seed", type=int, dest="master_seed", help="master seed")
    p.add_argument("--set", action="append", default=[], metavar="KEY=JSON", help="override any config field")
    p.add_argument("--workers", type=int, help="thread pool size (default: available CPUs)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="peas", description="Perceptual exploration transfer attacks on a desk-scale model zoo.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write the synthetic pattern dataset to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shape", default="3,64,64", help="C,H,W")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=300)
    p.add_argument("--test-per-class", type=int, default=60)
    p.add_argument("--format", choices=FORMATS, default="raw-tensor-dir")

    p = sub.add_parser("train-zoo", help="train and save the five-model zoo")
    _add_experiment_flags(p)
    p.add_argument("--min-accuracy", type=float)

    p = sub.add_parser("attack", help="base attack from x on every role pair (no exploration)")
    _add_experiment_flags(p)
    p.add_argument("--algorithm", choices=("pgd", "fgsm", "timi"))

    p = sub.add_parser("peas", help="baselines and PEAS on every role pair")
    _add_experiment_flags(p)
    p.add_argument("--strategies", help="comma-separated selection strategies")

    p = sub.add_parser("ablate", help="every selection strategy on every role pair")
    _add_experiment_flags(p)

    p = sub.add_parser("sweep-n", help="ASR against exploration size")
    _add_experiment_flags(p)
    p.add_argument("--values", type=_ints, help="comma-separated n grid")

    p = sub.add_parser("sweep-eps", help="ASR against epsilon")
    _add_experiment_flags(p)
    p.add_argument("--values", type=_floats, help="comma-separated epsilon grid, e.g. 1/255,2/255")

    p = sub.add_parser("sweep-aug", help="ASR with one augmentation at a time")
    _add_experiment_flags(p)
    p.add_argument("--values", type=_ints, help="comma-separated n grid")

    p = sub.add_parser("report", help="summarize a finished run directory")
    p.add_argument("run_dir")
    return parser


def resolve_config(args) -> harness.ExperimentConfig:
    """defaults < config file < flags."""
    data = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise harness.ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise harness.ConfigError(f"{path}: top level must be an object")
    for key in ("zoo_dir", "output_dir", "pool_size", "epsilon", "n", "sampling", "master_seed", "workers"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=JSON, got {item!r}")
        try:
            data[key] = json.loads(raw)
        except json.JSONDecodeError:
            data[key] = raw
    if getattr(args, "strategies", None):
        data["strategies"] = args.strategies.split(",")
    if getattr(args, "algorithm", None):
        data["base_attack"] = {**data.get("base_attack", {"steps": 10}), "algorithm": args.algorithm}
    data.setdefault("workers", os.cpu_count() or 1)
    return harness.ExperimentConfig.from_dict(data)


def _announce(config):
    print(json.dumps(config.to_dict(), indent=1, sort_keys=True), file=sys.stderr)
    print(f"master seed: {config.master_seed}  config hash: {config.hash()}", file=sys.stderr)


def _finish(report, config) -> Path:
    out = harness.run_directory(config)
    harness.write_report(report, out)
    for kind, rows in report.aggregates.items():
        for a in rows:
            print(
                f"{kind}: {a['strategy']:<26} {a['sampling']:<10} {a['attack']:<5} eps={a['epsilon']:.4f} n={a['n']:<4}"
                f" macro ASR {a['macro_asr']:.3f}  micro ASR {a['micro_asr']:.3f}",
                file=sys.stderr,
            )
    print(out)
    return out


def cmd_gen_data(args):
    try:
        shape = tuple(int(v) for v in args.shape.split(","))
    except ValueError:
        raise UsageError(f"--shape expects C,H,W, got {args.shape!r}") from None
    if len(shape) != 3:
        raise UsageError(f"--shape expects C,H,W, got {args.shape!r}")
    spec = SyntheticSpec(args.classes, shape, args.per_class, args.seed, args.test_per_class)
    print(json.dumps({"seed": args.seed, **{k: getattr(spec, k) for k in ("num_classes", "shape", "per_class", "test_per_class")}}), file=sys.stderr)
    print(f"master seed: {args.seed}", file=sys.stderr)
    out = save_dataset(generate_synthetic_dataset(spec), args.out, args.format)
    print(out)


def cmd_train_zoo(args):
    config = resolve_config(args)
    if not config.zoo_dir:
        raise UsageError("train-zoo needs --zoo-dir (or zoo_dir in the config)")
    _announce(config)
    exp_data = harness.load_experiment_data(config)
    train_cfg = dict(config.zoo_train)
    if args.min_accuracy is not None:
        train_cfg["min_accuracy"] = args.min_accuracy
    zoo = train_zoo(config.profile_obj, exp_data, ZooTrainConfig(**train_cfg))
    for arch, acc in zoo.accuracies().items():
        print(f"{arch}: held-out accuracy {acc:.3f}", file=sys.stderr)
    print(save_zoo(zoo, config.zoo_dir))


def cmd_experiment(args):
    config = resolve_config(args)
    if args.command == "ablate":
        from .core import STRATEGIES

        config.strategies = list(STRATEGIES)
    _announce(config)
    if args.command == "attack":
        report = harness.run_attack_only(config)
    elif args.command in ("peas", "ablate"):
        report = harness.run_pairwise(config)
    elif args.command == "sweep-n":
        report = harness.sweep_n(config, args.values)
    elif args.command == "sweep-eps":
        report = harness.sweep_epsilon(config, args.values)
    else:
        if args.values:
            config.aug_n_values = args.values
        report = harness.augmentation_effectiveness(config)
    _finish(report, config)


def cmd_report(args):
    run = Path(args.run_dir)
    if not (run / "report.json").exists():
        raise UsageError(f"{run} is not a run directory (no report.json)")
    report = harness.load_report(run)
    lines = ["kind,strategy,sampling,attack,epsilon,n,pairs,macro_asr,micro_asr"]
    for kind, rows in sorted(report.aggregates.items()):
        for a in rows:
            lines.append(
                f"{kind},{a['strategy']},{a['sampling']},{a['attack']},{a['epsilon']!r},{a['n']},{a['pairs']},{a['macro_asr']!r},{a['micro_asr']!r}"
            )
    out = run / "summary.csv"
    out.write_text("\n".join(lines) + "\n")
    print("\n".join(lines), file=sys.stderr)
    print(f"master seed: {report.metadata.get('master_seed')}", file=sys.stderr)
    print(out)


HANDLERS = {"gen-data": cmd_gen_data, "train-zoo": cmd_train_zoo, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        if not argv:
            raise UsageError(parser.format_help())
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        HANDLERS.get(args.command, cmd_experiment)(args)
        return 0
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
