"""Command-line entry point: ``ssat <generate|attack|train|matrix|report>``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from . import harness
from .attack import AttackType
from .errors import CheckpointError, IngestError, NonFiniteError, ScenarioError
from .predictor import load_checkpoint
from .scenario import TEMPLATES, ingest_scenes

EXIT_OK, EXIT_USAGE, EXIT_ARTIFACT, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("ssat")


class UsageError(Exception):
    pass


def _values(args) -> dict[str, str]:
    values: dict[str, str] = {}
    if getattr(args, "preset", None) == "benchmark":
        values.update(cfgmod.BENCHMARK)
    if args.config:
        try:
            values.update(cfgmod.load_config(args.config))
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        values[key.strip()] = value.strip()
    if args.seed is not None:
        values["seed"] = str(args.seed)
        for key in ("train.seed", "attack.seed", "model.seed"):
            values.pop(key, None)
    return values


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    return out


def cmd_generate(args) -> int:
    if args.count <= 0:
        raise UsageError("--count must be positive")
    templates = tuple(t.strip() for t in args.templates.split(",")) if args.templates else TEMPLATES
    weights = [float(w) for w in args.weights.split(",")] if args.weights else None
    if weights is not None and len(weights) != len(templates):
        raise UsageError("--weights needs one value per template")
    out = Path(args.out)
    path = out if out.suffix == ".csv" else out / "scenes.csv"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        counts = harness.generate_file(args.count, args.seed or 0, path, templates, weights)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc}") from exc
    for t, n in counts.items():
        print(f"{t}: {n}")
    print(f"wrote {args.count} scenes to {path}")
    return EXIT_OK


def cmd_attack(args) -> int:
    values = _values(args)
    atk_cfg = cfgmod.attack_config(values, **({"seed": args.seed} if args.seed is not None else {}))
    model = load_checkpoint(args.model)
    scenes = ingest_scenes(args.scenes)
    attack = AttackType.parse(args.attack)
    out = _out_dir(args)
    csv_path = out / f"attack-{attack.name}.csv"
    res = harness.attack_scenes(model, scenes, attack, atk_cfg, csv_path,
                                plot_dir=out / "plots" if args.plots else None)
    print(f"{attack.name}: benign ADE {res.mean(None, 'ade'):.3f}  attacked ADE {res.mean(attack.name, 'ade'):.3f}"
          f"  headline {res.headline(attack):.3f}")
    print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_train(args) -> int:
    values = _values(args)
    values["experiment.method"] = args.method
    for key, attr in (("data.train", "train_data"), ("data.test", "test_data"), ("experiment.init", "init"),
                      ("experiment.train_attack", "train_attack")):
        if getattr(args, attr):
            values[key] = getattr(args, attr)
    try:
        spec = harness.ExperimentSpec.from_config(values)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(args)
    result = harness.run_experiment(spec, out)
    for row in harness.eval_rows(result.before, result.after, spec.eval_attacks):
        print("  ".join(row))
    print(f"wrote run directory {out}")
    return EXIT_OK


def cmd_matrix(args) -> int:
    matrix = harness.build_matrix(args.runs)
    out = _out_dir(args)
    harness.write_matrix(matrix, out / "matrix.csv")
    sys.stdout.write(matrix.render())
    for missing in matrix.missing:
        print(f"missing run: {missing}", file=sys.stderr)
    return EXIT_ARTIFACT if matrix.missing else EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run)
    try:
        config, rows = harness.read_run(run)
    except FileNotFoundError as exc:
        raise CheckpointError(f"incomplete run directory {run}: {exc}") from exc
    print(f"method {config.get('experiment.method')}  trained on {config.get('experiment.train_attack')}")
    losses = [k.split(".", 1)[1] for k, v in sorted(config.items()) if k.startswith("losses.") and v == "on"]
    print(f"active losses: {', '.join(losses)}")
    print(f"{'metric':<14}{'attack':<24}{'before':>10}{'after':>10}")
    for r in rows:
        print(f"{r['metric']:<14}{r['attack']:<24}{float(r['before']):>10.3f}{float(r['after']):>10.3f}")
    metrics = run / "metrics.csv"
    if metrics.exists():
        with open(metrics, newline="", encoding="utf-8") as fh:
            epochs = list(csv.DictReader(fh))
        for e in epochs:
            print(f"epoch {e['epoch']}: traj {float(e['loss_traj']):.4f}  success {e['n_success']}/{e['n_samples']}"
                  f"  flipped {e['n_flipped']}  updates {e['n_updates']}")
    return EXIT_OK


GLOBAL_DEFAULTS = {"seed": None, "config": None, "out": ".", "set": None, "verbose": False}


def build_parser() -> argparse.ArgumentParser:
    # globals are accepted before or after the subcommand; SUPPRESS keeps the
    # subparser from clobbering a value given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, help="seed for data, model, training and attacks")
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--out", help="output directory (or .csv path for generate)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ssat", parents=[common],
                                     description="Adversarial attacks and adversarial training with a "
                                                 "semantic latent space for trajectory prediction.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic scene file")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--templates", help=f"comma-separated subset of {','.join(TEMPLATES)}")
    g.add_argument("--weights", help="comma-separated template weights")
    g.set_defaults(func=cmd_generate)

    a = sub.add_parser("attack", parents=[common], help="attack a checkpoint on a scene file")
    a.add_argument("--model", required=True, help="checkpoint path")
    a.add_argument("--scenes", required=True, help="scene file")
    a.add_argument("--attack", default="ade", help="ade, lateral-right, lateral-left, longitudinal-forward, ...")
    a.add_argument("--plots", action="store_true", help="write one SVG overlay per scene")
    a.set_defaults(func=cmd_attack)

    t = sub.add_parser("train", parents=[common], help="run one training experiment")
    t.add_argument("--method", default="ssat", choices=harness.METHODS)
    t.add_argument("--train-attack", dest="train_attack")
    t.add_argument("--train-data", dest="train_data", help="scene file (default: generated)")
    t.add_argument("--test-data", dest="test_data", help="scene file (default: generated)")
    t.add_argument("--init", help="start from this checkpoint instead of pre-training")
    t.add_argument("--preset", choices=("benchmark",), help="start from a built-in config")
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("matrix", parents=[common], help="collect run directories into a results matrix")
    m.add_argument("runs", nargs="+")
    m.set_defaults(func=cmd_matrix)

    r = sub.add_parser("report", parents=[common], help="summarize one run directory")
    r.add_argument("run")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in GLOBAL_DEFAULTS.items():
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ssat {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"ssat {args.command}: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (IngestError, ScenarioError) as exc:
        print(f"ssat {args.command}: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except NonFiniteError as exc:
        print(f"ssat {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"ssat {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
