"""Command-line entry point.

Every subcommand is a thin wrapper over the library: the same config
document drives both, so CLI results are reproducible through the API.
Logs go to stderr, data to stdout and files.

Exit codes: 0 success, 1 usage, 2 config, 3 data/format, 4 numeric.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import experiments, harness
from .errors import (ConfigError, DataError, DimensionError, FormatError,
                     NumericError, SelectionError, ToolkitError)
from .selector import serialize_selection
from .store import validate_store

EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _flatten(d, prefix=""):
    for key, value in d.items():
        path = f"{prefix}.{key}" if prefix else key
        if isinstance(value, dict):
            yield from _flatten(value, path)
        else:
            yield path, value


def _config_key_help() -> str:
    lines = ["config keys (with defaults):"]
    for path, value in _flatten(experiments.DEFAULT_CONFIG):
        lines.append(f"  {path} = {json.dumps(value)}")
    return "\n".join(lines)


def build_parser() -> _Parser:
    parser = _Parser(
        prog="h2t",
        description="Frozen-backbone transfer learning from every layer: "
                    "extract, select, probe, and compare against baselines.",
        epilog=_config_key_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (defaults apply otherwise)")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--jobs", type=int, default=None,
                       help="parallel harness jobs (default 1, deterministic)")
        p.add_argument("--out-dir", default="h2t_out", help="artifact directory")
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VALUE",
                       help="override a config key (dotted path, repeatable)")
        return p

    common(sub.add_parser("pretrain", help="pretrain the configured backbone"))
    p = common(sub.add_parser("extract", help="dump tap activations to stores"))
    p.add_argument("--task", action="append", default=[],
                   help="task name (repeatable; default: config tasks)")
    p = common(sub.add_parser("probe", help="linear probe on the embedding"))
    p.add_argument("--task", action="append", default=[])
    p = common(sub.add_parser("head2toe",
                              help="select features from all layers and probe"))
    p.add_argument("--task", action="append", default=[])
    p = common(sub.add_parser("finetune", help="fine-tune the whole backbone"))
    p.add_argument("--task", action="append", default=[])
    common(sub.add_parser("evaluate",
                          help="full methods x tasks x seeds evaluation"))
    common(sub.add_parser("affinity",
                          help="domain affinity (linear minus scratch) per task"))
    p = common(sub.add_parser("report", help="re-render charts from a results CSV"))
    p.add_argument("--results", required=True, help="path to results.csv")
    p = sub.add_parser("validate-store", help="check a store file end to end")
    p.add_argument("path", help="store file to validate")
    return parser


def _load_config(args) -> dict:
    config = (experiments.load_config(args.config) if args.config
              else json.loads(json.dumps(experiments.DEFAULT_CONFIG)))
    for item in args.override:
        if "=" not in item:
            raise UsageError(f"--override needs KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        config = experiments.apply_override(config, key, value)
    if args.seed is not None:
        config["seed"] = int(args.seed)
    if args.jobs is not None:
        config["jobs"] = int(args.jobs)
    return config


def _emit(line: str):
    sys.stdout.write(line + "\n")


def _log(line: str):
    sys.stderr.write(line + "\n")


def _cmd_pretrain(args) -> int:
    config = _load_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    backbone = experiments.build_backbone(config, out_dir)
    _emit(f"backbone arch={config['backbone']['arch']} "
          f"seed={config['seed']} "
          f"source_accuracy={backbone.meta['source_accuracy']:.6f}")
    return 0


def _tasks_from(args, config):
    return args.task if args.task else list(config["tasks"])


def _cmd_extract(args) -> int:
    config = _load_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    backbone = experiments.build_backbone(config, out_dir)
    for name in _tasks_from(args, config):
        _, train_store, test_store = experiments.task_stores(
            backbone, config, name, out_dir)
        _emit(f"extracted task={name} train_examples="
              f"{train_store.manifest.example_count} "
              f"test_examples={test_store.manifest.example_count}")
    return 0


def _run_single_method(args, method: str) -> int:
    config = _load_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    backbone = experiments.build_backbone(config, out_dir)
    grid = experiments.config_grid(config)
    seeds = tuple(int(s) for s in config["seeds"])
    _emit("task,method,seed,test_acc")
    for name in _tasks_from(args, config):
        task, train_store, test_store = experiments.task_stores(
            backbone, config, name, out_dir)
        for seed in seeds:
            run = harness.run_method(method, backbone, task, train_store,
                                     test_store, grid,
                                     folds=int(config["cv_folds"]), seed=seed)
            if run.selection is not None and seed == seeds[0]:
                (out_dir / f"selection_{name}.bin").write_bytes(
                    serialize_selection(run.selection))
            _emit(f"{name},{method},{seed},{run.test_acc:.6f}")
    return 0


def _cmd_evaluate(args) -> int:
    config = _load_config(args)
    out = experiments.run_evaluation(config, args.out_dir)
    _emit(str(out["csv"]))
    for p in out["plots"]:
        _log(f"wrote {p}")
    return 0


def _cmd_affinity(args) -> int:
    config = _load_config(args)
    out = experiments.run_affinity(config, args.out_dir)
    _emit(str(out["csv"]))
    _emit(f"spearman_affinity_vs_gain={out['spearman']:.6f}")
    return 0


def _cmd_report(args) -> int:
    from . import reports
    rows = reports.read_csv(args.results)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    finals = [r for r in rows if r.get("fold") == "-1" and r.get("test_acc")]
    if not finals:
        raise DataError(f"no summary rows in {args.results}")
    by_method = {}
    for r in finals:
        by_method.setdefault(r["method"], []).append(float(r["test_acc"]))
    medians = {m: float(np.median(v)) for m, v in by_method.items()}
    path = out_dir / "method_medians.svg"
    reports.svg_bar_chart(medians, path, title="median accuracy over tasks",
                          ylabel="accuracy")
    _emit(str(path))
    return 0


def _cmd_validate_store(args) -> int:
    report = validate_store(args.path)
    if report.ok:
        _emit(f"{args.path}: ok")
        return 0
    for issue in report.issues:
        _emit(f"{args.path}: {issue}")
    detail = next((i for i in report.issues if i.layer is not None),
                  report.issues[0])
    raise DataError(f"store failed validation: {detail}")


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "pretrain":
            return _cmd_pretrain(args)
        if args.command == "extract":
            return _cmd_extract(args)
        if args.command == "probe":
            return _run_single_method(args, "lp")
        if args.command == "head2toe":
            return _run_single_method(args, "h2t")
        if args.command == "finetune":
            return _run_single_method(args, "ft")
        if args.command == "evaluate":
            return _cmd_evaluate(args)
        if args.command == "affinity":
            return _cmd_affinity(args)
        if args.command == "report":
            return _cmd_report(args)
        if args.command == "validate-store":
            return _cmd_validate_store(args)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as e:
        _log(f"error code={EXIT_USAGE} kind=usage: {e}")
        return EXIT_USAGE
    except (ConfigError, SelectionError) as e:
        _log(f"error code={EXIT_CONFIG} kind={type(e).__name__}: {_one_line(e)}")
        return EXIT_CONFIG
    except (DataError, FormatError, DimensionError) as e:
        _log(f"error code={EXIT_DATA} kind={type(e).__name__}: {_one_line(e)}")
        return EXIT_DATA
    except NumericError as e:
        _log(f"error code={EXIT_NUMERIC} kind={type(e).__name__}: {_one_line(e)}")
        return EXIT_NUMERIC
    except ToolkitError as e:
        _log(f"error code={EXIT_DATA} kind={type(e).__name__}: {_one_line(e)}")
        return EXIT_DATA


def _one_line(e: Exception) -> str:
    return " ".join(str(e).split())


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
