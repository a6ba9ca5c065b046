"""Config-driven end-to-end experiment runs.

A single JSON document describes an evaluation: which backbone to
pretrain, which bundled tasks to target, the hyperparameter grid, the
methods to compare, CV folds, and the replication seeds.  The same entry
points back the CLI, so a config file plus a seed reproduces every
artifact byte-for-byte.
"""

from __future__ import annotations

import copy
import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import backbones as bb
from . import harness, reports, synth
from .data import TrainConfig
from .errors import ConfigError
from .store import extract_to_store, read_store

DEFAULT_CONFIG = {
    "seed": 0,
    "backbone": {
        "arch": "mlp4",
        "source_examples": 4000,
        "steps": 2500,
        "lr": 0.05,
        "batch": 256,
        "capture": "post",
    },
    "tasks": list(synth.TASK_NAMES),
    "task_train_examples": 1000,
    "task_test_examples": 1000,
    "methods": ["lp", "h2t"],
    "grid": {
        "lrs": [0.5, 0.1],
        "steps": [500, 2000],
        "reg_coefs": [0.001, 1e-05],
        "target_sizes": [16, 64, 256],
        "fractions": list(harness.PAPER_FRACTION_GRID),
    },
    "cv_folds": 5,
    "seeds": [0, 1, 2],
    "jobs": 1,
}


def merge_config(base: dict, override: dict, path="") -> dict:
    """Recursive merge that rejects keys absent from the schema."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} expects an object")
            out[key] = merge_config(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        user = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return merge_config(DEFAULT_CONFIG, user)


def apply_override(config: dict, dotted: str, raw_value: str) -> dict:
    """Apply one --override key=value (dotted path, JSON-parsed value)."""
    keys = dotted.split(".")
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    patch: dict = value
    for key in reversed(keys):
        patch = {key: patch}
    return merge_config(config, patch)


def config_grid(config: dict) -> harness.HyperGrid:
    g = config["grid"]
    return harness.HyperGrid(lrs=tuple(g["lrs"]), steps=tuple(g["steps"]),
                             reg_coefs=tuple(g["reg_coefs"]),
                             target_sizes=tuple(g["target_sizes"]),
                             fractions=tuple(g["fractions"]))


def build_backbone(config: dict, out_dir: Path) -> bb.TrainedBackbone:
    """Pretrain (or reload) the configured backbone on the bundled source."""
    bc = config["backbone"]
    seed = int(config["seed"])
    cache = out_dir / f"backbone_{bc['arch']}_seed{seed}.h2tb"
    if cache.exists():
        return bb.load_file(cache)
    if bc["arch"] == "mlp4":
        source = synth.make_source(int(bc["source_examples"]), seed=seed)
        spec = bb.mlp4_spec(synth.INPUT_DIM, synth.SOURCE_CLASSES, bc["capture"])
    elif bc["arch"] == "smallconv":
        source = synth.make_image_source(int(bc["source_examples"]), seed=seed)
        spec = bb.smallconv_spec((12, 12, 3), source.num_classes, bc["capture"])
    else:
        raise ConfigError(f"unknown backbone arch {bc['arch']!r}")
    backbone = bb.pretrain(spec, source, TrainConfig(
        lr=float(bc["lr"]), steps=int(bc["steps"]), seed=seed,
        batch=int(bc["batch"])))
    bb.save_file(backbone, cache)
    return backbone


def task_stores(backbone, config: dict, task_name: str, out_dir: Path):
    """Extract (or reload) train/test activation stores for one task."""
    seed = int(config["seed"])
    task = synth.make_task(task_name, int(config["task_train_examples"]),
                           int(config["task_test_examples"]), seed=seed)
    stores = []
    for split, ds in (("train", task.train), ("test", task.test)):
        path = out_dir / f"store_{task_name}_{split}_seed{seed}.h2ta"
        if path.exists():
            stores.append(read_store(path))
        else:
            stores.append(extract_to_store(backbone, ds, path,
                                           dataset_id=task_name, split=split))
    return task, stores[0], stores[1]


def run_evaluation(config: dict, out_dir) -> dict:
    """Tasks x methods x seeds with CV model selection; emits results.csv
    plus accuracy charts.  Returns {"csv": path, "plots": [paths], ...}."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    backbone = build_backbone(config, out_dir)
    grid = config_grid(config)
    methods = list(config["methods"])
    seeds = tuple(int(s) for s in config["seeds"])
    folds = int(config["cv_folds"])

    def eval_task(name):
        task, train_store, test_store = task_stores(backbone, config, name, out_dir)
        return name, harness.evaluate_methods(
            backbone, task, train_store, test_store, grid,
            methods=methods, folds=folds, seeds=seeds)

    jobs = max(1, int(config["jobs"]))
    task_names = list(config["tasks"])
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            by_task = dict(pool.map(eval_task, task_names))
    else:
        by_task = dict(map(eval_task, task_names))

    rows = []
    for name in task_names:
        for method in methods:
            for run in by_task[name][method].seed_runs:
                rows.extend(reports.method_run_rows(name, run))
    csv_path = out_dir / "results.csv"
    reports.write_csv(rows, csv_path)

    chart = {}
    for method in methods:
        chart[method] = [(i, by_task[name][method].median_test_acc)
                         for i, name in enumerate(task_names)]
    acc_plot = out_dir / "accuracy_by_task.svg"
    reports.svg_line_chart(chart, acc_plot, title="median test accuracy",
                           xlabel="task index", ylabel="accuracy")

    medians = {f"{m}": float(np.median([by_task[t][m].median_test_acc
                                        for t in task_names]))
               for m in methods}
    bar_plot = out_dir / "method_medians.svg"
    reports.svg_bar_chart(medians, bar_plot, title="median accuracy over tasks",
                          ylabel="accuracy")
    return {"csv": csv_path, "plots": [acc_plot, bar_plot],
            "results": by_task}


def run_affinity(config: dict, out_dir) -> dict:
    """Domain affinity per task plus its rank correlation with the
    select-then-probe gain over the plain linear probe."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    backbone = build_backbone(config, out_dir)
    grid = config_grid(config)
    seeds = tuple(int(s) for s in config["seeds"])
    folds = int(config["cv_folds"])

    records = []
    gains = []
    for name in config["tasks"]:
        task, train_store, test_store = task_stores(backbone, config, name, out_dir)
        record = harness.domain_affinity(task, backbone, train_store,
                                         test_store, grid, folds, seeds)
        h2t = [harness.run_method("h2t", backbone, task, train_store,
                                  test_store, grid, folds, s).test_acc
               for s in seeds]
        gains.append(float(np.median(h2t)) - record.acc_linear)
        records.append(record)

    rows = [{"task": r.task, "method": "affinity", "seed": -1, "fold": -1,
             "val_acc": None, "test_acc": None, "lr": None, "steps": None,
             "reg": None, "target_size": None, "F": None,
             "flops_rel_ft": None, "storage_rel_ft": None,
             "storage_rel_lp": None,
             "acc_linear": r.acc_linear, "acc_scratch": r.acc_scratch,
             "affinity": r.affinity, "h2t_gain": g}
            for r, g in zip(records, gains)]
    columns = ("task", "acc_linear", "acc_scratch", "affinity", "h2t_gain")
    csv_path = out_dir / "affinity.csv"
    reports.write_csv(rows, csv_path, columns=columns)

    rho = harness.spearman([r.affinity for r in records], gains)
    (out_dir / "affinity_correlation.json").write_text(
        json.dumps({"spearman_affinity_vs_gain": rho}, indent=2) + "\n")
    return {"csv": csv_path, "records": records, "gains": gains,
            "spearman": rho}
