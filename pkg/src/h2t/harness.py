"""Experiment orchestration.

Everything an evaluation needs around the probes themselves: k-fold
cross-validation over hyperparameter grids, seed replication with median
reporting, the linear-vs-scratch domain-affinity metric, the
single-extra-layer oracle and second-backbone control, cross-task
transfer of selections, data-fraction subsampling, offset-window and
target-size sweeps, selection-overlap statistics, Spearman rank
correlations, and cost reports.

Grid points, folds, and seeds are independent read-only jobs; results
merge in a fixed order (grid index, fold, seed) so reruns are
byte-identical.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import backbones as bb
from . import probes as pr
from .costmodel import (CostInputs, CostReport, backbone_forward_flops,
                        backbone_param_count, cost_report)
from .data import SplitTask, TrainConfig
from .errors import ConfigError, DataError, ToolkitError
from .features import AggregationConfig, build_h_all
from .selector import (SelectionResult, group_norms, layerwise_scores,
                       select_fraction, select_layerwise, select_offset_window)
from .store import Store

PAPER_FRACTION_GRID = (0.0005, 0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1)

METHODS = ("lp", "h2t", "all_l1", "all_l2", "all_l21", "scratch", "ft",
           "h2t_ft", "h2t_ft_plus")


@dataclass(frozen=True)
class HyperGrid:
    """Search space; every axis must be nonempty.

    Desk defaults: probes train on unit-normalized features whose entries
    are tiny, so the learning rates run hotter (and the step counts longer)
    than the published full-scale grid to reach the same effective budget.
    """

    lrs: tuple = (0.5, 0.1)
    steps: tuple = (500, 2000)
    reg_coefs: tuple = (1e-3, 1e-5)
    target_sizes: tuple = (16, 64, 256)
    fractions: tuple = PAPER_FRACTION_GRID

    def __post_init__(self):
        for name in ("lrs", "steps", "reg_coefs", "target_sizes", "fractions"):
            if not getattr(self, name):
                raise ConfigError(f"hyper grid axis {name!r} is empty")


def paper_grid() -> HyperGrid:
    """The published full-scale grid (target sizes sized for a ResNet-50)."""
    return HyperGrid(lrs=(0.1, 0.01), steps=(500, 5000),
                     reg_coefs=(1e-3, 1e-5),
                     target_sizes=(1024, 16384, 40000),
                     fractions=PAPER_FRACTION_GRID)


def desk_grid() -> HyperGrid:
    return HyperGrid()


@dataclass
class TaskResult:
    task: str
    method: str
    seed_runs: list                       # one MethodRun per seed
    median_test_acc: float = field(init=False)
    std_test_acc: float = field(init=False)

    def __post_init__(self):
        if not self.seed_runs:
            raise ConfigError("TaskResult needs at least one seed run")
        accs = np.array([r.test_acc for r in self.seed_runs])
        self.median_test_acc = float(np.median(accs))
        self.std_test_acc = float(accs.std())


@dataclass
class AffinityRecord:
    task: str
    acc_linear: float
    acc_scratch: float

    @property
    def affinity(self) -> float:
        return self.acc_linear - self.acc_scratch


@dataclass
class MethodRun:
    """One task x method x seed evaluation."""

    method: str
    seed: int
    chosen: dict
    cv_score: float
    fold_val_accs: list
    test_acc: float
    selection: SelectionResult | None = None
    cost: CostReport | None = None


# ---------------------------------------------------------------------------
# splitting, sampling, statistics
# ---------------------------------------------------------------------------

def kfold_split(n: int, k: int, seed: int):
    """k disjoint (train_idx, val_idx) pairs partitioning range(n); fold
    sizes differ by at most one; deterministic per seed."""
    if k < 2:
        raise DataError(f"need k >= 2 folds, got {k}")
    if n < k:
        raise DataError(f"cannot split {n} examples into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)
    out = []
    for i in range(k):
        val = np.sort(folds[i])
        train = np.sort(np.concatenate([folds[j] for j in range(k) if j != i]))
        out.append((train, val))
    return out


def subsample_task(task: SplitTask, fraction: float, seed: int = 0,
                   budget: int = 1000) -> SplitTask:
    """Shrink the train split to int(budget * fraction / C) shots per class
    (never below one shot); the test split is untouched."""
    if not 0 < fraction <= 1:
        raise DataError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return task
    shots = max(1, int(budget * fraction / task.num_classes))
    rng = np.random.default_rng(seed)
    keep = []
    for cls in range(task.num_classes):
        idx = np.nonzero(task.train.y == cls)[0]
        take = min(shots, len(idx))
        keep.extend(rng.permutation(idx)[:take].tolist())
    keep = np.sort(np.array(keep, dtype=np.int64))
    return SplitTask(task.train.subset(keep), task.test,
                     f"{task.name}@{fraction}")


def _average_ranks(a: np.ndarray) -> np.ndarray:
    order = np.argsort(a, kind="stable")
    ranks = np.empty(len(a), dtype=np.float64)
    ranks[order] = np.arange(1, len(a) + 1, dtype=np.float64)
    _, inverse, counts = np.unique(a, return_inverse=True, return_counts=True)
    sums = np.zeros(counts.shape, dtype=np.float64)
    np.add.at(sums, inverse, ranks)
    return sums[inverse] / counts[inverse]


def spearman(x, y) -> float:
    """Rank correlation with average ranks for ties; needs length >= 3."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError(f"spearman needs equal-length vectors, got {x.shape} / {y.shape}")
    if len(x) < 3:
        raise DataError("spearman needs at least 3 points")
    rx, ry = _average_ranks(x), _average_ranks(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0:
        return 0.0
    return float(np.clip((rx * ry).sum() / denom, -1.0, 1.0))


def selection_overlap(a: SelectionResult, b: SelectionResult) -> float:
    """Fraction of kept features shared between two equal-k selections."""
    inter = int((a.bitmap & b.bitmap).sum())
    denom = max(a.k, b.k)
    return inter / denom if denom else 0.0


def overlap_matrix(selections: dict) -> tuple:
    """Mean pairwise overlap between groups of selections.

    ``selections`` maps a name (task) to a list of SelectionResults (one
    per seed).  Diagonal entries average distinct same-task pairs."""
    names = sorted(selections)
    m = np.zeros((len(names), len(names)))
    for i, a in enumerate(names):
        for j, b in enumerate(names):
            pairs = [(sa, sb) for ai, sa in enumerate(selections[a])
                     for bi, sb in enumerate(selections[b])
                     if not (i == j and ai == bi)]
            if pairs:
                m[i, j] = float(np.mean([selection_overlap(sa, sb)
                                         for sa, sb in pairs]))
    return names, m


# ---------------------------------------------------------------------------
# per-method grid evaluation
# ---------------------------------------------------------------------------

def _store_bundle_cache(store: Store, grid: HyperGrid, layers=None):
    cache = {}
    for tsize in grid.target_sizes:
        cfg = AggregationConfig(target_size=int(tsize))
        cache[tsize] = build_h_all(store, cfg, layers)
    return cache


def _canonical_target_sizes(bundles: dict) -> list:
    """Target sizes whose bundles are actually distinct.

    Flat layers ignore the per-layer budget, so several target sizes can
    produce byte-identical feature matrices; evaluating one of each class
    is enough (ties already resolve to the earliest grid point, so the
    chosen hyperparameters are unchanged)."""
    seen = set()
    keep = []
    for tsize, bundle in bundles.items():
        key = hashlib.sha1(bundle.matrix.tobytes()).hexdigest()
        if key not in seen:
            seen.add(key)
            keep.append(tsize)
    return keep


def _train_cfg(lr, steps, seed) -> TrainConfig:
    return TrainConfig(lr=float(lr), steps=int(steps), seed=seed)


def _fit_probe(matrix, labels, num_classes, reg, cfg, val=None, test=None):
    return pr.train_head(matrix, labels, num_classes, reg, cfg, val=val, test=test)


def run_method(method: str, backbone: bb.TrainedBackbone, task: SplitTask,
               train_store: Store, test_store: Store, grid: HyperGrid,
               folds: int = 5, seed: int = 0,
               h2t_run: MethodRun | None = None) -> MethodRun:
    """Cross-validate one method's grid on one task, retrain at the chosen
    point, and report its test accuracy.

    Grid points are scored by mean validation accuracy over the folds;
    ties resolve to the earliest point in deterministic grid order.
    Training failures mark the point as skipped; if every point fails the
    harness gives up loudly.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r} (known: {METHODS})")
    if method in ("h2t_ft", "h2t_ft_plus") and h2t_run is None:
        raise ConfigError(f"{method} needs the finished h2t run")
    n = len(task.train)
    splits = kfold_split(n, folds, seed)
    y = task.train.y

    def cv_select(candidates, evaluate):
        """evaluate(combo, train_idx, val_idx) -> val accuracy."""
        best = None
        fold_accs_best = None
        for ci, combo in enumerate(candidates):
            accs = []
            failed = False
            for train_idx, val_idx in splits:
                try:
                    accs.append(evaluate(combo, train_idx, val_idx))
                except ToolkitError:
                    failed = True
                    break
            if failed:
                continue
            score = float(np.mean(accs))
            if best is None or score > best[0]:
                best = (score, ci, combo)
                fold_accs_best = accs
        if best is None:
            raise ConfigError(f"every {method} grid point failed on {task.name}")
        return best, fold_accs_best

    if method == "lp":
        emb_cfg = AggregationConfig()
        bundle = build_h_all(train_store, emb_cfg, ["embedding"])
        test_bundle = build_h_all(test_store, emb_cfg, ["embedding"])
        candidates = [{"lr": lr, "steps": s}
                      for lr in grid.lrs for s in grid.steps]

        def evaluate(combo, tr, va):
            head = _fit_probe(bundle.matrix[tr], y[tr], task.num_classes,
                              pr.RegSpec(), _train_cfg(combo["lr"], combo["steps"], seed),
                              val=(bundle.matrix[va], y[va]))
            return head.val_acc

        (score, _, chosen), fold_accs = cv_select(candidates, evaluate)
        final = _fit_probe(bundle.matrix, y, task.num_classes, pr.RegSpec(),
                           _train_cfg(chosen["lr"], chosen["steps"], seed),
                           test=(test_bundle.matrix, test_bundle.labels))
        return MethodRun(method, seed, chosen, score, fold_accs, final.test_acc)

    if method in ("all_l1", "all_l2", "all_l21"):
        kind = method.split("_")[1]
        bundles = _store_bundle_cache(train_store, grid)
        test_bundles = _store_bundle_cache(test_store, grid)
        tsizes = _canonical_target_sizes(bundles)
        candidates = [{"lr": lr, "steps": s, "reg": c, "target_size": t}
                      for lr in grid.lrs for s in grid.steps
                      for c in grid.reg_coefs for t in tsizes]

        def evaluate(combo, tr, va):
            m = bundles[combo["target_size"]].matrix
            head = _fit_probe(m[tr], y[tr], task.num_classes,
                              pr.RegSpec(kind, combo["reg"]),
                              _train_cfg(combo["lr"], combo["steps"], seed),
                              val=(m[va], y[va]))
            return head.val_acc

        (score, _, chosen), fold_accs = cv_select(candidates, evaluate)
        m = bundles[chosen["target_size"]].matrix
        tm = test_bundles[chosen["target_size"]]
        final = _fit_probe(m, y, task.num_classes,
                           pr.RegSpec(kind, chosen["reg"]),
                           _train_cfg(chosen["lr"], chosen["steps"], seed),
                           test=(tm.matrix, tm.labels))
        return MethodRun(method, seed, chosen, score, fold_accs, final.test_acc)

    if method == "h2t":
        return _run_h2t(backbone, task, train_store, test_store, grid,
                        splits, seed)

    if method in ("scratch", "ft"):
        candidates = [{"lr": lr, "steps": s}
                      for lr in grid.lrs for s in grid.steps]

        def evaluate(combo, tr, va):
            fold_task = SplitTask(task.train.subset(tr), task.train.subset(va),
                                  task.name)
            cfg = _train_cfg(combo["lr"], combo["steps"], seed)
            if method == "scratch":
                return pr.scratch_train(backbone.spec, fold_task, cfg).test_acc
            return pr.fine_tune(backbone, fold_task, cfg)[1].test_acc

        (score, _, chosen), fold_accs = cv_select(candidates, evaluate)
        cfg = _train_cfg(chosen["lr"], chosen["steps"], seed)
        if method == "scratch":
            final = pr.scratch_train(backbone.spec, task, cfg)
        else:
            final = pr.fine_tune(backbone, task, cfg)[1]
        return MethodRun(method, seed, chosen, score, fold_accs, final.test_acc)

    # h2t_ft / h2t_ft_plus: fine-tune under the h2t run's selection,
    # searching lr/steps for the fine-tuning phase only.
    h2t_cfg = pr.Head2ToeConfig(
        aggregation=AggregationConfig(target_size=int(h2t_run.chosen["target_size"])),
        reg_coef=h2t_run.chosen["reg"], fraction=h2t_run.chosen["fraction"],
        train=_train_cfg(h2t_run.chosen["lr"], h2t_run.chosen["steps"], seed))
    bundle = build_h_all(train_store, h2t_cfg.aggregation)
    test_bundle = build_h_all(test_store, h2t_cfg.aggregation)
    selection = h2t_run.selection
    candidates = [{"lr": lr, "steps": s} for lr in grid.lrs for s in grid.steps]

    def evaluate(combo, tr, va):
        fold_task = SplitTask(task.train.subset(tr), task.train.subset(va),
                              task.name)
        head = pr.probe_selected(
            FoldBundle(bundle.matrix[tr], bundle.labels[tr]), selection, h2t_cfg)
        _, out = pr.head2toe_ft(backbone, selection, head, fold_task, h2t_cfg,
                                _train_cfg(combo["lr"], combo["steps"], seed))
        return out.test_acc

    (score, _, chosen), fold_accs = cv_select(candidates, evaluate)
    head = pr.probe_selected(bundle, selection, h2t_cfg,
                             test=(test_bundle.matrix, test_bundle.labels))
    _, final = pr.head2toe_ft(backbone, selection, head, task, h2t_cfg,
                              _train_cfg(chosen["lr"], chosen["steps"], seed))
    ft_run = MethodRun("h2t_ft", seed, {**h2t_run.chosen, **chosen}, score,
                       fold_accs, final.test_acc, selection=selection)
    if method == "h2t_ft":
        return ft_run

    # validation gate: frozen probe vs fine-tuned, tie -> frozen
    if ft_run.cv_score > h2t_run.cv_score:
        winner = ft_run
    else:
        winner = h2t_run
    return MethodRun("h2t_ft_plus", seed, dict(winner.chosen), winner.cv_score,
                     winner.fold_val_accs, winner.test_acc,
                     selection=winner.selection)


class FoldBundle:
    """Duck-typed (matrix, labels) view used for fold-restricted probing."""

    def __init__(self, matrix, labels):
        self.matrix = matrix
        self.labels = labels
        self.d_all = matrix.shape[1]


def _run_h2t(backbone, task, train_store, test_store, grid, splits, seed):
    y = task.train.y
    bundles = _store_bundle_cache(train_store, grid)
    test_bundles = _store_bundle_cache(test_store, grid)
    tsizes = _canonical_target_sizes(bundles)
    best = None
    fold_accs_best = None
    for lr in grid.lrs:
        for steps in grid.steps:
            for coef in grid.reg_coefs:
                for tsize in tsizes:
                    bundle = bundles[tsize]
                    cfg = pr.Head2ToeConfig(
                        aggregation=AggregationConfig(target_size=int(tsize)),
                        reg_coef=coef, train=_train_cfg(lr, steps, seed))
                    per_fraction = {f: [] for f in grid.fractions}
                    failed = False
                    for train_idx, val_idx in splits:
                        try:
                            scores, _ = pr.score_features(
                                FoldBundle(bundle.matrix[train_idx], y[train_idx]),
                                cfg)
                            for f in grid.fractions:
                                selection = select_fraction(scores, f)
                                head = pr.probe_selected(
                                    FoldBundle(bundle.matrix[train_idx], y[train_idx]),
                                    selection, cfg,
                                    val=(bundle.matrix[val_idx], y[val_idx]))
                                per_fraction[f].append(head.val_acc)
                        except ToolkitError:
                            failed = True
                            break
                    if failed:
                        continue
                    for f in grid.fractions:
                        score = float(np.mean(per_fraction[f]))
                        combo = {"lr": lr, "steps": steps, "reg": coef,
                                 "target_size": tsize, "fraction": f}
                        if best is None or score > best[0]:
                            best = (score, combo)
                            fold_accs_best = per_fraction[f]
    if best is None:
        raise ConfigError(f"every h2t grid point failed on {task.name}")
    score, chosen = best
    cfg = pr.Head2ToeConfig(
        aggregation=AggregationConfig(target_size=int(chosen["target_size"])),
        reg_coef=chosen["reg"], fraction=chosen["fraction"],
        train=_train_cfg(chosen["lr"], chosen["steps"], seed))
    bundle = bundles[chosen["target_size"]]
    tb = test_bundles[chosen["target_size"]]
    selection, head, _ = pr.head2toe_bundles(bundle, cfg,
                                             test=(tb.matrix, tb.labels))
    cost = None
    if backbone is not None:
        cost = cost_report(CostInputs(
            backbone_flops=backbone_forward_flops(backbone.spec),
            backbone_params=backbone_param_count(backbone.spec),
            dataset_size=len(task.train), batch=min(len(task.train), 1024),
            steps=cfg.train.steps, num_classes=task.num_classes,
            d_all=bundle.d_all, k_kept=selection.k,
            d_embedding=bundle.spans["embedding"][1] - bundle.spans["embedding"][0]
            if "embedding" in bundle.spans else bundle.d_all,
            fractions=grid.fractions))
    return MethodRun("h2t", seed, chosen, score, fold_accs_best, head.test_acc,
                     selection=selection, cost=cost)


def evaluate_methods(backbone, task, train_store, test_store, grid,
                     methods=("lp", "h2t"), folds: int = 5,
                     seeds=(0, 1, 2)) -> dict:
    """Run each method across seeds; returns {method: TaskResult}."""
    out = {}
    for method in methods:
        runs = []
        for seed in seeds:
            h2t_run = None
            if method in ("h2t_ft", "h2t_ft_plus"):
                h2t_run = (out["h2t"].seed_runs[list(seeds).index(seed)]
                           if "h2t" in out else
                           run_method("h2t", backbone, task, train_store,
                                      test_store, grid, folds, seed))
            runs.append(run_method(method, backbone, task, train_store,
                                   test_store, grid, folds, seed,
                                   h2t_run=h2t_run))
        out[method] = TaskResult(task.name, method, runs)
    return out


# ---------------------------------------------------------------------------
# named experiments
# ---------------------------------------------------------------------------

def domain_affinity(task: SplitTask, backbone: bb.TrainedBackbone,
                    train_store: Store, test_store: Store, grid: HyperGrid,
                    folds: int = 5, seeds=(0, 1, 2)) -> AffinityRecord:
    """Acc_linear - Acc_scratch with matched budgets (same lr/steps grid,
    same CV procedure, medians over the same seeds)."""
    lp = [run_method("lp", backbone, task, train_store, test_store, grid,
                     folds, s).test_acc for s in seeds]
    sc = [run_method("scratch", backbone, task, train_store, test_store, grid,
                     folds, s).test_acc for s in seeds]
    return AffinityRecord(task.name, float(np.median(lp)), float(np.median(sc)))


def oracle_single_layer(train_store: Store, test_store: Store,
                        cfg: pr.Head2ToeConfig) -> tuple:
    """Train a probe on embedding (+) each single extra layer; the oracle
    reads test accuracy, so it upper-bounds what layer selection can add.

    Returns (per-layer accuracy dict, best layer name)."""
    names = train_store.layer_names()
    if len(names) < 2:
        raise DataError("oracle needs at least two stored layers")
    if "embedding" not in names:
        raise DataError("oracle expects an 'embedding' layer")
    accs = {}
    for layer in names:
        if layer == "embedding":
            tr = build_h_all(train_store, cfg.aggregation, ["embedding"])
            te = build_h_all(test_store, cfg.aggregation, ["embedding"])
            xtr = np.hstack([tr.matrix, tr.matrix])
            xte = np.hstack([te.matrix, te.matrix])
            labels = (tr.labels, te.labels)
        else:
            tr = build_h_all(train_store, cfg.aggregation, ["embedding", layer])
            te = build_h_all(test_store, cfg.aggregation, ["embedding", layer])
            xtr, xte = tr.matrix, te.matrix
            labels = (tr.labels, te.labels)
        num_classes = int(labels[0].max()) + 1
        head = pr.train_head(xtr, labels[0], num_classes, pr.RegSpec(),
                             cfg.train, test=(xte, labels[1]))
        accs[layer] = head.test_acc
    best = max(names, key=lambda l: (accs[l], -names.index(l)))
    return accs, best


def control_ensemble(store_a: Store, store_b: Store,
                     cfg: pr.Head2ToeConfig,
                     test_a: Store | None = None,
                     test_b: Store | None = None) -> pr.HeadResult:
    """Probe on the concatenation of two backbones' embeddings (the
    dimensionality-matched control for the oracle experiment)."""
    if not np.array_equal(store_a.labels, store_b.labels):
        raise DataError("control stores must share the same split")
    tr_a = build_h_all(store_a, cfg.aggregation, ["embedding"])
    tr_b = build_h_all(store_b, cfg.aggregation, ["embedding"])
    xtr = np.hstack([tr_a.matrix, tr_b.matrix])
    test = None
    if test_a is not None and test_b is not None:
        te_a = build_h_all(test_a, cfg.aggregation, ["embedding"])
        te_b = build_h_all(test_b, cfg.aggregation, ["embedding"])
        test = (np.hstack([te_a.matrix, te_b.matrix]), te_a.labels)
    num_classes = int(tr_a.labels.max()) + 1
    return pr.train_head(xtr, tr_a.labels, num_classes, pr.RegSpec(),
                         cfg.train, test=test)


def transfer_matrix(task_stores: list, cfg: pr.Head2ToeConfig) -> tuple:
    """Accuracy deltas when task i's selection is reused on task j.

    ``task_stores`` is a list of (name, train_store, test_store) sharing
    one backbone.  Entry (i, j) subtracts the self-selection diagonal, so
    the diagonal is identically zero.
    Returns (names, delta matrix, raw accuracy matrix)."""
    if len(task_stores) < 2:
        raise DataError("transfer matrix needs at least two tasks")
    names = [name for name, _, _ in task_stores]
    selections = []
    for _, train_store, _ in task_stores:
        bundle = build_h_all(train_store, cfg.aggregation, cfg.layers)
        scores, _ = pr.score_features(bundle, cfg)
        selections.append(select_fraction(scores, cfg.fraction))
    raw = np.zeros((len(names), len(names)))
    for i, sel_i in enumerate(selections):
        for j, (_, train_j, test_j) in enumerate(task_stores):
            tr = build_h_all(train_j, cfg.aggregation, cfg.layers)
            te = build_h_all(test_j, cfg.aggregation, cfg.layers)
            head = pr.probe_selected(tr, sel_i, cfg,
                                     test=(te.matrix, te.labels))
            raw[i, j] = head.test_acc
    delta = raw - np.diag(raw)[None, :]
    return names, delta, raw


def offset_window_sweep(train_store: Store, test_store: Store,
                        cfg: pr.Head2ToeConfig, window: int,
                        offsets) -> list:
    """Probe rank windows of the relevance ordering at several offsets.

    Scores are trained once; each offset retrains only the small head.
    Returns [(offset, test_acc)] in the given offset order."""
    bundle = build_h_all(train_store, cfg.aggregation, cfg.layers)
    test_bundle = build_h_all(test_store, cfg.aggregation, cfg.layers)
    scores, _ = pr.score_features(bundle, cfg)
    out = []
    for offset in offsets:
        selection = select_offset_window(scores, window, int(offset))
        head = pr.probe_selected(bundle, selection, cfg,
                                 test=(test_bundle.matrix, test_bundle.labels))
        out.append((int(offset), head.test_acc))
    return out


def layerwise_vs_featurewise(train_store: Store, test_store: Store,
                             cfg: pr.Head2ToeConfig, budget: int,
                             grouping: str = "mean") -> dict:
    """Match feature budgets between per-feature and whole-layer selection.

    ``grouping`` is "mean" (mean relevance per layer) or "group" (L2 norm
    of the layer's weight block).  Returns test accuracies per strategy.
    """
    bundle = build_h_all(train_store, cfg.aggregation, cfg.layers)
    test_bundle = build_h_all(test_store, cfg.aggregation, cfg.layers)
    scores, phase1 = pr.score_features(bundle, cfg)
    test = (test_bundle.matrix, test_bundle.labels)

    feature_sel = select_offset_window(scores, budget, 0)
    feature_head = pr.probe_selected(bundle, feature_sel, cfg, test=test)

    if grouping == "group":
        layer_scores = group_norms(phase1.w, bundle.spans)
    else:
        layer_scores = layerwise_scores(scores, bundle.spans)
    layer_sel = select_layerwise(layer_scores, bundle.spans, budget)
    layer_head = pr.probe_selected(bundle, layer_sel, cfg, test=test)
    return {"featurewise": feature_head.test_acc,
            "layerwise": layer_head.test_acc,
            "featurewise_k": feature_sel.k,
            "layerwise_k": layer_sel.k}


def sweep_target_sizes(train_store: Store, test_store: Store,
                       base_cfg: pr.Head2ToeConfig, sizes) -> list:
    """Head-to-toe accuracy as the per-layer feature budget grows."""
    out = []
    for size in sizes:
        cfg = replace(base_cfg,
                      aggregation=AggregationConfig(
                          target_size=int(size),
                          mode=base_cfg.aggregation.mode,
                          normalization=base_cfg.aggregation.normalization))
        _, head = pr.head2toe(train_store, cfg, test_store)
        out.append((int(size), head.test_acc))
    return out


def sweep_data_fractions(backbone, task: SplitTask, grid: HyperGrid,
                         fractions, method: str = "h2t", folds: int = 3,
                         seed: int = 0, extract=None) -> list:
    """Re-run one method on shot-subsampled versions of the task."""
    if extract is None:
        raise ConfigError("sweep_data_fractions needs an extract callback")
    out = []
    for f in fractions:
        sub = subsample_task(task, float(f), seed=seed)
        train_store, test_store = extract(sub)
        run = run_method(method, backbone, sub, train_store, test_store,
                         grid, folds=min(folds, len(sub.train)), seed=seed)
        out.append((float(f), run.test_acc))
    return out
