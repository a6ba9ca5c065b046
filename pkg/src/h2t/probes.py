"""Head training and adaptation procedures.

Covers the full method zoo: plain linear probing on the embedding,
regularized heads over all aggregated features, the two-phase
select-then-probe procedure (group-lasso scoring, fraction selection,
unregularized retraining), training from scratch, full fine-tuning,
fine-tuning on top of a selection, the validation gate between the
frozen and fine-tuned variants, and a first-order (Taylor) check that
quantifies how well a weight-space perturbation of the network is
explained by a linear function of its activations.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import backbones as bb
from .data import SplitTask, TrainConfig, accuracy, batch_plan
from .errors import ConfigError, DataError, DimensionError, TrainingError
from .features import (AggregationConfig, FeatureBundle, build_h_all,
                       build_h_all_graph, compute_pool_window)
from .selector import SelectionResult, relevance_scores, select_fraction
from .store import Store

REG_KINDS = ("none", "l1", "l2", "l21")

_PENALTY_OPS = {"l1": ad.l1_penalty, "l2": ad.l2_penalty, "l21": ad.l21_penalty}


@dataclass(frozen=True)
class RegSpec:
    """Regularizer attached to a head's weight matrix (never its bias)."""

    kind: str = "none"
    coefficient: float = 0.0

    def __post_init__(self):
        if self.kind not in REG_KINDS:
            raise ConfigError(f"unknown regularizer {self.kind!r}")
        if self.coefficient < 0:
            raise ConfigError(f"negative regularizer coefficient {self.coefficient}")
        if self.kind == "none" and self.coefficient != 0:
            raise ConfigError("kind 'none' requires coefficient 0")


@dataclass
class HeadResult:
    """Trained linear head plus bookkeeping.

    The bias is kept separate from ``w`` so penalties and relevance scores
    only ever see the feature rows.
    """

    w: np.ndarray
    b: np.ndarray
    train_acc: float
    val_acc: float | None = None
    test_acc: float | None = None
    penalty_value: float = 0.0
    steps: int = 0
    lr: float = 0.0
    seed: int = 0

    def logits(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w + self.b

    def accuracy_on(self, x: np.ndarray, y: np.ndarray) -> float:
        return accuracy(self.logits(x), y)


def _penalty_subgrad(kind: str, w: np.ndarray) -> np.ndarray:
    if kind == "l1":
        return np.sign(w)
    if kind == "l2":
        return 2.0 * w
    norms = ad.row_norms(w)
    safe = np.where(norms > 0, norms, 1)
    g = w / safe[:, None]
    g[norms == 0] = 0
    return g


def _check_head_inputs(features, labels, num_classes):
    n = len(features)
    if n < num_classes:
        raise DataError(f"need at least {num_classes} examples, got {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"labels outside [0, {num_classes})")


def train_head(features: np.ndarray, labels: np.ndarray, num_classes: int,
               reg: RegSpec = RegSpec(), cfg: TrainConfig = TrainConfig(),
               val=None, test=None) -> HeadResult:
    """Minimize softmax-CE(XW + b) + coef * penalty(W) with plain SGD.

    Zero-initialized and batch-deterministic, so identical configs give
    identical weights.  The update is written directly in numpy for speed;
    it mirrors the autodiff engine's softmax-CE / matmul / bias backward
    step for step (tests hold the two paths equal).  ``val``/``test`` are
    optional (x, y) pairs evaluated after training.
    """
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    n, d = features.shape
    _check_head_inputs(features, labels, num_classes)

    w = np.zeros((d, num_classes), dtype=np.float32)
    b = np.zeros(num_classes, dtype=np.float32)
    lr = np.float32(cfg.lr)
    coef = np.float32(reg.coefficient)
    for step, idx in enumerate(batch_plan(n, cfg)):
        xb = features[idx]
        yb = labels[idx]
        z = xb @ w + b
        z -= z.max(axis=1, keepdims=True)
        ez = np.exp(z)
        sez = ez.sum(axis=1, keepdims=True)
        nll = np.log(sez[:, 0]) - z[np.arange(len(yb)), yb]
        if not np.isfinite(nll.sum()):
            raise TrainingError("head training diverged", step=step)
        delta = ez / sez
        delta[np.arange(len(yb)), yb] -= 1
        delta *= np.float32(1.0 / len(yb))
        gw = xb.T @ delta
        if reg.kind != "none" and coef != 0:
            gw += coef * _penalty_subgrad(reg.kind, w)
        w -= lr * gw
        b -= lr * delta.sum(axis=0)

    penalty = float(_PENALTY_OPS[reg.kind](ad.Tensor(w)).data) \
        if reg.kind != "none" else 0.0
    result = HeadResult(w, b,
                        train_acc=accuracy(features @ w + b, labels),
                        penalty_value=penalty,
                        steps=cfg.steps, lr=cfg.lr, seed=cfg.seed)
    if val is not None:
        result.val_acc = result.accuracy_on(*val)
    if test is not None:
        result.test_acc = result.accuracy_on(*test)
    return result


def train_head_graph(features: np.ndarray, labels: np.ndarray, num_classes: int,
                     reg: RegSpec = RegSpec(),
                     cfg: TrainConfig = TrainConfig()) -> HeadResult:
    """Reference implementation of train_head through the autodiff engine.

    Kept as the independent second route for equivalence testing; the fast
    path must match it.
    """
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    n, d = features.shape
    _check_head_inputs(features, labels, num_classes)

    w = ad.parameter(np.zeros((d, num_classes), dtype=np.float32))
    b = ad.parameter(np.zeros(num_classes, dtype=np.float32))
    for step, idx in enumerate(batch_plan(n, cfg)):
        logits = ad.add_bias(ad.matmul(ad.Tensor(features[idx]), w), b)
        loss = ad.softmax_cross_entropy(logits, labels[idx])
        if reg.kind != "none" and reg.coefficient != 0:
            loss = ad.add(loss, ad.scale(_PENALTY_OPS[reg.kind](w), reg.coefficient))
        if not np.isfinite(loss.data):
            raise TrainingError("head training diverged", step=step)
        ad.backward(loss)
        ad.sgd_step([w, b], [w.grad, b.grad], cfg.lr)
        w.grad = b.grad = None

    penalty = float(_PENALTY_OPS[reg.kind](ad.Tensor(w.data)).data) \
        if reg.kind != "none" else 0.0
    return HeadResult(w.data, b.data,
                      train_acc=accuracy(features @ w.data + b.data, labels),
                      penalty_value=penalty,
                      steps=cfg.steps, lr=cfg.lr, seed=cfg.seed)


# ---------------------------------------------------------------------------
# two-phase probing: group-lasso scoring then a clean head on the survivors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Head2ToeConfig:
    aggregation: AggregationConfig = AggregationConfig()
    layers: tuple | None = None          # None -> every stored layer
    reg_coef: float = 1e-3               # phase-1 group-lasso coefficient
    fraction: float = 0.05
    train: TrainConfig = field(default_factory=TrainConfig)


def score_features(bundle: FeatureBundle, cfg: Head2ToeConfig):
    """Phase 1: train the all-features head under the row-group penalty and
    convert it to per-feature relevance scores."""
    num_classes = int(bundle.labels.max()) + 1
    phase1 = train_head(bundle.matrix, bundle.labels, num_classes,
                        RegSpec("l21", cfg.reg_coef), cfg.train)
    scores = relevance_scores(
        phase1.w, provenance={"reg_coef": cfg.reg_coef,
                              "steps": cfg.train.steps,
                              "lr": cfg.train.lr,
                              "seed": cfg.train.seed})
    return scores, phase1


def probe_selected(bundle: FeatureBundle, selection: SelectionResult,
                   cfg: Head2ToeConfig, val=None, test=None) -> HeadResult:
    """Phase 2: unregularized head on the selected columns only."""
    idx = selection.indices()
    num_classes = int(bundle.labels.max()) + 1
    pick = lambda pair: (pair[0][:, idx], pair[1]) if pair is not None else None
    return train_head(bundle.matrix[:, idx], bundle.labels, num_classes,
                      RegSpec(), cfg.train, val=pick(val), test=pick(test))


def head2toe_bundles(train_bundle: FeatureBundle, cfg: Head2ToeConfig,
                     val=None, test=None):
    """Run both phases on prebuilt bundles.

    ``val``/``test`` are (matrix, labels) pairs in full-bundle coordinates.
    Returns (SelectionResult, HeadResult, RelevanceScores).
    """
    scores, _ = score_features(train_bundle, cfg)
    selection = select_fraction(scores, cfg.fraction)
    head = probe_selected(train_bundle, selection, cfg, val=val, test=test)
    return selection, head, scores


def head2toe(train_store: Store, cfg: Head2ToeConfig, test_store: Store | None = None):
    """Full pipeline from activation stores; selection uses a fraction of
    the highest-relevance features. Returns (SelectionResult, HeadResult)."""
    bundle = build_h_all(train_store, cfg.aggregation, cfg.layers)
    test = None
    if test_store is not None:
        tb = build_h_all(test_store, cfg.aggregation, cfg.layers)
        test = (tb.matrix, tb.labels)
    selection, head, _ = head2toe_bundles(bundle, cfg, test=test)
    return selection, head


def linear_probe(train_store: Store, cfg: Head2ToeConfig,
                 test_store: Store | None = None,
                 layer: str = "embedding") -> HeadResult:
    """Baseline probe on one layer (the embedding by default), using the
    same aggregation/normalization pipeline with no selection."""
    probe_cfg = replace(cfg, layers=(layer,), fraction=1.0, reg_coef=0.0)
    _, head = head2toe_skip_scoring(train_store, probe_cfg, test_store)
    return head


def head2toe_skip_scoring(train_store: Store, cfg: Head2ToeConfig,
                          test_store: Store | None = None):
    """Selection-free variant (fraction 1.0 without the scoring phase)."""
    bundle = build_h_all(train_store, cfg.aggregation, cfg.layers)
    test = None
    if test_store is not None:
        tb = build_h_all(test_store, cfg.aggregation, cfg.layers)
        test = (tb.matrix, tb.labels)
    ones = SelectionResult(np.ones(bundle.d_all, dtype=bool), bundle.d_all,
                           "fraction", fraction=1.0)
    head = probe_selected(bundle, ones, cfg, test=test)
    return ones, head


def all_features_head(train_store: Store, reg: RegSpec, cfg: Head2ToeConfig,
                      test_store: Store | None = None) -> HeadResult:
    """The regularized no-selection baselines (l1 / l2 / l21 over h_all)."""
    bundle = build_h_all(train_store, cfg.aggregation, cfg.layers)
    test = None
    if test_store is not None:
        tb = build_h_all(test_store, cfg.aggregation, cfg.layers)
        test = (tb.matrix, tb.labels)
    num_classes = int(bundle.labels.max()) + 1
    return train_head(bundle.matrix, bundle.labels, num_classes, reg,
                      cfg.train, test=test)


# ---------------------------------------------------------------------------
# whole-network training: scratch, fine-tuning, fine-tuning after selection
# ---------------------------------------------------------------------------

def _clone_weights(weights) -> list:
    return [ad.parameter(w.data.copy()) for w in weights]


def _respec_logits(spec: bb.BackboneSpec, num_classes: int) -> bb.BackboneSpec:
    layers = [dict(l) for l in spec.layers]
    layers[-1]["units"] = num_classes
    return bb.BackboneSpec(spec.input_shape, layers, spec.taps, spec.capture)


def scratch_train(spec: bb.BackboneSpec, task: SplitTask,
                  cfg: TrainConfig) -> HeadResult:
    """Same architecture trained from a fresh seeded init on the target."""
    spec = _respec_logits(spec, task.num_classes)
    weights = bb.init_weights(spec, cfg.seed)
    bb._train(spec, weights, task.train, cfg, "scratch")
    net = bb.TrainedBackbone(spec, weights)
    logits_tr = bb.forward(net, task.train.x)
    logits_te = bb.forward(net, task.test.x)
    return HeadResult(weights[-2].data, weights[-1].data,
                      train_acc=accuracy(logits_tr, task.train.y),
                      test_acc=accuracy(logits_te, task.test.y),
                      steps=cfg.steps, lr=cfg.lr, seed=cfg.seed)


def fine_tune(backbone: bb.TrainedBackbone, task: SplitTask, cfg: TrainConfig):
    """Adapt every backbone weight jointly with a fresh head on the
    embedding tap.

    ``cfg.backbone_lr`` (default: same as ``cfg.lr``) scales the backbone
    updates; zero freezes the backbone, reducing this to a linear probe on
    the raw embedding.  Returns (adapted TrainedBackbone, HeadResult).
    """
    tap_names = dict(backbone.spec.taps)
    if "embedding" not in tap_names:
        raise ConfigError("fine_tune needs an 'embedding' tap")
    weights = _clone_weights(backbone.weights)
    net = bb.TrainedBackbone(backbone.spec, weights, dict(backbone.meta))
    emb_dim = backbone.spec.output_shapes()[tap_names["embedding"]][0]
    w = ad.parameter(np.zeros((emb_dim, task.num_classes), dtype=np.float32))
    bias = ad.parameter(np.zeros(task.num_classes, dtype=np.float32))
    backbone_lr = cfg.lr if cfg.backbone_lr is None else cfg.backbone_lr

    for step, idx in enumerate(batch_plan(len(task.train), cfg)):
        taps, _ = bb.tap_graph(net, task.train.x[idx])
        logits = ad.add_bias(ad.matmul(taps["embedding"], w), bias)
        loss = ad.softmax_cross_entropy(logits, task.train.y[idx])
        if not np.isfinite(loss.data):
            raise TrainingError("fine-tuning diverged", step=step)
        ad.backward(loss)
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in weights]
        ad.sgd_step(weights, grads, backbone_lr)
        ad.sgd_step([w, bias], [w.grad, bias.grad], cfg.lr)
        for p in weights + [w, bias]:
            p.grad = None

    def eval_on(ds):
        emb = bb.forward_with_taps(net, ds.x)["embedding"]
        return accuracy(emb @ w.data + bias.data, ds.y)

    head = HeadResult(w.data, bias.data, train_acc=eval_on(task.train),
                      test_acc=eval_on(task.test),
                      steps=cfg.steps, lr=cfg.lr, seed=cfg.seed)
    return net, head


def head2toe_ft(backbone: bb.TrainedBackbone, selection: SelectionResult,
                head: HeadResult, task: SplitTask, h2t_cfg: Head2ToeConfig,
                cfg: TrainConfig):
    """Unfreeze the backbone under an existing selection.

    Starts from the phase-2 head and trains backbone + head jointly;
    gradients flow through pooling and normalization into the taps, which
    are recomputed every step.  Zero steps (or zero learning rates)
    reproduce the frozen-probe result exactly.
    Returns (adapted TrainedBackbone, HeadResult).
    """
    weights = _clone_weights(backbone.weights)
    net = bb.TrainedBackbone(backbone.spec, weights, dict(backbone.meta))
    shapes = backbone.spec.output_shapes()
    tap_shapes = {name: shapes[i] for name, i in backbone.spec.taps}
    layers = h2t_cfg.layers or tuple(name for name, _ in backbone.spec.taps)
    missing = [name for name in layers if name not in tap_shapes]
    if missing:
        raise ConfigError(f"layers {missing} are not taps of this backbone "
                          f"(taps: {sorted(tap_shapes)})")
    plans = [(name, *compute_pool_window(tap_shapes[name],
                                         h2t_cfg.aggregation.target_size,
                                         h2t_cfg.aggregation.mode))
             for name in layers]
    idx = selection.indices()
    w = ad.parameter(head.w.copy())
    bias = ad.parameter(head.b.copy())
    backbone_lr = cfg.lr if cfg.backbone_lr is None else cfg.backbone_lr

    for step, bidx in enumerate(batch_plan(len(task.train), cfg)):
        taps, _ = bb.tap_graph(net, task.train.x[bidx])
        h_all = build_h_all_graph(taps, plans, h2t_cfg.aggregation.normalization)
        logits = ad.add_bias(ad.matmul(ad.gather_cols(h_all, idx), w), bias)
        loss = ad.softmax_cross_entropy(logits, task.train.y[bidx])
        if not np.isfinite(loss.data):
            raise TrainingError("selection fine-tuning diverged", step=step)
        ad.backward(loss)
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in weights]
        ad.sgd_step(weights, grads, backbone_lr)
        ad.sgd_step([w, bias], [w.grad, bias.grad], cfg.lr)
        for p in weights + [w, bias]:
            p.grad = None

    def eval_on(ds):
        taps, _ = bb.tap_graph(net, ds.x)
        h_all = build_h_all_graph(taps, plans, h2t_cfg.aggregation.normalization)
        logits = h_all.data[:, idx] @ w.data + bias.data
        return accuracy(logits, ds.y)

    out = HeadResult(w.data, bias.data, train_acc=eval_on(task.train),
                     test_acc=eval_on(task.test),
                     steps=cfg.steps, lr=cfg.lr, seed=cfg.seed)
    return net, out


def ft_plus_gate(h2t_result: HeadResult, h2tft_result: HeadResult):
    """Pick by validation accuracy; ties go to the frozen (cheaper) probe.

    Returns ("h2t" | "h2t_ft", winning HeadResult).
    """
    if h2t_result.val_acc is None or h2tft_result.val_acc is None:
        raise ConfigError("ft_plus_gate needs validation accuracy on both results")
    if h2tft_result.val_acc > h2t_result.val_acc:
        return "h2t_ft", h2tft_result
    return "h2t", h2t_result


# ---------------------------------------------------------------------------
# first-order (Taylor) analysis of weight perturbations
# ---------------------------------------------------------------------------

@dataclass
class LinearizationReport:
    eps: float
    value_base: float        # F(x; w)
    value_exact: float       # F(x; w + eps * direction)
    value_linear: float      # F(x; w) + sum_i h_i c_i
    coefficients: dict       # layer index -> c vector over that layer's inputs
    error: float

    def __post_init__(self):
        if self.error < 0:
            raise DimensionError("linearization error cannot be negative")


def random_direction(backbone: bb.TrainedBackbone, seed: int = 0) -> list:
    """Unit-norm perturbation over the dense weight matrices (biases fixed)."""
    rng = np.random.default_rng(seed)
    mats = [rng.normal(size=w.data.shape) if w.data.ndim == 2 else
            np.zeros_like(w.data, dtype=np.float64)
            for w in backbone.weights]
    total = np.sqrt(sum((m * m).sum() for m in mats))
    return [m / total for m in mats]


def linearization_check(backbone: bb.TrainedBackbone, x: np.ndarray,
                        eps: float, direction: list,
                        output_index: int = 0) -> LinearizationReport:
    """Compare F(x; w + eps*D) against its activation-space linearization.

    F is one logit for a single input.  The linear form is
    F(x; w) + sum_i h_i c_i with c_i = sum_j dF/dz_j * eps*D_ij: every unit
    (input or hidden) contributes its activation times a coefficient built
    from the downstream pre-activation gradients and the perturbation of
    its outgoing weights.  Dense backbones only; runs in float64 so the
    quadratic remainder stays above rounding noise.
    """
    if any(l["kind"] not in ("dense", "relu") for l in backbone.spec.layers):
        raise ConfigError("linearization_check supports dense backbones only")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    norm = np.sqrt(sum((np.asarray(m) ** 2).sum() for m in direction))
    if abs(norm - 1.0) > 1e-6:
        raise ConfigError(f"direction must have unit norm, got {norm}")

    weights64 = [ad.parameter(w.data.astype(np.float64), dtype=np.float64)
                 for w in backbone.weights]

    def forward_watch(weights):
        """Returns (F tensor, pre-activation tensors per dense layer,
        input-activation tensors per dense layer)."""
        h = ad.Tensor(x)
        pre, acts = [], []
        wi = 0
        for layer in backbone.spec.layers:
            if layer["kind"] == "dense":
                acts.append(h)
                h = ad.add_bias(ad.matmul(h, weights[wi]), weights[wi + 1])
                pre.append(h)
                wi += 2
            else:
                h = ad.relu(h)
        f = ad.gather_cols(h, [output_index])
        return ad.reshape(f, ()), pre, acts

    f0, pre, acts = forward_watch(weights64)
    ad.backward(f0, watch=pre)

    dense_dirs = [np.asarray(direction[i], dtype=np.float64)
                  for i, w in enumerate(weights64) if w.data.ndim == 2]
    coefficients = {}
    linear_term = 0.0
    for ell, (z, h) in enumerate(zip(pre, acts)):
        dz = z.grad[0]                       # dF/dz for this layer
        c = (eps * dense_dirs[ell]) @ dz     # c_i over this layer's inputs
        coefficients[ell] = c
        linear_term += float(h.data[0] @ c)

    perturbed = []
    di = 0
    for w in weights64:
        if w.data.ndim == 2:
            perturbed.append(ad.Tensor(w.data + eps * dense_dirs[di]))
            di += 1
        else:
            perturbed.append(ad.Tensor(w.data))
    f_exact, _, _ = forward_watch(perturbed)

    base = float(f0.data)
    exact = float(f_exact.data)
    linear = base + linear_term
    return LinearizationReport(eps, base, exact, linear, coefficients,
                               error=abs(exact - linear))


def linearization_slope(backbone: bb.TrainedBackbone, x: np.ndarray,
                        eps_values=(1e-1, 1e-2, 1e-3), seed: int = 0,
                        output_index: int = 0) -> float:
    """Log-log slope of linearization error vs eps (2.0 = clean quadratic
    remainder)."""
    direction = random_direction(backbone, seed)
    errs = [linearization_check(backbone, x, e, direction, output_index).error
            for e in eps_values]
    if any(e == 0 for e in errs):
        raise TrainingError("degenerate linearization error; pick another input")
    logs = np.log10(np.array(errs))
    le = np.log10(np.array(eps_values, dtype=np.float64))
    slope, _ = np.polyfit(le, logs, 1)
    return float(slope)
