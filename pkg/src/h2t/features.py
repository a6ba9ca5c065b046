"""Per-layer aggregation into one flat feature matrix.

Each stored layer is reduced to roughly ``target_size`` features by
non-overlapping average pooling (2-D over spatial maps, 1-D over token
sequences, identity for already-flat layers), flattened, and scaled to
unit L2 norm per example.  The per-layer results are concatenated in
manifest order into the full feature matrix, with a column-to-layer map
so selections can be traced back.

Pooling-window choice: among all square windows, keep those whose output
count still meets the target, and take the one producing the fewest
features (i.e. the target approached from above).  When several windows
give that same count, a window that divides the axes evenly wins (no
ragged trailing windows), then the larger window.  A layer smaller than
the target is kept whole.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError
from .store import Store

POOLING_MODES = ("auto", "2d", "1d", "none")
NORMALIZATIONS = ("unit", "feature", "none")


@dataclass(frozen=True)
class AggregationConfig:
    """Per-layer feature budget and how to reach it."""

    target_size: int = 64
    mode: str = "auto"
    normalization: str = "unit"

    def __post_init__(self):
        if self.target_size < 1:
            raise ConfigError(f"target_size must be >= 1, got {self.target_size}")
        if self.mode not in POOLING_MODES:
            raise ConfigError(f"unknown pooling mode {self.mode!r}")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"unknown normalization {self.normalization!r}")


def _resolve_mode(shape: tuple, mode: str) -> str:
    if mode == "auto":
        if len(shape) == 3:
            return "2d"
        if len(shape) == 2:
            return "1d"
        if len(shape) == 1:
            return "none"
        raise DimensionError(f"no pooling mode for per-example shape {shape}")
    expect = {"2d": 3, "1d": 2, "none": None}[mode]
    if expect is not None and len(shape) != expect:
        raise DimensionError(f"mode {mode!r} incompatible with shape {shape}")
    return mode


def _window_count(extents: tuple, w: int, channels: int) -> int:
    cells = 1
    for e in extents:
        cells *= -(-e // w)  # ceil: trailing partial window forms a cell
    return cells * channels


def compute_pool_window(shape: tuple, target_size: int, mode: str = "auto"):
    """Pooling window + resulting feature count for one layer shape.

    ``shape`` is per-example: [H, W, C] (2-d), [T, C] (1-d) or [D] (flat).
    Returns (window_tuple, count); the window is empty for flat layers.
    """
    if any(int(s) < 1 for s in shape):
        raise DimensionError(f"shape dims must be positive, got {shape}")
    if target_size < 1:
        raise ConfigError(f"target_size must be >= 1, got {target_size}")
    mode = _resolve_mode(tuple(shape), mode)
    if mode == "none":
        return (), int(np.prod(shape))
    extents = tuple(int(s) for s in shape[:-1])
    channels = int(shape[-1])
    best = None  # (count, divides, w)
    for w in range(1, min(extents) + 1):
        count = _window_count(extents, w, channels)
        if count < target_size:
            continue
        divides = all(e % w == 0 for e in extents)
        if (best is None or count < best[0]
                or (count == best[0] and (divides, w) > (best[1], best[2]))):
            best = (count, divides, w)
    if best is None:
        # even window 1 misses the target: keep every feature
        return (1,) * len(extents), _window_count(extents, 1, channels)
    return (best[2],) * len(extents), best[0]


def aggregate_layer_graph(block: ad.Tensor, window: tuple) -> ad.Tensor:
    """Pool + flatten as a differentiable graph node (used when gradients
    must flow back into the backbone through the aggregation)."""
    if window:
        dims = list(range(1, 1 + len(window)))
        block = ad.avg_pool(block, list(window), dims)
    n = block.shape[0]
    return ad.reshape(block, (n, int(np.prod(block.shape[1:]))))


def aggregate_layer(block: np.ndarray, cfg: AggregationConfig) -> np.ndarray:
    """Pool one stored layer block [N, ...] to [N, d] per the config."""
    shape = tuple(block.shape[1:])
    window, count = compute_pool_window(shape, cfg.target_size, cfg.mode)
    out = aggregate_layer_graph(ad.Tensor(block), window).data
    if out.shape[1] != count:
        raise DimensionError(
            f"aggregation produced {out.shape[1]} features, planned {count}")
    return out


def normalize_layer(m: np.ndarray) -> np.ndarray:
    """Scale each example's within-layer vector to unit L2 norm.

    All-zero rows are left at zero.
    """
    return ad.l2_normalize_rows(ad.Tensor(np.asarray(m))).data


def _normalize(m: np.ndarray, how: str) -> np.ndarray:
    if how == "unit":
        return normalize_layer(m)
    if how == "feature":
        scale = np.sqrt((m * m).mean(axis=0))
        return m / np.where(scale > 0, scale, 1)
    return m


@dataclass
class FeatureBundle:
    """Concatenated, aggregated, normalized features for one store split."""

    matrix: np.ndarray              # [N, D_all] float32
    layer_map: list                 # per column: (layer name, within-layer idx)
    spans: dict                     # layer name -> (lo, hi) column range
    labels: np.ndarray

    @property
    def d_all(self) -> int:
        return self.matrix.shape[1]

    def columns_of(self, layer: str) -> np.ndarray:
        lo, hi = self.spans[layer]
        return self.matrix[:, lo:hi]


def layer_plans(store: Store, cfg: AggregationConfig, layers=None):
    """Resolve (name, window, count) for each included layer, manifest order."""
    names = store.layer_names()
    if layers is None:
        layers = names
    layers = list(layers)
    if not layers:
        raise ConfigError("layer subset must be nonempty")
    missing = [l for l in layers if l not in names]
    if missing:
        raise ConfigError(f"layers not in store: {missing} (have {names})")
    plans = []
    for rec in store.manifest.layers:
        if rec.name not in layers:
            continue
        window, count = compute_pool_window(rec.shape, cfg.target_size, cfg.mode)
        plans.append((rec.name, window, count))
    return plans


def build_h_all(store: Store, cfg: AggregationConfig, layers=None) -> FeatureBundle:
    """Aggregate + normalize every included layer and concatenate.

    Layers always land in manifest order, so the subset's own ordering
    never changes column contents.
    """
    plans = layer_plans(store, cfg, layers)
    pieces = []
    layer_map = []
    spans = {}
    offset = 0
    for name, window, count in plans:
        agg = aggregate_layer_graph(ad.Tensor(store.blocks[name]), window).data
        if agg.shape[1] != count:
            raise DimensionError(
                f"layer {name!r}: got {agg.shape[1]} features, planned {count}")
        pieces.append(_normalize(agg, cfg.normalization))
        spans[name] = (offset, offset + count)
        layer_map.extend((name, i) for i in range(count))
        offset += count
    matrix = np.concatenate(pieces, axis=1).astype(np.float32, copy=False)
    return FeatureBundle(matrix, layer_map, spans, store.labels.astype(np.int64))


def build_h_all_graph(taps: dict, plans, normalization: str = "unit") -> ad.Tensor:
    """Differentiable twin of build_h_all over live tap tensors.

    ``plans`` comes from layer_plans so training-time aggregation matches
    the cached-store pipeline exactly; per-feature normalization is not
    supported here (it depends on dataset statistics, not a single batch).
    """
    if normalization == "feature":
        raise ConfigError("per-feature normalization is not differentiable here")
    pieces = []
    for name, window, count in plans:
        agg = aggregate_layer_graph(taps[name], window)
        if normalization == "unit":
            agg = ad.l2_normalize_rows(agg)
        pieces.append(agg)
    return ad.concat(pieces, axis=1)
