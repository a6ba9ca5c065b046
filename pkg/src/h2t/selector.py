"""Relevance scoring and feature-selection strategies.

The group-lasso-trained head assigns each feature a relevance score: the
L2 norm of its weight row.  Selection then keeps either the top fraction of
features (the default), whole layers ranked by mean score or group norm,
or a rank window at a chosen offset (used to probe how informative the
scores themselves are).

All strategies are pure and deterministic: ties break toward the lower
column index, so a given score vector always yields the same bitmap.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import row_norms
from .errors import NumericError, SelectionError

STRATEGY_FRACTION = "fraction"
STRATEGY_LAYERWISE = "layerwise"
STRATEGY_OFFSET = "offset_window"


@dataclass
class RelevanceScores:
    s: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.s = np.asarray(self.s)
        if self.s.ndim != 1:
            raise SelectionError(f"scores must be 1-D, got {self.s.shape}")


@dataclass
class SelectionResult:
    bitmap: np.ndarray          # bool, length D_all
    k: int
    strategy: str
    fraction: float | None = None

    def __post_init__(self):
        self.bitmap = np.asarray(self.bitmap, dtype=bool)
        if int(self.bitmap.sum()) != self.k:
            raise SelectionError(
                f"bitmap popcount {int(self.bitmap.sum())} != k {self.k}")

    @property
    def d_all(self) -> int:
        return len(self.bitmap)

    def indices(self) -> np.ndarray:
        return np.nonzero(self.bitmap)[0]


def relevance_scores(w_all: np.ndarray, provenance: dict | None = None) -> RelevanceScores:
    """Row L2 norms of the all-features head weight matrix [D_all x C]."""
    w_all = np.asarray(w_all)
    if not np.isfinite(w_all).all():
        raise NumericError("relevance_scores: non-finite weights")
    return RelevanceScores(row_norms(w_all), provenance or {})


def _scores_array(s) -> np.ndarray:
    if isinstance(s, RelevanceScores):
        s = s.s
    s = np.asarray(s)
    if not np.isfinite(s).all():
        raise NumericError("selection scores contain non-finite values")
    return s


def rank_order(s) -> np.ndarray:
    """Column indices sorted by descending score; equal scores keep the
    lower column index first."""
    s = _scores_array(s)
    return np.argsort(-s, kind="stable")


def fraction_to_k(fraction: float, d_all: int) -> int:
    """k = max(1, round(F * D_all)), rounding half up."""
    return max(1, int(np.floor(fraction * d_all + 0.5)))


def select_fraction(s, fraction: float) -> SelectionResult:
    """Keep the top-k features by score, k = max(1, round(F * D_all))."""
    s = _scores_array(s)
    if not 0 < fraction <= 1:
        raise SelectionError(f"fraction must be in (0, 1], got {fraction}")
    k = fraction_to_k(fraction, len(s))
    bitmap = np.zeros(len(s), dtype=bool)
    bitmap[rank_order(s)[:k]] = True
    return SelectionResult(bitmap, k, STRATEGY_FRACTION, fraction=float(fraction))


def layerwise_scores(s, spans: dict) -> dict:
    """Mean relevance score over each layer's column span."""
    s = _scores_array(s)
    return {name: float(s[lo:hi].mean()) for name, (lo, hi) in spans.items()}


def group_norms(w_all: np.ndarray, spans: dict) -> dict:
    """L2 norm of each layer's whole weight block (the grouped variant of
    layer scoring)."""
    w_all = np.asarray(w_all)
    return {name: float(np.sqrt((w_all[lo:hi] ** 2).sum()))
            for name, (lo, hi) in spans.items()}


def select_layerwise(layer_scores: dict, spans: dict, budget: int) -> SelectionResult:
    """Add whole layers in descending score order until the next one would
    not fit in the feature budget."""
    sizes = {name: hi - lo for name, (lo, hi) in spans.items()}
    if budget < min(sizes.values()):
        raise SelectionError(
            f"budget {budget} below smallest layer size {min(sizes.values())}")
    order = sorted(layer_scores, key=lambda name: (-layer_scores[name], spans[name][0]))
    d_all = max(hi for _, hi in spans.values())
    bitmap = np.zeros(d_all, dtype=bool)
    used = 0
    for name in order:
        if used + sizes[name] > budget:
            break
        lo, hi = spans[name]
        bitmap[lo:hi] = True
        used += sizes[name]
    return SelectionResult(bitmap, used, STRATEGY_LAYERWISE)


def select_offset_window(s, window_size: int, offset: int) -> SelectionResult:
    """Keep ranks [offset, offset + window_size) of the descending-score
    ranking; offset 0 is plain top-k."""
    s = _scores_array(s)
    if window_size < 1:
        raise SelectionError(f"window_size must be >= 1, got {window_size}")
    if offset < 0 or offset + window_size > len(s):
        raise SelectionError(
            f"offset window [{offset}, {offset + window_size}) out of range "
            f"for {len(s)} features")
    bitmap = np.zeros(len(s), dtype=bool)
    bitmap[rank_order(s)[offset:offset + window_size]] = True
    return SelectionResult(bitmap, window_size, STRATEGY_OFFSET)


# ---------------------------------------------------------------------------
# wire format: u64 D_all | packed bitmap | f64 F | u8 tag length | tag
# ---------------------------------------------------------------------------

def serialize_selection(sel: SelectionResult) -> bytes:
    tag = sel.strategy.encode()
    fraction = -1.0 if sel.fraction is None else float(sel.fraction)
    return b"".join([
        struct.pack("<Q", sel.d_all),
        np.packbits(sel.bitmap).tobytes(),
        struct.pack("<d", fraction),
        struct.pack("<B", len(tag)),
        tag,
    ])


def deserialize_selection(blob: bytes) -> SelectionResult:
    if len(blob) < 8:
        raise SelectionError("selection blob too short")
    (d_all,) = struct.unpack_from("<Q", blob, 0)
    nbytes = -(-d_all // 8)
    off = 8
    if len(blob) < off + nbytes + 9:
        raise SelectionError("selection blob truncated")
    bitmap = np.unpackbits(
        np.frombuffer(blob[off:off + nbytes], dtype=np.uint8),
        count=d_all).astype(bool)
    off += nbytes
    (fraction,) = struct.unpack_from("<d", blob, off)
    off += 8
    (taglen,) = struct.unpack_from("<B", blob, off)
    off += 1
    tag = blob[off:off + taglen].decode()
    return SelectionResult(bitmap, int(bitmap.sum()), tag,
                           fraction=None if fraction < 0 else fraction)
