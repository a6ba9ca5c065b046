"""Minimal dense-tensor core with reverse-mode differentiation.

Tensors wrap a numpy array and double as nodes of the computation graph:
each op output records its parent tensors and a closure that maps the
output gradient to parent gradients.  ``backward`` walks the graph in
reverse topological order and fills ``.grad`` on every reachable tensor
that requires one.

Conventions:
  * float32 by default (float64 is supported so tests can run gradient
    checks without finite-difference noise; production paths stay f32),
  * every op validates that its output is finite and raises
    ``NumericError`` otherwise,
  * no broadcasting except bias addition over the last axis,
  * graphs are single-threaded; op outputs are never mutated after
    creation and are safe to share read-only across threads (only
    ``sgd_step`` rewrites parameter storage, in place, by design).
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericError

DEFAULT_DTYPE = np.float32


def row_norms(a: np.ndarray) -> np.ndarray:
    """L2 norm of each row of a 2-D array.

    Single source of truth for the group-lasso machinery: the l21 penalty op
    and the selector's relevance scores both call this, which keeps the
    identity ``penalty(W) == relevance_scores(W).sum()`` exact, not
    approximate.
    """
    a = np.asarray(a)
    if a.ndim != 2:
        raise DimensionError(f"row_norms expects a 2-D array, got shape {a.shape}")
    return np.sqrt((a * a).sum(axis=1))


class Tensor:
    """Dense n-d float tensor and computation-graph node."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 op: str = "leaf", parents: tuple = (), backward_fn=None):
        if dtype is None and not isinstance(data, np.ndarray):
            dtype = DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def detach(self) -> "Tensor":
        return Tensor(self.data)


def parameter(data, dtype=DEFAULT_DTYPE) -> Tensor:
    """A leaf tensor that accumulates gradients."""
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str):
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: produced non-finite values")


def _make(data: np.ndarray, op: str, parents: tuple, backward_fn) -> Tensor:
    _check_finite(data, op)
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, op=op, parents=parents,
                  backward_fn=backward_fn if needs else None)


def backward(loss: Tensor, watch=()):
    """Populate ``.grad`` on every parameter reachable from ``loss``.

    ``loss`` must be scalar.  Deterministic: gradients are accumulated in
    reverse topological order of construction.  Tensors passed in ``watch``
    also receive their gradient even if they are intermediate nodes (used
    to read d(loss)/d(pre-activation) without making them parameters).
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise DimensionError(
            f"backward requires a scalar loss, got shape {loss.data.shape}")
    watched = {id(t) for t in watch}

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if id(node) in watched:
            node.grad = g
        if node.requires_grad and not node.parents:
            node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in node._backward(g):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    return _make(out, "matmul", (a, b), bwd)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        return ((a, g), (b, g))

    return _make(a.data + b.data, "add", (a, b), bwd)


def add_bias(x, b) -> Tensor:
    """x + b with b broadcast over all leading axes (the one allowed broadcast)."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match {x.shape}")

    def bwd(g):
        axes = tuple(range(g.ndim - 1))
        return ((x, g), (b, g.sum(axis=axes) if axes else g))

    return _make(x.data + b.data, "add_bias", (x, b), bwd)


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)

    def bwd(g):
        return ((x, g * c),)

    return _make(x.data * c, "scale", (x,), bwd)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0

    def bwd(g):
        return ((x, g * mask),)

    return _make(np.where(mask, x.data, 0), "relu", (x,), bwd)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def bwd(g):
        return ((x, g.reshape(x.shape)),)

    return _make(out, "reshape", (x,), bwd)


def concat(xs, axis: int = 1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise DimensionError("concat: empty input list")
    out = np.concatenate([x.data for x in xs], axis=axis)
    sizes = [x.shape[axis] for x in xs]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            pieces.append((x, g[tuple(idx)]))
        return tuple(pieces)

    return _make(out, "concat", tuple(xs), bwd)


def gather_cols(x, idx) -> Tensor:
    """Select columns of a 2-D tensor; gradient scatters back."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim != 2:
        raise DimensionError(f"gather_cols expects 2-D, got {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise DimensionError("gather_cols: index out of range")
    out = x.data[:, idx]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), idx), g)
        return ((x, gx),)

    return _make(out, "gather_cols", (x,), bwd)


def _pool_starts_sizes(length: int, window: int):
    starts = np.arange(0, length, window)
    sizes = np.minimum(window, length - starts)
    return starts, sizes


def avg_pool(x, window, dims) -> Tensor:
    """Non-overlapping average pooling (stride == window) over ``dims``.

    A trailing partial window is averaged over its actual size, so every
    input element contributes to exactly one output cell.
    """
    x = _as_tensor(x)
    window = list(window)
    dims = list(dims)
    if len(window) != len(dims):
        raise DimensionError("avg_pool: window/dims length mismatch")
    for w, d in zip(window, dims):
        if d < 0 or d >= x.data.ndim:
            raise DimensionError(f"avg_pool: axis {d} out of range for {x.shape}")
        if w < 1 or w > x.shape[d]:
            raise DimensionError(
                f"avg_pool: window {w} invalid for axis of length {x.shape[d]}")

    out = x.data
    plan = []  # (axis, starts, sizes) in application order
    for w, d in zip(window, dims):
        starts, sizes = _pool_starts_sizes(out.shape[d], w)
        summed = np.add.reduceat(out, starts, axis=d)
        shape = [1] * summed.ndim
        shape[d] = len(starts)
        out = summed / sizes.astype(summed.dtype).reshape(shape)
        plan.append((d, starts, sizes))

    def bwd(g):
        for d, starts, sizes in reversed(plan):
            shape = [1] * g.ndim
            shape[d] = len(starts)
            g = np.repeat(g / sizes.astype(g.dtype).reshape(shape), sizes, axis=d)
        return ((x, g),)

    return _make(out, "avg_pool", (x,), bwd)


def l2_normalize_rows(x) -> Tensor:
    """Scale each row of a 2-D tensor to unit L2 norm; zero rows stay zero."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"l2_normalize_rows expects 2-D, got {x.shape}")
    n = row_norms(x.data)
    safe = np.where(n > 0, n, 1).astype(x.dtype)
    out = x.data / safe[:, None]

    def bwd(g):
        # d(x/n)/dx = I/n - x x^T / n^3 per row; zero rows pass g through.
        dot = (g * out).sum(axis=1)
        gx = (g - out * dot[:, None]) / safe[:, None]
        return ((x, gx),)

    return _make(out, "l2_normalize_rows", (x,), bwd)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy, fused and stabilized (row max subtracted)."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects 2-D logits, got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DimensionError("labels out of class range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    nll = -(z[np.arange(n), labels] - np.log(ez.sum(axis=1)))
    out = np.asarray(nll.mean(), dtype=logits.dtype)

    def bwd(g):
        gl = probs.copy()
        gl[np.arange(n), labels] -= 1
        return ((logits, gl * (g / n)),)

    return _make(out, "softmax_cross_entropy", (logits,), bwd)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Plain-array softmax used outside the graph (predictions, metrics)."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def l1_penalty(w) -> Tensor:
    w = _as_tensor(w)
    out = np.asarray(np.abs(w.data).sum(), dtype=w.dtype)

    def bwd(g):
        return ((w, np.sign(w.data) * g),)

    return _make(out, "l1_penalty", (w,), bwd)


def l2_penalty(w) -> Tensor:
    """Sum of squares (the usual weight-decay penalty, unscaled)."""
    w = _as_tensor(w)
    out = np.asarray((w.data * w.data).sum(), dtype=w.dtype)

    def bwd(g):
        return ((w, 2 * w.data * g),)

    return _make(out, "l2_penalty", (w,), bwd)


def l21_penalty(w) -> Tensor:
    """Sum of row L2 norms of a 2-D tensor.

    Subgradient at an all-zero row is taken as 0.  The value equals the sum
    of the selector's relevance scores exactly (same row_norms computation).
    """
    w = _as_tensor(w)
    norms = row_norms(w.data)
    out = np.asarray(norms.sum(), dtype=w.dtype)
    safe = np.where(norms > 0, norms, 1)

    def bwd(g):
        gw = w.data / safe[:, None]
        gw[norms == 0] = 0
        return ((w, gw * g),)

    return _make(out, "l21_penalty", (w,), bwd)


def conv2d(x, w, padding: str = "same") -> Tensor:
    """2-D convolution, stride 1, channels-last: x [N,H,W,Cin], w [kh,kw,Cin,Cout]."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d: need x [N,H,W,C] and w [kh,kw,Cin,Cout], "
                             f"got {x.shape} and {w.shape}")
    if x.shape[3] != w.shape[2]:
        raise DimensionError(f"conv2d: channel mismatch {x.shape} vs {w.shape}")
    if padding not in ("same", "valid"):
        raise DimensionError(f"conv2d: unknown padding {padding!r}")
    n, h, ww_in, cin = x.shape
    kh, kw, _, cout = w.shape
    if padding == "same":
        ph0, ph1 = (kh - 1) // 2, kh // 2
        pw0, pw1 = (kw - 1) // 2, kw // 2
    else:
        ph0 = ph1 = pw0 = pw1 = 0
    xp = np.pad(x.data, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
    ho = xp.shape[1] - kh + 1
    wo = xp.shape[2] - kw + 1
    if ho < 1 or wo < 1:
        raise DimensionError("conv2d: kernel larger than padded input")
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # windows: [N, ho, wo, Cin, kh, kw] -> [N*ho*wo, kh*kw*Cin]
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    wm = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wm).reshape(n, ho, wo, cout)

    def bwd(g):
        gm = g.reshape(n * ho * wo, cout)
        gw = (cols.T @ gm).reshape(kh, kw, cin, cout)
        gcols = (gm @ wm.T).reshape(n, ho, wo, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + ho, j:j + wo, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, ph0:ph0 + h, pw0:pw0 + ww_in, :]
        return ((x, gx), (w, gw))

    return _make(out, "conv2d", (x, w), bwd)


def sgd_step(params, grads, lr: float):
    """In-place p <- p - lr * g for each (param, grad) pair; returns params."""
    if lr < 0:
        raise NumericError(f"sgd_step: negative learning rate {lr}")
    for p, g in zip(params, grads, strict=True):
        g = np.asarray(g, dtype=p.data.dtype)
        if p.data.shape != g.shape:
            raise DimensionError(
                f"sgd_step: shape mismatch {p.data.shape} vs {g.shape}")
        p.data -= lr * g
        _check_finite(p.data, "sgd_step")
    return params


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def numeric_gradients(fn, arrays, step: float = 1e-3):
    """Central-difference gradients of a scalar fn w.r.t. each input array.

    Runs in float64 regardless of input dtype so the oracle is not limited
    by f32 rounding.  ``fn`` receives plain float64 arrays and must return a
    float.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn(*arrays)
            flat[i] = orig - step
            lo = fn(*arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def _instance_rng(seed):
    return np.random.default_rng(seed)


def _away_from_zero(a: np.ndarray, margin: float = 0.1) -> np.ndarray:
    """Push entries away from 0 so kinked ops (relu, l1, l21) gradcheck cleanly."""
    return a + np.sign(a) * margin + (a == 0) * margin


def op_gradcheck_cases(seed: int = 0):
    """One (name, builder) per registered differentiable op.

    ``builder(rng)`` returns (graph_fn, arrays): ``graph_fn(*tensors)`` builds
    the scalar loss through the op under test; ``arrays`` are the raw float
    inputs differentiated against.  Used by the gradient-correctness suite.
    """
    def scalarize(t: Tensor) -> Tensor:
        flat = reshape(t, (1, int(np.prod(t.shape))))
        ones = Tensor(np.ones((int(np.prod(t.shape)), 1)))
        # weighted sum so gradients are not uniform
        weights = Tensor(np.linspace(0.5, 1.5, int(np.prod(t.shape)))[:, None])
        return reshape(matmul(flat, add(ones, weights)), ())

    cases = {
        "matmul": lambda rng: (
            lambda a, b: scalarize(matmul(a, b)),
            [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
        "add": lambda rng: (
            lambda a, b: scalarize(add(a, b)),
            [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))]),
        "add_bias": lambda rng: (
            lambda x, b: scalarize(add_bias(x, b)),
            [rng.normal(size=(3, 4)), rng.normal(size=(4,))]),
        "scale": lambda rng: (
            lambda x: scalarize(scale(x, 1.7)),
            [rng.normal(size=(2, 5))]),
        "relu": lambda rng: (
            lambda x: scalarize(relu(x)),
            [_away_from_zero(rng.normal(size=(3, 4)))]),
        "reshape": lambda rng: (
            lambda x: scalarize(reshape(x, (6, 2))),
            [rng.normal(size=(3, 4))]),
        "concat": lambda rng: (
            lambda a, b: scalarize(concat([a, b], axis=1)),
            [rng.normal(size=(2, 3)), rng.normal(size=(2, 4))]),
        "gather_cols": lambda rng: (
            lambda x: scalarize(gather_cols(x, np.array([3, 0, 1]))),
            [rng.normal(size=(2, 5))]),
        "avg_pool": lambda rng: (
            lambda x: scalarize(avg_pool(x, [2, 3], [1, 2])),
            [rng.normal(size=(2, 5, 7))]),
        "l2_normalize_rows": lambda rng: (
            lambda x: scalarize(l2_normalize_rows(x)),
            [rng.normal(size=(3, 4)) + 2.0]),
        "softmax_cross_entropy": lambda rng: (
            lambda z: softmax_cross_entropy(z, np.arange(3) % 2),
            [rng.normal(size=(3, 4))]),
        "l1_penalty": lambda rng: (
            lambda w: l1_penalty(w),
            [_away_from_zero(rng.normal(size=(4, 3)))]),
        "l2_penalty": lambda rng: (
            lambda w: l2_penalty(w),
            [rng.normal(size=(4, 3))]),
        "l21_penalty": lambda rng: (
            lambda w: l21_penalty(w),
            [rng.normal(size=(4, 3)) + 1.0]),
        "conv2d": lambda rng: (
            lambda x, w: scalarize(reshape(conv2d(x, w, "same"), (1, -1))),
            [rng.normal(size=(2, 5, 5, 2)), rng.normal(size=(3, 3, 2, 2))]),
    }
    return cases


def gradcheck(graph_fn, arrays, step: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients."""
    tensors = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)
               for a in arrays]
    loss = graph_fn(*tensors)
    backward(loss)

    def scalar_fn(*raw):
        ts = [Tensor(r) for r in raw]
        return float(graph_fn(*ts).data)

    numeric = numeric_gradients(scalar_fn, arrays, step=step)
    worst = 0.0
    for t, n in zip(tensors, numeric):
        a = t.grad if t.grad is not None else np.zeros_like(t.data)
        denom = np.maximum(np.abs(a) + np.abs(n), 1e-8)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst
