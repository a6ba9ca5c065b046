"""Small trainable backbones with named activation tap points.

A backbone is a flat list of layers (dense / conv2d / relu / avgpool /
flatten) ending in a logit layer, plus a list of named taps.  Taps are
observation points only: the forward pass is identical with and without
them.  In ``pre`` capture mode a tap that lands on a relu reports the
pre-activation input instead of the rectified output.

File format (see ``save``/``load``): magic ``H2TB`` | u32 version |
u64 header length | header JSON | little-endian f32 weight blobs in
spec order.  Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import LabeledDataset, TrainConfig, accuracy, batch_plan
from .errors import DataError, DimensionError, FormatError, TrainingError

MAGIC = b"H2TB"
VERSION = 1

CAPTURE_MODES = ("post", "pre")
LAYER_KINDS = ("dense", "conv2d", "relu", "avgpool", "flatten")


@dataclass(frozen=True)
class BackboneSpec:
    """Architecture + tap declaration.

    ``layers`` entries are dicts: {"kind": "dense", "units": 64},
    {"kind": "conv2d", "filters": 8, "kernel": 3}, {"kind": "relu"},
    {"kind": "avgpool", "window": 2}, {"kind": "flatten"}.
    ``taps`` maps unique names to layer indices whose output is captured.
    The final layer must be the dense logit layer.
    """

    input_shape: tuple
    layers: tuple
    taps: tuple  # of (name, layer_index)
    capture: str = "post"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers",
                           tuple(dict(layer) for layer in self.layers))
        object.__setattr__(self, "taps",
                           tuple((str(n), int(i)) for n, i in self.taps))
        if self.capture not in CAPTURE_MODES:
            raise DimensionError(f"unknown capture mode {self.capture!r}")
        names = [n for n, _ in self.taps]
        if len(set(names)) != len(names):
            raise DimensionError("tap names must be unique")
        for name, idx in self.taps:
            if not 0 <= idx < len(self.layers):
                raise DimensionError(f"tap {name!r} references missing layer {idx}")
        for layer in self.layers:
            if layer["kind"] not in LAYER_KINDS:
                raise DimensionError(f"unknown layer kind {layer['kind']!r}")
        if not self.layers or self.layers[-1]["kind"] != "dense":
            raise DimensionError("final layer must be the dense logit layer")
        self.output_shapes()  # validates shape compatibility

    def output_shapes(self) -> list[tuple]:
        """Per-layer output shapes (excluding the batch axis)."""
        shape = self.input_shape
        shapes = []
        for layer in self.layers:
            kind = layer["kind"]
            if kind == "dense":
                if len(shape) != 1:
                    raise DimensionError(f"dense layer needs flat input, got {shape}")
                shape = (layer["units"],)
            elif kind == "conv2d":
                if len(shape) != 3:
                    raise DimensionError(f"conv2d needs [H,W,C] input, got {shape}")
                shape = (shape[0], shape[1], layer["filters"])
            elif kind == "avgpool":
                if len(shape) != 3:
                    raise DimensionError(f"avgpool needs [H,W,C] input, got {shape}")
                w = layer["window"]
                shape = (-(-shape[0] // w), -(-shape[1] // w), shape[2])
            elif kind == "flatten":
                shape = (int(np.prod(shape)),)
            # relu keeps the shape
            shapes.append(shape)
        return shapes

    def to_json(self) -> dict:
        return {"input_shape": list(self.input_shape),
                "layers": [dict(l) for l in self.layers],
                "taps": [[n, i] for n, i in self.taps],
                "capture": self.capture}

    @staticmethod
    def from_json(obj: dict) -> "BackboneSpec":
        return BackboneSpec(tuple(obj["input_shape"]), obj["layers"],
                            [tuple(t) for t in obj["taps"]], obj["capture"])


def init_weights(spec: BackboneSpec, seed: int) -> list[ad.Tensor]:
    """He-style uniform fan-in init, zero biases, seed-controlled."""
    rng = np.random.default_rng(seed)
    params: list[ad.Tensor] = []
    shape = spec.input_shape
    for layer, out_shape in zip(spec.layers, spec.output_shapes()):
        kind = layer["kind"]
        if kind == "dense":
            fan_in = shape[0]
            limit = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-limit, limit, size=(fan_in, layer["units"]))
            params.append(ad.parameter(w.astype(np.float32)))
            params.append(ad.parameter(np.zeros(layer["units"], dtype=np.float32)))
        elif kind == "conv2d":
            k = layer["kernel"]
            fan_in = k * k * shape[2]
            limit = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-limit, limit, size=(k, k, shape[2], layer["filters"]))
            params.append(ad.parameter(w.astype(np.float32)))
            params.append(ad.parameter(np.zeros(layer["filters"], dtype=np.float32)))
        shape = out_shape
    return params


@dataclass
class TrainedBackbone:
    """Frozen spec + weights + source-task metadata."""

    spec: BackboneSpec
    weights: list
    meta: dict = field(default_factory=dict)

    def param_arrays(self) -> list[np.ndarray]:
        return [w.data for w in self.weights]

    def num_params(self) -> int:
        return int(sum(w.data.size for w in self.weights))


def _forward_layers(spec: BackboneSpec, weights, batch: ad.Tensor):
    """Run the net, returning (per-layer outputs, per-layer inputs)."""
    outputs = []
    inputs = []
    h = batch
    wi = 0
    for layer in spec.layers:
        inputs.append(h)
        kind = layer["kind"]
        if kind == "dense":
            h = ad.add_bias(ad.matmul(h, weights[wi]), weights[wi + 1])
            wi += 2
        elif kind == "conv2d":
            h = ad.add_bias(ad.conv2d(h, weights[wi], "same"), weights[wi + 1])
            wi += 2
        elif kind == "relu":
            h = ad.relu(h)
        elif kind == "avgpool":
            w = layer["window"]
            h = ad.avg_pool(h, [w, w], [1, 2])
        elif kind == "flatten":
            h = ad.reshape(h, (h.shape[0], int(np.prod(h.shape[1:]))))
        outputs.append(h)
    return outputs, inputs


def _check_batch(spec: BackboneSpec, batch: np.ndarray):
    if tuple(batch.shape[1:]) != spec.input_shape:
        raise DimensionError(
            f"batch shape {batch.shape[1:]} does not match input {spec.input_shape}")


def forward(b: TrainedBackbone, batch: np.ndarray) -> np.ndarray:
    """Plain forward pass; returns logits [N, C]."""
    _check_batch(b.spec, batch)
    outputs, _ = _forward_layers(b.spec, b.weights, ad.Tensor(batch))
    return outputs[-1].data


def forward_with_taps(b: TrainedBackbone, batch: np.ndarray) -> dict[str, np.ndarray]:
    """Activations at every tap, in tap order.

    Capture mode ``post`` reports each tapped layer's output; ``pre``
    swaps relu taps for their pre-activation input.  Either way the
    computation itself (and hence the logits) is untouched.
    """
    _check_batch(b.spec, batch)
    outputs, inputs = _forward_layers(b.spec, b.weights, ad.Tensor(batch))
    taps = {}
    for name, idx in b.spec.taps:
        if b.spec.capture == "pre" and b.spec.layers[idx]["kind"] == "relu":
            taps[name] = inputs[idx].data
        else:
            taps[name] = outputs[idx].data
    return taps


def tap_graph(b: TrainedBackbone, batch: np.ndarray):
    """Like forward_with_taps but keeps the autodiff graph (for fine-tuning
    through the taps); returns (ordered tap tensors, logits tensor)."""
    _check_batch(b.spec, batch)
    outputs, inputs = _forward_layers(b.spec, b.weights, ad.Tensor(batch))
    taps = {}
    for name, idx in b.spec.taps:
        if b.spec.capture == "pre" and b.spec.layers[idx]["kind"] == "relu":
            taps[name] = inputs[idx]
        else:
            taps[name] = outputs[idx]
    return taps, outputs[-1]


def _train(spec: BackboneSpec, weights, data: LabeledDataset, cfg: TrainConfig,
           label: str):
    for step, idx in enumerate(batch_plan(len(data), cfg)):
        outputs, _ = _forward_layers(spec, weights, ad.Tensor(data.x[idx]))
        loss = ad.softmax_cross_entropy(outputs[-1], data.y[idx])
        if not np.isfinite(loss.data):
            raise TrainingError(f"{label}: loss diverged", step=step)
        ad.backward(loss)
        grads = [w.grad if w.grad is not None else np.zeros_like(w.data)
                 for w in weights]
        ad.sgd_step(weights, grads, cfg.lr)
        for w in weights:
            w.grad = None


def pretrain(spec: BackboneSpec, source: LabeledDataset,
             cfg: TrainConfig) -> TrainedBackbone:
    """Train a backbone on the source task from a seeded init."""
    if len(source) == 0:
        raise DataError("pretrain: empty source dataset")
    if source.num_classes != spec.layers[-1]["units"]:
        raise DimensionError(
            f"source has {source.num_classes} classes but logit layer emits "
            f"{spec.layers[-1]['units']}")
    weights = init_weights(spec, cfg.seed)
    _train(spec, weights, source, cfg, "pretrain")
    b = TrainedBackbone(spec, weights)
    acc = accuracy(forward(b, source.x), source.y)
    b.meta = {"dataset": source.name, "seed": cfg.seed, "source_accuracy": acc,
              "steps": cfg.steps, "lr": cfg.lr}
    return b


def save(b: TrainedBackbone) -> bytes:
    header = {
        "spec": b.spec.to_json(),
        "meta": b.meta,
        "blobs": [list(w.data.shape) for w in b.weights],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(hbytes)), hbytes]
    for w in b.weights:
        out.append(np.ascontiguousarray(w.data, dtype="<f4").tobytes())
    return b"".join(out)


def load(blob: bytes) -> TrainedBackbone:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise FormatError("not a backbone file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported backbone version {version} (expected {VERSION})")
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    off = 16
    if off + hlen > len(blob):
        raise FormatError("truncated backbone file (header)")
    try:
        header = json.loads(blob[off:off + hlen])
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt backbone header: {e}") from e
    off += hlen
    spec = BackboneSpec.from_json(header["spec"])
    weights = []
    for shape in header["blobs"]:
        n = int(np.prod(shape)) * 4
        if off + n > len(blob):
            raise FormatError("truncated backbone file (weights)")
        arr = np.frombuffer(blob[off:off + n], dtype="<f4").reshape(shape).copy()
        weights.append(ad.parameter(arr))
        off += n
    if off != len(blob):
        raise FormatError("trailing bytes after weight blobs")
    return TrainedBackbone(spec, weights, header["meta"])


def save_file(b: TrainedBackbone, path):
    with open(path, "wb") as f:
        f.write(save(b))


def load_file(path) -> TrainedBackbone:
    try:
        with open(path, "rb") as f:
            return load(f.read())
    except OSError as e:
        raise FormatError(f"cannot read backbone file: {e}") from e


# ---------------------------------------------------------------------------
# stock architectures
# ---------------------------------------------------------------------------

def mlp4_spec(input_dim: int, num_classes: int, capture: str = "post") -> BackboneSpec:
    """Four hidden dense layers (64-64-64, embedding 32) plus logits.

    Taps: each rectified hidden layer, the embedding, and the source logits.
    """
    layers = [
        {"kind": "dense", "units": 64}, {"kind": "relu"},
        {"kind": "dense", "units": 64}, {"kind": "relu"},
        {"kind": "dense", "units": 64}, {"kind": "relu"},
        {"kind": "dense", "units": 32}, {"kind": "relu"},
        {"kind": "dense", "units": num_classes},
    ]
    taps = [("h1", 1), ("h2", 3), ("h3", 5), ("embedding", 7), ("logits", 8)]
    return BackboneSpec((input_dim,), layers, taps, capture)


def smallconv_spec(input_shape, num_classes: int, capture: str = "post") -> BackboneSpec:
    """Three conv blocks (8/16/32 channels) then a 64-d embedding.

    Conv taps keep their spatial layout so the 2-D aggregation path gets
    exercised end to end.
    """
    layers = [
        {"kind": "conv2d", "filters": 8, "kernel": 3}, {"kind": "relu"},
        {"kind": "avgpool", "window": 2},
        {"kind": "conv2d", "filters": 16, "kernel": 3}, {"kind": "relu"},
        {"kind": "avgpool", "window": 2},
        {"kind": "conv2d", "filters": 32, "kernel": 3}, {"kind": "relu"},
        {"kind": "flatten"},
        {"kind": "dense", "units": 64}, {"kind": "relu"},
        {"kind": "dense", "units": num_classes},
    ]
    taps = [("conv1", 1), ("conv2", 4), ("conv3", 7),
            ("embedding", 10), ("logits", 11)]
    return BackboneSpec(tuple(input_shape), layers, taps, capture)


STOCK_SPECS = {"mlp4": mlp4_spec, "smallconv": smallconv_spec}
