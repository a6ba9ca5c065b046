"""Stream intermediate activations of a vision model into an H2TA store.

The H2TA layout (shared with the probing toolkit, byte for byte):

    magic "H2TA" | u32 version=1 | u64 manifest length | manifest JSON
    | per-layer float32 blocks in manifest order | u64 FNV-1a over blocks

The manifest is a JSON object with keys ``dataset_id``, ``split``,
``example_count``, ``labels`` (u32 class indices) and ``layers``
(objects with ``name``, per-example ``shape`` and ``dtype`` "f4").

Activations are captured with forward hooks on named modules and written
batch by batch at precomputed offsets, so memory stays bounded by one
batch regardless of how many examples or taps are exported.  Values are
only cast to float32; convolutional maps are stored channels-last
([H, W, C]) to match the store's shape convention, token stacks as
[T, C], flat vectors as [D].
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torchvision.models

MAGIC = b"H2TA"
VERSION = 1

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


class ExportError(Exception):
    """Configuration or data problem; the CLI maps it to a nonzero exit."""


def fnv1a(data: bytes, state: int = FNV_OFFSET) -> int:
    h = state
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _U64
    return h


@dataclass
class ExportSpec:
    model: str                       # torchvision model name
    taps: list                       # module paths, e.g. ["layer1", "avgpool"]
    data: str                        # .npz with x [N,H,W,C] and y [N]
    out: str
    split: str = "train"
    batch_size: int = 16
    capture: str = "post"            # post: module output; pre: module input
    weights: str | None = None       # optional state-dict path
    dataset_id: str | None = None

    def __post_init__(self):
        if not self.taps:
            raise ExportError("at least one tap is required")
        if self.capture not in ("post", "pre"):
            raise ExportError(f"capture must be 'post' or 'pre', got {self.capture!r}")
        if self.batch_size < 1:
            raise ExportError("batch_size must be >= 1")


def load_model(spec: ExportSpec) -> torch.nn.Module:
    # without a weights file the init is seeded, so repeated exports of the
    # same split stay bit-identical
    if not spec.weights:
        torch.manual_seed(0)
    try:
        model = torchvision.models.get_model(spec.model, weights=None)
    except (ValueError, KeyError) as e:
        raise ExportError(f"unknown model {spec.model!r}: {e}") from e
    if spec.weights:
        state = torch.load(spec.weights, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    model.eval()
    return model


def resolve_taps(model: torch.nn.Module, taps) -> dict:
    """Map tap names to modules; unknown names fail loudly with a listing."""
    modules = dict(model.named_modules())
    missing = [t for t in taps if t not in modules]
    if missing:
        available = sorted(n for n in modules if n)
        raise ExportError(
            f"taps not found: {missing}; available modules include "
            f"{available[:40]}{' ...' if len(available) > 40 else ''}")
    return {t: modules[t] for t in taps}


def _to_store_layout(tensor: torch.Tensor, tap: str) -> np.ndarray:
    """float32 numpy in store layout; [N,C,H,W] becomes [N,H,W,C]."""
    if not isinstance(tensor, torch.Tensor):
        raise ExportError(f"tap {tap!r} produced {type(tensor).__name__}, "
                          "expected a tensor")
    arr = tensor.detach().cpu().to(torch.float32)
    if arr.ndim == 4:
        arr = arr.permute(0, 2, 3, 1)
    elif arr.ndim not in (2, 3):
        arr = arr.reshape(arr.shape[0], -1)
    return np.ascontiguousarray(arr.numpy())


def load_dataset(spec: ExportSpec):
    path = Path(spec.data)
    if not path.exists():
        raise ExportError(f"dataset not found: {path}")
    with np.load(path) as z:
        if "x" not in z or "y" not in z:
            raise ExportError(f"{path} must contain arrays 'x' and 'y'")
        x = np.asarray(z["x"], dtype=np.float32)
        y = np.asarray(z["y"], dtype=np.uint32)
    if x.ndim != 4:
        raise ExportError(f"images must be [N,H,W,C], got {x.shape}")
    if len(x) != len(y):
        raise ExportError(f"{len(x)} images vs {len(y)} labels")
    if len(x) == 0:
        raise ExportError("refusing to export an empty dataset")
    return x, y


def _manifest_bytes(spec: ExportSpec, labels: np.ndarray, shapes: dict) -> bytes:
    obj = {
        "dataset_id": spec.dataset_id or Path(spec.data).stem,
        "split": spec.split,
        "example_count": int(len(labels)),
        "labels": [int(v) for v in labels],
        "layers": [{"name": t, "shape": [int(s) for s in shapes[t]],
                    "dtype": "f4"} for t in spec.taps],
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


class _Capture:
    """Forward (or pre-forward) hooks collecting one batch of activations."""

    def __init__(self, tap_modules: dict, capture: str):
        self.batch: dict = {}
        self.handles = []
        for name, module in tap_modules.items():
            if capture == "post":
                self.handles.append(module.register_forward_hook(
                    self._post_hook(name)))
            else:
                self.handles.append(module.register_forward_pre_hook(
                    self._pre_hook(name)))

    def _post_hook(self, name):
        def hook(module, inputs, output):
            self.batch[name] = _to_store_layout(output, name)
        return hook

    def _pre_hook(self, name):
        def hook(module, inputs):
            if not inputs:
                raise ExportError(f"tap {name!r} received no inputs")
            self.batch[name] = _to_store_layout(inputs[0], name)
        return hook

    def close(self):
        for h in self.handles:
            h.remove()


def export(spec: ExportSpec) -> Path:
    """Run the model over the dataset and write the store; returns the path.

    The file is laid out with one seek-positioned region per tap, filled
    batch by batch; the trailing checksum is computed in a final
    sequential pass over the written blocks.
    """
    model = load_model(spec)
    tap_modules = resolve_taps(model, spec.taps)
    x, y = load_dataset(spec)
    n = len(x)

    capture = _Capture(tap_modules, spec.capture)
    try:
        with torch.no_grad():
            probe = torch.from_numpy(x[:1]).permute(0, 3, 1, 2)
            model(probe)
        missing = [t for t in spec.taps if t not in capture.batch]
        if missing:
            raise ExportError(f"taps {missing} never fired during forward")
        shapes = {t: capture.batch[t].shape[1:] for t in spec.taps}

        manifest = _manifest_bytes(spec, y, shapes)
        header = MAGIC + struct.pack("<I", VERSION) \
            + struct.pack("<Q", len(manifest)) + manifest
        sizes = {t: int(np.prod(shapes[t])) * 4 for t in spec.taps}
        offsets = {}
        pos = len(header)
        for t in spec.taps:
            offsets[t] = pos
            pos += sizes[t] * n
        body_end = pos

        out = Path(spec.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w+b") as f:
            f.write(header)
            f.truncate(body_end)
            done = 0
            while done < n:
                hi = min(done + spec.batch_size, n)
                capture.batch = {}
                with torch.no_grad():
                    model(torch.from_numpy(x[done:hi]).permute(0, 3, 1, 2))
                for t in spec.taps:
                    arr = capture.batch[t]
                    if tuple(arr.shape[1:]) != tuple(shapes[t]):
                        raise ExportError(
                            f"tap {t!r} changed shape mid-export: "
                            f"{arr.shape[1:]} vs {shapes[t]}")
                    f.seek(offsets[t] + done * sizes[t])
                    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
                done = hi
            f.seek(len(header))
            checksum = FNV_OFFSET
            remaining = body_end - len(header)
            while remaining:
                chunk = f.read(min(1 << 20, remaining))
                checksum = fnv1a(chunk, checksum)
                remaining -= len(chunk)
            f.seek(body_end)
            f.write(struct.pack("<Q", checksum))
    finally:
        capture.close()
    return out
