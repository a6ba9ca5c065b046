"""On-disk per-layer activation dumps for a dataset split.

Feature extraction happens once; selection and probing then re-read the
cached activations as often as needed.  The format is deliberately dumb
so independent writers can produce it byte-for-byte:

    magic "H2TA" | u32 version | u64 manifest length | manifest JSON
    | per-layer f32 blocks in manifest order | u64 FNV-1a over blocks

Blocks are little-endian float32, row-major, [examples x per-example
shape].  Labels live in the manifest as u32 class indices.  Stores are
immutable after writing; concurrent readers are safe.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbones import TrainedBackbone, forward_with_taps
from .data import LabeledDataset
from .errors import DataError, FormatError

MAGIC = b"H2TA"
VERSION = 1

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


def fnv1a(data: bytes, state: int = FNV_OFFSET) -> int:
    """64-bit FNV-1a; ``state`` allows streaming across chunks."""
    h = state
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _U64
    return h


@dataclass(frozen=True)
class LayerRecord:
    name: str
    shape: tuple  # per-example shape
    dtype: str = "f4"


@dataclass
class StoreManifest:
    dataset_id: str
    split: str
    example_count: int
    labels: np.ndarray
    layers: list[LayerRecord]

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint32)

    def to_json_bytes(self) -> bytes:
        obj = {
            "dataset_id": self.dataset_id,
            "split": self.split,
            "example_count": self.example_count,
            "labels": [int(v) for v in self.labels],
            "layers": [{"name": r.name, "shape": list(r.shape), "dtype": r.dtype}
                       for r in self.layers],
        }
        return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()

    @staticmethod
    def from_json_bytes(raw: bytes) -> "StoreManifest":
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as e:
            raise FormatError(f"corrupt store manifest: {e}") from e
        layers = [LayerRecord(r["name"], tuple(r["shape"]), r["dtype"])
                  for r in obj["layers"]]
        return StoreManifest(obj["dataset_id"], obj["split"],
                             int(obj["example_count"]),
                             np.array(obj["labels"], dtype=np.uint32), layers)


@dataclass
class Store:
    manifest: StoreManifest
    blocks: dict  # layer name -> np.ndarray [N, *shape] float32

    @property
    def labels(self) -> np.ndarray:
        return self.manifest.labels

    def layer_names(self) -> list[str]:
        return [r.name for r in self.manifest.layers]

    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


def _check_invariants(manifest: StoreManifest, blocks: dict):
    if len(manifest.labels) != manifest.example_count:
        raise FormatError(
            f"label vector has {len(manifest.labels)} entries for "
            f"{manifest.example_count} examples")
    names = [r.name for r in manifest.layers]
    if len(set(names)) != len(names):
        raise FormatError("duplicate layer names in manifest")
    if set(names) != set(blocks):
        raise FormatError("manifest layers and blocks disagree")
    for rec in manifest.layers:
        blk = blocks[rec.name]
        if rec.dtype != "f4":
            raise FormatError(f"layer {rec.name!r}: unsupported dtype {rec.dtype}")
        if len(blk) != manifest.example_count:
            raise FormatError(
                f"layer {rec.name!r}: {len(blk)} rows for "
                f"{manifest.example_count} examples")
        if tuple(blk.shape[1:]) != tuple(rec.shape):
            raise FormatError(
                f"layer {rec.name!r}: block shape {blk.shape[1:]} vs "
                f"declared {rec.shape}")


def write_store(manifest: StoreManifest, blocks: dict, path):
    """Validate invariants, then write the file (single writer)."""
    _check_invariants(manifest, blocks)
    mbytes = manifest.to_json_bytes()
    checksum = FNV_OFFSET
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(mbytes)))
        f.write(mbytes)
        for rec in manifest.layers:
            raw = np.ascontiguousarray(blocks[rec.name], dtype="<f4").tobytes()
            checksum = fnv1a(raw, checksum)
            f.write(raw)
        f.write(struct.pack("<Q", checksum))


def read_store(path) -> Store:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read store: {e}") from e
    manifest, blocks, stored_sum, body = _parse(blob)
    actual = fnv1a(blob[body[0]:body[1]])
    if actual != stored_sum:
        raise FormatError(
            f"store checksum mismatch: stored {stored_sum:#x}, computed {actual:#x}")
    return Store(manifest, blocks)


def _parse(blob: bytes):
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise FormatError("not an activation store (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported store version {version} (expected {VERSION})")
    (mlen,) = struct.unpack_from("<Q", blob, 8)
    off = 16
    if off + mlen + 8 > len(blob):
        raise FormatError("truncated store (manifest)")
    manifest = StoreManifest.from_json_bytes(blob[off:off + mlen])
    off += mlen
    blocks = {}
    body_start = off
    for rec in manifest.layers:
        count = manifest.example_count * int(np.prod(rec.shape, dtype=np.int64))
        nbytes = count * 4
        if off + nbytes + 8 > len(blob):
            raise FormatError(f"truncated store (layer {rec.name!r})")
        arr = np.frombuffer(blob[off:off + nbytes], dtype="<f4")
        blocks[rec.name] = arr.reshape((manifest.example_count,) + tuple(rec.shape))
        off += nbytes
    (stored_sum,) = struct.unpack_from("<Q", blob, off)
    if off + 8 != len(blob):
        raise FormatError("trailing bytes after checksum")
    return manifest, blocks, stored_sum, (body_start, off)


@dataclass
class ValidationIssue:
    kind: str                 # "checksum" | "nonfinite" | "labels"
    message: str
    layer: str | None = None
    index: int | None = None

    def __str__(self):
        loc = ""
        if self.layer is not None:
            loc = f" [layer={self.layer}" + (
                f" index={self.index}]" if self.index is not None else "]")
        return f"{self.kind}{loc}: {self.message}"


@dataclass
class ValidationReport:
    path: str
    issues: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def __str__(self):
        if self.ok:
            return f"{self.path}: ok"
        return "\n".join(f"{self.path}: {i}" for i in self.issues)


def validate_store(path, max_issues_per_layer: int = 5) -> ValidationReport:
    """Structural, checksum, and NaN/Inf scan.  Malformed framing raises
    FormatError; content problems land in the report."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"store not found: {path}")
    blob = path.read_bytes()
    manifest, blocks, stored_sum, body = _parse(blob)
    report = ValidationReport(str(path))
    actual_sum = fnv1a(blob[body[0]:body[1]])
    if actual_sum != stored_sum:
        report.issues.append(ValidationIssue(
            "checksum", f"stored {stored_sum:#018x} != computed {actual_sum:#018x}"))
    if len(manifest.labels) != manifest.example_count:
        report.issues.append(ValidationIssue(
            "labels", f"{len(manifest.labels)} labels for "
                      f"{manifest.example_count} examples"))
    for rec in manifest.layers:
        flat = blocks[rec.name].reshape(len(blocks[rec.name]), -1)
        bad = ~np.isfinite(flat)
        if bad.any():
            rows, cols = np.nonzero(bad)
            for r, c in list(zip(rows, cols))[:max_issues_per_layer]:
                report.issues.append(ValidationIssue(
                    "nonfinite", f"value {flat[r, c]!r} at example {r}, offset {c}",
                    layer=rec.name, index=int(r * flat.shape[1] + c)))
    return report


def extract_to_store(b: TrainedBackbone, data: LabeledDataset, path,
                     dataset_id: str | None = None, split: str = "train",
                     batch: int = 256) -> Store:
    """Run the backbone over the dataset and persist one block per tap.

    The blocks are independent of ``batch``: batches only chunk the work.
    """
    if len(data) == 0:
        raise DataError("refusing to write an empty activation store")
    pieces: dict[str, list] = {name: [] for name, _ in b.spec.taps}
    for lo in range(0, len(data), batch):
        taps = forward_with_taps(b, data.x[lo:lo + batch])
        for name, arr in taps.items():
            pieces[name].append(arr)
    blocks = {name: np.concatenate(chunks, axis=0)
              for name, chunks in pieces.items()}
    records = [LayerRecord(name, tuple(blocks[name].shape[1:]))
               for name, _ in b.spec.taps]
    manifest = StoreManifest(dataset_id or data.name, split, len(data),
                             data.y.astype(np.uint32), records)
    write_store(manifest, blocks, path)
    return Store(manifest, blocks)
