"""Labeled datasets and training-loop configuration."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

# Full-batch training below this many examples, seed-fixed minibatches above.
FULL_BATCH_MAX = 1024
MINIBATCH = 128


@dataclass
class LabeledDataset:
    """Examples plus integer class labels.

    ``x`` is [N, ...] float32 (flat vectors for dense nets, [N,H,W,C] for
    conv nets); ``y`` is [N] class indices in [0, num_classes).
    """

    x: np.ndarray
    y: np.ndarray
    num_classes: int
    name: str = ""

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float32)
        self.y = np.ascontiguousarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise DataError(
                f"dataset {self.name!r}: {len(self.x)} examples vs {len(self.y)} labels")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise DataError(f"dataset {self.name!r}: labels outside [0, {self.num_classes})")
        if not np.isfinite(self.x).all():
            raise DataError(f"dataset {self.name!r}: non-finite inputs")

    def __len__(self):
        return len(self.x)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(self.x[idx], self.y[idx], self.num_classes, self.name)

    def save(self, path):
        np.savez(path, x=self.x, y=self.y.astype(np.uint32),
                 num_classes=np.uint32(self.num_classes))

    @staticmethod
    def load(path) -> "LabeledDataset":
        path = Path(path)
        if not path.exists():
            raise DataError(f"dataset file not found: {path}")
        with np.load(path) as z:
            return LabeledDataset(z["x"], z["y"], int(z["num_classes"]), path.stem)


@dataclass
class TrainConfig:
    """Plain-SGD schedule shared by heads, pretraining, and fine-tuning."""

    lr: float = 0.1
    steps: int = 500
    seed: int = 0
    batch: int = MINIBATCH
    # fine-tuning only: backbone learning rate (None -> same as lr)
    backbone_lr: float | None = None

    def __post_init__(self):
        if self.lr < 0:
            raise DataError(f"learning rate must be >= 0, got {self.lr}")
        if self.steps < 0:
            raise DataError(f"steps must be >= 0, got {self.steps}")


def batch_plan(n: int, cfg: TrainConfig):
    """Yield one index array per training step.

    Full-batch when the dataset is small enough, otherwise shuffled
    minibatches with a seed-fixed order (reshuffled each epoch).
    """
    if n <= 0:
        raise DataError("cannot iterate over an empty dataset")
    if n <= FULL_BATCH_MAX:
        idx = np.arange(n)
        for _ in range(cfg.steps):
            yield idx
        return
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    pos = 0
    for _ in range(cfg.steps):
        if pos + cfg.batch > n:
            perm = rng.permutation(n)
            pos = 0
        yield perm[pos:pos + cfg.batch]
        pos += cfg.batch


def accuracy(logits: np.ndarray, y: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == y).mean())


@dataclass
class SplitTask:
    """A transfer task: train/test splits sharing one label space."""

    train: LabeledDataset
    test: LabeledDataset
    name: str = ""
    num_classes: int = field(init=False)

    def __post_init__(self):
        if self.train.num_classes != self.test.num_classes:
            raise DataError(f"task {self.name!r}: split class counts differ")
        self.num_classes = self.train.num_classes
