"""Bundled synthetic source/target tasks.

The source task is a Gaussian-blob classification problem living in the
first half of the input coordinates; the remaining coordinates are pure
noise that the source labels never depend on.  Target tasks come in two
families:

* ``near_*`` tasks relabel the source blobs (identity permutation,
  merges, parity).  The penultimate embedding of a source-pretrained
  backbone already solves them, so a plain linear probe transfers well.
* ``far_*`` tasks label examples by a statistic of the *noise*
  coordinates (sign of one coordinate, quadrant of two, sign of a
  three-coordinate sum).  The source head had no reason to keep that
  information, so it survives mainly in early layers: probes that can
  see intermediate activations have a large edge over embedding-only
  probes, while training from scratch is easy.

This realizes a near/far (in-distribution vs out-of-distribution) axis
at desk scale without any external datasets.
"""

from __future__ import annotations

import numpy as np

from .data import LabeledDataset, SplitTask
from .errors import ConfigError

INPUT_DIM = 24
SUBSPACE_DIM = 12          # blob centers live in coords [0, SUBSPACE_DIM)
SOURCE_CLASSES = 8
BLOB_RADIUS = 3.0
NOISE_SIGMA = 1.0
# noise coordinates used by the far-task labels
SIGN_COORD = INPUT_DIM - 1
QUAD_COORDS = (INPUT_DIM - 2, INPUT_DIM - 1)
SUM_COORDS = (INPUT_DIM - 5, INPUT_DIM - 4, INPUT_DIM - 3)

TASK_NAMES = ("near_relabel", "near_merge", "near_pair",
              "far_sign", "far_quadrant", "far_sum", "far_mix")


def blob_centers(seed: int = 7) -> np.ndarray:
    """Fixed class centers: random directions in the blob subspace."""
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(SOURCE_CLASSES, SUBSPACE_DIM))
    raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    centers = np.zeros((SOURCE_CLASSES, INPUT_DIM))
    centers[:, :SUBSPACE_DIM] = raw * BLOB_RADIUS
    return centers


def sample_inputs(n: int, seed: int):
    """Draw inputs from the source distribution; returns (x, blob_id)."""
    rng = np.random.default_rng(seed)
    centers = blob_centers()
    blob = rng.integers(0, SOURCE_CLASSES, size=n)
    x = centers[blob] + rng.normal(scale=NOISE_SIGMA, size=(n, INPUT_DIM))
    return x.astype(np.float32), blob


def make_source(n: int = 4000, seed: int = 0) -> LabeledDataset:
    x, blob = sample_inputs(n, seed)
    return LabeledDataset(x, blob, SOURCE_CLASSES, "source")


_NEAR_PERMUTATION = np.array([3, 5, 0, 7, 2, 6, 1, 4])


def _labels_for(task: str, x: np.ndarray, blob: np.ndarray):
    if task == "near_relabel":
        return _NEAR_PERMUTATION[blob], SOURCE_CLASSES
    if task == "near_merge":
        return blob // 2, SOURCE_CLASSES // 2
    if task == "near_pair":
        return blob % 2, 2
    if task == "far_sign":
        return (x[:, SIGN_COORD] > 0).astype(np.int64), 2
    if task == "far_quadrant":
        a = x[:, QUAD_COORDS[0]] > 0
        b = x[:, QUAD_COORDS[1]] > 0
        return (2 * a + b).astype(np.int64), 4
    if task == "far_sum":
        total = x[:, SUM_COORDS[0]] + x[:, SUM_COORDS[1]] + x[:, SUM_COORDS[2]]
        return (total > 0).astype(np.int64), 2
    if task == "far_mix":
        # product task: needs the source-class parity (late layers) AND a
        # noise-coordinate sign (early layers) at the same time
        return (2 * (blob % 2) + (x[:, SIGN_COORD] > 0)).astype(np.int64), 4
    raise ConfigError(f"unknown task {task!r} (known: {', '.join(TASK_NAMES)})")


def make_task(name: str, train_n: int = 1000, test_n: int = 1000,
              seed: int = 0) -> SplitTask:
    """Build one named target task with disjoint train/test draws."""
    xtr, btr = sample_inputs(train_n, seed * 1000 + 101)
    xte, bte = sample_inputs(test_n, seed * 1000 + 202)
    ytr, c = _labels_for(name, xtr, btr)
    yte, _ = _labels_for(name, xte, bte)
    return SplitTask(LabeledDataset(xtr, ytr, c, name),
                     LabeledDataset(xte, yte, c, name), name)


def make_suite(train_n: int = 1000, test_n: int = 1000, seed: int = 0,
               names=TASK_NAMES) -> list[SplitTask]:
    return [make_task(n, train_n, test_n, seed) for n in names]


def make_image_source(n: int = 2000, side: int = 12, num_classes: int = 4,
                      seed: int = 0) -> LabeledDataset:
    """Tiny image classification source for the conv backbone.

    Class k lights up quadrant k with a smooth bump on one color channel;
    everything rides on pixel noise.
    """
    rng = np.random.default_rng(seed)
    y = rng.integers(0, num_classes, size=n)
    x = rng.normal(scale=0.5, size=(n, side, side, 3)).astype(np.float32)
    half = side // 2
    grid = np.linspace(-1, 1, half)
    bump = np.exp(-(grid[:, None] ** 2 + grid[None, :] ** 2))
    for i in range(n):
        q = int(y[i])
        r0 = (q // 2) * half
        c0 = (q % 2) * half
        x[i, r0:r0 + half, c0:c0 + half, q % 3] += 2.0 * bump
    return LabeledDataset(x, y, num_classes, "image_source")
