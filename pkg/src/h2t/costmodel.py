"""Training FLOPs and adaptation-storage accounting.

Conventions (stated once, used everywhere):
  * a multiply-accumulate costs 2 FLOPs,
  * a backward pass costs twice the forward pass, so a training step is
    3x the forward cost,
  * fine-tuning pays the full backbone every step; the frozen probes pay
    it once per example to fill the activation cache and then only touch
    the head,
  * searching the fraction grid re-trains the selected head once per
    fraction, so its overhead relative to the scoring phase is the plain
    sum of the fractions validated,
  * stored adaptations are measured in f32-equivalents: a fine-tuned
    model stores every backbone parameter, a probe stores its head
    (weights + bias), and a selection additionally stores a 1-bit-per-
    candidate bitmap (i.e. D_all / 32 f32 units).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .backbones import BackboneSpec
from .errors import ConfigError

MAC_FLOPS = 2
BACKWARD_FACTOR = 2          # backward = 2x forward
STEP_FACTOR = 1 + BACKWARD_FACTOR


def backbone_forward_flops(spec: BackboneSpec) -> float:
    """Forward FLOPs for one example."""
    flops = 0.0
    shape = spec.input_shape
    for layer, out_shape in zip(spec.layers, spec.output_shapes()):
        kind = layer["kind"]
        if kind == "dense":
            flops += MAC_FLOPS * shape[0] * layer["units"] + layer["units"]
        elif kind == "conv2d":
            h, w, cout = out_shape
            k = layer["kernel"]
            flops += h * w * cout * (MAC_FLOPS * k * k * shape[2] + 1)
        elif kind == "relu":
            flops += math.prod(shape)
        elif kind == "avgpool":
            # one add per input cell plus one divide per output cell
            flops += math.prod(shape) + math.prod(out_shape)
        shape = out_shape
    return flops


def backbone_param_count(spec: BackboneSpec) -> int:
    count = 0
    shape = spec.input_shape
    for layer, out_shape in zip(spec.layers, spec.output_shapes()):
        kind = layer["kind"]
        if kind == "dense":
            count += shape[0] * layer["units"] + layer["units"]
        elif kind == "conv2d":
            k = layer["kernel"]
            count += k * k * shape[2] * layer["filters"] + layer["filters"]
        shape = out_shape
    return count


def head_step_flops(d: int, num_classes: int, batch: int) -> float:
    """One SGD step of a linear head on a batch (forward + backward)."""
    return STEP_FACTOR * (MAC_FLOPS * (d + 1) * num_classes) * batch


@dataclass(frozen=True)
class CostInputs:
    backbone_flops: float          # forward FLOPs per example
    backbone_params: int
    dataset_size: int
    batch: int
    steps: int
    num_classes: int
    d_all: int                     # candidate features (bitmap length)
    k_kept: int
    d_embedding: int
    fractions: tuple               # fraction grid validated after scoring

    def __post_init__(self):
        if self.k_kept < 1:
            raise ConfigError("k_kept must be >= 1")
        if self.steps < 1 or self.batch < 1 or self.dataset_size < 1:
            raise ConfigError("steps, batch and dataset_size must be >= 1")


@dataclass
class CostReport:
    h2t_train_flops: float
    ft_train_flops: float
    lp_train_flops: float
    search_overhead: float          # sum of validated fractions
    search_overhead_percent: float
    h2t_storage: float              # f32-equivalents
    ft_storage: float
    lp_storage: float
    flops_rel_ft: float
    storage_rel_ft: float
    storage_rel_lp: float


def cost_report(inp: CostInputs) -> CostReport:
    """Plug the accounting formulas; all quantities are deterministic."""
    overhead = math.fsum(inp.fractions)
    extraction = inp.backbone_flops * inp.dataset_size
    scoring_step = head_step_flops(inp.d_all, inp.num_classes, inp.batch)
    h2t_train = extraction + scoring_step * inp.steps * (1.0 + overhead)
    ft_train = inp.backbone_flops * STEP_FACTOR * inp.steps * inp.batch
    lp_train = extraction + head_step_flops(
        inp.d_embedding, inp.num_classes, inp.batch) * inp.steps

    ft_storage = float(inp.backbone_params)
    lp_storage = float((inp.d_embedding + 1) * inp.num_classes)
    h2t_storage = float((inp.k_kept + 1) * inp.num_classes) + inp.d_all / 32.0

    return CostReport(
        h2t_train_flops=h2t_train,
        ft_train_flops=ft_train,
        lp_train_flops=lp_train,
        search_overhead=overhead,
        search_overhead_percent=100.0 * overhead,
        h2t_storage=h2t_storage,
        ft_storage=ft_storage,
        lp_storage=lp_storage,
        flops_rel_ft=h2t_train / ft_train,
        storage_rel_ft=h2t_storage / ft_storage,
        storage_rel_lp=h2t_storage / lp_storage,
    )
