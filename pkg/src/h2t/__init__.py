"""Head-to-toe transfer learning toolkit.

Probes a frozen pretrained backbone using features from *all* of its
layers: activations are cached to disk, pooled to a per-layer target
size, unit-normalized, scored with a group-lasso head, filtered down to
the most relevant fraction, and finally probed with a plain linear head.
Ships the surrounding baselines (linear probe, fine-tuning, scratch,
regularized all-feature heads), a cross-validation harness with a
domain-affinity metric, and a FLOPs/storage cost model.
"""

__version__ = "0.1.0"
