"""Inference engine for contrastive decoding with a layer-pruned amateur path.

The package provides a small decoder-only transformer engine (PCDW weight
format, byte-level and BPE tokenizers, KV-cached generation), three decoding
strategies (greedy, DoLa-style early-exit contrast, and contrastive decoding
against a layer-pruned amateur), the layer-ablation search that picks the
pruning set, flatness/informativeness/JSD diagnostics, and an evaluation
harness with MC1/MC2/MC3, EM/F1 and throughput benchmarking.
"""

from .errors import CapacityError, EngineError, FormatError, ValidationError

__all__ = [
    "CapacityError",
    "EngineError",
    "FormatError",
    "ValidationError",
]

__version__ = "0.1.0"
