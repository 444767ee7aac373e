"""Deterministic tiny reference checkpoint used by tests and demos.

Eight layers, d_model 64, 4 heads, d_ff 256, byte-level vocab of 259, with
every tensor drawn from one seeded PRNG stream (normal(0, 0.02)) in the
canonical PCDW tensor order, so the written file is byte-identical across
runs for a given numpy version.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .model import Model, ModelConfig, Weights, save_weights, tensor_shapes, tensors_to_weights
from .tokenizer import BYTE_VOCAB_SIZE

TINY_CONFIG = ModelConfig(
    n_layers=8,
    d_model=64,
    n_heads=4,
    d_ff=256,
    vocab_size=BYTE_VOCAB_SIZE,
    max_seq=512,
    tie_unembedding=False,
)

TINY_SEED = 42


def make_tiny_weights(seed: int = TINY_SEED, config: ModelConfig = TINY_CONFIG) -> Weights:
    """Draw all tensors from one seeded stream in canonical tensor order."""
    rng = np.random.default_rng(seed)
    tensors = {
        name: rng.normal(0.0, 0.02, size=shape).astype(np.float32)
        for name, shape in tensor_shapes(config).items()
    }
    return tensors_to_weights(config, tensors)


def make_tiny_model(seed: int = TINY_SEED) -> Model:
    return Model(TINY_CONFIG, make_tiny_weights(seed))


def write_tiny_model(path: str | Path, seed: int = TINY_SEED) -> Path:
    """Write the tiny checkpoint as a PCDW file and return its path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_weights(path, TINY_CONFIG, make_tiny_weights(seed))
    return path
