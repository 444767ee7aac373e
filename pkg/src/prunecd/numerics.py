"""Dense float32 kernels used by the transformer forward pass.

All reductions run in a fixed order (numpy's sequential/blocked order with a
fixed thread configuration), so repeated calls on identical inputs are
bit-identical. The array-level helpers operate on raw ``numpy`` arrays and are
what the model's hot path calls; ``Matrix``/``Vector`` wrap a buffer and
enforce the shape/finiteness contract at module boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LAYER_NORM_EPS = 1e-5

# sqrt(2/pi), the constant in the tanh-form GELU approximation
GELU_COEF = 0.7978845608028654


def _as_f32(buf: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(buf, dtype=np.float32)
    if not np.isfinite(arr).all():
        raise ValueError("buffer contains non-finite entries")
    return arr


@dataclass(frozen=True)
class Matrix:
    """Row-major float32 matrix; all entries finite."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = _as_f32(self.data)
        if arr.ndim != 2:
            raise ValueError(f"Matrix needs a 2-D buffer, got {arr.ndim}-D")
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Vector:
    """Float32 vector; all entries finite."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = _as_f32(self.data)
        if arr.ndim != 1:
            raise ValueError(f"Vector needs a 1-D buffer, got {arr.ndim}-D")
        object.__setattr__(self, "data", arr)

    def __len__(self) -> int:
        return self.data.shape[0]


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with deterministic reduction order."""
    if a.cols != b.rows:
        raise ValueError(f"matmul dimension mismatch: {a.rows}x{a.cols} @ {b.rows}x{b.cols}")
    return Matrix(a.data @ b.data)


def softmax(v: Vector) -> Vector:
    """Overflow-safe softmax; output sums to 1 and preserves the argmax."""
    if len(v) == 0:
        raise ValueError("softmax of an empty vector")
    return Vector(softmax_array(v.data))


def softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax over ``axis``, computed in float64 and returned as float32."""
    x64 = np.asarray(x, dtype=np.float64)
    shifted = x64 - x64.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=axis, keepdims=True)).astype(np.float32)


def log_softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Log-softmax over ``axis`` in float64 (kept at full precision for scoring)."""
    x64 = np.asarray(x, dtype=np.float64)
    shifted = x64 - x64.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def layer_norm(v: Vector, gain: Vector, bias: Vector, eps: float = LAYER_NORM_EPS) -> Vector:
    """Normalize to zero mean / unit variance (biased estimator), then scale and shift."""
    if not (len(v) == len(gain) == len(bias)):
        raise ValueError(f"layer_norm length mismatch: {len(v)}, {len(gain)}, {len(bias)}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    return Vector(layer_norm_array(v.data, gain.data, bias.data, eps))


def layer_norm_array(
    x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LAYER_NORM_EPS
) -> np.ndarray:
    """Layer norm over the last axis of ``x``; float64 internals, float32 result."""
    x64 = np.asarray(x, dtype=np.float64)
    mean = x64.mean(axis=-1, keepdims=True)
    var = x64.var(axis=-1, keepdims=True)
    normed = (x64 - mean) / np.sqrt(var + eps)
    return (normed * gain + bias).astype(np.float32)


def gelu(v: Vector) -> Vector:
    """GELU in the tanh approximation."""
    return Vector(gelu_array(v.data))


def gelu_array(x: np.ndarray) -> np.ndarray:
    """0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))), float64 internals."""
    x64 = np.asarray(x, dtype=np.float64)
    inner = GELU_COEF * (x64 + 0.044715 * x64**3)
    return (0.5 * x64 * (1.0 + np.tanh(inner))).astype(np.float32)


def causal_mask(n_query: int, n_key: int) -> np.ndarray:
    """Additive attention mask: 0 where key may be attended, -inf where it may not.

    Query i (the i-th of the current chunk) may attend to keys 0..past+i,
    where past = n_key - n_query.
    """
    if n_key < n_query:
        raise ValueError(f"causal_mask needs n_key >= n_query, got {n_query} > {n_key}")
    past = n_key - n_query
    q_pos = np.arange(n_query)[:, None] + past
    k_pos = np.arange(n_key)[None, :]
    mask = np.zeros((n_query, n_key), dtype=np.float32)
    mask[k_pos > q_pos] = -np.inf
    return mask
