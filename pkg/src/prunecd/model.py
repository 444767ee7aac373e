"""Decoder-only transformer with layer-subset execution and dual-path inference.

The architecture is GPT-2-style pre-norm: learned absolute positions,
LayerNorm, tanh-GELU, with a final norm and unembedding that are applied
regardless of which decoder layers execute. A forward pass may run any subset
of layers (excluded layers contribute the identity through the residual
stream), read out early-exit logits at every layer, or run the expert and a
layer-pruned amateur path together as a two-row batch in a single pass.

Weights travel in the PCDW container: magic ``PCDW``, u32 version, u64 JSON
header length, a JSON header with the config and per-tensor shape/offset
table, then contiguous little-endian float32 tensor data.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import CapacityError, FormatError, ValidationError
from .numerics import causal_mask, gelu_array, layer_norm_array, softmax_array

PCDW_MAGIC = b"PCDW"
PCDW_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters of a checkpoint."""

    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_seq: int
    tie_unembedding: bool = False

    def __post_init__(self) -> None:
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        for name in ("d_model", "n_heads", "d_ff", "max_seq"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "vocab_size": self.vocab_size,
            "max_seq": self.max_seq,
            "tie_unembedding": self.tie_unembedding,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True, order=True)
class LayerSet:
    """Strictly increasing tuple of decoder layer indices."""

    indices: tuple[int, ...]

    def __post_init__(self) -> None:
        idx = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", idx)
        if any(i < 0 for i in idx):
            raise ValueError(f"negative layer index in {idx}")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"layer indices must be strictly increasing, got {idx}")

    @classmethod
    def of(cls, layers: Iterable[int]) -> "LayerSet":
        return cls(tuple(sorted(set(int(i) for i in layers))))

    @classmethod
    def full(cls, n_layers: int) -> "LayerSet":
        return cls(tuple(range(n_layers)))

    @classmethod
    def empty(cls) -> "LayerSet":
        return cls(())

    def difference(self, other: "LayerSet") -> "LayerSet":
        return LayerSet.of(set(self.indices) - set(other.indices))

    def union(self, other: "LayerSet") -> "LayerSet":
        return LayerSet.of(set(self.indices) | set(other.indices))

    def validate_for(self, n_layers: int) -> None:
        if self.indices and self.indices[-1] >= n_layers:
            raise ValueError(
                f"layer index {self.indices[-1]} out of range for {n_layers} layers"
            )

    def __contains__(self, i: int) -> bool:
        return i in set(self.indices)

    def __iter__(self) -> Iterator[int]:
        return iter(self.indices)

    def __len__(self) -> int:
        return len(self.indices)


class TokenDist:
    """Next-token logits with the softmax distribution derived lazily."""

    __slots__ = ("logits", "_probs")

    def __init__(self, logits: np.ndarray):
        self.logits = np.ascontiguousarray(logits, dtype=np.float32)
        if self.logits.ndim != 1:
            raise ValueError("TokenDist expects a 1-D logits vector")
        self._probs: np.ndarray | None = None

    @property
    def probs(self) -> np.ndarray:
        if self._probs is None:
            self._probs = softmax_array(self.logits)
        return self._probs

    @property
    def vocab_size(self) -> int:
        return self.logits.shape[0]

    def argmax(self) -> int:
        return int(np.argmax(self.logits))


class KVCache:
    """Per-layer key/value tensors ([heads, seq_so_far, head_dim]) for one path."""

    def __init__(self, n_layers: int, path_id: str = "expert", prune_set: LayerSet | None = None):
        self.path_id = path_id
        self.prune_set = prune_set
        self.keys: list[np.ndarray | None] = [None] * n_layers
        self.values: list[np.ndarray | None] = [None] * n_layers
        self.seq_len = 0

    def store(self, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        self.keys[layer] = k
        self.values[layer] = v


@dataclass
class LayerWeights:
    """Tensors of one decoder layer; projection matrices are [in, out] row-major."""

    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    bq: np.ndarray
    bk: np.ndarray
    bv: np.ndarray
    bo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w_in: np.ndarray
    b_in: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray


@dataclass
class Weights:
    """All named tensors of a checkpoint."""

    tok_emb: np.ndarray
    pos_emb: np.ndarray
    layers: list[LayerWeights]
    final_ln_g: np.ndarray
    final_ln_b: np.ndarray
    unemb: np.ndarray


_LAYER_FIELDS = [
    ("ln1.g", "ln1_g"),
    ("ln1.b", "ln1_b"),
    ("attn.wq", "wq"),
    ("attn.wk", "wk"),
    ("attn.wv", "wv"),
    ("attn.wo", "wo"),
    ("attn.bq", "bq"),
    ("attn.bk", "bk"),
    ("attn.bv", "bv"),
    ("attn.bo", "bo"),
    ("ln2.g", "ln2_g"),
    ("ln2.b", "ln2_b"),
    ("mlp.w_in", "w_in"),
    ("mlp.b_in", "b_in"),
    ("mlp.w_out", "w_out"),
    ("mlp.b_out", "b_out"),
]


def tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Expected shape of every tensor in the PCDW container, in canonical order."""
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (v, d),
        "pos_emb": (config.max_seq, d),
    }
    layer_shapes = {
        "ln1.g": (d,), "ln1.b": (d,),
        "attn.wq": (d, d), "attn.wk": (d, d), "attn.wv": (d, d), "attn.wo": (d, d),
        "attn.bq": (d,), "attn.bk": (d,), "attn.bv": (d,), "attn.bo": (d,),
        "ln2.g": (d,), "ln2.b": (d,),
        "mlp.w_in": (d, f), "mlp.b_in": (f,),
        "mlp.w_out": (f, d), "mlp.b_out": (d,),
    }
    for i in range(config.n_layers):
        for suffix, _ in _LAYER_FIELDS:
            shapes[f"layers.{i}.{suffix}"] = layer_shapes[suffix]
    shapes["final_ln.g"] = (d,)
    shapes["final_ln.b"] = (d,)
    shapes["unemb"] = (d, v)
    return shapes


def weights_to_tensors(config: ModelConfig, weights: Weights) -> dict[str, np.ndarray]:
    """Flatten a Weights object into the canonical name -> tensor mapping."""
    tensors: dict[str, np.ndarray] = {
        "tok_emb": weights.tok_emb,
        "pos_emb": weights.pos_emb,
    }
    for i, lw in enumerate(weights.layers):
        for suffix, attr in _LAYER_FIELDS:
            tensors[f"layers.{i}.{suffix}"] = getattr(lw, attr)
    tensors["final_ln.g"] = weights.final_ln_g
    tensors["final_ln.b"] = weights.final_ln_b
    tensors["unemb"] = weights.unemb
    return tensors


def tensors_to_weights(config: ModelConfig, tensors: dict[str, np.ndarray]) -> Weights:
    layers = []
    for i in range(config.n_layers):
        kwargs = {attr: tensors[f"layers.{i}.{suffix}"] for suffix, attr in _LAYER_FIELDS}
        layers.append(LayerWeights(**kwargs))
    return Weights(
        tok_emb=tensors["tok_emb"],
        pos_emb=tensors["pos_emb"],
        layers=layers,
        final_ln_g=tensors["final_ln.g"],
        final_ln_b=tensors["final_ln.b"],
        unemb=tensors["unemb"],
    )


def _validate_tensors(config: ModelConfig, tensors: dict[str, np.ndarray]) -> None:
    expected = tensor_shapes(config)
    for name, shape in expected.items():
        if name not in tensors:
            raise ValidationError(f"missing tensor {name!r}")
        arr = tensors[name]
        if tuple(arr.shape) != shape:
            raise ValidationError(
                f"tensor {name!r} has shape {tuple(arr.shape)}, expected {shape}"
            )
        if not np.isfinite(arr).all():
            raise ValidationError(f"tensor {name!r} contains non-finite entries")


def save_weights(path: str | Path, config: ModelConfig, weights: Weights) -> None:
    """Write a PCDW file. The byte output is deterministic for identical inputs."""
    tensors = weights_to_tensors(config, weights)
    _validate_tensors(config, tensors)
    order = list(tensor_shapes(config))
    entries: dict[str, dict] = {}
    offset = 0
    for name in order:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries[name] = {"dtype": "f32", "shape": list(arr.shape), "offset": offset}
        offset += arr.nbytes
    header = json.dumps(
        {"config": config.to_dict(), "tensors": entries},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(PCDW_MAGIC)
        f.write(struct.pack("<I", PCDW_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for name in order:
            f.write(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes())


def load_weights(path: str | Path) -> tuple[ModelConfig, Weights]:
    """Read and validate a PCDW file."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: expected at least 16 header bytes, got {len(raw)}")
    if raw[:4] != PCDW_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {PCDW_MAGIC!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != PCDW_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (header_len,) = struct.unpack_from("<Q", raw, 8)
    data_start = 16 + header_len
    if len(raw) < data_start:
        raise FormatError(
            f"{path}: truncated header, expected {data_start} bytes, got {len(raw)}"
        )
    try:
        header = json.loads(raw[16:data_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed JSON header: {exc}") from exc
    try:
        config = ModelConfig.from_dict(header["config"])
        entries = header["tensors"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: invalid header contents: {exc}") from exc

    data_bytes = sum(
        4 * int(np.prod(e["shape"], dtype=np.int64)) for e in entries.values()
    )
    expected_total = data_start + data_bytes
    if len(raw) != expected_total:
        raise FormatError(
            f"{path}: expected {expected_total} bytes, got {len(raw)}"
        )

    tensors: dict[str, np.ndarray] = {}
    for name, e in entries.items():
        if e.get("dtype") != "f32":
            raise ValidationError(f"tensor {name!r} has unsupported dtype {e.get('dtype')!r}")
        shape = tuple(int(s) for s in e["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = data_start + int(e["offset"])
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start)
        tensors[name] = arr.reshape(shape).astype(np.float32)
    _validate_tensors(config, tensors)
    return config, tensors_to_weights(config, tensors)


class Model:
    """A loaded checkpoint plus the forward variants over it.

    Weights are immutable after construction and may be shared across
    concurrent generation sessions; each KVCache is single-owner.
    """

    def __init__(self, config: ModelConfig, weights: Weights):
        _validate_tensors(config, weights_to_tensors(config, weights))
        self.config = config
        self.weights = weights

    @classmethod
    def load(cls, path: str | Path) -> "Model":
        config, weights = load_weights(path)
        return cls(config, weights)

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    def full_layers(self) -> LayerSet:
        return LayerSet.full(self.n_layers)

    def new_cache(self, path_id: str = "expert", prune_set: LayerSet | None = None) -> KVCache:
        return KVCache(self.n_layers, path_id=path_id, prune_set=prune_set)

    def new_dual_caches(self, prune_set: LayerSet) -> tuple[KVCache, KVCache]:
        """Paired caches for one dual-path generation with a fixed pruning set."""
        return (
            KVCache(self.n_layers, path_id="expert"),
            KVCache(self.n_layers, path_id="amateur", prune_set=prune_set),
        )

    # -- internals ---------------------------------------------------------

    def _check_tokens(self, tokens: list[int], offset: int) -> None:
        if len(tokens) == 0:
            raise ValueError("token sequence must be non-empty")
        v = self.config.vocab_size
        for t in tokens:
            if not (0 <= t < v):
                raise ValueError(f"token id {t} out of range [0, {v})")
        if offset + len(tokens) > self.config.max_seq:
            raise CapacityError(
                f"sequence length {offset + len(tokens)} exceeds max_seq {self.config.max_seq}"
            )

    def _embed(self, tokens: list[int], offset: int, n_rows: int) -> np.ndarray:
        t = len(tokens)
        x = self.weights.tok_emb[tokens] + self.weights.pos_emb[offset : offset + t]
        return np.broadcast_to(x, (n_rows, t, self.config.d_model)).astype(np.float32)

    def _layer_step(
        self,
        li: int,
        x: np.ndarray,
        past_kv: tuple[np.ndarray, np.ndarray] | None,
    ) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
        """One decoder layer over x [B, T, d]; returns (new x, full (k, v) incl. past)."""
        lw = self.weights.layers[li]
        n_heads, head_dim = self.config.n_heads, self.config.head_dim
        b, t, d = x.shape

        h = layer_norm_array(x, lw.ln1_g, lw.ln1_b)
        q = (h @ lw.wq + lw.bq).reshape(b, t, n_heads, head_dim).transpose(0, 2, 1, 3)
        k = (h @ lw.wk + lw.bk).reshape(b, t, n_heads, head_dim).transpose(0, 2, 1, 3)
        v = (h @ lw.wv + lw.bv).reshape(b, t, n_heads, head_dim).transpose(0, 2, 1, 3)
        if past_kv is not None:
            k = np.concatenate([past_kv[0], k], axis=2)
            v = np.concatenate([past_kv[1], v], axis=2)

        scores = (q @ k.transpose(0, 1, 3, 2)) / math.sqrt(head_dim)
        scores = scores + causal_mask(t, k.shape[2])
        ctx = softmax_array(scores) @ v
        ctx = ctx.transpose(0, 2, 1, 3).reshape(b, t, d)
        x = x + ctx @ lw.wo + lw.bo

        h2 = layer_norm_array(x, lw.ln2_g, lw.ln2_b)
        x = x + gelu_array(h2 @ lw.w_in + lw.b_in) @ lw.w_out + lw.b_out
        return x, (k, v)

    def _final_logits(self, x: np.ndarray) -> np.ndarray:
        """Final layer norm + unembedding over hidden states [..., d]."""
        h = layer_norm_array(x, self.weights.final_ln_g, self.weights.final_ln_b)
        return h @ self.weights.unemb

    def _forward_single(
        self, tokens: list[int], active: LayerSet, cache: KVCache | None
    ) -> np.ndarray:
        """Run one path through the active layers; returns hidden states [T, d]."""
        active.validate_for(self.n_layers)
        offset = cache.seq_len if cache is not None else 0
        self._check_tokens(tokens, offset)
        active_set = set(active)
        x = self._embed(tokens, offset, n_rows=1)
        for li in range(self.n_layers):
            if li not in active_set:
                continue
            past = None
            if cache is not None and cache.keys[li] is not None:
                past = (cache.keys[li][None], cache.values[li][None])
            x, (k, v) = self._layer_step(li, x, past)
            if cache is not None:
                cache.store(li, k[0], v[0])
        if cache is not None:
            cache.seq_len += len(tokens)
        return x[0]

    # -- forward variants ---------------------------------------------------

    def forward_subset_logits(
        self, tokens: list[int], layers: LayerSet, cache: KVCache | None = None
    ) -> np.ndarray:
        """Logits [T, vocab] from running only the given layers (others = identity)."""
        hidden = self._forward_single(tokens, layers, cache)
        return self._final_logits(hidden)

    def forward_subset(
        self, tokens: list[int], layers: LayerSet, cache: KVCache | None = None
    ) -> TokenDist:
        """Next-token distribution at the last position for a layer-subset forward."""
        return TokenDist(self.forward_subset_logits(tokens, layers, cache)[-1])

    def forward_early_exit(
        self, tokens: list[int], exit_layer: int, cache: KVCache | None = None
    ) -> TokenDist:
        """Exit after ``exit_layer`` (inclusive); final norm and unembedding still apply."""
        if not (0 <= exit_layer < self.n_layers):
            raise ValueError(f"exit_layer {exit_layer} out of range [0, {self.n_layers})")
        prefix = LayerSet.full(exit_layer + 1)
        return self.forward_subset(tokens, prefix, cache)

    def forward_with_early_exits(
        self, tokens: list[int], cache: KVCache | None = None
    ) -> tuple[TokenDist, np.ndarray]:
        """Full forward plus the early-exit logits at every layer for the last position.

        Returns (final distribution, per-layer logits [n_layers, vocab]). Row i
        holds the logits obtained by exiting after layer i; row n_layers-1 is
        the full model's output and is reused as the final distribution.
        """
        offset = cache.seq_len if cache is not None else 0
        self._check_tokens(tokens, offset)
        x = self._embed(tokens, offset, n_rows=1)
        last_hidden = np.empty((self.n_layers, self.config.d_model), dtype=np.float32)
        for li in range(self.n_layers):
            past = None
            if cache is not None and cache.keys[li] is not None:
                past = (cache.keys[li][None], cache.values[li][None])
            x, (k, v) = self._layer_step(li, x, past)
            if cache is not None:
                cache.store(li, k[0], v[0])
            last_hidden[li] = x[0, -1]
        if cache is not None:
            cache.seq_len += len(tokens)
        per_layer_logits = self._final_logits(last_hidden)
        return TokenDist(per_layer_logits[-1]), per_layer_logits

    def dual_path_step(
        self,
        tokens: list[int],
        prune_set: LayerSet,
        caches: tuple[KVCache, KVCache],
    ) -> tuple[TokenDist, TokenDist]:
        """One batched forward: row 0 = expert (all layers), row 1 = amateur.

        At every layer in ``prune_set`` the amateur row's layer output is
        overwritten with its layer input, realizing the skip connection. The
        pruning set must stay fixed for the lifetime of the paired caches.
        """
        prune_set.validate_for(self.n_layers)
        expert_cache, amateur_cache = caches
        if amateur_cache.prune_set != prune_set:
            raise ValueError(
                f"caches were built for prune_set {amateur_cache.prune_set}, got {prune_set}"
            )
        if expert_cache.seq_len != amateur_cache.seq_len:
            raise ValueError("paired caches are out of sync")
        offset = expert_cache.seq_len
        self._check_tokens(tokens, offset)

        pruned = set(prune_set)
        x = self._embed(tokens, offset, n_rows=2)
        for li in range(self.n_layers):
            past = None
            if expert_cache.keys[li] is not None:
                past = (
                    np.stack([expert_cache.keys[li], amateur_cache.keys[li]]),
                    np.stack([expert_cache.values[li], amateur_cache.values[li]]),
                )
            y, (k, v) = self._layer_step(li, x, past)
            expert_cache.store(li, k[0], v[0])
            amateur_cache.store(li, k[1], v[1])
            if li in pruned:
                y[1] = x[1]
            x = y
        expert_cache.seq_len += len(tokens)
        amateur_cache.seq_len += len(tokens)
        logits = self._final_logits(x[:, -1])
        return TokenDist(logits[0]), TokenDist(logits[1])
