"""Flatness, informativeness, and per-layer divergence diagnostics.

Flatness is the natural-log entropy of a next-token distribution; a flat,
near-uniform amateur carries little contrastive signal. Informativeness is
the overlap between the top-k logit indices of the amateur and expert paths.
The JSD analyses measure, per generated token, how far each layer's
early-exit distribution sits from the final one — the quantity the DoLa
baseline maximizes when picking its contrasting layer.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Sequence

import numpy as np

from .model import LayerSet, Model, TokenDist
from .numerics import softmax_array


def entropy(p: np.ndarray) -> float:
    """Natural-log entropy -sum(p * log p) with 0*log 0 := 0."""
    p = np.asarray(p, dtype=np.float64)
    total = p.sum()
    if abs(total - 1.0) > 1e-4:
        raise ValueError(f"entropy input sums to {total}, not a probability vector")
    if (p < 0).any():
        raise ValueError("entropy input has negative entries")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def topk_overlap(z_a: np.ndarray, z_e: np.ndarray, k: int) -> int:
    """Size of the intersection of the two top-k index sets (ties to lower index)."""
    z_a = np.asarray(z_a)
    z_e = np.asarray(z_e)
    if z_a.shape != z_e.shape:
        raise ValueError(f"shape mismatch: {z_a.shape} vs {z_e.shape}")
    if not (0 < k <= z_a.shape[0]):
        raise ValueError(f"k={k} out of range for vectors of length {z_a.shape[0]}")
    top_a = _topk_indices(z_a, k)
    top_e = _topk_indices(z_e, k)
    return int(len(top_a & top_e))


def _topk_indices(z: np.ndarray, k: int) -> set[int]:
    order = np.argsort(-np.asarray(z, dtype=np.float64), kind="stable")
    return set(int(i) for i in order[:k])


def jsd(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence with natural log: 0.5*KL(p||m) + 0.5*KL(q||m).

    Symmetric, zero iff p == q, bounded by ln 2.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)
    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


def _kl(p: np.ndarray, m: np.ndarray) -> float:
    mask = p > 0
    return float((p[mask] * np.log(p[mask] / m[mask])).sum())


@dataclass
class DiagnosticsReport:
    """Mean entropies and mean top-k overlaps over a prompt set."""

    entropy_full: float
    entropy_early_exit: float
    entropy_pruned: float
    overlap_early_exit: float
    overlap_pruned: float
    k: int
    sample_count: int
    exit_layer: int
    prune_set: list[int]

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def write_json(self, stream: IO[str], config_echo: dict | None = None) -> None:
        doc = self.to_dict()
        if config_echo is not None:
            doc["config"] = config_echo
        json.dump(doc, stream, indent=2, sort_keys=True)
        stream.write("\n")


def flatness_informativeness_sweep(
    model: Model,
    tokenizer,
    prompts: Sequence[str],
    exit_layer: int,
    prune_set: LayerSet,
    k: int = 25,
    position: int = 0,
) -> DiagnosticsReport:
    """Compare full, early-exit, and pruned logits at one generated position.

    For each prompt, the context is the prompt plus ``position`` greedily
    generated tokens; the three paths are then probed at the next position.
    Overlaps are computed on raw logits, entropies on the softmax
    distributions.
    """
    if not prompts:
        raise ValueError("prompt list must be non-empty")
    if not (0 <= exit_layer < model.n_layers):
        raise ValueError(f"exit_layer {exit_layer} out of range")
    prune_set.validate_for(model.n_layers)
    from .decoding import DecodeConfig, generate_ids

    full = model.full_layers()
    pruned_layers = full.difference(prune_set)
    ent_full, ent_early, ent_pruned = [], [], []
    ov_early, ov_pruned = [], []
    for prompt in prompts:
        ids = tokenizer.encode(prompt)
        if position > 0:
            extra, _ = generate_ids(
                model, ids, DecodeConfig(mode="greedy", max_new_tokens=position,
                                         rep_penalty=1.0)
            )
            ids = ids + extra
        expert = model.forward_subset(ids, full)
        early = model.forward_early_exit(ids, exit_layer)
        pruned = model.forward_subset(ids, pruned_layers)
        ent_full.append(entropy(expert.probs))
        ent_early.append(entropy(early.probs))
        ent_pruned.append(entropy(pruned.probs))
        ov_early.append(topk_overlap(early.logits, expert.logits, k))
        ov_pruned.append(topk_overlap(pruned.logits, expert.logits, k))
    return DiagnosticsReport(
        entropy_full=float(np.mean(ent_full)),
        entropy_early_exit=float(np.mean(ent_early)),
        entropy_pruned=float(np.mean(ent_pruned)),
        overlap_early_exit=float(np.mean(ov_early)),
        overlap_pruned=float(np.mean(ov_pruned)),
        k=k,
        sample_count=len(prompts),
        exit_layer=exit_layer,
        prune_set=list(prune_set),
    )


@dataclass
class JsdMatrix:
    """Per-token (rows), per-layer (cols) JSD of early-exit vs final distributions."""

    values: np.ndarray
    tokens: list[int]

    @property
    def n_positions(self) -> int:
        return self.values.shape[0]

    @property
    def n_layers(self) -> int:
        return self.values.shape[1]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["token"] + [f"layer_{i}" for i in range(self.n_layers)])
            for t, row in zip(self.tokens, self.values):
                writer.writerow([t] + [f"{x:.10g}" for x in row])


def _per_layer_logits_for_sequence(
    model: Model, context_ids: list[int], generated: list[int]
) -> np.ndarray:
    """Early-exit logits at every layer for each generated position.

    Returns [n_generated, n_layers, vocab]: one stepwise probe per generated
    token, cache-shared with the previous steps.
    """
    out = np.empty(
        (len(generated), model.n_layers, model.config.vocab_size), dtype=np.float32
    )
    cache = model.new_cache()
    pending = list(context_ids)
    for pos in range(len(generated)):
        _, per_layer = model.forward_with_early_exits(pending, cache)
        out[pos] = per_layer
        pending = [generated[pos]]
    return out


def jsd_matrix(model: Model, tokenizer, prompt: str, config) -> JsdMatrix:
    """Generate under ``config`` and measure per-token, per-layer JSD vs final.

    The final-layer column is exactly zero: exiting after the last layer is
    the full model.
    """
    from .decoding import generate_ids

    prompt_ids = tokenizer.encode(prompt)
    generated, _ = generate_ids(model, prompt_ids, config)
    if not generated:
        return JsdMatrix(values=np.zeros((0, model.n_layers)), tokens=[])
    per_layer = _per_layer_logits_for_sequence(model, prompt_ids, generated)
    values = np.zeros((len(generated), model.n_layers), dtype=np.float64)
    for pos in range(len(generated)):
        probs = softmax_array(per_layer[pos])
        final = probs[-1]
        for li in range(model.n_layers):
            values[pos, li] = jsd(probs[li], final)
    return JsdMatrix(values=values, tokens=list(generated))


def exit_layer_histogram(
    model: Model,
    tokenizer,
    prompts: Sequence[str],
    bucket: str,
    max_new_tokens: int = 16,
) -> dict[int, int]:
    """Count, per bucket layer, how often it attains the maximal JSD per token.

    Tokens come from greedy generation over the prompts; the per-token choice
    is exactly what the DoLa strategy would pick within the bucket.
    """
    from .decoding import (
        DecodeConfig,
        dola_bucket_layers,
        generate_ids,
        select_dola_layer,
    )

    layers = dola_bucket_layers(model.n_layers, bucket)
    counts = {i: 0 for i in layers}
    config = DecodeConfig(mode="greedy", max_new_tokens=max_new_tokens)
    for prompt in prompts:
        prompt_ids = tokenizer.encode(prompt)
        generated, _ = generate_ids(model, prompt_ids, config)
        if not generated:
            continue
        per_layer = _per_layer_logits_for_sequence(model, prompt_ids, generated)
        for pos in range(len(generated)):
            bucket_dists = [TokenDist(per_layer[pos, i]) for i in layers]
            final = TokenDist(per_layer[pos, model.n_layers - 1])
            chosen = select_dola_layer(bucket_dists, final, layers)
            counts[chosen] += 1
    return counts
