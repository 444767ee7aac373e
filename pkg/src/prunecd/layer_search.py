"""Search for the pruning set: which layers hurt factuality most when removed.

The search ablates one layer at a time, measures the drop in MC1 on a
multiple-choice set, and keeps the top-k layers by degradation. An exhaustive
subset search over the same objective is provided as a test oracle for tiny
models, and a perplexity-based greedy filter can shrink the candidate pool to
half the stack before the MC sweep.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import combinations
from math import comb
from typing import IO, TYPE_CHECKING, Sequence

import numpy as np

from .errors import CapacityError
from .model import LayerSet, Model
from .numerics import log_softmax_array

if TYPE_CHECKING:
    from .eval_harness import McItem

# Exhaustive search refuses above this many subsets; one MC sweep per subset
# is already impractical well below it on real models.
MAX_EXHAUSTIVE_SUBSETS = 50_000

PERPLEXITY_WINDOW = 512


@dataclass(frozen=True)
class AblationRecord:
    """MC1 with and without one layer, and the degradation it caused."""

    layer: int
    mc1_full: float
    mc1_ablated: float

    @property
    def delta(self) -> float:
        return self.mc1_full - self.mc1_ablated

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "mc1_full": self.mc1_full,
            "mc1_ablated": self.mc1_ablated,
            "delta": self.delta,
        }


@dataclass(frozen=True)
class PerplexityRecord:
    """Cumulative removed set after one greedy filter step, and its perplexity."""

    layer_set: LayerSet
    ppl: float


@dataclass
class SearchReport:
    """Everything the search produced, persistable as JSON."""

    records: list[AblationRecord]
    chosen: LayerSet
    k: int
    method: str
    filtered_candidates: LayerSet | None = None

    def to_dict(self) -> dict:
        return {
            "records": [r.to_dict() for r in self.records],
            "chosen": list(self.chosen),
            "k": self.k,
            "method": self.method,
            "filtered_candidates": (
                None if self.filtered_candidates is None else list(self.filtered_candidates)
            ),
        }

    def write_json(self, stream: IO[str], config_echo: dict | None = None) -> None:
        doc = self.to_dict()
        if config_echo is not None:
            doc["config"] = config_echo
        json.dump(doc, stream, indent=2, sort_keys=True)
        stream.write("\n")

    @classmethod
    def from_dict(cls, doc: dict) -> "SearchReport":
        return cls(
            records=[
                AblationRecord(r["layer"], r["mc1_full"], r["mc1_ablated"])
                for r in doc["records"]
            ],
            chosen=LayerSet.of(doc["chosen"]),
            k=doc["k"],
            method=doc["method"],
            filtered_candidates=(
                None if doc.get("filtered_candidates") is None
                else LayerSet.of(doc["filtered_candidates"])
            ),
        )


def option_log_likelihoods(
    model: Model, tokenizer, item: "McItem", layers: LayerSet
) -> list[float]:
    """Total log-likelihood of each option's tokens conditioned on the question."""
    context = tokenizer.encode(item.question)
    scores = []
    for option in item.options:
        option_ids = tokenizer.encode(" " + option, add_bos=False)
        full = context + option_ids
        logits = model.forward_subset_logits(full, layers)
        log_probs = log_softmax_array(logits)
        start = len(context) - 1
        score = sum(
            float(log_probs[start + j, tok]) for j, tok in enumerate(option_ids)
        )
        scores.append(score)
    return scores


def mc1_from_scores(items: Sequence["McItem"], per_item_scores: Sequence[Sequence[float]]) -> float:
    """Fraction of items whose best-marked option scores strictly highest (ties lose)."""
    if len(items) == 0:
        raise ValueError("item list must be non-empty")
    correct = 0
    for item, scores in zip(items, per_item_scores):
        best = scores[item.best]
        if all(best > s for i, s in enumerate(scores) if i != item.best):
            correct += 1
    return correct / len(items)


def mc1_score(model: Model, tokenizer, items: Sequence["McItem"], layers: LayerSet) -> float:
    """MC1 over the items with the given layer subset."""
    scores = [option_log_likelihoods(model, tokenizer, item, layers) for item in items]
    return mc1_from_scores(items, scores)


def single_layer_ablation(
    model: Model,
    tokenizer,
    items: Sequence["McItem"],
    layers_to_test: LayerSet,
) -> list[AblationRecord]:
    """MC1 degradation from removing each candidate layer individually.

    The full-stack score is computed once and reused across records.
    """
    if len(layers_to_test) == 0:
        raise ValueError("layers_to_test must be non-empty")
    layers_to_test.validate_for(model.n_layers)
    full = model.full_layers()
    mc_full = mc1_score(model, tokenizer, items, full)
    records = []
    for layer in layers_to_test:
        ablated = full.difference(LayerSet.of([layer]))
        mc_abl = mc1_score(model, tokenizer, items, ablated)
        records.append(AblationRecord(layer=layer, mc1_full=mc_full, mc1_ablated=mc_abl))
    return records


def select_pruning_set(records: Sequence[AblationRecord], k: int) -> LayerSet:
    """The k layers with the largest degradation; ties go to the lower index."""
    if not (1 <= k <= len(records)):
        raise ValueError(f"k={k} out of range for {len(records)} records")
    ranked = sorted(records, key=lambda r: (-r.delta, r.layer))
    return LayerSet.of(r.layer for r in ranked[:k])


def exhaustive_search(
    model: Model, tokenizer, items: Sequence["McItem"], k_max: int
) -> LayerSet:
    """Best pruning set over all subsets with fewer than k_max layers.

    Enumeration order is by size then lexicographic, keeping strictly better
    subsets only, so ties resolve to the smallest, lexicographically first
    set. Intended as a tiny-model oracle; refuses oversized search spaces.
    """
    if k_max < 2:
        raise ValueError("k_max must be >= 2 (k_max=1 admits only the empty set)")
    n = model.n_layers
    n_subsets = sum(comb(n, s) for s in range(min(k_max, n + 1)))
    if n_subsets > MAX_EXHAUSTIVE_SUBSETS:
        raise CapacityError(
            f"{n_subsets} subsets exceed the exhaustive-search guard "
            f"({MAX_EXHAUSTIVE_SUBSETS})"
        )
    full = model.full_layers()
    mc_full = mc1_score(model, tokenizer, items, full)
    best_set = LayerSet.empty()
    best_delta = 0.0
    for size in range(1, min(k_max, n + 1)):
        for subset in combinations(range(n), size):
            candidate = LayerSet(subset)
            mc = mc1_score(model, tokenizer, items, full.difference(candidate))
            delta = mc_full - mc
            if delta > best_delta:
                best_delta = delta
                best_set = candidate
    return best_set


def perplexity(model: Model, corpus: Sequence[Sequence[int]], layers: LayerSet) -> float:
    """exp(mean next-token NLL) over all corpus positions with the layer subset."""
    if len(corpus) == 0:
        raise ValueError("corpus must be non-empty")
    total_nll = 0.0
    positions = 0
    for seq in corpus:
        seq = list(seq)
        if len(seq) < 2:
            continue
        logits = model.forward_subset_logits(seq, layers)
        log_probs = log_softmax_array(logits[:-1])
        targets = np.asarray(seq[1:], dtype=np.int64)
        total_nll -= float(log_probs[np.arange(len(targets)), targets].sum())
        positions += len(targets)
    if positions == 0:
        raise ValueError("corpus has no scorable positions (all sequences < 2 tokens)")
    return float(np.exp(total_nll / positions))


def corpus_windows(text: str, tokenizer, window: int = PERPLEXITY_WINDOW) -> list[list[int]]:
    """Tokenize plain text into fixed-size windows for perplexity runs."""
    ids = tokenizer.encode(text)
    return [ids[i : i + window] for i in range(0, len(ids), window) if len(ids[i : i + window]) >= 2]


def sleb_filter_steps(
    model: Model, corpus: Sequence[Sequence[int]], target_count: int
) -> list[PerplexityRecord]:
    """Greedy removal trace: at each step drop the layer whose additional
    removal yields the lowest corpus perplexity (ties to the lower index)."""
    n = model.n_layers
    if not (0 < target_count < n):
        raise ValueError(f"target_count must be in (0, {n}), got {target_count}")
    full = model.full_layers()
    removed: set[int] = set()
    steps: list[PerplexityRecord] = []
    for _ in range(target_count):
        best_layer = None
        best_ppl = None
        for layer in range(n):
            if layer in removed:
                continue
            candidate = full.difference(LayerSet.of(removed | {layer}))
            ppl = perplexity(model, corpus, candidate)
            if best_ppl is None or ppl < best_ppl:
                best_ppl = ppl
                best_layer = layer
        removed.add(best_layer)
        steps.append(PerplexityRecord(layer_set=LayerSet.of(removed), ppl=best_ppl))
    return steps


def sleb_filter(
    model: Model, corpus: Sequence[Sequence[int]], target_count: int | None = None
) -> LayerSet:
    """The removed set after target_count greedy steps (default: half the stack)."""
    if target_count is None:
        target_count = model.n_layers // 2
    return sleb_filter_steps(model, corpus, target_count)[-1].layer_set


def run_search(
    model: Model,
    tokenizer,
    items: Sequence["McItem"],
    k: int,
    filter_corpus: Sequence[Sequence[int]] | None = None,
    exhaustive: bool = False,
) -> SearchReport:
    """Full pipeline: optional perplexity filter, per-layer ablation, top-k pick."""
    filtered: LayerSet | None = None
    candidates = model.full_layers()
    if filter_corpus is not None:
        filtered = sleb_filter(model, filter_corpus)
        candidates = filtered
    records = single_layer_ablation(model, tokenizer, items, candidates)
    if exhaustive:
        chosen = exhaustive_search(model, tokenizer, items, k_max=k + 1)
        method = "exhaustive"
    else:
        chosen = select_pruning_set(records, k)
        method = "greedy-topk"
    return SearchReport(
        records=records, chosen=chosen, k=k, method=method, filtered_candidates=filtered
    )
