"""Token-selection strategies: greedy, contrastive (pruned amateur), and DoLa.

All three modes share one pipeline per step: obtain expert (and, depending on
the mode, amateur) distributions, apply the repetition penalty to the expert
logits, gate candidates through the adaptive plausibility constraint, then
rank the surviving candidates by the contrastive score
``log p_expert - lam * log p_amateur``. Greedy is the lam=0 special case with
the amateur set to the expert; DoLa picks its amateur per token as the
bucket layer whose early-exit distribution maximizes JSD from the final one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

from .diagnostics import jsd
from .errors import CapacityError
from .model import KVCache, LayerSet, Model, TokenDist

# Floor applied to amateur probabilities before the log so the contrastive
# score stays finite even for pathological amateurs.
AMATEUR_PROB_FLOOR = 1e-30

MODES = ("greedy", "dola", "prunecd")
DOLA_BUCKETS = ("lower", "upper")


@dataclass(frozen=True)
class DecodeConfig:
    """Strategy selector plus the shared decoding knobs."""

    mode: str = "greedy"
    lam: float = 0.0
    alpha: float = 0.1
    rep_penalty: float = 1.2
    max_new_tokens: int = 64
    prune_set: LayerSet | None = None
    dola_bucket: str = "upper"
    stop_ids: frozenset[int] = frozenset()
    # The penalty hits both paths' logits by default: a one-sided penalty would
    # break the exact lam<1 equivalence between an un-pruned contrast and
    # greedy (the score would mix penalized and raw log-probabilities).
    penalize_amateur: bool = True

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}, expected one of {MODES}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if not (0 < self.alpha <= 1):
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.rep_penalty < 1:
            raise ValueError(f"rep_penalty must be >= 1, got {self.rep_penalty}")
        if self.max_new_tokens < 1:
            raise ValueError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")
        if self.mode == "prunecd" and self.prune_set is None:
            raise ValueError("prunecd mode requires a prune_set")
        if self.mode == "dola" and self.dola_bucket not in DOLA_BUCKETS:
            raise ValueError(f"dola_bucket must be one of {DOLA_BUCKETS}")


@dataclass
class StepTrace:
    """Per-step record of the selection pipeline.

    ``expert`` is the distribution actually used for selection, i.e. after the
    repetition penalty; ``amateur`` is the raw model output of the contrast
    path.
    """

    position: int
    expert: TokenDist
    amateur: TokenDist | None
    plausible_set: np.ndarray
    chosen: int
    dola_exit_layer: int | None = None
    scores: np.ndarray | None = field(default=None, repr=False)

    def to_json(self) -> str:
        return json.dumps(
            {
                "position": self.position,
                "chosen": self.chosen,
                "dola_exit_layer": self.dola_exit_layer,
                "plausible_set": [int(i) for i in self.plausible_set],
                "expert_logits": [float(x) for x in self.expert.logits],
                "amateur_logits": (
                    None if self.amateur is None
                    else [float(x) for x in self.amateur.logits]
                ),
            },
            separators=(",", ":"),
        )


def plausible_set(expert: TokenDist, alpha: float) -> np.ndarray:
    """Token ids whose expert probability is >= alpha * max probability.

    Always contains the expert argmax; returned sorted ascending.
    """
    if not (0 < alpha <= 1):
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    p = expert.probs
    threshold = alpha * p.max()
    return np.flatnonzero(p >= threshold)


def cd_score(
    expert: TokenDist,
    amateur: TokenDist,
    lam: float,
    candidates: np.ndarray | Sequence[int],
) -> np.ndarray:
    """Contrastive score log p_expert - lam * log p_amateur over the candidates.

    Scores align with ``candidates`` order; tokens outside the candidate set
    take no part in selection. Amateur probabilities are floored before the
    log so a zero never produces an infinite score.
    """
    idx = np.asarray(candidates, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("candidate set must be non-empty")
    if expert.vocab_size != amateur.vocab_size:
        raise ValueError("expert and amateur distributions have different vocab sizes")
    log_pe = np.log(np.maximum(expert.probs[idx].astype(np.float64), AMATEUR_PROB_FLOOR))
    if lam == 0.0:
        return log_pe
    log_pa = np.log(np.maximum(amateur.probs[idx].astype(np.float64), AMATEUR_PROB_FLOOR))
    return log_pe - lam * log_pa


def apply_repetition_penalty(
    logits: np.ndarray, history: Sequence[int], theta: float
) -> np.ndarray:
    """CTRL-style penalty on previously seen tokens: divide positive logits by
    theta, multiply non-positive ones."""
    if theta < 1:
        raise ValueError(f"theta must be >= 1, got {theta}")
    out = np.array(logits, dtype=np.float32, copy=True)
    if theta == 1.0 or len(history) == 0:
        return out
    seen = np.unique(np.asarray(list(history), dtype=np.int64))
    vals = out[seen]
    out[seen] = np.where(vals > 0, vals / theta, vals * theta)
    return out


def select_dola_layer(
    per_layer: Sequence[TokenDist],
    final: TokenDist,
    layers: Sequence[int] | None = None,
) -> int:
    """Bucket layer whose early-exit distribution maximizes JSD from the final.

    Ties break toward the smallest layer index. ``layers`` maps list positions
    to absolute layer indices; by default positions are returned directly.
    """
    if len(per_layer) == 0:
        raise ValueError("bucket must be non-empty")
    divergences = [jsd(dist.probs, final.probs) for dist in per_layer]
    best = int(np.argmax(divergences))
    return int(layers[best]) if layers is not None else best


def dola_bucket_layers(n_layers: int, bucket: str) -> list[int]:
    """Candidate early-exit layers: lower half, or upper half excluding the final layer."""
    half = n_layers // 2
    if bucket == "lower":
        return list(range(0, half))
    if bucket == "upper":
        return list(range(half, n_layers - 1))
    raise ValueError(f"unknown bucket {bucket!r}")


class _GreedySource:
    def __init__(self, model: Model):
        self.model = model
        self.cache = model.new_cache()
        self.layers = model.full_layers()

    def step(self, tokens: list[int]) -> tuple[TokenDist, TokenDist | None, int | None]:
        return self.model.forward_subset(tokens, self.layers, self.cache), None, None


class _PruneCdSource:
    def __init__(self, model: Model, prune_set: LayerSet):
        prune_set.validate_for(model.n_layers)
        self.model = model
        self.prune_set = prune_set
        self.caches = model.new_dual_caches(prune_set)

    def step(self, tokens: list[int]) -> tuple[TokenDist, TokenDist | None, int | None]:
        expert, amateur = self.model.dual_path_step(tokens, self.prune_set, self.caches)
        return expert, amateur, None


class _DolaSource:
    def __init__(self, model: Model, bucket: str):
        self.model = model
        self.cache = model.new_cache()
        self.bucket_layers = dola_bucket_layers(model.n_layers, bucket)
        if not self.bucket_layers:
            raise ValueError(f"bucket {bucket!r} is empty for {model.n_layers} layers")

    def step(self, tokens: list[int]) -> tuple[TokenDist, TokenDist | None, int | None]:
        final, per_layer_logits = self.model.forward_with_early_exits(tokens, self.cache)
        bucket_dists = [TokenDist(per_layer_logits[i]) for i in self.bucket_layers]
        exit_layer = select_dola_layer(bucket_dists, final, self.bucket_layers)
        amateur = bucket_dists[self.bucket_layers.index(exit_layer)]
        return final, amateur, exit_layer


def _make_source(model: Model, config: DecodeConfig):
    if config.mode == "greedy":
        return _GreedySource(model)
    if config.mode == "prunecd":
        return _PruneCdSource(model, config.prune_set)
    return _DolaSource(model, config.dola_bucket)


def decode_step(
    expert_raw: TokenDist,
    amateur: TokenDist | None,
    config: DecodeConfig,
    history: Sequence[int],
    position: int,
    dola_exit_layer: int | None = None,
) -> StepTrace:
    """Apply penalty, plausibility gate, and contrastive ranking to one step."""
    penalized = apply_repetition_penalty(expert_raw.logits, history, config.rep_penalty)
    expert = TokenDist(penalized)
    candidates = plausible_set(expert, config.alpha)
    lam = 0.0 if config.mode == "greedy" else config.lam
    if amateur is None:
        contrast = expert
    elif config.penalize_amateur:
        contrast = TokenDist(
            apply_repetition_penalty(amateur.logits, history, config.rep_penalty)
        )
    else:
        contrast = amateur
    scores = cd_score(expert, contrast, lam, candidates)
    chosen = int(candidates[int(np.argmax(scores))])
    return StepTrace(
        position=position,
        expert=expert,
        amateur=amateur,
        plausible_set=candidates,
        chosen=chosen,
        dola_exit_layer=dola_exit_layer,
        scores=scores,
    )


def generate_ids(
    model: Model, prompt_ids: list[int], config: DecodeConfig, source=None
) -> tuple[list[int], list[StepTrace]]:
    """Autoregressive generation from token ids; returns (generated ids, traces).

    The prompt is processed in one multi-token forward that fills the caches;
    each subsequent step feeds only the newly chosen token. A stop token ends
    generation and is excluded from the returned ids. ``source`` overrides the
    per-step distribution provider (an object with
    ``step(tokens) -> (expert, amateur | None, exit_layer | None)``).
    """
    if len(prompt_ids) + config.max_new_tokens > model.config.max_seq:
        raise CapacityError(
            f"prompt ({len(prompt_ids)}) plus budget ({config.max_new_tokens}) "
            f"exceeds max_seq {model.config.max_seq}"
        )
    if source is None:
        source = _make_source(model, config)
    history = list(prompt_ids)
    generated: list[int] = []
    traces: list[StepTrace] = []
    pending = list(prompt_ids)
    for position in range(config.max_new_tokens):
        expert_raw, amateur, exit_layer = source.step(pending)
        trace = decode_step(expert_raw, amateur, config, history, position, exit_layer)
        traces.append(trace)
        if trace.chosen in config.stop_ids:
            break
        generated.append(trace.chosen)
        history.append(trace.chosen)
        pending = [trace.chosen]
    return generated, traces


def generate(
    model: Model, tokenizer, prompt: str, config: DecodeConfig
) -> tuple[str, list[StepTrace]]:
    """Generate text from a prompt; returns (generated text, step traces)."""
    prompt_ids = tokenizer.encode(prompt)
    generated, traces = generate_ids(model, prompt_ids, config)
    return tokenizer.decode(generated), traces


def write_traces(traces: Sequence[StepTrace], stream: IO[str]) -> None:
    """Serialize step traces as JSON lines."""
    for trace in traces:
        stream.write(trace.to_json())
        stream.write("\n")
