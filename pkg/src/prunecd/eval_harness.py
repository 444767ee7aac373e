"""Dataset ingestion and metrics: MC1/MC2/MC3, EM/F1, and throughput.

MC2 and MC3 follow the standard multiple-choice conventions: MC2 is the
softmax-normalized likelihood mass on the correct options, MC3 the fraction
of correct options ranked strictly above every incorrect one. EM/F1 use the
common extractive-QA normalization (lowercase, strip punctuation, drop
articles, collapse whitespace). Benchmarks time generation only, on a
monotonic clock, reporting generated tokens per second.
"""

from __future__ import annotations

import json
import re
import string
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .layer_search import mc1_from_scores, option_log_likelihoods
from .model import LayerSet, Model


@dataclass(frozen=True)
class McItem:
    """One multiple-choice question; ``correct_set`` enables MC2/MC3."""

    question: str
    options: tuple[str, ...]
    best: int
    correct_set: frozenset[int] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "options", tuple(self.options))
        if len(self.options) < 2:
            raise ValueError("an MC item needs at least two options")
        if not (0 <= self.best < len(self.options)):
            raise ValueError(f"best index {self.best} out of range")
        if self.correct_set is not None:
            cs = frozenset(int(i) for i in self.correct_set)
            if not cs or any(i < 0 or i >= len(self.options) for i in cs):
                raise ValueError(f"correct_set {sorted(cs)} out of range")
            object.__setattr__(self, "correct_set", cs)

    def to_dict(self) -> dict:
        doc = {"question": self.question, "options": list(self.options), "best": self.best}
        if self.correct_set is not None:
            doc["correct_set"] = sorted(self.correct_set)
        return doc


@dataclass(frozen=True)
class QaItem:
    """One open-ended question with its accepted gold answers."""

    question: str
    gold_answers: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "gold_answers", tuple(self.gold_answers))
        if not self.gold_answers:
            raise ValueError("a QA item needs at least one gold answer")

    def to_dict(self) -> dict:
        return {"question": self.question, "gold_answers": list(self.gold_answers)}


@dataclass(frozen=True)
class BenchResult:
    """Generation throughput for one decode mode."""

    mode: str
    tokens_generated: int
    wall_seconds: float
    model_id: str = ""
    tokens_per_second: float = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "tokens_per_second", self.tokens_generated / self.wall_seconds
        )

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "model_id": self.model_id,
            "tokens_generated": self.tokens_generated,
            "wall_seconds": self.wall_seconds,
            "tokens_per_second": self.tokens_per_second,
        }


# -- multiple choice ---------------------------------------------------------


def mc_metrics_from_scores(
    items: Sequence[McItem], per_item_scores: Sequence[Sequence[float]]
) -> tuple[float, float, float]:
    """(MC1, MC2, MC3) from persisted per-option log-likelihoods."""
    mc1 = mc1_from_scores(items, per_item_scores)
    mc2_vals = []
    mc3_vals = []
    for item, scores in zip(items, per_item_scores):
        if item.correct_set is None:
            raise ValueError(f"item {item.question!r} lacks correct_set for MC2/MC3")
        s = np.asarray(scores, dtype=np.float64)
        probs = np.exp(s - s.max())
        probs /= probs.sum()
        correct = sorted(item.correct_set)
        incorrect = [i for i in range(len(scores)) if i not in item.correct_set]
        mc2_vals.append(float(probs[correct].sum()))
        if incorrect:
            top_incorrect = max(s[i] for i in incorrect)
            above = sum(1 for c in correct if s[c] > top_incorrect)
            mc3_vals.append(above / len(correct))
        else:
            mc3_vals.append(1.0)
    return mc1, float(np.mean(mc2_vals)), float(np.mean(mc3_vals))


def mc_scores(
    model: Model, tokenizer, items: Sequence[McItem], layers: LayerSet
) -> tuple[float, float, float]:
    """(MC1, MC2, MC3) over the items with the given layer subset."""
    per_item = [option_log_likelihoods(model, tokenizer, it, layers) for it in items]
    return mc_metrics_from_scores(items, per_item)


# -- EM / F1 ------------------------------------------------------------------

_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation, drop articles, collapse whitespace."""
    text = text.lower().translate(_PUNCT_TABLE)
    text = _ARTICLE_RE.sub(" ", text)
    return " ".join(text.split())


def em_f1(prediction: str, golds: Sequence[str]) -> tuple[int, float]:
    """Exact match against any gold, and the best token-level F1 over the golds."""
    pred = normalize_answer(prediction)
    best_em = 0
    best_f1 = 0.0
    for gold in golds:
        g = normalize_answer(gold)
        if pred == g:
            best_em = 1
        best_f1 = max(best_f1, _token_f1(pred, g))
    return best_em, best_f1


def _token_f1(pred: str, gold: str) -> float:
    pred_tokens = pred.split()
    gold_tokens = gold.split()
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    common = Counter(pred_tokens) & Counter(gold_tokens)
    n_same = sum(common.values())
    if n_same == 0:
        return 0.0
    precision = n_same / len(pred_tokens)
    recall = n_same / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


# -- benchmarking -------------------------------------------------------------


def bench(
    model: Model,
    tokenizer,
    prompts: Sequence[str],
    config,
    warmup: int = 1,
    model_id: str = "",
) -> BenchResult:
    """Tokens/second of generation over the prompts (tokenization excluded).

    ``warmup`` full passes run and are discarded before the timed pass.
    """
    from .decoding import generate_ids

    if warmup < 1:
        raise ValueError("warmup must be >= 1")
    prompt_ids = [tokenizer.encode(p) for p in prompts]
    for _ in range(warmup):
        for ids in prompt_ids:
            generate_ids(model, ids, config)
    start = time.perf_counter()
    tokens_generated = 0
    for ids in prompt_ids:
        generated, _ = generate_ids(model, ids, config)
        tokens_generated += len(generated)
    wall = time.perf_counter() - start
    if tokens_generated == 0:
        raise ValueError("benchmark generated zero tokens")
    return BenchResult(
        mode=config.mode,
        tokens_generated=tokens_generated,
        wall_seconds=wall,
        model_id=model_id,
    )


# -- JSONL ingestion ----------------------------------------------------------


def _read_jsonl(path: str | Path) -> list[tuple[int, dict]]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            rows.append((lineno, doc))
    return rows


def _require(doc: dict, field_name: str, path, lineno: int):
    if field_name not in doc:
        raise ValidationError(f"{path}:{lineno}: missing field {field_name!r}")
    return doc[field_name]


def load_mc_jsonl(path: str | Path) -> list[McItem]:
    items = []
    for lineno, doc in _read_jsonl(path):
        question = _require(doc, "question", path, lineno)
        options = _require(doc, "options", path, lineno)
        best = _require(doc, "best", path, lineno)
        try:
            items.append(
                McItem(
                    question=question,
                    options=tuple(options),
                    best=int(best),
                    correct_set=(
                        frozenset(doc["correct_set"]) if "correct_set" in doc else None
                    ),
                )
            )
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    if not items:
        raise ValidationError(f"{path}: no MC items found")
    return items


def load_qa_jsonl(path: str | Path) -> list[QaItem]:
    items = []
    for lineno, doc in _read_jsonl(path):
        question = _require(doc, "question", path, lineno)
        golds = _require(doc, "gold_answers", path, lineno)
        try:
            items.append(QaItem(question=question, gold_answers=tuple(golds)))
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    if not items:
        raise ValidationError(f"{path}: no QA items found")
    return items


def load_prompts(path: str | Path) -> list[str]:
    """Prompts stored one JSON string per line."""
    prompts = []
    for lineno, doc in _read_jsonl(path):
        if not isinstance(doc, str):
            raise ValidationError(f"{path}:{lineno}: expected a JSON string")
        prompts.append(doc)
    if not prompts:
        raise ValidationError(f"{path}: no prompts found")
    return prompts


def save_mc_jsonl(path: str | Path, items: Sequence[McItem]) -> None:
    _write_jsonl(path, (it.to_dict() for it in items))


def save_qa_jsonl(path: str | Path, items: Sequence[QaItem]) -> None:
    _write_jsonl(path, (it.to_dict() for it in items))


def save_prompts(path: str | Path, prompts: Sequence[str]) -> None:
    _write_jsonl(path, prompts)


def _write_jsonl(path: str | Path, docs) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for doc in docs:
            f.write(json.dumps(doc, separators=(",", ":")))
            f.write("\n")
