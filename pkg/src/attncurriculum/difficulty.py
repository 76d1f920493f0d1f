"""Per-example difficulty scores and the score cache file.

Three scores per example:

* length: token count of the whole rendered sequence (prompt, answer and
  end-of-sequence).
* attention: for each layer, the population variance of every attention
  probability whose query lies in the answer span, pooled over heads and
  restricted to causal support; averaged over layers.
* loss: answer-span cross-entropy (summed by default).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import TokenizedExample
from .errors import DataError
from .model import DecoderLM, ForwardResult, fingerprint, forward, masked_loss, with_precision

log = logging.getLogger(__name__)

CACHE_FORMAT = "attncurriculum-score-cache"
CACHE_VERSION = 1
METRICS = ("length", "attention", "loss")


@dataclass(frozen=True)
class DifficultyRecord:
    id: int
    length_score: int
    attention_score: float | None = None
    loss_score: float | None = None
    model_fingerprint: str | None = None


@dataclass(frozen=True)
class ScoringOptions:
    metrics: tuple[str, ...] = METRICS
    reduction: str = "sum"
    precision: str = "double"
    on_error: str = "abort"  # or "skip"
    jobs: int = 1

    def __post_init__(self):
        bad = set(self.metrics) - set(METRICS)
        if bad or not self.metrics:
            raise DataError(f"metrics must be a non-empty subset of {METRICS}, got {self.metrics}")
        if self.reduction not in ("sum", "mean"):
            raise DataError(f"unknown reduction {self.reduction!r}")
        if self.on_error not in ("abort", "skip"):
            raise DataError("on_error must be 'abort' or 'skip'")

    @property
    def needs_model(self) -> bool:
        return "attention" in self.metrics or "loss" in self.metrics


@dataclass
class ScoreCache:
    header: dict
    rows: list[DifficultyRecord] = field(default_factory=list)

    @property
    def ids(self) -> list[int]:
        return [r.id for r in self.rows]

    def by_id(self) -> dict[int, DifficultyRecord]:
        return {r.id: r for r in self.rows}

    def to_text(self) -> str:
        lines = [json.dumps(self.header, sort_keys=True)]
        metrics = self.header["options"]["metrics"]
        for r in self.rows:
            parts = [f'"id": {r.id}', f'"length": {r.length_score}']
            if "attention" in metrics:
                parts.append(f'"attention": {_fmt(r.attention_score)}')
            if "loss" in metrics:
                parts.append(f'"loss": {_fmt(r.loss_score)}')
            lines.append("{" + ", ".join(parts) + "}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ScoreCache":
        lines = [ln for ln in text.split("\n") if ln]
        if not lines:
            raise DataError("empty score cache")
        header = json.loads(lines[0])
        if header.get("format") != CACHE_FORMAT or header.get("version") != CACHE_VERSION:
            raise DataError("not a score cache (format/version mismatch)")
        fp = header.get("model_fingerprint")
        rows = []
        for ln in lines[1:]:
            obj = json.loads(ln)
            rows.append(
                DifficultyRecord(obj["id"], obj["length"], obj.get("attention"), obj.get("loss"), fp)
            )
        cache = cls(header, rows)
        cache.validate()
        return cache

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ScoreCache":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def validate(self, state: DecoderLM | None = None) -> None:
        """Check row ordering and, if given, that ``state`` produced the scores."""
        ids = self.ids
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise DataError("score cache ids must be strictly increasing")
        if state is not None and self.header.get("model_fingerprint") is not None:
            fp = fingerprint(state)
            if fp != self.header["model_fingerprint"]:
                raise DataError(
                    f"model fingerprint mismatch: cache {self.header['model_fingerprint'][:12]}, model {fp[:12]}"
                )


def _fmt(x: float | None) -> str:
    if x is None:
        return "null"
    return format(x, ".17g")


def score_length(example: TokenizedExample) -> int:
    return len(example.tokens)


def score_attention(capture: Sequence[np.ndarray], answer_start: int) -> float:
    """Mean over layers of the pooled population variance of answer-row attention.

    ``capture`` holds one (heads, T, T) probability array per layer.
    """
    if not len(capture):
        raise DataError("empty attention capture")
    variances = []
    for layer in capture:
        layer = np.asarray(layer, dtype=np.float64)
        T = layer.shape[-1]
        if answer_start >= T:
            raise DataError("no query positions at or after answer_start")
        if answer_start < 0:
            raise DataError("answer_start must be non-negative")
        rows = np.arange(answer_start, T)
        support = np.arange(T)[None, :] <= rows[:, None]  # (R, T)
        pooled = layer[:, answer_start:, :][:, support]  # (H, n_entries)
        variances.append(float(np.var(pooled)))
    return float(np.mean(variances))


def score_loss(result: ForwardResult, answer_start: int, reduction: str = "sum") -> float:
    return masked_loss(result, answer_start, reduction)


def score_example(example: TokenizedExample, state: DecoderLM | None, options: ScoringOptions, fp: str | None):
    attention = loss = None
    if options.needs_model:
        result = forward(state, example.tokens, capture_attention="attention" in options.metrics)
        if "attention" in options.metrics:
            attention = score_attention(result.capture, example.answer_start)
        if "loss" in options.metrics:
            loss = score_loss(result, example.answer_start, options.reduction)
        for name, v in (("attention", attention), ("loss", loss)):
            if v is not None and not (math.isfinite(v) and v >= 0):
                raise DataError(f"{name} score {v} is not finite and non-negative")
    return DifficultyRecord(example.id, score_length(example), attention, loss, fp)


def score_dataset(
    examples: Sequence[TokenizedExample],
    state: DecoderLM | None,
    options: ScoringOptions = ScoringOptions(),
    tokenizer_digest: str | None = None,
    template_digest: str | None = None,
) -> ScoreCache:
    """Score every example with one captured forward pass each.

    Rows come back in ascending id order whatever the worker count.
    """
    if options.needs_model and state is None:
        raise DataError("attention scoring requires a model" if "attention" in options.metrics
                        else "loss scoring requires a model")
    fp = None
    scorer = None
    if options.needs_model:
        fp = fingerprint(state)
        scorer = with_precision(state, options.precision)
        for ex in examples:
            if len(ex.tokens) > scorer.config.max_seq:
                raise DataError(f"example {ex.id}: length {len(ex.tokens)} exceeds max_seq")

    def one(ex):
        try:
            return score_example(ex, scorer, options, fp)
        except DataError as exc:
            if options.on_error == "skip":
                log.warning("skipping example %d: %s", ex.id, exc)
                return None
            raise DataError(f"example {ex.id}: {exc}") from exc

    ordered = sorted(examples, key=lambda e: e.id)
    if options.jobs > 1:
        with ThreadPoolExecutor(options.jobs) as pool:
            results = list(pool.map(one, ordered))
    else:
        results = [one(ex) for ex in ordered]
    rows = [r for r in results if r is not None]

    header = {
        "format": CACHE_FORMAT,
        "version": CACHE_VERSION,
        "tokenizer_digest": tokenizer_digest,
        "template_digest": template_digest,
        "model_fingerprint": fp,
        "options": {
            "metrics": [m for m in METRICS if m in options.metrics],
            "loss_reduction": options.reduction,
            "precision": options.precision,
            "on_error": options.on_error,
            "length_includes_answer": True,
            "attention_pooling": "heads+answer_rows,causal_support,population_variance",
            "attention_query_rows": "position >= answer_start",
        },
        "skipped": [e.id for e, r in zip(ordered, results) if r is None],
    }
    cache = ScoreCache(header, rows)
    cache.validate()
    return cache
