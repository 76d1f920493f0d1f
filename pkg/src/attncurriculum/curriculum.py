"""Per-epoch visiting orders built from a score cache.

Epoch 1 is always a seeded Fisher-Yates shuffle. For sorted policies every
later epoch uses one stable order of ids by difficulty, ties by ascending
id; for the random policy each later epoch is a fresh shuffle drawn from
the same generator stream.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

from .difficulty import DifficultyRecord, ScoreCache
from .errors import DataError
from .rng import SplitMix64, fisher_yates

POLICY_KINDS = ("random", "length", "attention", "loss")
DIRECTIONS = ("easy_to_hard", "hard_to_easy")
PLAN_FORMAT = "attncurriculum-plan"


@dataclass(frozen=True)
class OrderingPolicy:
    kind: str = "random"
    direction: str = "easy_to_hard"

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise DataError(f"unknown policy {self.kind!r}; expected one of {POLICY_KINDS}")
        if self.direction not in DIRECTIONS:
            raise DataError(f"unknown direction {self.direction!r}")

    @property
    def metric(self) -> str | None:
        return None if self.kind == "random" else self.kind


def sort_key(policy: OrderingPolicy, record: DifficultyRecord) -> float:
    """Smaller key = visited earlier.

    Easy first means short prompts, low loss, and high attention variance
    (attention concentrated on a few tokens); low variance sorts last.
    """
    if policy.kind == "random":
        raise DataError("the random policy has no sort key")
    if policy.kind == "length":
        key = float(record.length_score)
    elif policy.kind == "loss":
        key = record.loss_score
    else:
        key = None if record.attention_score is None else -record.attention_score
    if key is None:
        raise DataError(f"record {record.id} has no {policy.kind} score")
    return key if policy.direction == "easy_to_hard" else -key


def sorted_order(cache: ScoreCache, policy: OrderingPolicy) -> list[int]:
    return [r.id for r in sorted(cache.rows, key=lambda r: (sort_key(policy, r), r.id))]


@dataclass(frozen=True)
class CurriculumPlan:
    n_examples: int
    n_epochs: int
    seed: int
    policy: OrderingPolicy
    epochs: tuple[tuple[int, ...], ...]
    cache_digest: str | None = None

    def to_text(self) -> str:
        header = {
            "format": PLAN_FORMAT,
            "version": 1,
            "policy": self.policy.kind,
            "direction": self.policy.direction,
            "seed": self.seed,
            "n_epochs": self.n_epochs,
            "n_examples": self.n_examples,
            "cache_digest": self.cache_digest,
        }
        lines = [json.dumps(header, sort_keys=True)]
        lines += [json.dumps({"epoch": i + 1, "order": list(order)}) for i, order in enumerate(self.epochs)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CurriculumPlan":
        lines = [ln for ln in text.split("\n") if ln]
        header = json.loads(lines[0])
        if header.get("format") != PLAN_FORMAT:
            raise DataError("not a plan file")
        epochs = tuple(tuple(json.loads(ln)["order"]) for ln in lines[1:])
        plan = cls(
            header["n_examples"],
            header["n_epochs"],
            header["seed"],
            OrderingPolicy(header["policy"], header["direction"]),
            epochs,
            header["cache_digest"],
        )
        plan.validate()
        return plan

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "CurriculumPlan":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def validate(self) -> None:
        if len(self.epochs) != self.n_epochs:
            raise DataError(f"plan lists {len(self.epochs)} epochs, header says {self.n_epochs}")
        full = list(range(self.n_examples))
        for i, order in enumerate(self.epochs, start=1):
            if sorted(order) != full:
                raise DataError(f"epoch {i} is not a permutation of 0..{self.n_examples - 1}")


def _check_ids(cache: ScoreCache) -> int:
    if not cache.rows:
        raise DataError("cannot build a plan from an empty score cache")
    n = len(cache.rows)
    if cache.ids != list(range(n)):
        raise DataError("score cache ids must be exactly 0..n-1 to build a plan")
    return n


def build_plan(cache: ScoreCache, policy: OrderingPolicy, n_epochs: int, seed: int) -> CurriculumPlan:
    if n_epochs < 1:
        raise DataError("n_epochs must be >= 1")
    n = _check_ids(cache)
    rng = SplitMix64(seed)
    epochs = [tuple(fisher_yates(n, rng))]
    if n_epochs > 1:
        if policy.kind == "random":
            epochs += [tuple(fisher_yates(n, rng)) for _ in range(n_epochs - 1)]
        else:
            order = tuple(sorted_order(cache, policy))
            epochs += [order] * (n_epochs - 1)
    plan = CurriculumPlan(n, n_epochs, seed, policy, tuple(epochs), cache.digest())
    plan.validate()
    return plan


def rebuild_sorted_epochs(plan: CurriculumPlan, fresh_cache: ScoreCache) -> CurriculumPlan:
    """Recompute epochs >= 2 from ``fresh_cache``; epoch 1 and random policies are kept."""
    if sorted(fresh_cache.ids) != list(range(plan.n_examples)):
        raise DataError("fresh score cache does not cover the plan's id set")
    if plan.policy.kind == "random" or plan.n_epochs == 1:
        return plan
    order = tuple(sorted_order(fresh_cache, plan.policy))
    epochs = (plan.epochs[0],) + (order,) * (plan.n_epochs - 1)
    return replace(plan, epochs=epochs, cache_digest=fresh_cache.digest())
