"""Instruction tuning that follows a curriculum plan."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch

from .corpus import TokenizedExample
from .curriculum import CurriculumPlan, rebuild_sorted_epochs
from .difficulty import ScoringOptions, score_dataset
from .errors import DataError, RunFailure
from .model import DecoderLM, batch_answer_nll, checkpoint_bytes

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    n_epochs: int = 3
    batch_size: int = 16
    learning_rate: float = 3e-4
    weight_decay: float = 0.01
    grad_clip: float | None = 1.0
    seed: int = 0
    rescore_after_epoch1: bool = True
    # Governs rescoring only; the training objective is always the
    # per-answer-token mean over the batch.
    loss_reduction: str = "sum"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise DataError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise DataError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise DataError("weight_decay must be non-negative")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise DataError("grad_clip must be positive or None")
        if self.n_epochs < 1:
            raise DataError("n_epochs must be >= 1")


@dataclass
class RunLog:
    epoch_losses: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    step_ids: list[list[int]] = field(default_factory=list)
    plan_digests: list[str] = field(default_factory=list)
    checkpoint_digests: list[str] = field(default_factory=list)
    rescored: bool = False
    events: list[dict] = field(default_factory=list)

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for ev in self.events:
                fh.write(json.dumps(ev, sort_keys=True) + "\n")


def _check_inputs(examples: Sequence[TokenizedExample], plan: CurriculumPlan, model: DecoderLM, config: TrainConfig):
    if [e.id for e in examples] != list(range(len(examples))):
        raise DataError("training examples must have ids 0..n-1 in order")
    if plan.n_examples != len(examples):
        raise DataError(f"plan covers {plan.n_examples} examples but {len(examples)} were given")
    if plan.n_epochs < config.n_epochs:
        raise DataError(f"plan has {plan.n_epochs} epochs, config asks for {config.n_epochs}")
    plan.validate()
    longest = max(len(e.tokens) for e in examples)
    if longest > model.config.max_seq:
        raise DataError(f"longest example ({longest} tokens) exceeds model max_seq {model.config.max_seq}")


def train(
    examples: Sequence[TokenizedExample],
    plan: CurriculumPlan,
    model: DecoderLM,
    config: TrainConfig,
    checkpoint_dir: str | Path | None = None,
    on_epoch_end: Callable[[int, DecoderLM, RunLog], None] | None = None,
) -> tuple[DecoderLM, RunLog, CurriculumPlan]:
    """Train a copy of ``model`` visiting examples in plan order.

    Batches are consecutive slices of each epoch's order. With
    ``rescore_after_epoch1`` the sorted epochs are rebuilt from scores taken
    with the weights at the end of epoch 1. Returns the final state, the run
    log and the plan actually followed.
    """
    _check_inputs(examples, plan, model, config)
    state = copy.deepcopy(model)
    state.train()
    opt = torch.optim.AdamW(
        state.parameters(),
        lr=config.learning_rate,
        betas=config.betas,
        eps=config.eps,
        weight_decay=config.weight_decay,
    )
    runlog = RunLog(plan_digests=[plan.digest()])
    runlog.events.append(
        {"type": "start", "plan_digest": plan.digest(), "config": asdict(config), "objective": "answer-token mean per batch"}
    )
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)

    for epoch in range(1, config.n_epochs + 1):
        t0 = time.perf_counter()
        order = plan.epochs[epoch - 1]
        losses = []
        for b in range(0, len(order), config.batch_size):
            ids = list(order[b : b + config.batch_size])
            batch = [(examples[i].tokens, examples[i].answer_start) for i in ids]
            total, count = batch_answer_nll(state, batch)
            loss = total / count
            value = float(loss.detach())
            if not math.isfinite(value):
                raise RunFailure(f"non-finite loss at step {state.step + 1} (epoch {epoch})")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if config.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(state.parameters(), config.grad_clip)
            opt.step()
            state.step += 1
            losses.append(value)
            runlog.step_losses.append(value)
            runlog.step_ids.append(ids)
            runlog.events.append({"type": "step", "epoch": epoch, "step": state.step, "ids": ids, "loss": value})
        with torch.no_grad():
            if not all(torch.isfinite(p).all() for p in state.parameters()):
                raise RunFailure(f"non-finite parameters after step {state.step}")
        mean = sum(losses) / len(losses)
        seconds = time.perf_counter() - t0
        blob = checkpoint_bytes(state)
        digest = hashlib.sha256(blob).hexdigest()
        if checkpoint_dir is not None:
            (Path(checkpoint_dir) / f"epoch{epoch}.ckpt").write_bytes(blob)
        runlog.epoch_losses.append(mean)
        runlog.epoch_seconds.append(seconds)
        runlog.checkpoint_digests.append(digest)
        runlog.events.append(
            {"type": "epoch", "epoch": epoch, "mean_loss": mean, "seconds": seconds, "checkpoint_sha256": digest}
        )
        log.info("epoch %d: mean loss %.4f (%.1fs)", epoch, mean, seconds)

        if epoch == 1 and config.n_epochs > 1 and config.rescore_after_epoch1 and plan.policy.metric:
            state.eval()
            fresh = score_dataset(
                examples, state, ScoringOptions(metrics=(plan.policy.metric,), reduction=config.loss_reduction)
            )
            state.train()
            plan = rebuild_sorted_epochs(plan, fresh)
            runlog.rescored = True
            runlog.plan_digests.append(plan.digest())
            runlog.events.append({"type": "rescore", "after_epoch": 1, "plan_digest": plan.digest()})

        if on_epoch_end is not None:
            state.eval()
            on_epoch_end(epoch, state, runlog)
            state.train()

    state.eval()
    return state, runlog, plan
