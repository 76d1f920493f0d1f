"""Held-out evaluation and the epochs x method comparison grid."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch

from .corpus import InstructionRecord, PromptTemplate, Tokenizer, TokenizedExample, encode_example
from .curriculum import OrderingPolicy, build_plan
from .difficulty import ScoringOptions, score_dataset
from .errors import CurriculumError, DataError, RunFailure
from .model import DecoderLM, ModelConfig, forward, init_model
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

# Row order inside an epoch group, as in the published tables.
METHOD_ORDER = ("random", "attention", "loss", "length")
BASE_LABEL = "Base Model"
AVERAGE_TOLERANCE = 0.005


@dataclass(frozen=True)
class TaskItem:
    prompt: tuple[int, ...]
    answer: str


@dataclass
class EvalSuite:
    held_out: list[TokenizedExample]
    tasks: dict[str, list[TaskItem]]
    eos_id: int = 1
    decode: Callable[[Sequence[int]], str] | None = None


def build_suite(
    heldout: Sequence[InstructionRecord],
    train_records: Sequence[InstructionRecord],
    template: PromptTemplate,
    tokenizer: Tokenizer,
    max_len: int,
    task_of: Callable[[InstructionRecord], str | None] = lambda r: "exact_match",
) -> EvalSuite:
    """Encode held-out records for perplexity and group them into exact-match tasks.

    Records are identified by content, so held-out and training sets are
    disjoint when no (instruction, input, output) triple appears in both.
    """
    train_keys = {(r.instruction, r.input, r.output) for r in train_records}
    overlap = [r.id for r in heldout if (r.instruction, r.input, r.output) in train_keys]
    if overlap:
        raise DataError(f"held-out records {overlap[:5]} also appear in the training set")
    examples = [encode_example(r, template, tokenizer, max_len) for r in heldout]
    tasks: dict[str, list[TaskItem]] = {}
    for r, ex in zip(heldout, examples):
        name = task_of(r)
        if name is None:
            continue
        tasks.setdefault(name, []).append(TaskItem(ex.tokens[: ex.answer_start], r.output))
    return EvalSuite(examples, dict(sorted(tasks.items())), tokenizer.eos_id, tokenizer.decode)


def greedy_decode(state: DecoderLM, prompt: Sequence[int], max_new: int, eos_id: int) -> list[int]:
    """Argmax continuation of ``prompt``, stopping after end-of-sequence."""
    toks = list(prompt)
    out: list[int] = []
    limit = min(max_new, state.config.max_seq - len(toks))
    for _ in range(limit):
        logits = forward(state, toks).logits[-1]
        nxt = int(torch.argmax(logits))
        out.append(nxt)
        if nxt == eos_id:
            break
        toks.append(nxt)
    return out


def evaluate(state: DecoderLM, suite: EvalSuite, tokenizer: Tokenizer | None = None) -> dict[str, float]:
    """Held-out answer perplexity plus exact-match accuracy (fraction) per task."""
    if not suite.held_out and not suite.tasks:
        raise DataError("empty evaluation suite")
    decode = tokenizer.decode if tokenizer is not None else suite.decode
    metrics: dict[str, float] = {}
    if suite.held_out:
        total, count = 0.0, 0
        for ex in suite.held_out:
            nll = forward(state, ex.tokens).per_token_nll[ex.answer_start - 1 :]
            total += float(nll.sum())
            count += len(nll)
        metrics["perplexity"] = math.exp(total / count)
    for name, items in suite.tasks.items():
        if not items:
            raise DataError(f"task {name!r} is empty")
        hits = 0
        for item in items:
            target_len = len(item.answer) + 1
            out = greedy_decode(state, item.prompt, target_len, suite.eos_id)
            if out and out[-1] == suite.eos_id and decode(out[:-1]) == item.answer:
                hits += 1
        metrics[name] = hits / len(items)
    return metrics


@dataclass
class GridRow:
    epochs: int | None
    method: str
    metrics: dict[str, float]
    average: float | None = None


@dataclass
class ResultsGrid:
    """Rows keyed by (epochs, method) plus a base-model row.

    ``task_columns`` are averaged; ``extra_columns`` are shown but not averaged.
    """

    title: str
    task_columns: list[str]
    rows: list[GridRow]
    base: GridRow | None = None
    extra_columns: list[str] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)
    run_logs: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for row in self.all_rows():
            if row.average is None:
                row.average = sum(row.metrics[c] for c in self.task_columns) / len(self.task_columns)
        self.rows.sort(key=lambda r: (r.epochs, _method_rank(r.method)))

    def all_rows(self) -> list[GridRow]:
        return self.rows + ([self.base] if self.base is not None else [])

    def check_averages(self, tol: float = AVERAGE_TOLERANCE) -> None:
        for row in self.all_rows():
            mean = sum(row.metrics[c] for c in self.task_columns) / len(self.task_columns)
            # 1e-9 absorbs binary representation of half-cent ties
            if abs(row.average - mean) > tol + 1e-9:
                raise DataError(f"row ({row.epochs}, {row.method}): average {row.average} != mean {mean:.4f}")

    def best_rows(self) -> list[GridRow]:
        """Method rows whose 2-decimal average equals the maximum (ties all win)."""
        if not self.rows:
            return [self.base] if self.base is not None else []
        top = max(_r2(r.average) for r in self.rows)
        return [r for r in self.rows if _r2(r.average) == top]

    @classmethod
    def from_fixture(cls, path: str | Path) -> "ResultsGrid":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        rows = [GridRow(r["epochs"], r["method"], r["metrics"], r.get("average")) for r in obj["rows"]]
        base = obj.get("base")
        if base is not None:
            base = GridRow(None, BASE_LABEL, base["metrics"], base.get("average"))
        return cls(obj.get("title", ""), obj["task_columns"], rows, base, obj.get("extra_columns", []))


def _method_rank(method: str) -> int:
    return METHOD_ORDER.index(method) if method in METHOD_ORDER else len(METHOD_ORDER)


def _r2(x: float) -> str:
    return f"{x:.2f}"


def render_grid(grid: ResultsGrid, fmt: str = "markdown") -> str:
    """Paper-style table; the best average is bold (markdown) or flagged (csv)."""
    if not grid.rows and grid.base is None:
        raise DataError("cannot render an empty grid")
    best = {id(r) for r in grid.best_rows()}
    columns = grid.task_columns + grid.extra_columns
    if fmt == "markdown":
        head = ["Epochs", "Methods", "Average"] + columns
        lines = []
        if grid.title:
            lines += [f"**{grid.title}**", ""]
        lines.append("| " + " | ".join(head) + " |")
        lines.append("|" + "|".join("---" for _ in head) + "|")
        prev = object()
        for row in grid.rows:
            label = str(row.epochs) if row.epochs != prev else ""
            prev = row.epochs
            avg = _r2(row.average)
            if id(row) in best:
                avg = f"**{avg}**"
            lines.append("| " + " | ".join([label, row.method, avg] + [_r2(row.metrics[c]) for c in columns]) + " |")
        if grid.base is not None:
            avg = _r2(grid.base.average)
            if id(grid.base) in best:
                avg = f"**{avg}**"
            lines.append("| " + " | ".join([BASE_LABEL, "", avg] + [_r2(grid.base.metrics[c]) for c in columns]) + " |")
        return "\n".join(lines) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epochs", "method", "average"] + columns + ["best"])
        for row in grid.all_rows():
            epochs = "" if row.epochs is None else row.epochs
            w.writerow([epochs, row.method, _r2(row.average)] + [_r2(row.metrics[c]) for c in columns]
                       + [int(id(row) in best)])
        return buf.getvalue()
    raise DataError(f"unknown grid format {fmt!r}")


class CellFailure(RunFailure):
    def __init__(self, labels: list[str], cause: BaseException):
        self.labels = labels
        super().__init__(f"cell(s) {', '.join(labels)} failed: {cause}")


def cell_label(epochs: int, method: str) -> str:
    return f"{method}/{epochs}ep"


def _grid_row(epochs, method, metrics, task_columns) -> GridRow:
    shown = {c: 100.0 * metrics[c] for c in task_columns}
    shown["perplexity"] = metrics["perplexity"]
    return GridRow(epochs, method, shown)


def run_comparison(
    train_examples: Sequence[TokenizedExample],
    suite: EvalSuite,
    policies: Sequence[str],
    epoch_counts: Sequence[int],
    model_config: ModelConfig,
    train_config: TrainConfig,
    model_seed: int = 0,
    jobs: int = 1,
    allow_partial: bool = False,
    title: str = "",
) -> ResultsGrid:
    """Train and evaluate every (epochs, policy) cell from one initial checkpoint.

    Each policy runs once for max(epoch_counts) epochs and is evaluated at the
    end of every requested epoch count. Training is deterministic and has no
    epoch-count dependent schedule, so the state after k epochs equals that of
    a fresh k-epoch run from the same initial checkpoint. Epoch-1 cells are
    identical across policies and appear once, labelled ``random``.
    """
    policies = list(dict.fromkeys(policies))
    for p in policies:
        OrderingPolicy(p)
    epoch_counts = sorted(set(epoch_counts))
    if not policies or not epoch_counts or epoch_counts[0] < 1:
        raise DataError("need at least one policy and positive epoch counts")
    max_epochs = epoch_counts[-1]
    init = init_model(model_config, model_seed)
    task_columns = list(suite.tasks)
    base_metrics = evaluate(init, suite)
    base_cache_by_metric = {}
    for p in policies:
        metric = OrderingPolicy(p).metric
        if metric and metric not in base_cache_by_metric:
            base_cache_by_metric[metric] = score_dataset(
                train_examples, init, ScoringOptions(metrics=(metric,), reduction=train_config.loss_reduction)
            )
    length_cache = score_dataset(train_examples, None, ScoringOptions(metrics=("length",)))
    cfg = TrainConfig(**{**train_config.__dict__, "n_epochs": max_epochs})

    def run_policy(p: str):
        policy = OrderingPolicy(p)
        cache = base_cache_by_metric.get(policy.metric, length_cache)
        plan = build_plan(cache, policy, max_epochs, cfg.seed)
        results: dict[int, dict] = {}
        digests: dict[int, str] = {}

        def on_epoch_end(epoch, state, runlog):
            if epoch in epoch_counts:
                results[epoch] = evaluate(state, suite)
                digests[epoch] = runlog.checkpoint_digests[-1]

        try:
            _, runlog, _ = train(train_examples, plan, init, cfg, on_epoch_end=on_epoch_end)
        except CurriculumError as exc:
            return p, results, digests, None, exc
        return p, results, digests, runlog, None

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            outcomes = list(pool.map(run_policy, policies))
    else:
        outcomes = [run_policy(p) for p in policies]

    rows: list[GridRow] = []
    failures: list[str] = []
    epoch1_digests = set()
    run_logs = {}
    for p, results, digests, runlog, exc in outcomes:
        if exc is not None:
            failed = [cell_label(e, p) for e in epoch_counts if e not in results]
            log.error("policy %s failed: %s", p, exc)
            if not allow_partial:
                raise CellFailure(failed, exc) from exc
            failures += failed
        if runlog is not None:
            run_logs[p] = runlog
        if 1 in digests:
            epoch1_digests.add(digests[1])
        for e, metrics in sorted(results.items()):
            if e == 1:
                if not any(r.epochs == 1 for r in rows):
                    rows.append(_grid_row(1, "random", metrics, task_columns))
            else:
                rows.append(_grid_row(e, p, metrics, task_columns))
    if len(epoch1_digests) > 1:
        raise RunFailure("epoch-1 checkpoints differ across policies; the shared random epoch is not shared")
    grid = ResultsGrid(
        title,
        task_columns,
        rows,
        _grid_row(None, BASE_LABEL, base_metrics, task_columns),
        extra_columns=["perplexity"],
        failures=failures,
        run_logs=run_logs,
    )
    grid.check_averages()
    return grid
