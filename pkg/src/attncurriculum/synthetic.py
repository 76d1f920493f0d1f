"""Seeded toy instruction corpus: string copying and modular addition."""

from __future__ import annotations

import string

from .corpus import InstructionRecord
from .rng import SplitMix64

COPY_INSTRUCTION = "Repeat the input exactly."
ADD_INSTRUCTION = "Add the two numbers modulo 23."
MODULUS = 23
TASK_BY_INSTRUCTION = {COPY_INSTRUCTION: "copy", ADD_INSTRUCTION: "modadd"}


def task_name(record: InstructionRecord) -> str | None:
    return TASK_BY_INSTRUCTION.get(record.instruction)


def _copy_item(rng: SplitMix64) -> tuple[str, str, str]:
    n = 2 + rng.below(11)
    s = "".join(string.ascii_lowercase[rng.below(12)] for _ in range(n))
    return COPY_INSTRUCTION, s, s


def _add_item(rng: SplitMix64) -> tuple[str, str, str]:
    a, b = rng.below(MODULUS), rng.below(MODULUS)
    return ADD_INSTRUCTION, f"{a}+{b}", str((a + b) % MODULUS)


def generate_corpus(
    n_train: int = 512, n_heldout: int = 64, seed: int = 0, add_fraction: float = 0.25
) -> tuple[list[InstructionRecord], list[InstructionRecord]]:
    """Distinct (instruction, input, output) triples; held-out never repeats a training triple."""
    rng = SplitMix64(seed)
    seen: set[tuple[str, str, str]] = set()
    items: list[tuple[str, str, str]] = []
    threshold = int(add_fraction * 1000)
    while len(items) < n_train + n_heldout:
        item = _add_item(rng) if rng.below(1000) < threshold else _copy_item(rng)
        if item not in seen:
            seen.add(item)
            items.append(item)
    train = [InstructionRecord(i, *t) for i, t in enumerate(items[:n_train])]
    held = [InstructionRecord(i, *t) for i, t in enumerate(items[n_train:])]
    return train, held
