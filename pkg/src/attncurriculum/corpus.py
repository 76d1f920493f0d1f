"""Instruction records, prompt rendering, subword tokenizer and example encoding."""

from __future__ import annotations

import hashlib
import json
import re
import string
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DataError
from .rng import SplitMix64, fisher_yates

BOS, EOS, PAD = "<bos>", "<eos>", "<pad>"
SPECIAL_TOKENS = (BOS, EOS, PAD)
TOKENIZER_FORMAT = "attncurriculum-tokenizer"
TOKENIZER_VERSION = 1

# Every character falls in exactly one alternative, so chunks tile the text.
_CHUNK_RE = re.compile(r" ?[^\W\d_]+| ?\d| ?_+| ?[^\s\w]+|\s+(?!\S)|\s+")


@dataclass(frozen=True)
class InstructionRecord:
    id: int
    instruction: str
    input: str
    output: str


@dataclass(frozen=True)
class PromptTemplate:
    preamble: str = (
        "Below is an instruction that describes a task. "
        "Write a response that appropriately completes the request.\n\n"
    )
    instruction_header: str = "### Instruction:\n"
    input_header: str = "\n\n### Input:\n"
    response_header: str = "\n\n### Response:\n"

    def __post_init__(self):
        if not self.response_header:
            raise DataError("template response_header must be non-empty")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


ALPACA_TEMPLATE = PromptTemplate()


@dataclass(frozen=True)
class TokenizedExample:
    id: int
    tokens: tuple[int, ...]
    answer_start: int

    def __len__(self) -> int:
        return len(self.tokens)


def load_dataset(path: str | Path, limit: int | None = None) -> list[InstructionRecord]:
    """Read an Alpaca-style JSON Lines file.

    Each line is an object with string fields ``instruction``, ``input``
    (optional, defaults to empty) and ``output``. Ids are zero-based line
    positions.
    """
    records: list[InstructionRecord] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh.read().splitlines(), start=1):
            if limit is not None and len(records) >= limit:
                break
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DataError(f"line {lineno}: expected a JSON object")
            rid = lineno - 1
            output = obj.get("output")
            if not isinstance(output, str) or not output:
                raise DataError(f"record {rid}: empty or missing output")
            instruction = obj.get("instruction", "")
            inp = obj.get("input", "")
            if not isinstance(instruction, str) or not isinstance(inp, str):
                raise DataError(f"line {lineno}: instruction and input must be strings")
            records.append(InstructionRecord(rid, instruction, inp, output))
    return records


def write_dataset(path: str | Path, records: Iterable[InstructionRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            obj = {"instruction": r.instruction, "input": r.input, "output": r.output}
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def render_prompt(record: InstructionRecord, template: PromptTemplate = ALPACA_TEMPLATE) -> tuple[str, int]:
    """Return the full prompt text and the character offset of the answer."""
    parts = [template.preamble, template.instruction_header, record.instruction]
    if record.input:
        parts += [template.input_header, record.input]
    parts.append(template.response_header)
    context = "".join(parts)
    text = context + record.output
    if text.count(template.response_header) != 1:
        raise DataError(f"record {record.id}: response header must appear exactly once in the prompt")
    return text, len(context)


def _chunks(text: str) -> list[str]:
    return _CHUNK_RE.findall(text)


class Tokenizer:
    """Greedy pair-merge subword tokenizer over a character alphabet.

    Ids 0..2 are ``<bos>``, ``<eos>``, ``<pad>``; then the sorted alphabet;
    then one entry per merge that produced a new string. Merges never cross
    chunk boundaries (runs of letters, single digits, punctuation, whitespace).
    """

    def __init__(self, vocab: Sequence[str], merges: Sequence[tuple[str, str]], seed: int = 0):
        if tuple(vocab[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise DataError("tokenizer vocab must start with the special tokens")
        self.vocab = tuple(vocab)
        self.merges = tuple((a, b) for a, b in merges)
        self.seed = seed
        self.token_to_id = {tok: i for i, tok in enumerate(self.vocab)}
        if len(self.token_to_id) != len(self.vocab):
            raise DataError("duplicate token in tokenizer vocab")
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._cache: dict[str, tuple[int, ...]] = {}

    bos_id = 0
    eos_id = 1
    pad_id = 2

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def _encode_chunk(self, chunk: str) -> tuple[int, ...]:
        hit = self._cache.get(chunk)
        if hit is not None:
            return hit
        symbols = list(chunk)
        while len(symbols) > 1:
            best, best_rank = None, None
            for pair in zip(symbols, symbols[1:]):
                rank = self._ranks.get(pair)
                if rank is not None and (best_rank is None or rank < best_rank):
                    best, best_rank = pair, rank
            if best is None:
                break
            symbols = _merge_symbols(symbols, best)
        try:
            ids = tuple(self.token_to_id[s] for s in symbols)
        except KeyError as exc:
            raise DataError(f"character {exc.args[0]!r} is outside the tokenizer alphabet") from None
        self._cache[chunk] = ids
        return ids

    def encode(self, text: str) -> list[int]:
        out: list[int] = []
        for chunk in _chunks(text):
            out.extend(self._encode_chunk(chunk))
        return out

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.vocab[i] for i in ids)

    def to_text(self) -> str:
        lines = [
            f"{TOKENIZER_FORMAT} {TOKENIZER_VERSION}",
            f"seed {self.seed}",
            f"vocab {len(self.vocab)}",
        ]
        lines += [json.dumps(tok, ensure_ascii=False) for tok in self.vocab]
        lines.append(f"merges {len(self.merges)}")
        lines += [json.dumps([a, b], ensure_ascii=False) for a, b in self.merges]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Tokenizer":
        lines = text.split("\n")
        try:
            magic, version = lines[0].split(" ")
            if magic != TOKENIZER_FORMAT:
                raise DataError("not a tokenizer file")
            if int(version) != TOKENIZER_VERSION:
                raise DataError(f"unsupported tokenizer version {version}")
            seed = int(lines[1].split(" ")[1])
            n_vocab = int(lines[2].split(" ")[1])
            vocab = [json.loads(s) for s in lines[3 : 3 + n_vocab]]
            pos = 3 + n_vocab
            n_merges = int(lines[pos].split(" ")[1])
            merges = [tuple(json.loads(s)) for s in lines[pos + 1 : pos + 1 + n_merges]]
        except (IndexError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"corrupt tokenizer file: {exc}") from None
        if len(vocab) != n_vocab or len(merges) != n_merges:
            raise DataError("corrupt tokenizer file: truncated")
        return cls(vocab, merges, seed=seed)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_text().encode("utf-8"))

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        return cls.from_text(Path(path).read_bytes().decode("utf-8"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


def _merge_symbols(symbols: list[str], pair: tuple[str, str]) -> list[str]:
    a, b = pair
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


ASCII_BASE = frozenset(string.ascii_letters + string.digits + string.punctuation + " \n")


def train_tokenizer(
    records: Sequence[InstructionRecord],
    vocab_size: int = 1024,
    seed: int = 0,
    template: PromptTemplate = ALPACA_TEMPLATE,
    max_records: int | None = None,
    ascii_base: bool = True,
) -> Tokenizer:
    """Learn merges from rendered prompts.

    The alphabet always covers every rendered record, plus printable ASCII
    when ``ascii_base`` is set so unseen held-out characters still encode. When ``max_records``
    is below the corpus size, merges are learned on a seeded subset. Among
    pairs of equal frequency the lexicographically smallest is merged.
    Training stops at ``vocab_size`` or when no pair occurs twice.
    """
    texts = [render_prompt(r, template)[0] for r in records]
    chars = set("".join(texts))
    if ascii_base:
        chars |= ASCII_BASE
    alphabet = sorted(chars)
    base = len(alphabet) + len(SPECIAL_TOKENS)
    if vocab_size < base:
        raise DataError(f"vocab_size {vocab_size} is below alphabet plus specials ({base})")

    sample = texts
    if max_records is not None and max_records < len(texts):
        order = fisher_yates(len(texts), SplitMix64(seed))
        sample = [texts[i] for i in sorted(order[:max_records])]

    word_counts = Counter(c for t in sample for c in _chunks(t))
    words = [list(w) for w in word_counts]
    freqs = list(word_counts.values())

    pair_counts: Counter = Counter()
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for wi, syms in enumerate(words):
        for pair in zip(syms, syms[1:]):
            pair_counts[pair] += freqs[wi]
            where[pair].add(wi)

    vocab = list(SPECIAL_TOKENS) + alphabet
    known = set(vocab)
    merges: list[tuple[str, str]] = []
    while len(vocab) < vocab_size and pair_counts:
        best = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        pair, count = best
        if count < 2:
            break
        merges.append(pair)
        merged = pair[0] + pair[1]
        if merged not in known:
            known.add(merged)
            vocab.append(merged)
        for wi in list(where.pop(pair, ())):
            syms = words[wi]
            f = freqs[wi]
            for p in zip(syms, syms[1:]):
                pair_counts[p] -= f
                if pair_counts[p] <= 0:
                    del pair_counts[p]
                where[p].discard(wi)
            syms = _merge_symbols(syms, pair)
            words[wi] = syms
            for p in zip(syms, syms[1:]):
                pair_counts[p] += f
                where[p].add(wi)
        pair_counts.pop(pair, None)
    return Tokenizer(vocab, merges, seed=seed)


def encode_example(
    record: InstructionRecord,
    template: PromptTemplate,
    tokenizer: Tokenizer,
    max_len: int,
) -> TokenizedExample:
    """Tokenize context and answer separately so the boundary is exact.

    Over-long examples lose context tokens from the left; the answer span
    (output plus end-of-sequence) is never cut.
    """
    text, offset = render_prompt(record, template)
    context = tokenizer.encode(text[:offset])
    answer = tokenizer.encode(text[offset:]) + [tokenizer.eos_id]
    if len(answer) > max_len - 1:
        raise DataError(f"record {record.id}: answer exceeds context window")
    if not context:
        raise DataError(f"record {record.id}: empty context")
    keep = max_len - len(answer)
    if len(context) > keep:
        context = context[len(context) - keep :]
    return TokenizedExample(record.id, tuple(context + answer), len(context))


def encode_dataset(
    records: Sequence[InstructionRecord],
    template: PromptTemplate,
    tokenizer: Tokenizer,
    max_len: int,
) -> list[TokenizedExample]:
    return [encode_example(r, template, tokenizer, max_len) for r in records]


def corpus_digest(records: Sequence[InstructionRecord]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(json.dumps([r.instruction, r.input, r.output], ensure_ascii=False).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()
