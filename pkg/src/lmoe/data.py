"""
Character-level corpora, synthetic multi-task examples and batching.

Four default tasks, each recognisable from its prompt alone:

    copy      "xy→"    -> "xy"     letters n-z
    reverse   "abc→"   -> "cba"    letters a-m
    sort      "3120→"  -> "0123"   digits
    add       "12+7="  -> "19"
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigError, VocabularyError
from .objective import BatchTargets
from .rng import stream_rng

log = logging.getLogger(__name__)

PAD = "\x00"
SEP = "→"
SPECIALS = (PAD, SEP)
TASKS = ("copy", "reverse", "sort", "add")

_COPY_ALPHABET = "nopqrstuvwxyz"
_REVERSE_ALPHABET = "abcdefghijklm"
_DIGITS = "0123456789"


@dataclass
class Vocab:
    chars: list[str]  # index = id; chars[0] is PAD

    def __post_init__(self):
        self.stoi = {c: i for i, c in enumerate(self.chars)}

    @property
    def size(self) -> int:
        return len(self.chars)

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    def encode(self, text: str) -> list[int]:
        try:
            return [self.stoi[c] for c in text]
        except KeyError as e:
            raise VocabularyError(f"character {e.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.chars[i] for i in ids if i != self.pad_id)


def build_vocab(corpus: Iterable[str] | str) -> Vocab:
    """Specials first, then every corpus character sorted by codepoint."""
    text = corpus if isinstance(corpus, str) else "".join(corpus)
    if not text:
        raise ConfigError("data: cannot build a vocabulary from an empty corpus")
    chars = sorted(set(text) - set(SPECIALS))
    return Vocab(list(SPECIALS) + chars)


@dataclass
class TaskExample:
    prompt: str
    completion: str
    task: str

    @property
    def text(self) -> str:
        return self.prompt + self.completion


def make_example(task: str, rng: np.random.Generator) -> TaskExample:
    if task == "copy":
        s = "".join(rng.choice(list(_COPY_ALPHABET), size=rng.integers(2, 6)))
        return TaskExample(s + SEP, s, task)
    if task == "reverse":
        s = "".join(rng.choice(list(_REVERSE_ALPHABET), size=rng.integers(2, 6)))
        return TaskExample(s + SEP, s[::-1], task)
    if task == "sort":
        s = "".join(rng.choice(list(_DIGITS), size=rng.integers(2, 6)))
        return TaskExample(s + SEP, "".join(sorted(s)), task)
    if task == "add":
        a, b = (int(x) for x in rng.integers(0, 100, size=2))
        return TaskExample(f"{a}+{b}=", str(a + b), task)
    raise ConfigError(f"data.tasks: unknown task {task!r}; choose from {list(TASKS)}")


def gen_synthetic(tasks: Iterable[str], count: int, seed: int) -> list[TaskExample]:
    """``count`` examples cycling through ``tasks`` so each gets count/len(tasks) +- 1."""
    tasks = list(tasks)
    if count < 1:
        raise ConfigError(f"data.count: must be >= 1, got {count}")
    if not tasks:
        raise ConfigError("data.tasks: need at least one task")
    rng = stream_rng(seed, "synthetic")
    return [make_example(tasks[i % len(tasks)], rng) for i in range(count)]


def synthetic_alphabet(tasks: Iterable[str] = TASKS) -> str:
    """Every character any of ``tasks`` can produce, so the vocabulary never misses one."""
    parts = {"copy": _COPY_ALPHABET + SEP, "reverse": _REVERSE_ALPHABET + SEP,
             "sort": _DIGITS + SEP, "add": _DIGITS + "+="}
    return "".join(parts[t] for t in tasks)


def load_corpus(path: str | Path) -> list[TaskExample]:
    """UTF-8 plain text (one LM sequence per line) or JSON lines with prompt/completion/task."""
    path = Path(path)
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise ConfigError(f"data.source: {path} is empty")
    if path.suffix in (".jsonl", ".json"):
        out = []
        for n, ln in enumerate(lines, 1):
            rec = json.loads(ln)
            if not rec.get("completion"):
                raise ConfigError(f"data.source: {path}:{n} has an empty completion")
            out.append(TaskExample(rec.get("prompt", ""), rec["completion"], rec.get("task", "default")))
        return out
    # plain text: every next-token position is scored
    return [TaskExample(ln[:1], ln[1:], "text") for ln in lines if len(ln) > 1]


def encode_example(ex: TaskExample, vocab: Vocab, T: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    ids = vocab.encode(ex.text)
    if len(ids) - 1 > T:
        log.warning("example %r is %d tokens; truncating to fit T=%d", ex.text, len(ids), T)
        ids = ids[:T + 1]
    n = len(ids) - 1
    inputs = np.full(T, vocab.pad_id, dtype=np.int64)
    targets = np.full(T, vocab.pad_id, dtype=np.int64)
    inputs[:n] = ids[:-1]
    targets[:n] = ids[1:]
    token_mask = np.zeros(T, dtype=bool)
    token_mask[:n] = True
    loss_mask = np.zeros(T, dtype=bool)
    # input position t predicts ids[t+1]; score it when that token belongs to the completion
    first = max(len(ex.prompt) - 1, 0)
    loss_mask[first:n] = True
    return inputs, targets, loss_mask, token_mask


def collate(examples: list[TaskExample], vocab: Vocab, T: int) -> BatchTargets:
    rows = [encode_example(ex, vocab, T) for ex in examples]
    inputs, targets, loss_mask, token_mask = (np.stack(col) for col in zip(*rows))
    return BatchTargets(inputs, targets, loss_mask, token_mask, [ex.task for ex in examples])


class BatchStream:
    """Deterministic epoch-shuffled batches with random access by global step.

    Batch ``k`` depends only on (examples, seed, k), so a resumed run sees the
    same data as an uninterrupted one. The last batch of an epoch may be short.
    """

    def __init__(self, examples: list[TaskExample], vocab: Vocab, batch_size: int, seq_len: int, seed: int):
        if batch_size < 1 or seq_len < 1:
            raise ConfigError(f"batcher: batch_size and seq_len must be positive, got {batch_size}, {seq_len}")
        if not examples:
            raise ConfigError("batcher: no examples")
        self.examples = examples
        self.vocab = vocab
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.seed = seed
        self.batches_per_epoch = -(-len(examples) // batch_size)
        self._perm_cache: tuple[int, np.ndarray] | None = None

    def _permutation(self, epoch: int) -> np.ndarray:
        if self._perm_cache is None or self._perm_cache[0] != epoch:
            self._perm_cache = (epoch, stream_rng(self.seed, "data", epoch).permutation(len(self.examples)))
        return self._perm_cache[1]

    def batch(self, k: int) -> BatchTargets:
        epoch, j = divmod(k, self.batches_per_epoch)
        idx = self._permutation(epoch)[j * self.batch_size:(j + 1) * self.batch_size]
        return collate([self.examples[i] for i in idx], self.vocab, self.seq_len)

    def epoch(self, epoch: int) -> Iterator[BatchTargets]:
        for j in range(self.batches_per_epoch):
            yield self.batch(epoch * self.batches_per_epoch + j)

    def __iter__(self) -> Iterator[BatchTargets]:
        k = 0
        while True:
            yield self.batch(k)
            k += 1


def batcher(examples: list[TaskExample], vocab: Vocab, B: int, T: int, seed: int) -> Iterator[BatchTargets]:
    return iter(BatchStream(examples, vocab, B, T, seed))
