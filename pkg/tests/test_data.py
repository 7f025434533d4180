from __future__ import annotations

import json
import logging
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lmoe.data import (PAD, SEP, TASKS, BatchStream, TaskExample, build_vocab, collate, encode_example,
                       gen_synthetic, load_corpus, synthetic_alphabet)
from lmoe.errors import ConfigError, VocabularyError


@pytest.fixture(scope="module")
def corpus():
    return gen_synthetic(TASKS, 400, seed=11)


@pytest.fixture(scope="module")
def vocab():
    return build_vocab(synthetic_alphabet())


def test_vocab_size_is_specials_plus_characters():
    v = build_vocab("abba")
    assert v.size == 4
    assert v.chars[:2] == [PAD, SEP]
    assert v.pad_id == 0


def test_encode_decode_round_trip(vocab):
    text = "abc" + SEP + "cba"
    assert vocab.decode(vocab.encode(text)) == text
    with pytest.raises(VocabularyError, match="'Z'"):
        vocab.encode("aZ")


def test_empty_corpus_rejected():
    with pytest.raises(ConfigError):
        build_vocab("")


def _oracle(ex: TaskExample) -> str:
    if ex.task == "add":
        a, b = ex.prompt[:-1].split("+")
        return str(int(a) + int(b))
    body = ex.prompt[:-1]
    assert ex.prompt.endswith(SEP)
    return {"copy": body, "reverse": body[::-1], "sort": "".join(sorted(body))}[ex.task]


def test_task_semantics(corpus):
    for ex in corpus:
        assert ex.completion == _oracle(ex)


def test_task_is_identifiable_from_prompt(corpus):
    charset = {"copy": set("nopqrstuvwxyz"), "reverse": set("abcdefghijklm"), "sort": set("0123456789")}
    for ex in corpus:
        if ex.task == "add":
            assert "+" in ex.prompt and ex.prompt.endswith("=")
        else:
            assert set(ex.prompt[:-1]) <= charset[ex.task]


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 300), st.lists(st.sampled_from(TASKS), min_size=1, max_size=4, unique=True),
       st.integers(0, 2 ** 32 - 1))
def test_task_balance(count, tasks, seed):
    counts = Counter(ex.task for ex in gen_synthetic(tasks, count, seed))
    assert set(counts) <= set(tasks)
    assert max(counts.values()) - min(counts.get(t, 0) for t in tasks) <= 1


def test_generation_is_deterministic():
    a = gen_synthetic(TASKS, 50, seed=3)
    assert a == gen_synthetic(TASKS, 50, seed=3)
    assert a != gen_synthetic(TASKS, 50, seed=4)


def test_loss_mask_covers_exactly_the_completion(corpus, vocab):
    T = 16
    for ex in corpus[:100]:
        inputs, targets, loss_mask, token_mask = encode_example(ex, vocab, T)
        assert loss_mask.sum() == len(ex.completion)
        # scored targets spell the completion; no pad or prompt token is scored
        assert vocab.decode(targets[loss_mask]) == ex.completion
        assert np.all(inputs[~token_mask] == vocab.pad_id)
        assert not np.any(loss_mask & ~token_mask)
        assert vocab.decode(inputs[token_mask]) == ex.text[:-1]


def test_known_example_layout(vocab):
    ex = TaskExample("xy" + SEP, "xy", "copy")
    inputs, targets, loss_mask, token_mask = encode_example(ex, vocab, 6)
    assert vocab.decode(inputs) == "xy" + SEP + "x"
    assert loss_mask.tolist() == [False, False, True, True, False, False]
    assert token_mask.tolist() == [True, True, True, True, False, False]


def test_truncation_warns(vocab, caplog):
    ex = TaskExample("abcdefghij" + SEP, "jihgfedcba", "reverse")
    with caplog.at_level(logging.WARNING, logger="lmoe.data"):
        inputs, _, loss_mask, _ = encode_example(ex, vocab, 8)
    assert "truncating" in caplog.text
    assert inputs.shape == (8,)


def test_batch_stream_random_access_is_deterministic(corpus, vocab):
    s1 = BatchStream(corpus, vocab, 32, 16, seed=5)
    s2 = BatchStream(corpus, vocab, 32, 16, seed=5)
    for k in (0, 7, 13, 40):
        a, b = s1.batch(k), s2.batch(k)
        assert a.inputs.tobytes() == b.inputs.tobytes() and a.tasks == b.tasks
    assert s1.batch(0).inputs.tobytes() != BatchStream(corpus, vocab, 32, 16, seed=6).batch(0).inputs.tobytes()


def test_batch_stream_epoch_visits_every_example_once(corpus, vocab):
    s = BatchStream(corpus, vocab, 48, 16, seed=0)
    seen = Counter()
    for batch in s.epoch(2):
        for row in batch.inputs:
            seen[vocab.decode(row)] += 1
    expected = Counter(ex.text[:-1] for ex in corpus)
    assert seen == expected


def test_collate_shapes(corpus, vocab):
    b = collate(corpus[:5], vocab, 12)
    assert b.inputs.shape == b.targets.shape == b.loss_mask.shape == (5, 12)
    assert b.tasks == [ex.task for ex in corpus[:5]]


def test_load_corpus_jsonl_and_text(tmp_path):
    jl = tmp_path / "c.jsonl"
    jl.write_text("\n".join(json.dumps(r) for r in [
        {"prompt": "ab" + SEP, "completion": "ba", "task": "rev"},
        {"prompt": "q", "completion": "r"},
    ]), encoding="utf-8")
    got = load_corpus(jl)
    assert got[0] == TaskExample("ab" + SEP, "ba", "rev")
    assert got[1].task == "default"
    txt = tmp_path / "c.txt"
    txt.write_text("hello\n\nworld\n", encoding="utf-8")
    assert [ex.text for ex in load_corpus(txt)] == ["hello", "world"]
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps({"prompt": "a", "completion": ""}), encoding="utf-8")
    with pytest.raises(ConfigError):
        load_corpus(bad)
