from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .data import TaskExample, Vocab
from .errors import SequenceLengthError
from .model import LMoEModel


@dataclass
class Generation:
    prompt: str
    text: str
    token_ids: list[int]
    # one row per (generated token, adapted layer): routing probabilities at the predicting position
    trace: list[dict] = field(default_factory=list)


def generate(model: LMoEModel, vocab: Vocab, prompt: str, max_new_tokens: int, temperature: float = 0.0,
             rng: np.random.Generator | None = None) -> Generation:
    """Autoregressive decoding; greedy when ``temperature`` is 0."""
    ids = vocab.encode(prompt)
    if not ids:
        raise SequenceLengthError("generate: prompt must contain at least one character")
    limit = model.config.max_seq_len
    if len(ids) > limit:
        raise SequenceLengthError(f"generate: prompt has {len(ids)} tokens, max_seq_len is {limit}")
    if temperature > 0 and rng is None:
        rng = np.random.default_rng(0)
    out: list[int] = []
    trace: list[dict] = []
    with dc.no_grad():
        for step in range(max_new_tokens):
            window = (ids + out)[-limit:]
            fr = model.forward(np.asarray([window]))
            logits = fr.logits.data[0, -1].astype(np.float64)
            if temperature <= 0:
                nxt = int(np.argmax(logits))
            else:
                z = logits / temperature
                p = np.exp(z - z.max())
                p /= p.sum()
                nxt = int(rng.choice(len(p), p=p))
            for lid, r in fr.routing.items():
                trace.append({"token_index": step, "token": vocab.chars[nxt], "layer": lid,
                              "probs": [float(x) for x in r.probs.data[0, -1]]})
            out.append(nxt)
    return Generation(prompt=prompt, text=vocab.decode(out), token_ids=out, trace=trace)


def task_accuracy(model: LMoEModel, vocab: Vocab, examples: list[TaskExample]) -> dict[str, float]:
    """Greedy exact-match accuracy per task tag, generating len(completion) tokens."""
    hits: dict[str, list[int]] = {}
    for ex in examples:
        g = generate(model, vocab, ex.prompt, len(ex.completion))
        hits.setdefault(ex.task, []).append(int(g.text == ex.completion))
    return {task: float(np.mean(v)) for task, v in sorted(hits.items())}
