"""End-to-end runs built from a :class:`RunConfig`: data, state, metrics files, checkpoints."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

from .config import RunConfig
from .data import BatchStream, TaskExample, Vocab, build_vocab, gen_synthetic, load_corpus, synthetic_alphabet
from .errors import ConfigError, DivergenceError
from .inference import task_accuracy
from .model import build_model
from .rng import stream_seed
from .trainer import (SweepRun, TrainState, collapse_experiment, init_state, load_checkpoint, routing_summary,
                      save_checkpoint, smoothed, step_record, train_step)

log = logging.getLogger(__name__)

CHECKPOINT_PATTERN = "step_{:08d}.lmoe"
PROBE_SIZE = 256  # fixed slice of the training set used for end-of-run routing statistics


@dataclass
class RunData:
    vocab: Vocab
    train: list[TaskExample]
    eval: list[TaskExample]


def prepare_data(cfg: RunConfig) -> RunData:
    d = cfg.data
    seed = cfg.train.seed
    if d.source == "synthetic":
        train = gen_synthetic(d.tasks, d.count, seed)
        held_out = gen_synthetic(d.tasks, d.eval_count, stream_seed(seed, "eval"))
        vocab = build_vocab(synthetic_alphabet(d.tasks))
    else:
        examples = load_corpus(d.source)
        vocab = build_vocab(ex.text for ex in examples)
        n_eval = min(d.eval_count, max(len(examples) // 10, 1))
        train, held_out = examples[n_eval:] or examples, examples[:n_eval]
    # the vocabulary size always comes from the data
    cfg.backbone.vocab_size = vocab.size
    return RunData(vocab=vocab, train=train, eval=held_out)


def fresh_state(cfg: RunConfig, data: RunData) -> TrainState:
    model = build_model(cfg.backbone, cfg.experts, cfg.train.seed)
    return init_state(model, cfg.train)


def make_stream(cfg: RunConfig, data: RunData) -> BatchStream:
    return BatchStream(data.train, data.vocab, cfg.train.batch_size, cfg.train.seq_len, cfg.train.seed)


def checkpoint_meta(cfg: RunConfig, data: RunData) -> dict:
    # out_dir is left out so a checkpoint's bytes do not depend on where it was written
    run_config = cfg.to_dict()
    del run_config["out_dir"]
    return {"run_config": run_config, "vocab": data.vocab.chars}


def run_training(cfg: RunConfig, out_dir: str | Path | None = None, resume: str | Path | None = None,
                 evaluate: bool = True) -> dict:
    """Train to ``cfg.train.steps`` total steps, writing metrics.jsonl, eval.jsonl, checkpoints and summary.json.

    With ``resume`` the state comes from that checkpoint and training continues
    from its step; only steps after it are logged. Raises DivergenceError after
    saving the last good state.
    """
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_data(cfg)
    if resume is not None:
        state, stored = load_checkpoint(resume)
        if stored.get("vocab") != data.vocab.chars:
            raise ConfigError(f"checkpoint {resume}: vocabulary differs from the configured data")
        state.config = cfg.train
        state.optimizer.lr = cfg.train.lr
    else:
        state = fresh_state(cfg, data)
    stream = make_stream(cfg, data)
    meta = checkpoint_meta(cfg, data)
    tc = cfg.train
    checksum_before = state.model.backbone.checksum()
    start_step = state.step
    t0 = time.perf_counter()
    l_ar_history: list[float] = []

    mode = "a" if resume is not None else "w"
    with open(out / "metrics.jsonl", mode, encoding="utf-8") as metrics, \
            open(out / "eval.jsonl", mode, encoding="utf-8") as evals:
        while state.step < tc.steps:
            batch = stream.batch(state.step)
            try:
                result = train_step(state, batch)
            except DivergenceError:
                path = out / CHECKPOINT_PATTERN.format(state.step)
                save_checkpoint(state, path, meta)
                log.error("diverged after step %d; last good state saved to %s", state.step, path)
                raise
            l_ar_history.append(result.l_ar.item())
            if state.step % tc.log_interval == 0:
                metrics.write(json.dumps(step_record(state, result), sort_keys=True) + "\n")
            if state.step % tc.eval_interval == 0 and data.eval:
                s = routing_summary(state.model, data.eval, data.vocab, tc.seq_len)
                evals.write(json.dumps({"step": state.step, "l_ar": s.l_ar, "p_bar": s.p_bar,
                                        "entropy": s.entropy}, sort_keys=True) + "\n")
                log.info("step %d  train l_ar %.4f  eval l_ar %.4f  entropy %.4f",
                         state.step, l_ar_history[-1], s.l_ar, s.entropy)
            if tc.checkpoint_interval and state.step % tc.checkpoint_interval == 0:
                save_checkpoint(state, out / CHECKPOINT_PATTERN.format(state.step), meta)

    final_ckpt = out / CHECKPOINT_PATTERN.format(state.step)
    if not final_ckpt.exists():
        save_checkpoint(state, final_ckpt, meta)
    elapsed = time.perf_counter() - t0
    summary = {
        "steps": state.step,
        "start_step": start_step,
        "runtime_seconds": elapsed,
        "backbone_checksum_before": checksum_before,
        "backbone_checksum_after": state.model.backbone.checksum(),
        "final_checkpoint": final_ckpt.name,
    }
    if l_ar_history:
        sm = smoothed(l_ar_history, 50)
        summary.update({"l_ar_first": l_ar_history[0], "l_ar_smoothed_final": float(sm[-1]),
                        "l_ar_relative_drop": 1.0 - float(sm[-1]) / l_ar_history[0]})
    if evaluate and data.eval:
        s = routing_summary(state.model, data.eval, data.vocab, tc.seq_len)
        summary["eval"] = {"l_ar": s.l_ar, "p_bar": s.p_bar, "layer_p_bar": s.layer_p_bar,
                           "sum_sq": s.sum_sq, "entropy": s.entropy,
                           "task_accuracy": task_accuracy(state.model, data.vocab, data.eval)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def run_sweep(cfg: RunConfig, lams: list[float], steps: int | None = None) -> list[SweepRun]:
    """One training run per lambda, all from the same seed, summarised on the probe set."""
    data = prepare_data(cfg)
    probe = data.train[:PROBE_SIZE]

    def make_state(lam: float):
        model = build_model(cfg.backbone, cfg.experts, cfg.train.seed)
        return init_state(model, replace(cfg.train, lam=lam)), make_stream(cfg, data)

    return collapse_experiment(make_state, lams, steps or cfg.train.steps, probe, data.vocab, cfg.train.seq_len)
