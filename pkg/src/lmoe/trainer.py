"""Joint optimisation of experts and gates with the backbone frozen."""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Iterable

import numpy as np

from . import diffcore as dc
from .backbone import BackboneConfig
from .checkpoint import read_checkpoint, write_checkpoint
from .data import BatchStream, TaskExample, Vocab, collate
from .errors import ConfigError, DivergenceError, IntegrityError
from .gating import entropy
from .model import ExpertConfig, LMoEModel, build_model, load_parameters
from .objective import BatchTargets, LossBreakdown, joint_objective
from .optim import Adam, clip_grad_norm
from .rng import STREAMS, stream_seed

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    lam: float = 0.01
    batch_size: int = 32
    seq_len: int = 16
    steps: int = 500
    seed: int = 0
    grad_clip: float = 1.0
    eval_interval: int = 100
    log_interval: int = 1
    checkpoint_interval: int = 0
    lb_include_prompt: bool = True

    def validate(self) -> None:
        for name in ("lr", "eps", "grad_clip"):
            if not isinstance(getattr(self, name), (int, float)) or getattr(self, name) <= 0:
                raise ConfigError(f"train.{name}: must be > 0, got {getattr(self, name)!r}")
        for name in ("batch_size", "seq_len", "steps", "log_interval", "eval_interval"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"train.{name}: must be a positive integer, got {value!r}")
        if not isinstance(self.checkpoint_interval, int) or self.checkpoint_interval < 0:
            raise ConfigError(f"train.checkpoint_interval: must be >= 0, got {self.checkpoint_interval!r}")
        if not isinstance(self.lam, (int, float)) or self.lam < 0:
            raise ConfigError(f"train.lam: must be >= 0, got {self.lam!r}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"train.betas: need two values in [0, 1), got {self.betas!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"train.seed: must be a non-negative integer, got {self.seed!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainState:
    model: LMoEModel
    optimizer: Adam
    config: TrainConfig
    step: int = 0


def init_state(model: LMoEModel, config: TrainConfig) -> TrainState:
    config.validate()
    opt = Adam(model.trainable_parameters(), lr=config.lr, betas=tuple(config.betas), eps=config.eps)
    return TrainState(model=model, optimizer=opt, config=config)


def compute_loss(model: LMoEModel, batch: BatchTargets, lam: float, include_prompt: bool = True) -> LossBreakdown:
    fr = model.forward(batch.inputs)
    return joint_objective(fr.logits, fr.routing, batch, lam, include_prompt=include_prompt)


def train_step(state: TrainState, batch: BatchTargets) -> LossBreakdown:
    """One forward/backward of the joint loss and one Adam update of experts and gates."""
    cfg = state.config
    opt = state.optimizer
    opt.zero_grad()
    fr = state.model.forward(batch.inputs)
    out = joint_objective(fr.logits, fr.routing, batch, cfg.lam, include_prompt=cfg.lb_include_prompt)
    value = out.l_total.item()
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss at step {state.step + 1}", step=state.step + 1,
                              diagnostics={"l_ar": out.l_ar.item(), "l_lb": out.l_lb.item()})
    out.l_total.backward()
    grad_norm = clip_grad_norm(opt.params, cfg.grad_clip)
    if not math.isfinite(grad_norm):
        raise DivergenceError(f"non-finite gradient norm at step {state.step + 1}", step=state.step + 1,
                              diagnostics=out.record())
    opt.step()
    state.step += 1
    out.task_p_bar = task_routing(fr.routing, batch)
    out.grad_norm = grad_norm
    return out


def task_routing(routing: dict, batch: BatchTargets) -> dict[str, list[float]]:
    """Per task tag: p_bar averaged over the adapted layers (diagnostic only)."""
    if not batch.tasks:
        return {}
    tasks = np.asarray(batch.tasks)
    out = {}
    for tag in sorted(set(batch.tasks)):
        rows = tasks == tag
        mask = batch.token_mask & rows[:, None]
        if not mask.any():
            continue
        per_layer = [r.probs.data[mask].mean(axis=0) for r in routing.values()]
        out[tag] = [float(x) for x in np.mean(per_layer, axis=0)]
    return out


def step_record(state: TrainState, out: LossBreakdown) -> dict:
    rec = {"step": state.step}
    rec.update(out.record())
    rec["layer_p_bar"] = {k: [float(x) for x in v] for k, v in out.layer_p_bar.items()}
    rec["layer_lb"] = {k: float(v) for k, v in out.layer_lb.items()}
    rec["task_p_bar"] = out.task_p_bar
    if out.grad_norm is not None:
        rec["grad_norm"] = out.grad_norm
    return rec


def train(state: TrainState, stream: BatchStream, steps: int,
          on_step: Callable[[TrainState, LossBreakdown], None] | None = None) -> list[dict]:
    """Run ``steps`` more updates starting from ``state.step``; returns one record per step."""
    records = []
    for _ in range(steps):
        batch = stream.batch(state.step)
        out = train_step(state, batch)
        records.append(step_record(state, out))
        if on_step is not None:
            on_step(state, out)
    return records


def smoothed(values: Iterable[float], window: int = 50) -> np.ndarray:
    """Trailing moving average; entry k averages values[max(0, k-window+1) : k+1]."""
    v = np.asarray(list(values), dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


@dataclass
class RoutingSummary:
    p_bar: list[float]
    layer_p_bar: dict[str, list[float]]
    sum_sq: float  # mean over layers of sum_i p_bar_i^2
    entropy: float
    l_ar: float


def routing_summary(model: LMoEModel, examples: list[TaskExample], vocab: Vocab, seq_len: int,
                    batch_size: int = 64, include_prompt: bool = True) -> RoutingSummary:
    """Routing statistics and L_AR of ``model`` over a fixed example set, without gradients."""
    sums: dict[str, np.ndarray] = {}
    count = 0
    nll = 0.0
    scored = 0
    with dc.no_grad():
        for i in range(0, len(examples), batch_size):
            batch = collate(examples[i:i + batch_size], vocab, seq_len)
            fr = model.forward(batch.inputs)
            mask = batch.token_mask if include_prompt else batch.loss_mask
            for lid, r in fr.routing.items():
                part = r.probs.data[mask].astype(np.float64).sum(axis=0)
                sums[lid] = part if lid not in sums else sums[lid] + part
            count += int(mask.sum())
            n = int(batch.loss_mask.sum())
            nll += n * dc.cross_entropy(fr.logits, batch.targets, batch.loss_mask).item()
            scored += n
    layer_p = {lid: s / count for lid, s in sums.items()}
    mean_p = np.mean(list(layer_p.values()), axis=0)
    return RoutingSummary(
        p_bar=[float(x) for x in mean_p],
        layer_p_bar={k: [float(x) for x in v] for k, v in layer_p.items()},
        sum_sq=float(np.mean([np.sum(p * p) for p in layer_p.values()])),
        entropy=entropy(mean_p),
        l_ar=nll / scored,
    )


@dataclass
class SweepRun:
    lam: float
    summary: RoutingSummary | None
    lb_range: tuple[float, float] | None
    final_l_ar: float | None
    error: str | None = None
    records: list[dict] = field(default_factory=list, repr=False)


def collapse_experiment(make_state: Callable[[float], tuple[TrainState, BatchStream]], lams: list[float],
                        steps: int, probe: list[TaskExample], vocab: Vocab, seq_len: int) -> list[SweepRun]:
    """Train one run per lambda from identical seeds and summarise final routing.

    ``make_state(lam)`` must build a fresh state and stream from the shared seed.
    A run that fails is reported with its error; the others still run.
    """
    if len(lams) < 2 or 0 not in [float(x) for x in lams]:
        raise ConfigError("sweep: need at least two lambda values including 0")
    runs = []
    for lam in lams:
        try:
            state, stream = make_state(float(lam))
            records = train(state, stream, steps)
            summary = routing_summary(state.model, probe, vocab, seq_len)
            lbs = [r["l_lb"] for r in records]
            runs.append(SweepRun(float(lam), summary, (min(lbs), max(lbs)), records[-1]["l_ar"], records=records))
        except Exception as exc:  # keep sweeping; the failure is part of the report
            log.error("sweep run lambda=%s failed: %s", lam, exc)
            runs.append(SweepRun(float(lam), None, None, None, error=f"{type(exc).__name__}: {exc}"))
    return runs


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(state: TrainState, path, meta: dict | None = None) -> int:
    """Everything needed to continue training bit-exactly; returns the file size."""
    model, opt = state.model, state.optimizer
    named = model.named_parameters()
    tensors = {name: t.data for name, t in named}
    names = {id(t): name for name, t in model.named_trainable()}
    for p, m, v in zip(opt.params, opt.m, opt.v):
        tensors[f"optim.m.{names[id(p)]}"] = m
        tensors[f"optim.v.{names[id(p)]}"] = v
    header = {
        "backbone": model.config.to_dict(),
        "experts": {"n_experts": model.library.n_experts, "rank": model.library.rank,
                    "alpha": model.library.alpha, "shared_gate": model.shared_gate},
        "train": state.config.to_dict(),
        "step": state.step,
        "optimizer": {"t": opt.t, "order": [names[id(p)] for p in opt.params]},
        "rng": {"master_seed": state.config.seed,
                "streams": {s: stream_seed(state.config.seed, s) for s in STREAMS}},
        "backbone_checksum": model.backbone.checksum(),
    }
    header.update(meta or {})
    return write_checkpoint(path, header, tensors)


def load_checkpoint(path) -> tuple[TrainState, dict]:
    """Rebuild a :class:`TrainState` from disk; returns it with the stored metadata."""
    ckpt = read_checkpoint(path)
    meta = ckpt.meta
    try:
        bcfg = BackboneConfig.from_dict(meta["backbone"])
        ecfg = ExpertConfig(**meta["experts"])
        raw_train = dict(meta["train"])
        raw_train["betas"] = tuple(raw_train["betas"])
        tcfg = TrainConfig(**raw_train)
    except (KeyError, TypeError) as exc:
        raise IntegrityError(f"{path}: incomplete metadata ({exc})") from None
    dtype = next(iter(ckpt.tensors.values())).dtype if ckpt.tensors else np.float32
    with _dtype_scope(dtype):
        model = build_model(bcfg, ecfg, tcfg.seed)
    load_parameters(model, {k: v for k, v in ckpt.tensors.items() if not k.startswith("optim.")})
    if model.backbone.checksum() != meta.get("backbone_checksum"):
        raise IntegrityError(f"{path}: backbone checksum does not match stored value")
    state = init_state(model, tcfg)
    opt = state.optimizer
    names = {id(t): name for name, t in model.named_trainable()}
    if meta["optimizer"]["order"] != [names[id(p)] for p in opt.params]:
        raise IntegrityError(f"{path}: optimizer parameter order differs from this build")
    opt.t = int(meta["optimizer"]["t"])
    opt.m = [np.array(ckpt.tensors[f"optim.m.{names[id(p)]}"]) for p in opt.params]
    opt.v = [np.array(ckpt.tensors[f"optim.v.{names[id(p)]}"]) for p in opt.params]
    state.step = int(meta["step"])
    return state, meta


def _dtype_scope(dtype):
    return dc.float64_mode() if np.dtype(dtype) == np.float64 else contextlib.nullcontext()
