"""Finite-difference verification of the analytic gradients of the joint loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from .backbone import BackboneConfig
from .diffcore import Tensor
from .errors import ContractError, GradCheckError
from .model import ExpertConfig, LMoEModel, build_model
from .objective import BatchTargets, joint_objective
from .rng import stream_rng

ABS_FLOOR = 1e-6


def central_difference(f: Callable[[], float], t: Tensor, index: tuple, h: float = 1e-5) -> float:
    """(f(x + h) - f(x - h)) / 2h for one coordinate of ``t``, restoring it afterwards."""
    old = t.data[index].copy()
    try:
        t.data[index] = old + h
        up = f()
        t.data[index] = old - h
        down = f()
    finally:
        t.data[index] = old
    return (up - down) / (2 * h)


def relative_error(analytic: float, numeric: float, floor: float = ABS_FLOOR) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps exact zeros from dividing by noise."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class TensorCheck:
    name: str
    checked: int
    max_rel_err: float
    worst_index: tuple
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list[TensorCheck] = field(default_factory=list)
    skipped_frozen: list[str] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def failures(self) -> list[TensorCheck]:
        return [e for e in self.entries if e.max_rel_err >= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "tolerance": self.tolerance,
            "max_rel_err": self.max_rel_err,
            "passed": self.passed,
            "skipped_frozen": self.skipped_frozen,
            "tensors": [
                {"name": e.name, "checked": e.checked, "max_rel_err": e.max_rel_err,
                 "worst_index": list(e.worst_index), "analytic": e.analytic, "numeric": e.numeric}
                for e in self.entries
            ],
        }


def tiny_setup(seed: int = 0, batch_size: int = 2, seq_len: int = 4, vocab_size: int = 13,
               experts: ExpertConfig | None = None, backbone: BackboneConfig | None = None,
               mid_training: bool = True) -> tuple[LMoEModel, BatchTargets]:
    """A d_model=8, two-block model and a random batch, built in the current precision.

    With ``mid_training`` the B matrices and gates get random values so every
    path through the composition carries gradient.
    """
    backbone = backbone or BackboneConfig(vocab_size=vocab_size, d_model=8, n_layers=2, n_heads=2, d_ff=16,
                                          max_seq_len=max(seq_len, 8))
    experts = experts or ExpertConfig(n_experts=3, rank=2)
    model = build_model(backbone, experts, seed)
    rng = stream_rng(seed, "gradcheck")
    if mid_training:
        for name, p in model.named_trainable():
            std = 0.5 if name.startswith("gates.") else 0.2
            p.data = rng.normal(0.0, std, size=p.shape).astype(p.data.dtype)
    tokens = rng.integers(1, backbone.vocab_size, size=(batch_size, seq_len + 1))
    loss_mask = np.ones((batch_size, seq_len), dtype=bool)
    loss_mask[0, 0] = False  # exercise masking
    batch = BatchTargets(inputs=tokens[:, :-1], targets=tokens[:, 1:], loss_mask=loss_mask,
                         token_mask=np.ones((batch_size, seq_len), dtype=bool))
    return model, batch


def grad_check(model: LMoEModel, batch: BatchTargets, lam: float = 0.5, n_coords: int = 20,
               tol: float = 1e-4, h: float = 1e-5, seed: int = 0, raise_on_fail: bool = False) -> GradCheckReport:
    """Compare backward() against central differences of the total loss.

    Samples ``n_coords`` coordinates per trainable tensor (all of them when the
    tensor is smaller). Frozen backbone tensors are not perturbed; they are
    listed in ``skipped_frozen`` and must hold no gradient.
    """
    if dc.get_default_dtype() is not np.float64 or model.backbone.parameters()[0].dtype != np.float64:
        raise ContractError("grad_check needs float64: build the model inside float64_mode()")

    def loss_value() -> float:
        with dc.no_grad():
            fr = model.forward(batch.inputs)
            return joint_objective(fr.logits, fr.routing, batch, lam).l_total.item()

    for p in model.trainable_parameters():
        p.grad = None
    fr = model.forward(batch.inputs)
    joint_objective(fr.logits, fr.routing, batch, lam).l_total.backward()

    report = GradCheckReport(tolerance=tol)
    for name, p in model.backbone.named_parameters():
        if p.grad is not None:
            raise GradCheckError(f"frozen tensor {name} received a gradient")
        report.skipped_frozen.append(f"backbone.{name}")

    rng = stream_rng(seed, "gradcheck", 1)
    for name, p in model.named_trainable():
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        if p.size <= n_coords:
            picks = list(np.ndindex(p.shape))
        else:
            flat = rng.choice(p.size, size=n_coords, replace=False)
            picks = [np.unravel_index(i, p.shape) for i in sorted(flat)]
        worst = (-1.0, (), 0.0, 0.0)
        for idx in picks:
            idx = tuple(int(i) for i in idx)
            a = float(grad[idx])
            n = central_difference(loss_value, p, idx, h)
            err = relative_error(a, n)
            if err > worst[0]:
                worst = (err, idx, a, n)
        report.entries.append(TensorCheck(name, len(picks), worst[0], worst[1], worst[2], worst[3]))

    if raise_on_fail and not report.passed:
        lines = [f"{e.name}{list(e.worst_index)}: analytic={e.analytic:.6e} numeric={e.numeric:.6e} "
                 f"rel={e.max_rel_err:.2e}" for e in report.failures]
        raise GradCheckError("gradient check failed:\n" + "\n".join(lines), failures=report.failures)
    return report
