"""Joint objective: masked next-token NLL plus the load-balancing regulariser."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, ContractError, DimensionError
from .gating import RoutingOutput, entropy, routing_stats

SIMPLEX_TOL = 1e-5


@dataclass
class BatchTargets:
    inputs: np.ndarray  # [B, T] token ids
    targets: np.ndarray  # [B, T] next-token ids
    loss_mask: np.ndarray  # [B, T] True where the target is a scored completion token
    token_mask: np.ndarray  # [B, T] True on non-pad input positions
    tasks: list[str] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.inputs.shape


@dataclass
class LossBreakdown:
    l_ar: Tensor
    l_lb: Tensor
    lam: float
    l_total: Tensor
    p_bar: np.ndarray  # mean over adapted layers
    tokens_counted: int
    entropy: float = 0.0
    layer_p_bar: dict[str, np.ndarray] = field(default_factory=dict)
    layer_lb: dict[str, float] = field(default_factory=dict)
    task_p_bar: dict[str, list[float]] = field(default_factory=dict)
    grad_norm: float | None = None

    def record(self) -> dict:
        """Plain-float view for logging."""
        return {
            "l_ar": float(self.l_ar.item()),
            "l_lb": float(self.l_lb.item()),
            "lambda": self.lam,
            "l_total": float(self.l_total.item()),
            "p_bar": [float(x) for x in self.p_bar],
            "entropy": self.entropy,
            "tokens": self.tokens_counted,
        }


def ar_loss(logits: Tensor, targets: BatchTargets) -> Tensor:
    if logits.shape[:2] != targets.targets.shape:
        raise DimensionError(f"ar_loss: logits {logits.shape} do not match targets {targets.targets.shape}")
    V = logits.shape[-1]
    return dc.cross_entropy(logits.reshape(-1, V), targets.targets.reshape(-1), targets.loss_mask.reshape(-1))


def lb_loss(p_bar) -> Tensor:
    """N * sum_i p_bar_i^2; equals 1 for uniform routing and N for one-hot."""
    p_bar = dc.as_tensor(p_bar)
    if p_bar.ndim != 1:
        raise ContractError(f"lb_loss expects a vector, got shape {p_bar.shape}")
    vals = p_bar.data
    if np.any(vals < -SIMPLEX_TOL) or abs(float(vals.sum()) - 1.0) > SIMPLEX_TOL:
        raise ContractError(f"lb_loss: p_bar is not on the simplex (sum={float(vals.sum()):.6g})")
    N = p_bar.shape[0]
    return dc.scale((p_bar * p_bar).sum(), float(N))


def total_loss(l_ar, l_lb, lam: float) -> LossBreakdown:
    if lam < 0:
        raise ConfigError(f"train.lam: must be >= 0, got {lam}")
    l_ar, l_lb = dc.as_tensor(l_ar), dc.as_tensor(l_lb)
    total = l_ar + dc.scale(l_lb, lam)
    return LossBreakdown(l_ar=l_ar, l_lb=l_lb, lam=float(lam), l_total=total,
                         p_bar=np.zeros(0), tokens_counted=0)


def joint_objective(logits: Tensor, routing: dict[str, RoutingOutput], batch: BatchTargets, lam: float,
                    include_prompt: bool = True) -> LossBreakdown:
    """L_AR + lam * mean over adapted layers of that layer's L_LB."""
    l_ar = ar_loss(logits, batch)
    mask = batch.token_mask if include_prompt else batch.loss_mask
    layer_terms = []
    layer_p_bar, layer_lb = {}, {}
    tokens = 0
    for lid, r in routing.items():
        stats = routing_stats(r.probs, mask)
        term = lb_loss(stats.p_bar)
        layer_terms.append(term)
        layer_p_bar[lid] = stats.p_bar.data.astype(np.float64)
        layer_lb[lid] = term.item()
        tokens = stats.tokens
    if not layer_terms:
        raise ConfigError("joint_objective: no adapted layers produced routing")
    l_lb = layer_terms[0]
    for t in layer_terms[1:]:
        l_lb = l_lb + t
    l_lb = dc.scale(l_lb, 1.0 / len(layer_terms))
    out = total_loss(l_ar, l_lb, lam)
    mean_p = np.mean(list(layer_p_bar.values()), axis=0)
    out.p_bar = mean_p
    out.entropy = entropy(mean_p)
    out.tokens_counted = tokens
    out.layer_p_bar = layer_p_bar
    out.layer_lb = layer_lb
    return out
