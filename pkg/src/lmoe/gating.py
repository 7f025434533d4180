"""Softmax gate over experts and the per-token composition of LoRA updates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .backbone import LayerTap
from .diffcore import Tensor
from .errors import ConfigError, DimensionError, EmptyBatchError
from .lora_experts import ExpertLibrary


class GateNet:
    """Linear map from a hidden state to one logit per expert.

    Zero-initialised, so routing starts exactly uniform.
    """

    def __init__(self, d_model: int, n_experts: int, scope: str = "shared"):
        self.scope = scope
        self.weight = Tensor(np.zeros((n_experts, d_model)), requires_grad=True, name=f"gates.{scope}.weight")
        self.bias = Tensor(np.zeros(n_experts), requires_grad=True, name=f"gates.{scope}.bias")

    @property
    def n_experts(self) -> int:
        return self.weight.shape[0]

    @property
    def d_model(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


@dataclass
class RoutingOutput:
    logits: Tensor  # [..., N]
    probs: Tensor  # [..., N]


@dataclass
class RoutingStats:
    p_bar: Tensor  # [N], still on the tape
    entropy: float
    tokens: int


def route(gate: GateNet, z: Tensor) -> RoutingOutput:
    if z.shape[-1] != gate.d_model:
        raise DimensionError(f"route: hidden width {z.shape[-1]} does not match gate width {gate.d_model}")
    logits = dc.linear(z, gate.weight, gate.bias)
    return RoutingOutput(logits=logits, probs=dc.softmax(logits, axis=-1))


def composed_forward(tap: LayerTap, h_in: Tensor, lib: ExpertLibrary, routing: RoutingOutput) -> Tensor:
    """h_out = W0 h_in + alpha * sum_i p_i(z) B_i (A_i h_in), per token.

    Mixes expert activations rather than materialising the composite
    d x k update for every token; the two agree by linearity.
    """
    N = routing.probs.shape[-1]
    if N != lib.n_experts:
        raise ConfigError(f"routing covers {N} experts but the library has {lib.n_experts}")
    if routing.probs.shape[:-1] != h_in.shape[:-1]:
        raise DimensionError(f"routing tokens {routing.probs.shape[:-1]} do not match h_in {h_in.shape[:-1]}")
    base = tap.project(h_in)
    mixed = None
    for i in range(N):
        contrib = routing.probs[..., i:i + 1] * lib.adapter(i, tap.layer_id).apply(h_in)
        mixed = contrib if mixed is None else mixed + contrib
    return base + dc.scale(mixed, lib.alpha)


def materialized_delta(lib: ExpertLibrary, layer_id: str, p: np.ndarray) -> np.ndarray:
    """Composite update sum_i p_i B_i A_i for one token, as an explicit d x k matrix."""
    return sum(p[i] * lib.adapter(i, layer_id).delta_weight() for i in range(lib.n_experts))


def routing_stats(probs: Tensor, mask=None) -> RoutingStats:
    """Batch-average routing p_bar over the tokens selected by ``mask`` and its entropy."""
    N = probs.shape[-1]
    flat = probs.reshape(-1, N)
    if mask is None:
        weights = np.ones(flat.shape[0], dtype=probs.dtype)
    else:
        weights = np.asarray(mask, dtype=probs.dtype).reshape(-1)
        if weights.shape[0] != flat.shape[0]:
            raise DimensionError(f"routing_stats: mask covers {weights.shape[0]} tokens, probs {flat.shape[0]}")
    M = int(weights.sum())
    if M == 0:
        raise EmptyBatchError("routing_stats: no tokens in batch")
    p_bar = dc.scale((flat * Tensor(weights[:, None], dtype=probs.dtype)).sum(axis=0), 1.0 / M)
    return RoutingStats(p_bar=p_bar, entropy=entropy(p_bar.data), tokens=M)


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum()) if nz.size else 0.0


def max_entropy(n_experts: int) -> float:
    return math.log(n_experts)
