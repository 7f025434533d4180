"""Library of LoRA experts over the backbone's adapted layers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .backbone import BackboneConfig
from .diffcore import Tensor
from .errors import ConfigError, DimensionError, RankError

A_INIT_STD = 0.02


@dataclass
class LoraLayerAdapter:
    layer_id: str
    A: Tensor  # [r, k]
    B: Tensor  # [d, r]

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def delta_weight(self) -> np.ndarray:
        """B @ A as a plain array. Only used for inspection and tests."""
        return self.B.data @ self.A.data

    def apply(self, h_in: Tensor) -> Tensor:
        """B (A h_in) on row-vector activations [..., k] -> [..., d]."""
        return dc.linear(dc.linear(h_in, self.A), self.B)


@dataclass
class LoraExpert:
    index: int
    adapters: dict[str, LoraLayerAdapter]


class ExpertLibrary:
    def __init__(self, experts: list[LoraExpert], rank: int, alpha: float):
        if not experts:
            raise ConfigError("experts.n_experts: need at least one expert")
        layer_sets = {tuple(e.adapters) for e in experts}
        if len(layer_sets) != 1:
            raise ConfigError("all experts must cover the same adapted layers")
        self.experts = experts
        self.rank = rank
        self.alpha = float(alpha)

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def layer_ids(self) -> list[str]:
        return list(self.experts[0].adapters)

    def adapter(self, expert: int, layer_id: str) -> LoraLayerAdapter:
        return self.experts[expert].adapters[layer_id]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for e in self.experts:
            for lid, ad in e.adapters.items():
                out.append((f"experts.{e.index}.{lid}.A", ad.A))
                out.append((f"experts.{e.index}.{lid}.B", ad.B))
        return out

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())


def init_library(config: BackboneConfig, n_experts: int, rank: int, alpha: float, seed: int) -> ExpertLibrary:
    """A ~ N(0, 0.02^2), B = 0, so every expert starts with a zero update."""
    if n_experts < 1:
        raise ConfigError(f"experts.n_experts: must be >= 1, got {n_experts}")
    if rank < 1:
        raise RankError(f"experts.rank: must be >= 1, got {rank}")
    layer_ids = config.layer_ids()
    for lid in layer_ids:
        d, k = config.layer_shape(lid)
        if rank > min(d, k):
            raise RankError(f"experts.rank: {rank} exceeds min(d, k) = {min(d, k)} for layer {lid}")
    rng = np.random.default_rng(seed)
    experts = []
    for i in range(n_experts):
        adapters = {}
        for lid in layer_ids:
            d, k = config.layer_shape(lid)
            A = Tensor(rng.normal(0.0, A_INIT_STD, size=(rank, k)), requires_grad=True, name=f"experts.{i}.{lid}.A")
            B = Tensor(np.zeros((d, rank)), requires_grad=True, name=f"experts.{i}.{lid}.B")
            adapters[lid] = LoraLayerAdapter(lid, A, B)
        experts.append(LoraExpert(i, adapters))
    return ExpertLibrary(experts, rank, alpha)


def single_expert_forward(adapter: LoraLayerAdapter, W0: Tensor, h_in: Tensor, alpha: float,
                          bias: Tensor | None = None) -> Tensor:
    """W0 h_in + alpha * B (A h_in), never forming B A.

    ``h_in`` may be a single vector [k] or a batch of row vectors [..., k].
    """
    d, k = W0.shape
    if h_in.shape[-1] != k or adapter.A.shape[1] != k or adapter.B.shape[0] != d:
        raise DimensionError(
            f"single_expert_forward: W0 {W0.shape}, A {adapter.A.shape}, B {adapter.B.shape}, "
            f"h_in {h_in.shape} are inconsistent")
    vector = h_in.ndim == 1
    x = h_in.reshape(1, k) if vector else h_in
    out = dc.linear(x, W0, bias) + dc.scale(adapter.apply(x), alpha)
    return out.reshape(d) if vector else out


def trainable_params(lib: ExpertLibrary) -> list[Tensor]:
    return [p for _, p in lib.named_parameters()]
