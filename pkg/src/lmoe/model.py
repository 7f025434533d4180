"""Frozen backbone + expert library + gates, run as one adapted forward pass."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .backbone import BackboneConfig, BackboneModel, LayerTap, init_backbone
from .diffcore import Tensor
from .errors import ConfigError
from .gating import GateNet, RoutingOutput, composed_forward, route
from .lora_experts import ExpertLibrary, init_library, trainable_params
from .rng import stream_seed


@dataclass
class ExpertConfig:
    n_experts: int = 4
    rank: int = 2
    alpha: float = 1.0
    shared_gate: bool = False

    def validate(self) -> None:
        if not isinstance(self.n_experts, int) or self.n_experts < 1:
            raise ConfigError(f"experts.n_experts: must be a positive integer, got {self.n_experts!r}")
        if not isinstance(self.rank, int) or self.rank < 1:
            raise ConfigError(f"experts.rank: must be a positive integer, got {self.rank!r}")
        if not isinstance(self.alpha, (int, float)):
            raise ConfigError(f"experts.alpha: must be a number, got {self.alpha!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardResult:
    logits: Tensor
    routing: dict[str, RoutingOutput] = field(default_factory=dict)


class LMoEModel:
    def __init__(self, backbone: BackboneModel, library: ExpertLibrary, gates: dict[str, GateNet],
                 shared_gate: bool = False):
        self.backbone = backbone
        self.library = library
        self.gates = gates
        self.shared_gate = shared_gate

    @property
    def config(self) -> BackboneConfig:
        return self.backbone.config

    @property
    def layer_ids(self) -> list[str]:
        return self.backbone.adapted_layers

    def gate_for(self, layer_id: str) -> GateNet:
        return self.gates["shared"] if self.shared_gate else self.gates[layer_id]

    def gate_parameters(self) -> list[Tensor]:
        return [p for g in self.gates.values() for p in g.parameters()]

    def named_trainable(self) -> list[tuple[str, Tensor]]:
        named = self.library.named_parameters()
        for scope, g in self.gates.items():
            named += [(f"gates.{scope}.weight", g.weight), (f"gates.{scope}.bias", g.bias)]
        return named

    def trainable_parameters(self) -> list[Tensor]:
        return trainable_params(self.library) + self.gate_parameters()

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"backbone.{n}", p) for n, p in self.backbone.named_parameters()] + self.named_trainable()

    def forward(self, tokens) -> ForwardResult:
        routing: dict[str, RoutingOutput] = {}

        def hook(tap: LayerTap, h_in: Tensor) -> Tensor:
            r = route(self.gate_for(tap.layer_id), tap.z)
            routing[tap.layer_id] = r
            return composed_forward(tap, h_in, self.library, r)

        logits = self.backbone.forward(tokens, adapter_hook=hook)
        return ForwardResult(logits=logits, routing=routing)

    __call__ = forward


def build_model(config: BackboneConfig, experts: ExpertConfig, seed: int) -> LMoEModel:
    config.validate()
    experts.validate()
    backbone = init_backbone(config, stream_seed(seed, "backbone"))
    library = init_library(config, experts.n_experts, experts.rank, experts.alpha, stream_seed(seed, "experts"))
    if experts.shared_gate:
        gates = {"shared": GateNet(config.d_model, experts.n_experts, "shared")}
    else:
        gates = {lid: GateNet(config.d_model, experts.n_experts, lid) for lid in config.layer_ids()}
    return LMoEModel(backbone, library, gates, shared_gate=experts.shared_gate)


def load_parameters(model: LMoEModel, arrays: dict[str, np.ndarray]) -> None:
    """Copy arrays into the model's tensors by name; every name must match exactly."""
    named = dict(model.named_parameters())
    missing = set(named) - set(arrays)
    extra = set(arrays) - set(named)
    if missing or extra:
        raise ConfigError(f"parameter names differ: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
    for name, t in named.items():
        arr = arrays[name]
        if arr.shape != t.shape:
            raise ConfigError(f"{name}: stored shape {arr.shape} does not match model shape {t.shape}")
        t.data = np.array(arr, dtype=t.data.dtype)
