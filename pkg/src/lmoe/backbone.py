"""A small pre-norm decoder-only transformer whose parameters stay frozen.

Every linear projection goes through :meth:`BackboneModel.project`. Projections
named in ``BackboneConfig.adapted_layers`` are handed to an adapter hook
instead, together with a :class:`LayerTap` describing the layer and the
hidden state ``z`` the gate should see.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, SequenceLengthError, VocabularyError

ATTENTION_ROLES = ("attn_q", "attn_k", "attn_v", "attn_o")
FFN_ROLES = ("ffn_up", "ffn_down")
ALL_ROLES = ATTENTION_ROLES + FFN_ROLES


@dataclass
class BackboneConfig:
    vocab_size: int = 32
    d_model: int = 16
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    max_seq_len: int = 32
    # roles adapted in every block; ``adapted_blocks=None`` means all blocks
    adapted_layers: list[str] = field(default_factory=lambda: list(ALL_ROLES))
    adapted_blocks: list[int] | None = None

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"backbone.{name}: must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"backbone.d_model: {self.d_model} is not divisible by n_heads={self.n_heads}")
        unknown = [r for r in self.adapted_layers if r not in ALL_ROLES]
        if unknown:
            raise ConfigError(f"backbone.adapted_layers: unknown roles {unknown}; choose from {list(ALL_ROLES)}")
        if self.adapted_blocks is not None:
            bad = [b for b in self.adapted_blocks if not 0 <= b < self.n_layers]
            if bad:
                raise ConfigError(f"backbone.adapted_blocks: indices {bad} outside [0, {self.n_layers})")
        if not self.layer_ids():
            raise ConfigError("backbone.adapted_layers: selects no linear layers")

    def layer_ids(self) -> list[str]:
        """The adapted layer set, in forward order."""
        blocks = range(self.n_layers) if self.adapted_blocks is None else sorted(set(self.adapted_blocks))
        return [f"blocks.{b}.{role}" for b in blocks for role in ALL_ROLES if role in self.adapted_layers]

    def layer_shape(self, layer_id: str) -> tuple[int, int]:
        """(d_out, k_in) of the weight matrix behind ``layer_id``."""
        role = layer_id.rsplit(".", 1)[-1]
        if role == "ffn_up":
            return self.d_ff, self.d_model
        if role == "ffn_down":
            return self.d_model, self.d_ff
        return self.d_model, self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> BackboneConfig:
        known = set(cls.__dataclass_fields__)
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"backbone: unknown fields {sorted(extra)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg


@dataclass
class LayerTap:
    layer_id: str
    block: int
    role: str
    k: int  # input width
    d: int  # output width
    z: Tensor  # normalised input of the sublayer owning this projection, width d_model
    weight: Tensor
    bias: Tensor

    def project(self, h_in: Tensor) -> Tensor:
        """The frozen projection W0 h_in + b0."""
        return dc.linear(h_in, self.weight, self.bias)


AdapterHook = Callable[[LayerTap, Tensor], Tensor]


def param_count(config: BackboneConfig) -> int:
    d, f, V, S = config.d_model, config.d_ff, config.vocab_size, config.max_seq_len
    per_block = 2 * d + 4 * (d * d + d) + 2 * d + (f * d + f) + (d * f + d)
    return V * d + S * d + config.n_layers * per_block + 2 * d + V * d


class BackboneModel:
    def __init__(self, config: BackboneConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self._adapted = set(config.layer_ids())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> BackboneModel:
        return BackboneModel(self.config, {k: Tensor(v.data, dtype=dtype, name=k) for k, v in self.params.items()})

    @property
    def adapted_layers(self) -> list[str]:
        return self.config.layer_ids()

    def project(self, block: int, role: str, h_in: Tensor, z: Tensor, hook: AdapterHook | None) -> Tensor:
        name = f"blocks.{block}.{role}"
        w, b = self.params[f"{name}.weight"], self.params[f"{name}.bias"]
        if hook is None or name not in self._adapted:
            return dc.linear(h_in, w, b)
        d, k = w.shape
        tap = LayerTap(layer_id=name, block=block, role=role, k=k, d=d, z=z, weight=w, bias=b)
        return hook(tap, h_in)

    def check_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise SequenceLengthError(f"tokens must be [B, T], got shape {tokens.shape}")
        if tokens.shape[1] > self.config.max_seq_len:
            raise SequenceLengthError(
                f"sequence length {tokens.shape[1]} exceeds max_seq_len={self.config.max_seq_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise VocabularyError(
                f"token ids must lie in [0, {self.config.vocab_size}), got range "
                f"[{tokens.min()}, {tokens.max()}]")
        return tokens

    def forward(self, tokens, adapter_hook: AdapterHook | None = None) -> Tensor:
        """Causal logits [B, T, V] for integer ``tokens`` [B, T]."""
        tokens = self.check_tokens(tokens)
        cfg, P = self.config, self.params
        B, T = tokens.shape
        x = dc.embedding(P["tok_emb"], tokens) + dc.embedding(P["pos_emb"], np.arange(T))
        causal = np.triu(np.ones((T, T), dtype=bool), k=1)
        H = cfg.n_heads
        dh = cfg.d_model // H
        for blk in range(cfg.n_layers):
            pre = f"blocks.{blk}"
            h = dc.layer_norm(x, P[f"{pre}.ln1.gamma"], P[f"{pre}.ln1.beta"])
            q = self.project(blk, "attn_q", h, h, adapter_hook)
            k = self.project(blk, "attn_k", h, h, adapter_hook)
            v = self.project(blk, "attn_v", h, h, adapter_hook)
            q, k, v = (t.reshape(B, T, H, dh).transpose(0, 2, 1, 3) for t in (q, k, v))
            att = dc.scale(q @ k.T, 1.0 / math.sqrt(dh))
            att = dc.softmax(dc.masked_fill(att, causal, -np.inf), axis=-1)
            y = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
            x = x + self.project(blk, "attn_o", y, h, adapter_hook)

            z = dc.layer_norm(x, P[f"{pre}.ln2.gamma"], P[f"{pre}.ln2.beta"])
            u = dc.gelu(self.project(blk, "ffn_up", z, z, adapter_hook))
            x = x + self.project(blk, "ffn_down", u, z, adapter_hook)
        x = dc.layer_norm(x, P["ln_f.gamma"], P["ln_f.beta"])
        return dc.linear(x, P["head.weight"])


def init_backbone(config: BackboneConfig, seed: int) -> BackboneModel:
    """Seeded random backbone; every tensor is created with ``requires_grad=False``.

    Linear weights use N(0, 1/fan_in), embeddings N(0, 1). With this scale the
    frozen random network is a usable feature extractor and initial logits are
    close to uniform.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    d = config.d_model
    raw: dict[str, np.ndarray] = {
        "tok_emb": rng.standard_normal((config.vocab_size, d)),
        "pos_emb": rng.standard_normal((config.max_seq_len, d)),
    }
    for blk in range(config.n_layers):
        pre = f"blocks.{blk}"
        for ln in ("ln1", "ln2"):
            raw[f"{pre}.{ln}.gamma"] = np.ones(d)
            raw[f"{pre}.{ln}.beta"] = np.zeros(d)
        for role in ALL_ROLES:
            out_dim, in_dim = config.layer_shape(f"{pre}.{role}")
            raw[f"{pre}.{role}.weight"] = rng.standard_normal((out_dim, in_dim)) / math.sqrt(in_dim)
            raw[f"{pre}.{role}.bias"] = np.zeros(out_dim)
    raw["ln_f.gamma"] = np.ones(d)
    raw["ln_f.beta"] = np.zeros(d)
    raw["head.weight"] = rng.standard_normal((config.vocab_size, d)) / math.sqrt(d)
    params = {name: Tensor(arr, requires_grad=False, name=name) for name, arr in raw.items()}
    return BackboneModel(config, params)
