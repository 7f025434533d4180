from __future__ import annotations

import numpy as np
import pytest

from lmoe import diffcore as dc
from lmoe.backbone import ALL_ROLES, FFN_ROLES, BackboneConfig, init_backbone, param_count
from lmoe.errors import ConfigError, SequenceLengthError, VocabularyError


def small_config(**kw) -> BackboneConfig:
    base = dict(vocab_size=13, d_model=8, n_layers=2, n_heads=2, d_ff=16, max_seq_len=12)
    base.update(kw)
    return BackboneConfig(**base)


def test_param_count_desk_config():
    cfg = BackboneConfig(vocab_size=32, d_model=16, n_layers=2, d_ff=64, max_seq_len=32)
    # hand count: embeddings 32*16 + 32*16, per block 2 LN (64) + 4 attn (4*272) + up (1088) + down (1040),
    # final LN 32, head 512
    assert param_count(cfg) == 8128
    assert init_backbone(cfg, 0).num_parameters() == 8128


def test_param_count_matches_enumerated_tensors():
    cfg = small_config(vocab_size=7, n_layers=3, d_ff=24)
    assert init_backbone(cfg, 0).num_parameters() == param_count(cfg)


def test_backbone_is_frozen_and_deterministic():
    cfg = small_config()
    a, b = init_backbone(cfg, 5), init_backbone(cfg, 5)
    assert all(not p.requires_grad for p in a.parameters())
    assert a.checksum() == b.checksum()
    assert a.checksum() != init_backbone(cfg, 6).checksum()


def test_pass_through_hook_is_bit_identical(rng):
    cfg = small_config()
    bb = init_backbone(cfg, 1)
    tokens = rng.integers(0, cfg.vocab_size, size=(3, 10))
    plain = bb.forward(tokens).data
    seen = []

    def hook(tap, h_in):
        seen.append(tap.layer_id)
        return tap.project(h_in)

    hooked = bb.forward(tokens, adapter_hook=hook).data
    assert plain.tobytes() == hooked.tobytes()
    assert seen == cfg.layer_ids()


def test_zero_delta_hook_is_bit_identical(rng):
    cfg = small_config()
    bb = init_backbone(cfg, 1)
    tokens = rng.integers(0, cfg.vocab_size, size=(2, 9))

    def hook(tap, h_in):
        zero = dc.Tensor(np.zeros((tap.d, tap.k)))
        return tap.project(h_in) + dc.linear(h_in, zero)

    assert bb.forward(tokens).data.tobytes() == bb.forward(tokens, adapter_hook=hook).data.tobytes()


def test_logits_are_causal(rng):
    cfg = small_config()
    bb = init_backbone(cfg, 2)
    tokens = rng.integers(0, cfg.vocab_size, size=(1, 10))
    base = bb.forward(tokens).data
    for t in range(9):
        probe = tokens.copy()
        probe[0, t + 1:] = rng.integers(0, cfg.vocab_size, size=10 - t - 1)
        out = bb.forward(probe).data
        np.testing.assert_array_equal(out[0, :t + 1], base[0, :t + 1])


def test_tap_z_is_normalised_sublayer_input(rng):
    cfg = small_config(adapted_layers=list(ALL_ROLES))
    bb = init_backbone(cfg, 3)
    taps = {}
    bb.forward(rng.integers(0, cfg.vocab_size, size=(2, 5)),
               adapter_hook=lambda tap, h: taps.setdefault(tap.layer_id, tap) and tap.project(h))
    for b in range(cfg.n_layers):
        up = taps[f"blocks.{b}.ffn_up"]
        down = taps[f"blocks.{b}.ffn_down"]
        assert down.z is up.z
        assert taps[f"blocks.{b}.attn_q"].z is taps[f"blocks.{b}.attn_o"].z
        assert up.z.shape[-1] == cfg.d_model


def test_adapted_layer_selection():
    cfg = small_config(adapted_layers=list(FFN_ROLES), adapted_blocks=[1])
    assert cfg.layer_ids() == ["blocks.1.ffn_up", "blocks.1.ffn_down"]
    assert cfg.layer_shape("blocks.1.ffn_up") == (16, 8)
    assert cfg.layer_shape("blocks.1.ffn_down") == (8, 16)


@pytest.mark.parametrize("kw,field", [
    ({"d_model": 10, "n_heads": 4}, "backbone.d_model"),
    ({"adapted_layers": ["ffn_sideways"]}, "backbone.adapted_layers"),
    ({"adapted_blocks": [5]}, "backbone.adapted_blocks"),
    ({"vocab_size": 0}, "backbone.vocab_size"),
])
def test_invalid_configs_name_the_field(kw, field):
    with pytest.raises(ConfigError, match=field):
        small_config(**kw).validate()


def test_from_dict_rejects_unknown_fields():
    with pytest.raises(ConfigError, match="unknown"):
        BackboneConfig.from_dict({"d_model": 8, "colour": "red"})


def test_token_checks():
    bb = init_backbone(small_config(), 0)
    with pytest.raises(VocabularyError):
        bb.forward(np.array([[0, 13]]))
    with pytest.raises(SequenceLengthError):
        bb.forward(np.zeros((1, 13), dtype=int))
