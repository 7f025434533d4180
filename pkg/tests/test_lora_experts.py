from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lmoe import diffcore as dc
from lmoe.backbone import FFN_ROLES, BackboneConfig
from lmoe.diffcore import Tensor
from lmoe.errors import DimensionError, RankError
from lmoe.lora_experts import A_INIT_STD, LoraLayerAdapter, init_library, single_expert_forward, trainable_params


def ffn_config(**kw) -> BackboneConfig:
    base = dict(vocab_size=16, d_model=16, n_layers=2, n_heads=2, d_ff=32, adapted_layers=list(FFN_ROLES))
    base.update(kw)
    return BackboneConfig(**base)


def test_parameter_count_and_tensor_count():
    lib = init_library(ffn_config(), n_experts=4, rank=2, alpha=1.0, seed=0)
    # per layer r * (d + k) = 2 * (32 + 16) = 96; 4 FFN layers; 4 experts
    assert lib.num_parameters() == 1536
    names = [n for n, _ in lib.named_parameters()]
    assert len(names) == 32 and len(set(names)) == 32
    assert [n for n in names if n.startswith("experts.0.blocks.0.ffn_up")] == [
        "experts.0.blocks.0.ffn_up.A", "experts.0.blocks.0.ffn_up.B"]


def test_init_distribution_and_zero_b():
    lib = init_library(ffn_config(d_ff=64), n_experts=8, rank=4, alpha=1.0, seed=3)
    a_vals = np.concatenate([p.data.ravel() for n, p in lib.named_parameters() if n.endswith(".A")])
    b_vals = np.concatenate([p.data.ravel() for n, p in lib.named_parameters() if n.endswith(".B")])
    assert np.all(b_vals == 0)
    assert abs(a_vals.std() - A_INIT_STD) < 0.1 * A_INIT_STD
    assert abs(a_vals.mean()) < 0.1 * A_INIT_STD


def test_experts_are_disjoint_and_trainable():
    lib = init_library(ffn_config(), n_experts=3, rank=2, alpha=1.0, seed=0)
    params = trainable_params(lib)
    assert len({id(p) for p in params}) == len(params)
    assert all(p.requires_grad for p in params)
    a0 = lib.adapter(0, "blocks.0.ffn_up").A.data
    a1 = lib.adapter(1, "blocks.0.ffn_up").A.data
    assert not np.array_equal(a0, a1)


def test_rank_bound():
    with pytest.raises(RankError):
        init_library(ffn_config(d_model=4, n_heads=2), n_experts=2, rank=5, alpha=1.0, seed=0)


def _adapter(rng, d, k, r):
    return LoraLayerAdapter("x", Tensor(rng.standard_normal((r, k))), Tensor(rng.standard_normal((d, r))))


def test_zero_b_gives_base_output(rng):
    with dc.float64_mode():
        ad = LoraLayerAdapter("x", Tensor(rng.standard_normal((2, 5))), Tensor(np.zeros((3, 2))))
        W0, h = Tensor(rng.standard_normal((3, 5))), Tensor(rng.standard_normal(5))
        out = single_expert_forward(ad, W0, h, alpha=2.0).data
        base = dc.linear(h.reshape(1, 5), W0).data[0]
    # a zero B adds exact zeros, so the frozen projection comes through bit for bit
    np.testing.assert_array_equal(out, base)
    np.testing.assert_allclose(out, W0.data @ h.data, rtol=1e-14)


def test_alpha_zero_gives_base_output(rng):
    with dc.float64_mode():
        ad = _adapter(rng, 3, 5, 2)
        W0, h = Tensor(rng.standard_normal((3, 5))), Tensor(rng.standard_normal((4, 5)))
        out = single_expert_forward(ad, W0, h, alpha=0.0).data
    np.testing.assert_allclose(out, h.data @ W0.data.T, rtol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 3), st.floats(-3, 3), st.integers(0, 2 ** 32 - 1))
def test_factored_matches_materialised_matrix(d, k, r, alpha, seed):
    rng = np.random.default_rng(seed)
    with dc.float64_mode():
        ad = _adapter(rng, d, k, r)
        W0, h = rng.standard_normal((d, k)), rng.standard_normal(k)
        out = single_expert_forward(ad, Tensor(W0), Tensor(h), alpha).data
    expected = (W0 + alpha * ad.B.data @ ad.A.data) @ h
    np.testing.assert_allclose(out, expected, rtol=1e-10, atol=1e-12)


def test_delta_weight_shape_and_rank(rng):
    ad = _adapter(rng, 6, 5, 2)
    dw = ad.delta_weight()
    assert dw.shape == (6, 5)
    assert np.linalg.matrix_rank(dw) == 2


def test_shape_mismatch_raises(rng):
    ad = _adapter(rng, 3, 5, 2)
    with pytest.raises(DimensionError):
        single_expert_forward(ad, Tensor(np.zeros((3, 4))), Tensor(np.zeros(4)), 1.0)


def test_library_is_seeded():
    a = init_library(ffn_config(), 2, 2, 1.0, seed=9)
    b = init_library(ffn_config(), 2, 2, 1.0, seed=9)
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes()
