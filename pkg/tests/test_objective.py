from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lmoe import diffcore as dc
from lmoe.diffcore import Tensor
from lmoe.errors import ConfigError, ContractError, EmptyBatchError
from lmoe.gating import RoutingOutput
from lmoe.objective import BatchTargets, ar_loss, joint_objective, lb_loss, total_loss


def batch_of(targets, loss_mask, token_mask=None) -> BatchTargets:
    targets = np.asarray(targets)
    loss_mask = np.asarray(loss_mask, dtype=bool)
    token_mask = np.ones_like(loss_mask) if token_mask is None else np.asarray(token_mask, dtype=bool)
    return BatchTargets(inputs=np.zeros_like(targets), targets=targets, loss_mask=loss_mask, token_mask=token_mask)


def test_ar_loss_uniform_logits_is_log_vocab():
    V = 9
    b = batch_of([[1, 2, 3]], [[True, True, False]])
    assert abs(ar_loss(Tensor(np.zeros((1, 3, V))), b).item() - math.log(V)) < 1e-6


def test_ar_loss_confident_correct_is_near_zero():
    targets = np.array([[1, 2, 3]])
    logits = np.zeros((1, 3, 5))
    for t in range(3):
        logits[0, t, targets[0, t]] = 40.0
    assert ar_loss(Tensor(logits), batch_of(targets, [[True] * 3])).item() < 1e-12


def test_ar_loss_direct_summation(rng):
    logits = rng.standard_normal((2, 4, 6))
    targets = rng.integers(0, 6, size=(2, 4))
    mask = np.array([[False, True, True, False], [True, True, False, False]])
    terms = []
    for b in range(2):
        for t in range(4):
            if mask[b, t]:
                row = logits[b, t]
                terms.append(np.log(np.exp(row).sum()) - row[targets[b, t]])
    with dc.float64_mode():
        value = ar_loss(Tensor(logits), batch_of(targets, mask)).item()
    assert abs(value - sum(terms) / len(terms)) < 1e-12


def test_ar_loss_ignores_masked_positions(rng):
    logits = rng.standard_normal((1, 3, 4))
    mask = [[True, False, True]]
    a = ar_loss(Tensor(logits), batch_of([[0, 1, 2]], mask)).item()
    logits[0, 1] = 1e3 * rng.standard_normal(4)
    b = ar_loss(Tensor(logits), batch_of([[0, 3, 2]], mask)).item()
    assert a == b


def test_ar_loss_empty_mask():
    with pytest.raises(EmptyBatchError):
        ar_loss(Tensor(np.zeros((1, 2, 3))), batch_of([[0, 0]], [[False, False]]))


@pytest.mark.parametrize("p,expected", [
    ([0.25, 0.25, 0.25, 0.25], 1.0),
    ([1.0, 0.0, 0.0, 0.0], 4.0),
    ([0.75, 0.25], 1.25),
    ([0.5, 0.5, 0.0], 1.5),
])
def test_lb_loss_values(p, expected):
    with dc.float64_mode():
        assert abs(lb_loss(np.array(p)).item() - expected) < 1e-12


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 16), st.integers(0, 2 ** 32 - 1))
def test_lb_loss_bounds_on_simplex(n, seed):
    p = np.random.default_rng(seed).dirichlet(np.full(n, 0.3))
    with dc.float64_mode():
        v = lb_loss(p).item()
    assert 1.0 - 1e-9 <= v <= n + 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2 ** 32 - 1))
def test_lb_loss_gradient_is_2n_p(n, seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(n))
    with dc.float64_mode():
        t = Tensor(p, requires_grad=True)
        lb_loss(t).backward()
    np.testing.assert_allclose(t.grad, 2 * n * p, atol=1e-12)


def test_lb_loss_rejects_off_simplex():
    with pytest.raises(ContractError):
        lb_loss(np.array([0.6, 0.6]))
    with pytest.raises(ContractError):
        lb_loss(np.array([1.2, -0.2]))
    with pytest.raises(ContractError):
        lb_loss(np.full((2, 2), 0.25))


def test_total_loss_combination():
    assert abs(total_loss(2.0, 1.5, 0.1).l_total.item() - 2.15) < 1e-6
    with pytest.raises(ConfigError):
        total_loss(1.0, 1.0, -0.1)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 5), st.floats(1, 8), st.floats(0, 100), st.floats(0, 100))
def test_total_loss_is_linear_in_lambda(l_ar, l_lb, lam1, lam2):
    with dc.float64_mode():
        a = total_loss(l_ar, l_lb, lam1).l_total.item()
        b = total_loss(l_ar, l_lb, lam2).l_total.item()
    assert abs((a - b) - (lam1 - lam2) * l_lb) < 1e-9 * max(1.0, lam1, lam2) * l_lb


def test_joint_objective_averages_layer_balance_terms(rng):
    B, T, V, N = 2, 3, 5, 3
    token_mask = np.array([[True, True, False], [True, True, True]])
    loss_mask = np.array([[False, True, False], [True, True, False]])
    routing = {}
    with dc.float64_mode():
        for lid in ("a", "b"):
            p = rng.dirichlet(np.ones(N), size=(B, T))
            routing[lid] = RoutingOutput(logits=Tensor(np.log(p)), probs=Tensor(p))
        logits = Tensor(rng.standard_normal((B, T, V)))
        batch = batch_of(rng.integers(0, V, (B, T)), loss_mask, token_mask)
        out = joint_objective(logits, routing, batch, lam=0.3)
        out_loss_only = joint_objective(logits, routing, batch, lam=0.3, include_prompt=False)

    def lb_of(mask):
        vals = []
        for r in routing.values():
            p_bar = r.probs.data[mask].mean(axis=0)
            vals.append(N * np.sum(p_bar ** 2))
        return float(np.mean(vals))

    assert abs(out.l_lb.item() - lb_of(token_mask)) < 1e-12
    assert abs(out_loss_only.l_lb.item() - lb_of(loss_mask)) < 1e-12
    assert abs(out.l_total.item() - (out.l_ar.item() + 0.3 * out.l_lb.item())) < 1e-12
    assert out.tokens_counted == int(token_mask.sum())
    np.testing.assert_allclose(out.p_bar.sum(), 1.0)
