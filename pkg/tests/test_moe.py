"""Routing, dispatch, regularizer and utilization tests for the MoE core."""

import mpmath
import numpy as np
import pytest

from spmoe import autodiff as ad
from spmoe.autodiff import LEDGER, Tensor
from spmoe.errors import ConfigError
from spmoe.moe import (
    ActivationMap,
    Expert,
    MoEConfig,
    MoELayer,
    balance_loss,
    dispatch,
    expert_stats,
    flops_per_token,
    gate,
    moe_forward,
    route,
    second_expert,
    z_loss,
)

from test_autodiff import check_grads, fd_grad, max_rel_err


def make_layer(seed, dim, hidden, n_experts):
    return MoELayer.init(np.random.default_rng(seed), dim, hidden, n_experts)


def dense_masked_forward(x: Tensor, layer: MoELayer, state) -> np.ndarray:
    """Independent oracle: evaluate every expert on the full batch and
    combine with the masked routing weights, exactly as the aggregation
    formula is written."""
    masked = state.probs.data * state.mask
    out = np.zeros_like(x.data)
    for e, expert in enumerate(layer.experts):
        ye = expert.forward(x).data
        out = out + masked[:, e][:, None] * ye
    return out


# -- gate ---------------------------------------------------------------------


def test_gate_zero_weights():
    x = Tensor(np.random.default_rng(0).standard_normal((5, 3)))
    w = Tensor(np.zeros((3, 4)))
    assert np.array_equal(gate(x, w).data, np.zeros((5, 4)))


def test_gate_tiny_case():
    out = gate(Tensor([[2.0]]), Tensor([[1.0, -1.0]]))
    assert np.array_equal(out.data, [[2.0, -2.0]])


def test_gate_matmul_oracle():
    rng = np.random.default_rng(1)
    x, w = rng.standard_normal((6, 4)), rng.standard_normal((4, 3))
    expect = np.zeros((6, 3))
    for i in range(6):
        for j in range(3):
            for k in range(4):
                expect[i, j] += x[i, k] * w[k, j]
    assert np.max(np.abs(gate(Tensor(x), Tensor(w)).data - expect)) < 1e-12


# -- route ----------------------------------------------------------------------


def test_route_tie_break_lowest_index():
    state = route(Tensor(np.zeros((1, 4))), 1)
    masked = state.masked_weights().data
    assert state.top1[0] == 0
    assert masked[0, 0] == 0.25
    assert np.array_equal(masked[0, 1:], np.zeros(3))


def test_route_k_equals_e_keeps_everything():
    logits = Tensor(np.random.default_rng(2).standard_normal((7, 4)))
    state = route(logits, 4)
    assert np.array_equal(state.masked_weights().data, state.probs.data)
    assert state.load.sum() == 7 * 4


def test_route_top2_full_sort_oracle():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((50, 6))
    state = route(Tensor(logits), 2)
    for i in range(50):
        expect = set(np.argsort(-logits[i])[:2])
        assert set(state.selected[i]) == expect


def test_route_invariants_top1():
    rng = np.random.default_rng(4)
    logits = rng.standard_normal((200, 5))
    state = route(Tensor(logits), 1)
    masked = state.masked_weights().data
    assert np.all((masked > 0).sum(axis=1) == 1)
    assert np.array_equal(state.top1, logits.argmax(axis=1))
    nz = masked[np.arange(200), state.top1]
    assert np.array_equal(nz, state.probs.data[np.arange(200), state.top1])
    assert state.load.sum() == 200


def test_route_shift_invariance():
    rng = np.random.default_rng(5)
    logits = rng.standard_normal((64, 4))
    base = route(Tensor(logits), 1)
    for c in (-50.0, 1.0, 1000.0):
        shifted = route(Tensor(logits + c), 1)
        assert np.array_equal(shifted.top1, base.top1)
        assert np.max(np.abs(shifted.probs.data - base.probs.data)) < 1e-12
        assert np.max(np.abs(
            shifted.masked_weights().data - base.masked_weights().data)) < 1e-12


# -- forward / dispatch ----------------------------------------------------------


def test_moe_forward_single_expert_is_plain_ffn():
    layer = make_layer(0, 8, 16, 1)
    x = Tensor(np.random.default_rng(1).standard_normal((10, 8)))
    y, state = moe_forward(x, layer, MoEConfig(n_experts=1))
    direct = layer.experts[0].forward(x).data
    assert np.array_equal(y.data, direct)
    assert np.array_equal(state.load, [10])


def test_moe_forward_identical_experts_k2():
    layer = make_layer(2, 6, 12, 2)
    for t in ("ln_g", "ln_b", "w1", "b1", "w2", "b2"):
        getattr(layer.experts[1], t).data[:] = getattr(layer.experts[0], t).data
    x = Tensor(np.random.default_rng(3).standard_normal((9, 6)))
    cfg = MoEConfig(n_experts=2, top_k=2)
    y, state = moe_forward(x, layer, cfg)
    expect = layer.experts[0].forward(x).data  # weights sum to 1 per row
    assert np.max(np.abs(y.data - expect)) < 1e-12


def test_dispatch_equals_dense_masked_evaluation_bitwise():
    rng = np.random.default_rng(6)
    for trial in range(20):
        layer = make_layer(100 + trial, 8, 16, 4)
        x = Tensor(rng.standard_normal((25, 8)))
        k = 1 + trial % 2
        cfg = MoEConfig(n_experts=4, top_k=k)
        y, state = moe_forward(x, layer, cfg)
        assert np.array_equal(y.data, dense_masked_forward(x, layer, state))


def test_moe_forward_gradients():
    layer = make_layer(7, 4, 6, 3)
    x = Tensor(np.random.default_rng(8).standard_normal((6, 4)), requires_grad=True)
    cfg = MoEConfig(n_experts=3, top_k=1, z_loss_weight=0.0)
    params = [x, layer.gate_w] + [
        getattr(e, n) for e in layer.experts
        for n in ("ln_g", "ln_b", "w1", "b1", "w2", "b2")
    ]
    c = np.random.default_rng(9).standard_normal((6, 4))

    def build():
        y, state = moe_forward(x, layer, cfg)
        return ad.add(ad.mul(y, c).sum(), z_loss(state.logits))

    check_grads(build, params, tol=1e-4)


# -- z-loss -----------------------------------------------------------------------


def test_z_loss_uniform_zero_closed_form():
    for E in (1, 2, 4, 8):
        logits = Tensor(np.zeros((13, E)))
        expect = float(np.log(E)) ** 2
        assert abs(z_loss(logits).item() - expect) < 1e-12


def test_z_loss_single_expert_zero_logit():
    assert z_loss(Tensor(np.zeros((5, 1)))).item() == 0.0


def test_z_loss_extended_precision_oracle():
    rng = np.random.default_rng(10)
    logits = rng.standard_normal((6, 4)) * 3
    with mpmath.workdps(50):
        total = mpmath.mpf(0)
        for row in logits:
            lse = mpmath.log(mpmath.fsum([mpmath.exp(mpmath.mpf(v)) for v in row]))
            total += lse**2
        expect = float(total / 6)
    assert abs(z_loss(Tensor(logits)).item() - expect) < 1e-10


def test_z_loss_gradient():
    x = Tensor(np.random.default_rng(11).standard_normal((4, 5)), requires_grad=True)
    check_grads(lambda: z_loss(x), [x], tol=1e-5)


# -- balance loss -------------------------------------------------------------------


def test_balance_uniform_logits_value_one():
    state = route(Tensor(np.zeros((16, 4))), 1)
    assert abs(balance_loss(state).item() - 1.0) < 1e-12


def test_balance_single_expert_is_one():
    layer = make_layer(1, 4, 8, 1)
    x = Tensor(np.random.default_rng(0).standard_normal((5, 4)))
    _, state = moe_forward(x, layer, MoEConfig(n_experts=1))
    assert abs(balance_loss(state).item() - 1.0) < 1e-12


def test_balance_definition_oracle():
    rng = np.random.default_rng(12)
    logits = rng.standard_normal((64, 4))
    state = route(Tensor(logits), 1)
    probs = state.probs.data
    top1 = probs.argmax(axis=1)
    expect = 0.0
    for e in range(4):
        f_e = np.mean(top1 == e)
        p_e = probs[:, e].mean()
        expect += f_e * p_e
    expect *= 4
    assert abs(balance_loss(state).item() - expect) < 1e-12


def test_balance_is_at_least_one():
    rng = np.random.default_rng(13)
    for trial in range(20):
        state = route(Tensor(rng.standard_normal((40, 5)) * 2), 1)
        assert balance_loss(state).item() >= 1.0 - 1e-9


def test_balance_gradient_through_probs_only():
    logits = Tensor(np.random.default_rng(14).standard_normal((12, 3)),
                    requires_grad=True)
    state = route(logits, 1)
    balance_loss(state).backward()
    top1 = state.top1.copy()

    def fd_ok():
        # fd under fixed f (hard counts held constant)
        def f():
            probs = ad.softmax_rows(logits)
            E = 3
            fvec = np.bincount(top1, minlength=E) / 12
            mean_p = ad.matmul(Tensor(np.full((1, 12), 1.0 / 12)), probs)
            return ad.mul(mean_p, fvec[None, :]).sum() * float(E)

        num = fd_grad(f, logits)
        return max_rel_err(logits.grad, num)

    assert fd_ok() < 1e-5


# -- second-expert policies ------------------------------------------------------------


def probs_row_state(rows):
    """Build a routing state whose softmax matches the given prob rows."""
    logits = np.log(np.asarray(rows))
    return route(Tensor(logits), 1)


def test_policy_all_keeps_top_two():
    state = probs_row_state([[0.5, 0.3, 0.15, 0.05]])
    out = second_expert(state, "all", None)
    masked = out.masked_weights().data[0]
    assert set(np.flatnonzero(masked)) == {0, 1}
    assert abs(masked[0] - 0.5) < 1e-12 and abs(masked[1] - 0.3) < 1e-12


def test_policy_threshold():
    state = probs_row_state([[0.5, 0.3, 0.15, 0.05]])
    out = second_expert(state, "threshold", None, threshold=0.35)
    masked = out.masked_weights().data[0]
    assert np.flatnonzero(masked).tolist() == [0]
    out2 = second_expert(state, "threshold", None, threshold=0.2)
    assert set(np.flatnonzero(out2.masked_weights().data[0])) == {0, 1}


def test_policy_random_frequency():
    rng = np.random.default_rng(15)
    logits = rng.standard_normal((10_000, 4))
    state = route(Tensor(logits), 1)
    p2 = state.probs.data[np.arange(10_000), state.ranking[:, 1]]
    out = second_expert(state, "random", np.random.default_rng(0))
    freq = np.mean(out.selected[:, 1] >= 0)
    assert abs(freq - p2.mean()) < 0.02


def test_policy_none_identity_and_validation():
    state = probs_row_state([[0.5, 0.3, 0.15, 0.05]])
    assert second_expert(state, "none", None) is state
    with pytest.raises(ConfigError):
        second_expert(state, "sometimes", None)
    with pytest.raises(ConfigError):
        second_expert(route(Tensor(np.zeros((2, 4))), 2), "all", None)


def test_policy_dispatch_matches_dense():
    layer = make_layer(20, 6, 10, 4)
    x = Tensor(np.random.default_rng(21).standard_normal((30, 6)))
    cfg = MoEConfig(n_experts=4, top_k=1, second_expert_policy="threshold",
                    second_expert_threshold=0.3)
    y, state = moe_forward(x, layer, cfg, rng=np.random.default_rng(0))
    assert np.array_equal(y.data, dense_masked_forward(x, layer, state))


# -- stats -------------------------------------------------------------------------


def test_expert_stats_single_expert_all_zero():
    layer = make_layer(3, 4, 8, 1)
    x = Tensor(np.random.default_rng(4).standard_normal((7, 4)))
    _, state = moe_forward(x, layer, MoEConfig(n_experts=1))
    amap = expert_stats([state], [1], 1)
    assert np.array_equal(amap.dominant, np.zeros((1, 7)))


def test_expert_stats_forced_expert():
    logits = np.full((9, 4), -5.0)
    logits[:, 2] = 5.0
    state = route(Tensor(logits), 1)
    amap = expert_stats([state], [3], 4)
    assert np.all(amap.dominant == 2)
    assert amap.load[0, 2] == 9


def test_expert_stats_histogram_sums():
    rng = np.random.default_rng(22)
    states = [route(Tensor(rng.standard_normal((33, 4))), 1) for _ in range(3)]
    amap = expert_stats(states, [1, 3, 6], 4)
    assert np.array_equal(amap.load.sum(axis=1), [33, 33, 33])


def test_activation_map_round_trip(tmp_path):
    amap = ActivationMap(
        layer_indices=[1, 3, 6],
        dominant=np.random.default_rng(0).integers(0, 4, (3, 20)),
        load=np.array([[5, 5, 5, 5], [10, 4, 3, 3], [20, 0, 0, 0]]),
    )
    path = tmp_path / "act.txt"
    amap.to_container().write(path)
    from spmoe import container
    back = ActivationMap.from_container(container.read(path, "activations"))
    assert back.layer_indices == [1, 3, 6]
    assert np.array_equal(back.dominant, amap.dominant)
    assert np.array_equal(back.load, amap.load)


# -- flops --------------------------------------------------------------------------


def test_flop_constancy_analytic():
    costs = [flops_per_token(256, 1024, e) for e in (1, 2, 4, 6, 8)]
    spread = (max(costs) - min(costs)) / min(costs)
    assert spread < 0.01
    assert costs[0] == 4 * 256 * 1024  # single expert == dense FFN exactly
    for e_prev, e_next in ((2, 4), (4, 6), (6, 8)):
        delta = flops_per_token(256, 1024, e_next) - flops_per_token(256, 1024, e_prev)
        assert delta == 2 * 256 * (e_next - e_prev)


def test_flop_ledger_agrees_with_analytic():
    dim, hidden = 16, 32
    x_np = np.random.default_rng(30).standard_normal((10, dim))
    for n_experts in (1, 2, 4):
        layer = make_layer(40 + n_experts, dim, hidden, n_experts)
        LEDGER.reset()
        moe_forward(Tensor(x_np), layer, MoEConfig(n_experts=n_experts))
        assert LEDGER.total == 10 * flops_per_token(dim, hidden, n_experts)
