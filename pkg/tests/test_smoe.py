import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ubsmoe.gradcheck import check_layer, frozen_forward, random_suite
from ubsmoe.numerics import ConfigError, make_rng, softmax, topk_indices
from ubsmoe.smoe import (
    Expert,
    ExpertAdapter,
    SmoeLayerParams,
    expert_forward,
    init_layer,
    phi_regularization_loss,
    random_layer,
    route_dmr,
    smoe_backward,
    smoe_forward,
)


def hand_layer(router, phi, d=2):
    """Layer whose experts are scaled identities so outputs are easy to read."""
    m = len(phi)
    experts = [Expert((i + 1.0) * np.eye(d), ExpertAdapter(np.zeros((d, 1)), np.zeros((1, d)), 1.0)) for i in range(m)]
    return SmoeLayerParams(experts, np.asarray(router, dtype=float), np.asarray(phi, dtype=float))


def vanilla_topk(s, k):
    act = topk_indices(s, k)
    g = np.zeros_like(s)
    g[act] = softmax(s[act])
    return act, g


class TestExpert:
    def test_zero_b_is_base_map(self):
        p = init_layer(4, 3, 2, 2, make_rng(0))
        x = make_rng(1).normal(size=4)
        e = p.experts[0]
        assert np.allclose(expert_forward(e, x), e.w0.T @ x, rtol=0, atol=1e-15)

    def test_lora_matches_dense_delta(self):
        p = random_layer(5, 4, 3, 2, 2)
        e, x = p.experts[1], make_rng(2).normal(size=4)
        dense = (e.w0 + e.adapter.delta_w()).T @ x
        assert np.allclose(expert_forward(e, x), dense, rtol=1e-12, atol=1e-12)

    def test_init_bounds(self):
        p = init_layer(9, 4, 3, 2, make_rng(0))
        for e in p.experts:
            assert np.all(e.adapter.b == 0)
            assert np.all(np.abs(e.adapter.a) <= 1 / 3)

    def test_input_length_checked(self):
        p = init_layer(4, 3, 2, 1, make_rng(0))
        with pytest.raises(ConfigError):
            expert_forward(p.experts[0], np.ones(5))


class TestRouting:
    def test_phi_can_swap_winner(self):
        # s = (2.0, 1.5, 0.1); candidates {0, 1}; phi lifts expert 1 above 0
        p = hand_layer(np.diag([2.0, 1.5, 0.1]), [-0.4, 0.4, 5.0], d=3)
        dec = route_dmr(p, np.ones(3), k_c=1, n_p=2)
        assert list(dec.candidate_set) == [0, 1]
        assert list(dec.activation_set) == [1]
        assert dec.gate_weights[1] == 1.0

    def test_hand_trace_negative_phi(self):
        # s = [2, 1, 0, -1], phi = [-5, 0, 5, 0], T = {0, 1} -> m = [-3, 1, 0, -1]
        p = hand_layer(np.diag([2.0, 1.0, 0.0, -1.0]), [-5.0, 0.0, 5.0, 0.0], d=4)
        dec = route_dmr(p, np.ones(4), k_c=1, n_p=2)
        assert np.array_equal(dec.modulated_scores, [-3.0, 1.0, 0.0, -1.0])
        assert list(dec.activation_set) == [1]
        # with two slots the best non-candidate expert outranks the demoted candidate
        assert sorted(route_dmr(p, np.ones(4), k_c=2, n_p=2).activation_set) == [1, 2]

    def test_dense_limit(self):
        p = random_layer(4, 3, 3, 5, 1)
        x = make_rng(0).normal(size=3)
        dec = route_dmr(p, x, 5, 5)
        assert np.allclose(dec.gate_weights, softmax(p.router_w @ x + p.phi), rtol=0, atol=1e-15)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 8), st.data())
    def test_modulation_only_on_candidates(self, seed, m, data):
        n_p = data.draw(st.integers(1, m))
        p = random_layer(seed, 4, 3, m, 1)
        p.phi[:] += 0.5  # keep phi away from zero
        dec = route_dmr(p, make_rng(seed, 3).normal(size=4), 1, n_p)
        changed = np.flatnonzero(dec.modulated_scores != dec.raw_scores)
        assert set(changed) == set(dec.candidate_set[p.phi[dec.candidate_set] != 0])

    def test_topk_on_logits_equals_topk_on_softmax(self):
        for seed in range(50):
            v = make_rng(seed).normal(size=7)
            assert set(topk_indices(v, 3)) == set(topk_indices(softmax(v), 3))

    def test_phi_outside_candidates_ignored(self):
        p = hand_layer(np.diag([2.0, 1.5, 0.1]), [0.0, 0.0, 100.0], d=3)
        dec = route_dmr(p, np.ones(3), k_c=1, n_p=2)
        assert list(dec.activation_set) == [0]
        assert dec.modulated_scores[2] == dec.raw_scores[2]

    def test_gates_use_modulated_logits(self):
        p = hand_layer(np.diag([1.0, 1.0]), [0.5, -0.5])
        dec = route_dmr(p, np.ones(2), k_c=2, n_p=2)
        expect = np.exp([0.5, -0.5]) / np.exp([0.5, -0.5]).sum()
        assert np.allclose(dec.gate_weights, expect, rtol=0, atol=1e-15)

    def test_ties_pick_lowest_index(self):
        p = hand_layer(np.zeros((4, 2)), np.zeros(4))
        dec = route_dmr(p, np.ones(2), k_c=2, n_p=3)
        assert sorted(dec.activation_set) == [0, 1]

    def test_forward_mixture(self):
        p = hand_layer(np.diag([1.0, 1.0]), [0.0, 0.0])
        y, dec = smoe_forward(p, np.array([1.0, 1.0]), 2, 2)
        # equal gates over experts 1*I and 2*I
        assert np.allclose(y, [1.5, 1.5], rtol=0, atol=1e-15)

    @pytest.mark.parametrize("k_c,n_p", [(0, 2), (3, 2), (1, 9)])
    def test_bad_sizes(self, k_c, n_p):
        p = init_layer(3, 3, 4, 1, make_rng(0))
        with pytest.raises(ConfigError):
            route_dmr(p, np.ones(3), k_c, n_p)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 8), st.data())
    def test_zero_phi_is_vanilla_topk(self, seed, m, data):
        n_p = data.draw(st.integers(1, m))
        k = data.draw(st.integers(1, n_p))
        p = init_layer(5, 3, m, 1, make_rng(seed))
        x = make_rng(seed, 1).normal(size=5)
        dec = route_dmr(p, x, k, n_p)
        act, g = vanilla_topk(p.router_w @ x, k)
        assert np.array_equal(dec.activation_set, act)
        assert np.array_equal(dec.gate_weights, g)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 8), st.data())
    def test_activation_size_and_normalized(self, seed, m, data):
        n_p = data.draw(st.integers(1, m))
        k = data.draw(st.integers(1, n_p))
        p = random_layer(seed, 4, 3, m, 1)
        dec = route_dmr(p, make_rng(seed, 2).normal(size=4), k, n_p)
        assert len(dec.activation_set) == k
        assert abs(dec.gate_weights.sum() - 1.0) <= 1e-12
        assert np.all(dec.gate_weights[np.setdiff1d(np.arange(m), dec.activation_set)] == 0)


class TestBackward:
    def test_random_layers_gradcheck(self):
        for p, x, up, k, n_p in random_suite(25, seed=11):
            err = check_layer(p, x, up, k, n_p)
            assert max(err.values()) < 1e-5, err

    def test_frozen_forward_matches_forward(self):
        p = random_layer(3, 5, 4, 5, 2)
        x = make_rng(4).normal(size=5)
        y, dec = smoe_forward(p, x, 2, 3)
        assert np.allclose(frozen_forward(p, x, dec), y, rtol=0, atol=1e-14)

    def test_single_expert_has_no_router_gradient(self):
        p = random_layer(8, 4, 4, 4, 2)
        x = make_rng(5).normal(size=4)
        _, dec = smoe_forward(p, x, 1, 2)
        g = smoe_backward(p, x, dec, np.ones(4))
        assert np.all(g.router == 0) and np.all(g.phi == 0)

    def test_inactive_experts_get_no_adapter_gradient(self):
        p = random_layer(9, 4, 4, 5, 2)
        x = make_rng(6).normal(size=4)
        _, dec = smoe_forward(p, x, 2, 3)
        g = smoe_backward(p, x, dec, np.ones(4))
        for i in set(range(5)) - set(dec.activation_set):
            assert np.all(g.b[i] == 0) and np.all(g.a[i] == 0)

    def test_accumulate_into_buffer(self):
        p = random_layer(2, 3, 3, 4, 1)
        xs = make_rng(7).normal(size=(3, 3))
        out = smoe_backward(p, xs[0], route_dmr(p, xs[0], 2, 3), np.ones(3))
        total = [smoe_backward(p, x, route_dmr(p, x, 2, 3), np.ones(3)) for x in xs]
        for x in xs[1:]:
            smoe_backward(p, x, route_dmr(p, x, 2, 3), np.ones(3), out=out)
        assert np.allclose(out.router, sum(g.router for g in total), rtol=0, atol=1e-13)
        assert np.allclose(out.b[0], sum(g.b[0] for g in total), rtol=0, atol=1e-13)


class TestPhiRegularization:
    def test_inside_range_is_free(self):
        loss, grad = phi_regularization_loss(np.array([-0.5, 0.9]), -1.0, 1.0, 0.3)
        assert loss == 0.0 and np.all(grad == 0)

    def test_hand_value(self):
        # violations 0.5 below and 1.0 above -> lam * (0.25 + 1)
        loss, grad = phi_regularization_loss(np.array([-1.5, 2.0]), -1.0, 1.0, 0.1)
        assert loss == pytest.approx(0.125, abs=1e-15)
        assert np.allclose(grad, [-0.1, 0.2], rtol=0, atol=1e-15)

    def test_gradient_finite_difference(self):
        phi = np.array([-1.7, 0.2, 1.3])
        _, grad = phi_regularization_loss(phi, -1.0, 1.0, 0.4)
        h = 1e-6
        fd = [
            (phi_regularization_loss(phi + h * e, -1, 1, 0.4)[0] - phi_regularization_loss(phi - h * e, -1, 1, 0.4)[0]) / (2 * h)
            for e in np.eye(3)
        ]
        assert np.allclose(grad, fd, rtol=1e-7, atol=1e-9)

    def test_bad_range(self):
        with pytest.raises(ConfigError):
            phi_regularization_loss(np.zeros(2), 1.0, 1.0, 0.1)
