import math

import numpy as np
import pytest

from egofocus import autodiff as ad
from egofocus.autodiff import Tensor
from egofocus.interactor import (NeighborSelection, RefinementConfig, compute_context,
                                 edge_inputs, encode_edge, encode_edges, encode_node, encode_nodes,
                                 extract_status, fuse_ego, interact, pool_neighbors,
                                 refine_motion_queries, refine_plan_query, score_agents,
                                 select_topk)
from egofocus.model import ModelConfig, init_params
from egofocus.nn import ParamBuilder
from egofocus.scenarios import HISTORY, AgentState, generate_scenario

from conftest import make_scenario, random_agents

# Frozen from an independent forward pass over raw PCG64(42) draws for a
# [7, 8, 4] node encoder on the state below.
NODE_STATE = AgentState(3.0, -1.5, 4.5, 1.9, 0.2, 8.0, 1.0)
NODE_SEED42 = [0.050535571093281106, -0.8652349724706154, -0.6545344366507049, 0.14669679903816235]


def small_params(seed=0, dim=8):
    return init_params(ModelConfig(dim=dim, hidden=8, heads=2, seed=seed))


def selection(scores, features):
    scores = Tensor(np.asarray(scores, dtype=float))
    return NeighborSelection(list(range(len(scores.data))), scores, ad.softmax(scores),
                             Tensor(np.asarray(features, dtype=float)))


class TestExtractStatus:
    def test_three_agents(self, ego):
        s = make_scenario(ego, random_agents(np.random.default_rng(0), 3))
        e, agents = extract_status(s, HISTORY - 1)
        assert len(agents) == 3 and e == s.ego

    def test_no_agents(self, ego):
        e, agents = extract_status(make_scenario(ego, []))
        assert agents == []

    def test_bit_exact(self):
        s = generate_scenario("merge", 2)
        e, agents = extract_status(s)
        assert e is s.ego_history[-1]
        for a, h in zip(agents, s.agent_histories):
            assert a.as_vector() == h[-1].as_vector()

    def test_out_of_range(self, ego):
        with pytest.raises(IndexError):
            extract_status(make_scenario(ego, []), HISTORY)


class TestEncodeNode:
    def test_zero_weights(self, ego):
        p = small_params().zeros_like()
        p["node_enc.1.bias"] = np.arange(8.0)
        for state in [ego] + random_agents(np.random.default_rng(1), 4):
            np.testing.assert_array_equal(encode_node(state, p).data, np.arange(8.0))

    def test_identical_states(self):
        p = small_params()
        a, b = random_agents(np.random.default_rng(2), 1) * 2
        np.testing.assert_array_equal(encode_node(a, p).data, encode_node(b, p).data)

    def test_seed42_regression(self):
        b = ParamBuilder(42)
        b.mlp("node_enc", [7, 8, 4])
        np.testing.assert_allclose(encode_node(NODE_STATE, b.params).data, NODE_SEED42,
                                   rtol=0, atol=1e-14)

    def test_batched_matches_single(self):
        p = small_params()
        agents = random_agents(np.random.default_rng(3), 5)
        rows = encode_nodes(agents, p).data
        for a, r in zip(agents, rows):
            np.testing.assert_allclose(r, encode_node(a, p).data, atol=1e-15)


class TestEncodeEdge:
    def test_raw_relative(self):
        ego = AgentState(0, 0, 4, 2, 0, 5, 0)
        agent = AgentState(10, 0, 4, 2, 0, 5, 0)
        np.testing.assert_array_equal(edge_inputs(ego, [agent])[0], [10, 0, 0, 0, 0])

    def test_self_edge_zero(self, ego):
        np.testing.assert_array_equal(edge_inputs(ego, [ego])[0], np.zeros(5))

    def test_wrapped_heading(self):
        ego = AgentState(0, 0, 4, 2, 3.0, 0, 0)
        agent = AgentState(0, 0, 4, 2, -3.0, 0, 0)
        d = edge_inputs(ego, [agent])[0, 2]
        np.testing.assert_allclose(d, 0.28319, atol=1e-5)
        np.testing.assert_allclose(d, 2 * math.pi - 6.0, atol=1e-12)

    def test_batched_matches_single(self, ego):
        p = small_params()
        agents = random_agents(np.random.default_rng(4), 4)
        rows = encode_edges(ego, agents, p).data
        for a, r in zip(agents, rows):
            np.testing.assert_allclose(r, encode_edge(ego, a, p).data, atol=1e-15)


def identity_context_params(d):
    p = {}
    p["mhca.q.weight"], p["mhca.q.bias"] = np.eye(d), np.zeros(d)
    for name in "kv":
        p[f"mhca.{name}.weight"] = np.vstack([np.eye(d), np.eye(d)])  # [h || e] -> h + e
        p[f"mhca.{name}.bias"] = np.zeros(d)
    p["mhca.o.weight"], p["mhca.o.bias"] = np.eye(d), np.zeros(d)
    return p


class TestComputeContext:
    def test_single_agent_is_projected_value(self):
        rng = np.random.default_rng(5)
        h_ego, h1, e1 = rng.normal(size=(3, 4))
        p = identity_context_params(4)
        c = compute_context(h_ego, h1[None], e1[None], p, heads=2).data
        np.testing.assert_allclose(c, np.concatenate([h1, e1]) @ p["mhca.v.weight"], atol=1e-15)

    def test_duplicated_rows(self):
        rng = np.random.default_rng(6)
        p = small_params()
        h_ego, h, e = rng.normal(size=8), rng.normal(size=(1, 8)), rng.normal(size=(1, 8))
        one = compute_context(h_ego, h, e, p, heads=2).data
        two = compute_context(h_ego, np.vstack([h, h]), np.vstack([e, e]), p, heads=2).data
        np.testing.assert_allclose(two, one, atol=1e-14)

    def test_permuted_agents(self):
        rng = np.random.default_rng(7)
        p = small_params()
        h_ego, h, e = rng.normal(size=8), rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
        perm = rng.permutation(5)
        np.testing.assert_allclose(compute_context(h_ego, h[perm], e[perm], p, 2).data,
                                   compute_context(h_ego, h, e, p, 2).data, atol=1e-12)

    def test_no_agents_zero(self):
        p = small_params()
        c = compute_context(np.ones(8), np.zeros((0, 8)), np.zeros((0, 8)), p, heads=2)
        np.testing.assert_array_equal(c.data, np.zeros(8))


class TestScoreAgents:
    def test_identical_agents(self):
        p = small_params()
        h = np.tile(np.random.default_rng(8).normal(size=8), (3, 1))
        e = np.tile(np.random.default_rng(9).normal(size=8), (3, 1))
        feat, s = score_agents(h, e, np.ones(8), p)
        assert np.all(feat.data == feat.data[0]) and np.all(s.data == s.data[0])

    def test_zero_weight_mlp(self):
        p = small_params().zeros_like()
        p["score_mlp.1.bias"] = np.arange(9.0)
        rng = np.random.default_rng(10)
        feat, s = score_agents(rng.normal(size=(4, 8)), rng.normal(size=(4, 8)), np.ones(8), p)
        np.testing.assert_array_equal(feat.data, np.tile(np.arange(8.0), (4, 1)))
        np.testing.assert_array_equal(s.data, np.full(4, 8.0))

    def test_permutation(self):
        p = small_params()
        rng = np.random.default_rng(11)
        h, e, c = rng.normal(size=(6, 8)), rng.normal(size=(6, 8)), rng.normal(size=8)
        perm = rng.permutation(6)
        f0, s0 = score_agents(h, e, c, p)
        f1, s1 = score_agents(h[perm], e[perm], c, p)
        np.testing.assert_allclose(f1.data, f0.data[perm], atol=1e-14)
        np.testing.assert_allclose(s1.data, s0.data[perm], atol=1e-14)


class TestSelectTopk:
    feats = np.arange(9.0).reshape(3, 3)

    def test_two_of_three(self):
        assert select_topk(self.feats, [0.9, 0.1, 0.5], 2).indices == [0, 2]

    @pytest.mark.parametrize("k", [3, 4, 10])
    def test_k_at_least_n(self, k):
        assert sorted(select_topk(self.feats, [0.9, 0.1, 0.5], k).indices) == [0, 1, 2]

    def test_tie_goes_to_lower_index(self):
        sel = select_topk(self.feats, [0.5, 0.5, 0.1], 1)
        assert sel.indices == [0]
        np.testing.assert_array_equal(sel.alpha.data, [1.0])

    def test_alpha_over_selected(self):
        sel = select_topk(self.feats, [1.0, -5.0, 0.0], 2)
        np.testing.assert_allclose(sel.alpha.data, [0.73106, 0.26894], atol=1e-5)
        np.testing.assert_array_equal(sel.features.data, self.feats[[0, 2]])

    def test_empty(self):
        sel = select_topk(np.zeros((0, 4)), np.zeros(0), 5)
        assert sel.indices == [] and sel.features.shape == (0, 4)

    def test_bad_k(self):
        with pytest.raises(ValueError):
            select_topk(self.feats, [1.0, 2.0, 3.0], 0)


class TestRefineMotion:
    def test_gamma_zero(self):
        q = np.random.default_rng(12).normal(size=(4, 2))
        sel = selection([0.3, 0.1], [[1.0, 2.0], [3.0, 4.0]])
        out = refine_motion_queries(q, sel, RefinementConfig(gamma=0.0))
        np.testing.assert_array_equal(out.data, q)

    def test_single_selected(self):
        sel = NeighborSelection([0], Tensor(np.array([2.0])), Tensor(np.array([1.0])),
                                Tensor(np.array([[0.5, -0.5]])))
        out = refine_motion_queries(np.array([[1.0, 1.0]]), sel, RefinementConfig(gamma=1.0))
        np.testing.assert_array_equal(out.data, [[1.5, 0.5]])

    def test_equal_scores_half_weights(self):
        sel = selection([0.7, 0.7], [[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_array_equal(sel.alpha.data, [0.5, 0.5])
        out = refine_motion_queries(np.zeros((2, 2)), sel, RefinementConfig(gamma=1.0))
        np.testing.assert_array_equal(out.data, [[0.5, 0.0], [0.0, 0.5]])

    def test_non_selected_untouched(self):
        q = np.random.default_rng(13).normal(size=(5, 3))
        sel = NeighborSelection([3, 1], Tensor(np.array([1.0, 0.0])),
                                ad.softmax(Tensor(np.array([1.0, 0.0]))), Tensor(np.ones((2, 3))))
        out = refine_motion_queries(q, sel, RefinementConfig(gamma=0.5)).data
        for i in (0, 2, 4):
            assert out[i].tobytes() == q[i].tobytes()

    def test_bad_index(self):
        sel = NeighborSelection([7], Tensor(np.ones(1)), Tensor(np.ones(1)), Tensor(np.ones((1, 2))))
        with pytest.raises(IndexError):
            refine_motion_queries(np.zeros((2, 2)), sel, RefinementConfig())


class TestFuseEgo:
    def test_k1_pool_is_feature(self):
        sel = selection([0.4], [[0.3, -0.2, 0.9]])
        np.testing.assert_array_equal(pool_neighbors(sel, 3).data, [0.3, -0.2, 0.9])

    def test_identical_features(self):
        f = [0.3, -0.2, 0.9]
        sel = selection([3.0, -1.0, 0.2], [f, f, f])
        np.testing.assert_allclose(pool_neighbors(sel, 3).data, f, atol=1e-15)

    def test_zero_weight_fusion(self):
        p = small_params().zeros_like()
        p["fuse_mlp.1.bias"] = np.linspace(-1, 1, 8)
        sel = selection([0.1, 0.2], np.ones((2, 8)))
        np.testing.assert_array_equal(fuse_ego(np.ones(8), sel, p).data, np.linspace(-1, 1, 8))

    def test_empty_selection_pools_zero(self):
        sel = select_topk(np.zeros((0, 4)), np.zeros(0), 5)
        np.testing.assert_array_equal(pool_neighbors(sel, 4).data, np.zeros(4))


class TestRefinePlan:
    def test_beta_zero(self):
        q = np.array([0.2, -0.7])
        np.testing.assert_array_equal(
            refine_plan_query(q, np.array([5.0, 5.0]), RefinementConfig(beta=0.0)).data, q)

    def test_beta_one(self):
        out = refine_plan_query(np.zeros(2), np.array([1.0, -1.0]), RefinementConfig(beta=1.0))
        np.testing.assert_array_equal(out.data, [1.0, -1.0])

    def test_beta_two(self):
        out = refine_plan_query(np.ones(2), np.array([0.5, 0.5]), RefinementConfig(beta=2.0))
        np.testing.assert_array_equal(out.data, [2.0, 2.0])

    def test_negative_config(self):
        with pytest.raises(ValueError):
            RefinementConfig(beta=-1.0)


class TestInteract:
    def test_selects_min_k_n(self, ego):
        p = small_params()
        for n in (0, 1, 3, 7):
            agents = random_agents(np.random.default_rng(n), n)
            b = interact(ego, agents, p, k=5, heads=2)
            assert len(b.selection) == min(5, n)
            np.testing.assert_allclose(b.selection.alpha.data.sum() if n else 1.0, 1.0, atol=1e-12)
