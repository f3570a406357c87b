"""Ego-centric interaction graph: encode, score, pick the critical neighbors, refine queries.

All functions take a parameter mapping whose values are numpy arrays or
leaf tensors, so the same code serves plain evaluation and taped training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import wrap_angle
from .nn import mhca, mlp_apply
from .scenarios import HISTORY, AgentState, Scenario

# Fixed input normalisation applied before the encoder MLPs.
NODE_SCALE = np.array([0.1, 0.1, 0.2, 0.5, 1.0, 0.1, 0.1])
EDGE_SCALE = np.array([0.1, 0.1, 1.0, 0.1, 0.1])


@dataclass
class RefinementConfig:
    gamma: float = 0.5
    beta: float = 0.5
    k: int = 5

    def __post_init__(self):
        if self.gamma < 0 or self.beta < 0:
            raise ValueError("gamma and beta must be non-negative")
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass
class NeighborSelection:
    """Top-k agents in descending score order, with their softmax weights."""

    indices: list[int]
    scores: Tensor  # (k,) raw scores of the selected agents
    alpha: Tensor  # (k,)
    features: Tensor  # (k, d) enhanced features h^N

    def __len__(self):
        return len(self.indices)

    def as_records(self) -> list[dict]:
        return [{"agent_index": int(i), "score": float(s), "alpha": float(a)}
                for i, s, a in zip(self.indices, self.scores.data, self.alpha.data)]


def extract_status(scenario: Scenario, t: int = HISTORY - 1) -> tuple[AgentState, list[AgentState]]:
    """Ego and agent states at history index ``t``, taken straight from the scene."""
    if not 0 <= t < len(scenario.ego_history):
        raise IndexError(f"history index {t} out of range [0, {len(scenario.ego_history)})")
    return scenario.ego_history[t], [h[t] for h in scenario.agent_histories]


def node_inputs(states: list[AgentState]) -> np.ndarray:
    return np.array([s.as_vector() for s in states], dtype=np.float64).reshape(-1, 7)


def edge_inputs(ego: AgentState, agents: list[AgentState]) -> np.ndarray:
    """Raw relatives (dx, dy, dtheta, dvx, dvy), agent minus ego, heading wrapped."""
    rows = [[a.x - ego.x, a.y - ego.y, wrap_angle(a.heading - ego.heading),
             a.vx - ego.vx, a.vy - ego.vy] for a in agents]
    return np.array(rows, dtype=np.float64).reshape(-1, 5)


def encode_node(state, params) -> Tensor:
    """Node feature for one state (or a stacked (n, 7) raw array)."""
    raw = node_inputs([state])[0] if isinstance(state, AgentState) else np.asarray(state)
    return mlp_apply(params, raw * NODE_SCALE, "node_enc")


def encode_edge(ego: AgentState, agent: AgentState, params) -> Tensor:
    return mlp_apply(params, edge_inputs(ego, [agent])[0] * EDGE_SCALE, "edge_enc")


def encode_nodes(states: list[AgentState], params) -> Tensor:
    return mlp_apply(params, node_inputs(states) * NODE_SCALE, "node_enc")


def encode_edges(ego: AgentState, agents: list[AgentState], params) -> Tensor:
    return mlp_apply(params, edge_inputs(ego, agents) * EDGE_SCALE, "edge_enc")


def compute_context(h_ego, nodes, edges, params, heads: int) -> Tensor:
    """Ego query attends over the concatenated node/edge rows of all agents."""
    nodes = ad.as_tensor(nodes)
    if nodes.shape[0] == 0:
        return ad.Tensor(np.zeros(np.shape(params["mhca.o.bias"])))
    kv = ad.concat([nodes, edges], axis=-1)
    return mhca(h_ego, kv, kv, params, heads=heads, prefix="mhca")


def score_agents(nodes, edges, context, params) -> tuple[Tensor, Tensor]:
    """Per-agent enhanced features (N, d) and interaction scores (N,)."""
    nodes = ad.as_tensor(nodes)
    n = nodes.shape[0]
    ctx = ad.as_tensor(context)
    ctx_rows = ad.matmul(Tensor(np.ones((n, 1))), ad.reshape(ctx, (1, -1)))
    out = mlp_apply(params, ad.concat([nodes, edges, ctx_rows], axis=-1), "score_mlp")
    d = out.shape[-1] - 1
    return out[:, :d], out[:, d]


def topk_order(scores, k: int) -> list[int]:
    """Indices of the ``k`` highest scores; ties go to the lower index."""
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="stable")
    return [int(i) for i in order[:k]]


def select_topk(enhanced, scores, k: int) -> NeighborSelection:
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = ad.as_tensor(scores)
    enhanced = ad.as_tensor(enhanced)
    if scores.shape[0] == 0:
        d = enhanced.shape[-1] if enhanced.ndim == 2 else 0
        empty = Tensor(np.zeros(0))
        return NeighborSelection([], empty, empty, Tensor(np.zeros((0, d))))
    idx = topk_order(scores.data, k)
    picked = scores[np.array(idx)]
    return NeighborSelection(idx, picked, ad.softmax(picked), enhanced[np.array(idx)])


def refine_motion_queries(queries, sel: NeighborSelection, cfg: RefinementConfig) -> Tensor:
    """Add gamma * alpha_i * h_i^N to the selected agents' queries only."""
    queries = ad.as_tensor(queries)
    if not sel.indices:
        return queries
    n = queries.shape[0]
    bad = [i for i in sel.indices if not 0 <= i < n]
    if bad:
        raise IndexError(f"selected indices {bad} out of range for {n} queries")
    delta = ad.mul(ad.reshape(sel.alpha, (-1, 1)), sel.features) * cfg.gamma
    return _index_add(queries, np.array(sel.indices), delta)


def _index_add(base: Tensor, index: np.ndarray, rows: Tensor) -> Tensor:
    base, rows = ad.as_tensor(base), ad.as_tensor(rows)
    out = base.data.copy()
    out[index] = out[index] + rows.data
    return ad._make(out, (base, rows), lambda g: (g, g[index]))


def pool_neighbors(sel: NeighborSelection, dim: int) -> Tensor:
    """Alpha-weighted mean of the selected features; zeros when nothing is selected."""
    if not sel.indices:
        return Tensor(np.zeros(dim))
    return ad.matmul(sel.alpha, sel.features)


def fuse_ego(h_ego, sel: NeighborSelection, params) -> Tensor:
    h_ego = ad.as_tensor(h_ego)
    pooled = pool_neighbors(sel, h_ego.shape[-1])
    return mlp_apply(params, ad.concat([h_ego, pooled]), "fuse_mlp")


def refine_plan_query(plan_query, fused, cfg: RefinementConfig) -> Tensor:
    return ad.as_tensor(plan_query) + ad.mul(fused, cfg.beta)


@dataclass
class InteractionBundle:
    h_ego: Tensor
    nodes: Tensor
    edges: Tensor
    context: Tensor
    enhanced: Tensor
    scores: Tensor
    selection: NeighborSelection


def interact(ego: AgentState, agents: list[AgentState], params, k: int, heads: int,
             h_ego=None, nodes=None) -> InteractionBundle:
    """Graph embedding, context, scoring and Top-k selection in one pass."""
    if h_ego is None:
        h_ego = encode_node(ego, params)
    if nodes is None:
        nodes = encode_nodes(agents, params)
    edges = encode_edges(ego, agents, params)
    context = compute_context(h_ego, nodes, edges, params, heads)
    if len(agents) == 0:
        d = ad.as_tensor(h_ego).shape[-1]
        empty = Tensor(np.zeros((0, d)))
        sel = select_topk(empty, Tensor(np.zeros(0)), k)
        return InteractionBundle(h_ego, nodes, edges, context, empty, Tensor(np.zeros(0)), sel)
    enhanced, scores = score_agents(nodes, edges, context, params)
    sel = select_topk(enhanced, scores, k)
    return InteractionBundle(h_ego, nodes, edges, context, enhanced, scores, sel)
