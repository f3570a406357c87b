"""Query initialisation, residual trajectory decoders, and the training step."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape, Tensor
from .interactor import (InteractionBundle, RefinementConfig, encode_node, encode_nodes,
                         extract_status, fuse_ego, interact, refine_motion_queries,
                         refine_plan_query)
from .losses import (LossReport, combined_motion_loss, fla_loss, focal_weights, motion_losses,
                     plan_loss)
from .nn import OptimState, ParamBuilder, ParamSet, adam_step, mlp_apply
from .scenarios import DT, HORIZON, AgentState, Scenario

# Decoder outputs are offsets in units of this many metres.
OFFSET_SCALE = 5.0
DECODER_INIT_SCALE = 0.1


@dataclass
class ModelConfig:
    dim: int = 32
    hidden: int = 32
    heads: int = 4
    modes: int = 3
    k: int = 5
    gamma: float = 0.5
    beta: float = 0.5
    use_elai: bool = True
    use_fla: bool = True
    fla_weight: float = 1.0
    detach_focal: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.modes < 1:
            raise ValueError("modes must be >= 1")
        if self.gamma < 0 or self.beta < 0:
            raise ValueError("gamma and beta must be non-negative")

    @property
    def refinement(self) -> RefinementConfig:
        return RefinementConfig(gamma=self.gamma, beta=self.beta, k=self.k)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def init_params(cfg: ModelConfig) -> ParamSet:
    d, h = cfg.dim, cfg.hidden
    b = ParamBuilder(cfg.seed)
    b.mlp("node_enc", [7, h, d])
    b.mlp("edge_enc", [5, h, d])
    b.linear("mhca.q", d, d)
    b.linear("mhca.k", 2 * d, d)
    b.linear("mhca.v", 2 * d, d)
    b.linear("mhca.o", d, d)
    b.mlp("score_mlp", [3 * d, h, d + 1])
    b.mlp("fuse_mlp", [2 * d, h, d])
    b.mlp("motion_query", [d, h, d])
    b.mlp("plan_query", [d, h, d])
    b.mlp("motion_dec", [d, h, HORIZON * 2])
    b.mlp("plan_dec", [d, h, HORIZON * 2])
    for m in range(cfg.modes):
        b.vector(f"mode_bias.{m}", d, 1.0)
    # Shrunk output layers keep untrained predictions near constant velocity
    # while still passing gradient to everything upstream.
    for name in ("motion_dec.1.weight", "motion_dec.1.bias", "plan_dec.1.weight", "plan_dec.1.bias"):
        b.params[name] = b.params[name] * DECODER_INIT_SCALE
    return b.params


@dataclass
class QuerySet:
    motion: Tensor  # (N, d)
    plan: Tensor  # (d,)
    motion_ref: Tensor | None = None
    plan_ref: Tensor | None = None


def init_queries(ego: AgentState, agents: list[AgentState], params,
                 h_ego=None, nodes=None) -> QuerySet:
    """Motion queries from each agent's node feature, plan query from the ego's."""
    if h_ego is None:
        h_ego = encode_node(ego, params)
    if nodes is None:
        nodes = encode_nodes(agents, params)
    return QuerySet(motion=mlp_apply(params, nodes, "motion_query"),
                    plan=mlp_apply(params, h_ego, "plan_query"))


def cv_rollout(states: Sequence[AgentState]) -> np.ndarray:
    """Constant-velocity futures for several agents, (N, T, 2)."""
    k = np.arange(1, HORIZON + 1, dtype=np.float64)[None, :, None] * DT
    if len(states) == 0:
        return np.zeros((0, HORIZON, 2))
    p = np.array([s.position for s in states])[:, None, :]
    v = np.array([s.velocity for s in states])[:, None, :]
    return p + v * k


def decode_motion(queries, agents: Sequence[AgentState], params, modes: int) -> Tensor:
    """K trajectories per agent as offsets on a constant-velocity rollout, (N, K, T, 2)."""
    queries = ad.as_tensor(queries)
    n = queries.shape[0]
    base = cv_rollout(agents)
    if n == 0:
        return Tensor(np.zeros((0, modes, HORIZON, 2)))
    per_mode = [queries + params[f"mode_bias.{m}"] for m in range(modes)]
    stacked = ad.reshape(ad.stack(per_mode, axis=1), (n * modes, -1))
    offsets = mlp_apply(params, stacked, "motion_dec") * OFFSET_SCALE
    return ad.reshape(offsets, (n, modes, HORIZON, 2)) + base[:, None]


def decode_plan(plan_query, ego: AgentState, params) -> Tensor:
    offsets = mlp_apply(params, plan_query, "plan_dec") * OFFSET_SCALE
    return ad.reshape(offsets, (HORIZON, 2)) + cv_rollout([ego])[0]


@dataclass
class ForwardResult:
    queries: QuerySet
    bundle: InteractionBundle | None
    motion: Tensor  # (N, K, T, 2)
    plan: Tensor  # (T, 2)


def forward(params, scenario: Scenario, cfg: ModelConfig) -> ForwardResult:
    ego, agents = extract_status(scenario)
    h_ego = encode_node(ego, params)
    nodes = encode_nodes(agents, params)
    queries = init_queries(ego, agents, params, h_ego=h_ego, nodes=nodes)
    bundle = None
    if cfg.use_elai or cfg.use_fla:
        bundle = interact(ego, agents, params, cfg.k, cfg.heads, h_ego=h_ego, nodes=nodes)
    if cfg.use_elai:
        queries.motion_ref = refine_motion_queries(queries.motion, bundle.selection, cfg.refinement)
        fused = fuse_ego(h_ego, bundle.selection, params)
        queries.plan_ref = refine_plan_query(queries.plan, fused, cfg.refinement)
    else:
        queries.motion_ref = queries.motion
        queries.plan_ref = queries.plan
    motion = decode_motion(queries.motion_ref, agents, params, cfg.modes)
    plan = decode_plan(queries.plan_ref, ego, params)
    return ForwardResult(queries, bundle, motion, plan)


def scenario_loss(params, scenario: Scenario, cfg: ModelConfig) -> tuple[Tensor, dict]:
    """Total loss for one scene plus its detached components."""
    out = forward(params, scenario, cfg)
    n = scenario.num_agents
    if n:
        per_agent = motion_losses(out.motion, scenario.agent_futures)
        global_motion = ad.tmean(per_agent)
    else:
        per_agent = Tensor(np.zeros(0))
        global_motion = Tensor(0.0)
    if cfg.use_fla and n:
        w = focal_weights(out.bundle.selection, detach=cfg.detach_focal)
        fla = fla_loss(w, per_agent)
        motion_total = combined_motion_loss(global_motion, fla, cfg.fla_weight)
    else:
        fla = Tensor(0.0)
        motion_total = global_motion
    p_loss = plan_loss(out.plan, scenario.ego_plan)
    total = motion_total + p_loss
    parts = {
        "per_agent": per_agent.data.copy(),
        "motion": float(global_motion.data),
        "fla": float(fla.data),
        "motion_focal": float(motion_total.data),
        "plan": float(p_loss.data),
        "total": float(total.data),
    }
    return total, parts


def batch_loss(params, batch: Sequence[Scenario], cfg: ModelConfig) -> tuple[Tensor, list[dict]]:
    totals, parts = [], []
    for s in batch:
        t, p = scenario_loss(params, s, cfg)
        if not math.isfinite(p["total"]):
            raise FloatingPointError(f"non-finite loss in scenario {s.id}: {p}")
        totals.append(t)
        parts.append(p)
    return ad.tmean(ad.stack(totals)), parts


@dataclass
class TrainState:
    params: ParamSet
    optim: OptimState = field(default_factory=OptimState)


def training_step(batch: Sequence[Scenario], params: ParamSet, optim: OptimState,
                  cfg: ModelConfig) -> tuple[ParamSet, LossReport]:
    """One Adam step on the batch-mean loss; returns new params and the batch report."""
    if not batch:
        raise ValueError("empty batch")
    with GradTape() as tape:
        leaves = tape.watch(params)
        loss, parts = batch_loss(leaves, batch, cfg)
    grads = tape.gradient(loss)
    new_params = adam_step(params, grads, optim)
    report = LossReport(
        per_agent=np.concatenate([p["per_agent"] for p in parts]),
        motion=float(np.mean([p["motion"] for p in parts])),
        fla=float(np.mean([p["fla"] for p in parts])),
        motion_focal=float(np.mean([p["motion_focal"] for p in parts])),
        plan=float(np.mean([p["plan"] for p in parts])),
        total=float(loss.data),
    )
    return new_params, report


def predict(params, scenario: Scenario, cfg: ModelConfig) -> ForwardResult:
    """Untaped forward pass for evaluation."""
    return forward(params, scenario, cfg)
