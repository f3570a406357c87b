"""Motion, focal-neighbor and plan losses."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .interactor import NeighborSelection


@dataclass
class FocalWeights:
    indices: list[int]
    weights: Tensor

    def as_dict(self) -> dict[int, float]:
        return {i: float(w) for i, w in zip(self.indices, self.weights.data)}


@dataclass
class LossReport:
    per_agent: np.ndarray
    motion: float
    fla: float
    motion_focal: float
    plan: float
    total: float

    def row(self) -> dict:
        d = asdict(self)
        d.pop("per_agent")
        return d


def focal_weights(sel: NeighborSelection, detach: bool = False) -> FocalWeights:
    """Softmax of the selected agents' raw interaction scores.

    With ``detach`` the weights act as constants, so no gradient reaches the
    scorer through them.
    """
    if not sel.indices:
        return FocalWeights([], Tensor(np.zeros(0)))
    scores = ad.stop_gradient(sel.scores) if detach else sel.scores
    return FocalWeights(list(sel.indices), ad.softmax(scores))


def per_agent_motion_loss(pred_modes, gt) -> Tensor:
    """Winner-takes-all mean absolute error over K modes; pred (K, T, 2), gt (T, 2)."""
    pred_modes = ad.as_tensor(pred_modes)
    gt = np.asarray(gt, dtype=np.float64)
    if pred_modes.shape[-2:] != gt.shape:
        raise ValueError(f"horizon mismatch: prediction {pred_modes.shape[-2:]} vs gt {gt.shape}")
    err = ad.tabs(pred_modes - gt)
    per_mode = ad.tmean(ad.reshape(err, (pred_modes.shape[0], -1)), axis=1)
    return ad.min_over(per_mode, axis=0)


def motion_losses(pred, gt) -> Tensor:
    """Vectorised per-agent WTA losses; pred (N, K, T, 2), gt (N, T, 2) -> (N,)."""
    pred = ad.as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    n, k = pred.shape[:2]
    if pred.shape[2:] != gt.shape[1:] or gt.shape[0] != n:
        raise ValueError(f"horizon mismatch: prediction {pred.shape} vs gt {gt.shape}")
    err = ad.tabs(pred - gt[:, None])
    per_mode = ad.tmean(ad.reshape(err, (n, k, -1)), axis=2)
    return ad.min_over(per_mode, axis=1)


def fla_loss(weights: FocalWeights, losses) -> Tensor:
    """Focal-weighted sum of the selected agents' motion losses.

    ``losses`` is indexable by original agent index (a tensor, array or
    mapping).
    """
    if not weights.indices:
        return Tensor(0.0)
    if isinstance(losses, Mapping):
        missing = [i for i in weights.indices if i not in losses]
        if missing:
            raise KeyError(f"no motion loss for weighted agents {missing}")
        picked = ad.stack([ad.as_tensor(losses[i]) for i in weights.indices])
    else:
        losses = ad.as_tensor(losses)
        n = losses.shape[0]
        missing = [i for i in weights.indices if not 0 <= i < n]
        if missing:
            raise KeyError(f"no motion loss for weighted agents {missing}")
        picked = losses[np.array(weights.indices)]
    return ad.tsum(ad.mul(weights.weights, picked))


def combined_motion_loss(global_loss, fla, weight: float = 1.0) -> Tensor:
    return ad.as_tensor(global_loss) + ad.mul(fla, weight)


def plan_loss(pred, gt) -> Tensor:
    pred = ad.as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"horizon mismatch: plan {pred.shape} vs gt {gt.shape}")
    return ad.tmean(ad.tabs(pred - gt))
