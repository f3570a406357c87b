"""Motion and planning metrics.

Motion: minADE, minFDE, miss rate and EPA. With oracle perception there are
no false or missed detections, so EPA reduces to the hit rate
``1 - miss_rate``.

Planning: L2 error at 1/2/3 s and collision rate, where a plan collides at
a step if its oriented ego box overlaps any agent's ground-truth box.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .scenarios import DT, AgentState, collision_steps

MISS_THRESHOLD = 2.0
HORIZON_SECONDS = (1.0, 2.0, 3.0)
CSV_COLUMNS = ("minade", "minfde", "mr", "epa", "l2_1s", "l2_2s", "l2_3s", "l2_avg",
               "col_1s", "col_2s", "col_3s", "col_avg")


def _check(modes, gt):
    modes = np.asarray(modes, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if modes.ndim == 2:
        modes = modes[None]
    if modes.shape[1:] != gt.shape:
        raise ValueError(f"horizon mismatch: modes {modes.shape} vs gt {gt.shape}")
    return modes, gt


def min_ade(modes, gt) -> float:
    modes, gt = _check(modes, gt)
    return float(np.min(np.linalg.norm(modes - gt, axis=-1).mean(axis=-1)))


def min_fde(modes, gt) -> float:
    modes, gt = _check(modes, gt)
    return float(np.min(np.linalg.norm(modes[:, -1] - gt[-1], axis=-1)))


def miss_rate(fde_values, threshold: float = MISS_THRESHOLD) -> float:
    v = np.asarray(fde_values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no agents to score")
    return float(np.mean(v > threshold))


def epa(fde_values, threshold: float = MISS_THRESHOLD) -> float:
    v = np.asarray(fde_values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no agents to score")
    return float(np.mean(v <= threshold))


def horizon_steps(dt: float = DT) -> list[int]:
    return [int(round(s / dt)) for s in HORIZON_SECONDS]


def l2_at_horizons(plan, gt, dt: float = DT) -> tuple[float, float, float, float]:
    """Euclidean plan error at 1, 2 and 3 s, plus their mean."""
    plan = np.asarray(plan, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    steps = horizon_steps(dt)
    if len(plan) < steps[-1] or len(gt) < steps[-1]:
        raise ValueError(f"trajectory shorter than {HORIZON_SECONDS[-1]} s")
    vals = [float(np.linalg.norm(plan[s - 1] - gt[s - 1])) for s in steps]
    return vals[0], vals[1], vals[2], float(np.mean(vals))


def first_collision(plan, ego: AgentState, futures, sizes, headings) -> int | None:
    """Index of the first colliding step, or None."""
    hits = collision_steps(np.asarray(plan, dtype=np.float64), ego,
                           np.asarray(futures, dtype=np.float64), sizes, np.asarray(headings))
    return hits[0] if hits else None


def collision_flags(first_hit: int | None, dt: float = DT) -> tuple[float, float, float]:
    """Per-horizon 0/1 flags: did a collision happen at or before each horizon."""
    if first_hit is None:
        return 0.0, 0.0, 0.0
    return tuple(float(first_hit < s) for s in horizon_steps(dt))


def collision_rate(first_hits: Sequence[int | None], dt: float = DT) -> tuple[float, float, float, float]:
    """Fraction of scenarios with a collision up to 1/2/3 s, and their mean."""
    if len(first_hits) == 0:
        return 0.0, 0.0, 0.0, 0.0
    flags = np.array([collision_flags(h, dt) for h in first_hits])
    rates = flags.mean(axis=0)
    return float(rates[0]), float(rates[1]), float(rates[2]), float(rates.mean())


@dataclass
class MetricReport:
    minade: float
    minfde: float
    mr: float
    epa: float
    l2_1s: float
    l2_2s: float
    l2_3s: float
    l2_avg: float
    col_1s: float
    col_2s: float
    col_3s: float
    col_avg: float

    def as_row(self) -> dict:
        return asdict(self)


@dataclass
class ScenarioMetrics:
    """Per-scene raw values that aggregate into a :class:`MetricReport`."""

    ade: list[float]
    fde: list[float]
    l2: tuple[float, float, float, float]
    first_hit: int | None


def scenario_metrics(modes, agent_futures, plan, ego_plan, ego: AgentState,
                     sizes, headings) -> ScenarioMetrics:
    modes = np.asarray(modes)
    ade = [min_ade(modes[i], agent_futures[i]) for i in range(len(agent_futures))]
    fde = [min_fde(modes[i], agent_futures[i]) for i in range(len(agent_futures))]
    return ScenarioMetrics(ade, fde, l2_at_horizons(plan, ego_plan),
                           first_collision(plan, ego, agent_futures, sizes, headings))


def aggregate(items: Iterable[ScenarioMetrics]) -> MetricReport:
    """Combine per-scene metrics; agent-level means for motion, scene-level for planning."""
    items = list(items)
    ade = [a for m in items for a in m.ade]
    fde = [f for m in items for f in m.fde]
    l2 = np.array([m.l2 for m in items]).reshape(-1, 4)
    col = collision_rate([m.first_hit for m in items])
    motion = (float(np.mean(ade)), float(np.mean(fde)), miss_rate(fde), epa(fde)) if fde else (
        0.0, 0.0, 0.0, 0.0)
    l2m = l2.mean(axis=0) if len(l2) else np.zeros(4)
    return MetricReport(*motion, *(float(x) for x in l2m[:3]), float(np.mean(l2m[:3])), *col)


def write_report_csv(path, report: MetricReport, header_note: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        for line in (header_note or "").splitlines():
            fh.write(line if line.startswith("#") else f"# {line}")
            fh.write("\n")
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        w.writerow({k: repr(float(v)) for k, v in report.as_row().items()})
