"""Synthetic traffic scenes with one scripted interacting agent.

The world is a flat plane with straight lanes along +x, lane width 3.5 m,
ego lane centred on y = 0. Histories hold ``H`` states ending at the current
time; futures hold ``T`` positions at ``dt`` spacing after it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .geometry import boxes_overlap, wrap_angle

DT = 0.5
HISTORY = 4
HORIZON = 6
LANE_WIDTH = 3.5
V_MAX = 20.0
MAX_AGENTS = 12
SCHEMA = "scenario_v1"
KINDS = ("cut_in", "merge", "yield", "cross", "tailgate", "free_flow")
INTERACTIVE_KINDS = KINDS[:-1]

# Extra clearance the scripted ego response keeps around every agent.
RESPONSE_MARGIN = 1.0
_BRAKE_LEVELS = np.arange(0.0, 9.01, 0.25)


class ScenarioError(RuntimeError):
    pass


@dataclass
class AgentState:
    """Kinematic snapshot of one agent: position, size, heading, velocity."""

    x: float
    y: float
    length: float
    width: float
    heading: float
    vx: float
    vy: float

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ValueError(f"agent size must be positive, got {self.length}x{self.width}")
        self.heading = wrap_angle(self.heading)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def velocity(self) -> np.ndarray:
        return np.array([self.vx, self.vy])

    def as_vector(self) -> list[float]:
        """Feature layout (x, y, length, width, heading, vx, vy)."""
        return [self.x, self.y, self.length, self.width, self.heading, self.vx, self.vy]


@dataclass
class Scenario:
    kind: str
    seed: int
    ego_history: list[AgentState]
    agent_histories: list[list[AgentState]]
    agent_futures: np.ndarray  # (N, T, 2)
    ego_plan: np.ndarray  # (T, 2)
    interacting: int | None = None
    agent_future_headings: np.ndarray = field(default=None)  # (N, T)

    def __post_init__(self):
        self.agent_futures = np.asarray(self.agent_futures, dtype=np.float64).reshape(-1, HORIZON, 2)
        self.ego_plan = np.asarray(self.ego_plan, dtype=np.float64)
        if self.agent_future_headings is None:
            self.agent_future_headings = np.array(
                [[h[-1].heading] * HORIZON for h in self.agent_histories],
                dtype=np.float64).reshape(-1, HORIZON)
        else:
            self.agent_future_headings = np.asarray(
                self.agent_future_headings, dtype=np.float64).reshape(-1, HORIZON)

    @property
    def id(self) -> str:
        return f"{self.kind}-{self.seed}"

    @property
    def num_agents(self) -> int:
        return len(self.agent_histories)

    @property
    def ego(self) -> AgentState:
        return self.ego_history[-1]

    def agents_now(self) -> list[AgentState]:
        return [h[-1] for h in self.agent_histories]

    def without_agent(self, index: int) -> "Scenario":
        keep = [i for i in range(self.num_agents) if i != index]
        return Scenario(
            kind=self.kind, seed=self.seed, ego_history=self.ego_history,
            agent_histories=[self.agent_histories[i] for i in keep],
            agent_futures=self.agent_futures[keep], ego_plan=self.ego_plan,
            interacting=None, agent_future_headings=self.agent_future_headings[keep])

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return (self.kind == other.kind and self.seed == other.seed
                and self.interacting == other.interacting
                and self.ego_history == other.ego_history
                and self.agent_histories == other.agent_histories
                and np.array_equal(self.agent_futures, other.agent_futures)
                and np.array_equal(self.agent_future_headings, other.agent_future_headings)
                and np.array_equal(self.ego_plan, other.ego_plan))


def roll_constant_velocity(state: AgentState, dt: float, n: int) -> np.ndarray:
    """Positions after 1..n steps of constant velocity, shape (n, 2)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    k = np.arange(1, n + 1, dtype=np.float64)[:, None]
    return state.position[None, :] + state.velocity[None, :] * (k * dt)


def plan_headings(plan: np.ndarray, start, start_heading: float, min_step: float = 1e-3) -> np.ndarray:
    """Heading at each plan point from consecutive displacements.

    A step shorter than ``min_step`` keeps the previous heading.
    """
    headings = np.empty(len(plan))
    prev = np.asarray(start, dtype=np.float64)
    h = start_heading
    for t, p in enumerate(plan):
        d = p - prev
        if math.hypot(d[0], d[1]) >= min_step:
            h = math.atan2(d[1], d[0])
        headings[t] = h
        prev = p
    return headings


def collision_steps(plan: np.ndarray, ego: AgentState, futures: np.ndarray,
                    sizes: list[tuple[float, float]], headings: np.ndarray,
                    margin: float = 0.0) -> list[int]:
    """Future step indices at which the ego box overlaps any agent box.

    ``margin`` lengthens the ego box by that much at both ends.
    """
    ego_h = plan_headings(plan, ego.position, ego.heading)
    hits = []
    for t in range(len(plan)):
        ego_box = (plan[t], ego.length + 2.0 * margin, ego.width, ego_h[t])
        for i in range(len(futures)):
            box = (futures[i, t], sizes[i][0], sizes[i][1], headings[i, t])
            if boxes_overlap(ego_box, box):
                hits.append(t)
                break
    return hits


@dataclass
class ValidityReport:
    valid: bool
    overlap_steps: list[int]
    speed_violations: list[str]
    count_ok: bool
    messages: list[str]


def validate_scenario(s: Scenario) -> ValidityReport:
    """Check collision-freeness of the ego plan, speed bounds and counts."""
    messages = []
    sizes = [(h[-1].length, h[-1].width) for h in s.agent_histories]
    overlaps = collision_steps(s.ego_plan, s.ego, s.agent_futures, sizes, s.agent_future_headings)
    if overlaps:
        messages.append(f"ego plan overlaps agents at steps {overlaps}")
    bound = V_MAX * DT + 1e-9
    speed = []

    def check(name, start, traj):
        pts = np.vstack([np.asarray(start)[None, :], traj])
        step = np.hypot(*np.diff(pts, axis=0).T)
        for t in np.nonzero(step > bound)[0]:
            speed.append(f"{name} step {int(t)} moves {step[t]:.3f} m")

    check("ego", s.ego.position, s.ego_plan)
    for i, h in enumerate(s.agent_histories):
        check(f"agent {i}", h[-1].position, s.agent_futures[i])
    messages.extend(speed)
    count_ok = 0 <= s.num_agents <= MAX_AGENTS and len(s.ego_history) == HISTORY and all(
        len(h) == HISTORY for h in s.agent_histories)
    if s.ego_plan.shape != (HORIZON, 2) or s.agent_futures.shape != (s.num_agents, HORIZON, 2):
        count_ok = False
    if not count_ok:
        messages.append("count or shape bounds violated")
    return ValidityReport(valid=not overlaps and not speed and count_ok,
                          overlap_steps=overlaps, speed_violations=speed,
                          count_ok=count_ok, messages=messages)


# generation ------------------------------------------------------------------

class _Track:
    """Sampled kinematics of one agent: states at history and future times."""

    def __init__(self, length, width, xy, vel):
        # xy, vel: callables t -> (x, y), (vx, vy) for t in seconds, 0 = now.
        self.length, self.width = length, width
        self.xy, self.vel = xy, vel

    def history(self) -> list[AgentState]:
        out = []
        for j in range(HISTORY - 1, -1, -1):
            t = -j * DT
            x, y = self.xy(t)
            vx, vy = self.vel(t)
            out.append(AgentState(x, y, self.length, self.width, _heading(vx, vy), vx, vy))
        return out

    def future(self) -> tuple[np.ndarray, np.ndarray]:
        pts, hs = [], []
        for k in range(1, HORIZON + 1):
            t = k * DT
            pts.append(self.xy(t))
            hs.append(_heading(*self.vel(t)))
        return np.array(pts, dtype=np.float64), np.array(hs, dtype=np.float64)


def _heading(vx, vy, default=0.0):
    if math.hypot(vx, vy) < 1e-6:
        return default
    return math.atan2(vy, vx)


def _const_track(length, width, x0, y0, vx, vy=0.0) -> _Track:
    return _Track(length, width, lambda t: (x0 + vx * t, y0 + vy * t), lambda t: (vx, vy))


def _speed_profile(v0, accel, t_start=0.0):
    """Position offset and speed for constant accel from ``t_start``, floored at 0 speed."""

    def pos(t):
        if t <= t_start:
            return v0 * t
        base = v0 * t_start
        dt = t - t_start
        if accel < 0 and v0 + accel * dt < 0:
            stop = -v0 / accel
            return base + v0 * stop + 0.5 * accel * stop * stop
        return base + v0 * dt + 0.5 * accel * dt * dt

    def speed(t):
        if t <= t_start:
            return v0
        return max(0.0, v0 + accel * (t - t_start))

    return pos, speed


def _vehicle_size(rng):
    return float(rng.uniform(4.0, 5.0)), float(rng.uniform(1.8, 2.1))


def _kind_stream(kind: str, seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64([KINDS.index(kind), int(seed)]))


def _ego_plan_for(ego: AgentState, decel: float, accel: float = 0.0) -> np.ndarray:
    a = -decel if decel > 0 else accel
    pos, _ = _speed_profile(ego.vx, a)
    return np.array([[ego.x + pos(k * DT), ego.y] for k in range(1, HORIZON + 1)])


def _background(rng, n, ego: AgentState, reserved: list[tuple[float, float]]) -> list[_Track]:
    """Non-interacting agents in the adjacent lanes, or far ahead/behind and diverging."""
    tracks = []
    attempts = 0
    while len(tracks) < n and attempts < 400:
        attempts += 1
        lane = rng.choice([-2, -1, 1, 2, 0], p=[0.2, 0.3, 0.3, 0.15, 0.05])
        length, width = _vehicle_size(rng)
        y0 = lane * LANE_WIDTH + rng.uniform(-0.5, 0.5)
        if lane == 0:
            # same lane: only far and opening gaps so the corridor stays clear
            if rng.uniform() < 0.5:
                x0 = ego.x + rng.uniform(25.0, 45.0)
                vx = ego.vx + rng.uniform(1.0, 3.0)
            else:
                x0 = ego.x - rng.uniform(20.0, 35.0)
                vx = max(2.0, ego.vx - rng.uniform(1.0, 3.0))
        else:
            x0 = ego.x + rng.uniform(-30.0, 45.0)
            vx = float(np.clip(ego.vx + rng.uniform(-4.0, 4.0), 2.0, 17.0))
        x0 += rng.uniform(-0.5, 0.5)
        # keep agents in one lane apart over the whole window
        if any(abs(yy - y0) < 2.5 and _min_gap(x0, vx, xx, vv) < 8.0 for xx, yy, vv in
               [(r[0], r[1], r[2]) for r in reserved]):
            continue
        reserved.append((x0, y0, vx))
        tracks.append(_const_track(length, width, x0, y0, vx))
    return tracks


def _min_gap(x0, v0, x1, v1):
    ts = np.arange(-(HISTORY - 1), HORIZON + 1) * DT
    return float(np.min(np.abs((x0 + v0 * ts) - (x1 + v1 * ts))))


def _interactor(kind, rng, ego: AgentState) -> _Track:
    side = 1.0 if rng.uniform() < 0.5 else -1.0
    if kind == "cut_in":
        length, width = _vehicle_size(rng)
        x0 = ego.x + rng.uniform(6.0, 16.0)
        y0 = side * rng.uniform(2.2, 3.0)
        v_lat = rng.uniform(0.9, 1.6)
        vx = max(2.0, ego.vx + rng.uniform(-4.0, 0.0))

        def xy(t):
            if t <= 0:
                y = min(LANE_WIDTH, y0 + v_lat * (-t))
            else:
                y = max(0.0, y0 - v_lat * t)
            return x0 + vx * t, side * y

        def vel(t):
            y_abs = abs(xy(t)[1])
            moving = (t <= 0 and y_abs < LANE_WIDTH) or (t > 0 and y_abs > 0.0)
            return vx, (-side * v_lat if moving else 0.0)

        return _Track(length, width, xy, vel)
    if kind == "merge":
        length, width = _vehicle_size(rng)
        x0 = ego.x + rng.uniform(10.0, 22.0)
        v0 = max(2.0, ego.vx - rng.uniform(3.0, 6.0))
        acc = rng.uniform(0.5, 1.5)
        y_start = side * rng.uniform(4.2, 5.0)
        v_lat = rng.uniform(1.2, 2.0)
        lon, spd = _speed_profile(v0, acc)

        def xy(t):
            x = x0 + (v0 * t if t <= 0 else lon(t))
            y = max(0.0, abs(y_start) - v_lat * t) if t > 0 else abs(y_start) + v_lat * (-t) * 0.5
            return x, side * y

        def vel(t):
            vy = -side * v_lat if t > 0 and abs(xy(t)[1]) > 0 else -side * v_lat * 0.5
            return (spd(t) if t > 0 else v0), vy

        return _Track(length, width, xy, vel)
    if kind == "yield":
        length, width = _vehicle_size(rng)
        x0 = ego.x + rng.uniform(12.0, 24.0)
        v0 = max(3.0, ego.vx + rng.uniform(-1.0, 1.0))
        t_brake = -rng.uniform(0.5, 1.0)
        decel = rng.uniform(3.0, 6.0)
        y0 = rng.uniform(-0.3, 0.3)
        # speed at time t: v0 before t_brake, then decelerating, floored at 0
        pos, spd = _speed_profile(v0, -decel, t_start=t_brake)
        origin = pos(0.0)
        return _Track(length, width, lambda t: (x0 + pos(t) - origin, y0),
                      lambda t: (spd(t), 0.0))
    if kind == "cross":
        length = width = float(rng.uniform(0.6, 0.9))
        speed = rng.uniform(1.5, 2.5)
        t_cross = rng.uniform(1.0, 2.5)  # time the walker reaches the lane centre
        x0 = ego.x + ego.vx * t_cross + rng.uniform(-2.0, 2.0)
        y0 = side * speed * t_cross
        return _const_track(length, width, x0, y0, 0.0, -side * speed)
    if kind == "tailgate":
        length, width = _vehicle_size(rng)
        rel_v = rng.uniform(2.0, 4.0)
        gap0 = rng.uniform(4.5, 7.0)
        gap_final = rng.uniform(1.5, 3.5)
        ego_acc = rng.uniform(0.0, 0.8)
        ego_pos, ego_spd = _speed_profile(ego.vx, ego_acc)
        offset = 0.5 * (ego.length + length)

        def gap(t):
            return gap0 - rel_v * t if t <= 0 else max(gap_final, gap0 - rel_v * t)

        def xy(t):
            ego_x = ego.x + (ego.vx * t if t <= 0 else ego_pos(t))
            return ego_x - offset - gap(t), ego.y + rng_y

        def vel(t):
            ev = ego.vx if t <= 0 else ego_spd(t)
            closing = t <= 0 or gap0 - rel_v * t > gap_final
            return ev + (rel_v if closing else 0.0), 0.0

        rng_y = float(rng.uniform(-0.3, 0.3))
        track = _Track(length, width, xy, vel)
        track.ego_accel = ego_acc
        return track
    raise ValueError(f"unknown maneuver kind {kind!r}")


def generate_scenario(kind: str, seed: int, max_retries: int = 50) -> Scenario:
    """Build a deterministic scene for ``(kind, seed)``.

    Interactive kinds get exactly one scripted agent (index recorded in
    ``Scenario.interacting``) plus background traffic; the ego plan is the
    gentlest scripted brake that clears every agent with a safety margin.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown maneuver kind {kind!r}; expected one of {KINDS}")
    rng = _kind_stream(kind, seed)
    for _ in range(max_retries):
        scenario = _try_generate(kind, int(seed), rng)
        if scenario is not None:
            return scenario
    raise ScenarioError(f"could not sample a valid {kind} scenario for seed {seed}")


def _try_generate(kind, seed, rng) -> Scenario | None:
    length, width = _vehicle_size(rng)
    ev = float(rng.uniform(8.0, 12.0) + rng.uniform(-1.0, 1.0))
    ex, ey = rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)
    ego_track = _const_track(length, width, ex, ey, ev)
    ego_hist = ego_track.history()
    ego = ego_hist[-1]

    tracks = []
    reserved = [(ex, ey, ev)]
    interactor = None
    if kind != "free_flow":
        interactor = _interactor(kind, rng, ego)
        ix, iy = interactor.xy(0.0)
        reserved.append((ix, iy, interactor.vel(0.0)[0]))
        n_bg = int(rng.integers(0, MAX_AGENTS))
    else:
        n_bg = int(rng.integers(1, MAX_AGENTS + 1))
    background = _background(rng, n_bg, ego, reserved)
    if kind == "free_flow" and not background:
        return None
    tracks = list(background)
    interacting = None
    if interactor is not None:
        interacting = int(rng.integers(0, len(tracks) + 1))
        tracks.insert(interacting, interactor)

    histories = [t.history() for t in tracks]
    futures, headings = [], []
    for t in tracks:
        f, h = t.future()
        futures.append(f)
        headings.append(h)
    futures = np.array(futures, dtype=np.float64).reshape(-1, HORIZON, 2)
    headings = np.array(headings, dtype=np.float64).reshape(-1, HORIZON)
    sizes = [(t.length, t.width) for t in tracks]

    if kind == "tailgate":
        plan = _ego_plan_for(ego, 0.0, accel=interactor.ego_accel)
        if collision_steps(plan, ego, futures, sizes, headings):
            return None
    else:
        plan = None
        for decel in _BRAKE_LEVELS:
            candidate = _ego_plan_for(ego, decel)
            if not collision_steps(candidate, ego, futures, sizes, headings, margin=RESPONSE_MARGIN):
                plan = candidate
                break
        if plan is None:
            return None
        if kind == "free_flow" and not np.array_equal(plan, _ego_plan_for(ego, 0.0)):
            return None

    scenario = Scenario(kind=kind, seed=seed, ego_history=ego_hist, agent_histories=histories,
                        agent_futures=futures, ego_plan=plan, interacting=interacting,
                        agent_future_headings=headings)
    if interacting is not None and not enters_corridor(scenario, interacting):
        return None
    if not validate_scenario(scenario).valid:
        return None
    return scenario


def corridor_offsets(s: Scenario, index: int) -> np.ndarray:
    """Lateral offset of an agent from the ego lane centre over its future."""
    return np.abs(s.agent_futures[index, :, 1])


def enters_corridor(s: Scenario, index: int) -> bool:
    """True if the agent's future box overlaps the ego lane at some step (already in it counts)."""
    half = 0.5 * LANE_WIDTH
    a = s.agent_histories[index][-1]
    lat = np.abs(s.agent_futures[index, :, 1]) - 0.5 * a.width
    return bool(np.any(lat < half))


def corridor_entrants(s: Scenario) -> list[int]:
    """Agents whose lateral offset starts outside the ego lane and ends inside it."""
    half = 0.5 * LANE_WIDTH
    out = []
    for i, h in enumerate(s.agent_histories):
        start = abs(h[0].y)
        lat = np.abs(s.agent_futures[i, :, 1])
        if start >= half and np.any(lat < half):
            out.append(i)
    return out


# persistence -----------------------------------------------------------------

def _f(x) -> str:
    return repr(float(x))


def _state_record(s: AgentState) -> list[str]:
    return [_f(v) for v in s.as_vector()]


def scenario_to_record(s: Scenario) -> dict:
    return {
        "schema": SCHEMA,
        "kind": s.kind,
        "seed": s.seed,
        "interacting": s.interacting,
        "ego_history": [_state_record(x) for x in s.ego_history],
        "agent_histories": [[_state_record(x) for x in h] for h in s.agent_histories],
        "agent_futures": [[[_f(v) for v in p] for p in traj] for traj in s.agent_futures],
        "agent_future_headings": [[_f(v) for v in hs] for hs in s.agent_future_headings],
        "ego_plan": [[_f(v) for v in p] for p in s.ego_plan],
    }


def _state_from(rec) -> AgentState:
    return AgentState(*[float(v) for v in rec])


def scenario_from_record(rec: dict) -> Scenario:
    if rec.get("schema") != SCHEMA:
        raise ValueError(f"unexpected schema {rec.get('schema')!r}")
    futures = np.array([[[float(v) for v in p] for p in traj] for traj in rec["agent_futures"]],
                       dtype=np.float64).reshape(-1, HORIZON, 2)
    headings = np.array([[float(v) for v in hs] for hs in rec["agent_future_headings"]],
                        dtype=np.float64).reshape(-1, HORIZON)
    return Scenario(
        kind=rec["kind"], seed=int(rec["seed"]),
        ego_history=[_state_from(x) for x in rec["ego_history"]],
        agent_histories=[[_state_from(x) for x in h] for h in rec["agent_histories"]],
        agent_futures=futures,
        ego_plan=np.array([[float(v) for v in p] for p in rec["ego_plan"]], dtype=np.float64),
        interacting=rec["interacting"], agent_future_headings=headings)


def save_scenarios(path, scenarios: Iterable[Scenario]) -> None:
    with open(path, "w") as fh:
        for s in scenarios:
            fh.write(json.dumps(scenario_to_record(s), separators=(",", ":")))
            fh.write("\n")


def load_scenarios(path) -> list[Scenario]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(scenario_from_record(json.loads(line)))
            except (ValueError, KeyError, TypeError, IndexError) as exc:
                raise ValueError(f"malformed scenario record at line {lineno}: {exc}") from exc
    return out
