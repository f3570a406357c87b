import sys

import numpy as np
import pytest

from egofocus.scenarios import DT, HISTORY, HORIZON, AgentState, Scenario, roll_constant_velocity


def cv_history(state: AgentState) -> list[AgentState]:
    """H past states ending at ``state`` under constant velocity."""
    out = []
    for j in range(HISTORY - 1, -1, -1):
        out.append(AgentState(state.x - state.vx * DT * j, state.y - state.vy * DT * j,
                              state.length, state.width, state.heading, state.vx, state.vy))
    return out


def make_scenario(ego: AgentState, agents: list[AgentState], kind="free_flow", seed=0,
                  plan=None, interacting=None) -> Scenario:
    """Hand-built scene with constant-velocity histories and futures."""
    futures = np.array([roll_constant_velocity(a, DT, HORIZON) for a in agents]).reshape(
        len(agents), HORIZON, 2)
    headings = np.array([[a.heading] * HORIZON for a in agents]).reshape(len(agents), HORIZON)
    return Scenario(kind=kind, seed=seed,
                    ego_history=cv_history(ego),
                    agent_histories=[cv_history(a) for a in agents],
                    agent_futures=futures,
                    ego_plan=roll_constant_velocity(ego, DT, HORIZON) if plan is None else plan,
                    interacting=interacting,
                    agent_future_headings=headings)


def random_agents(rng, n: int) -> list[AgentState]:
    return [AgentState(float(rng.uniform(-30, 30)), float(rng.uniform(-8, 8)),
                       float(rng.uniform(3.5, 5.0)), float(rng.uniform(1.6, 2.1)),
                       float(rng.uniform(-0.3, 0.3)), float(rng.uniform(0, 15)),
                       float(rng.uniform(-1, 1))) for _ in range(n)]


@pytest.fixture
def ego():
    return AgentState(0.0, 0.0, 4.6, 1.9, 0.0, 10.0, 0.0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
