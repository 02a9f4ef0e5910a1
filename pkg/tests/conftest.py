"""Shared model factories and cached solves for the test suite."""

from __future__ import annotations

import functools

import numpy as np
import pytest

from pacontract.builtins import builtin_model
from pacontract.hjb import SpaceGrid, solve
from pacontract.model_core import ActionSpace, AgentSpec, JumpSpec, ModelSpec, PrincipalSpec
from pacontract.sim import TimeGrid


def one_agent(
    *,
    sigma="1",
    drift="a0",
    jumps=None,
    discount="0",
    liquidation="x0",
    a_box=((0.0,), (2.0,)),
    R_A=1.0,
    cara=True,
    agent=None,
    horizon=1.0,
    box=4.0,
    params=None,
    name="custom",
):
    """One agent, one state, one noise: the workhorse for hand-checkable cases."""
    if agent is None:
        agent = AgentSpec.cara(R_A, discount=discount) if cara else AgentSpec(discount=discount)
    return ModelSpec(
        name=name,
        n_agents=1, state_dim=1, noise_dim=1,
        sigma=((sigma,),),
        drift=(drift,),
        jumps=(jumps or JumpSpec(),),
        agents=(agent,),
        principal=PrincipalSpec(liquidation=liquidation, flow_disutility="k0"),
        actions=ActionSpace((a_box[0],), (a_box[1],)),
        x0=(0.0,), horizon=horizon, state_box=((-box,), (box,)),
        params=params or {},
    )


@pytest.fixture(scope="session")
def hm():
    return builtin_model("holmstrom_milgrom")


@pytest.fixture(scope="session")
def cf():
    return builtin_model("capponi_frei")


@pytest.fixture(scope="session")
def multi():
    return builtin_model("multi_agent_cara")


@functools.lru_cache(maxsize=None)
def _hm_surface(nodes: int, steps: int):
    m = builtin_model("holmstrom_milgrom")
    return solve(m, SpaceGrid((-4.0,), (4.0,), (nodes,)), TimeGrid(1.0, steps))


@pytest.fixture(scope="session")
def hm_surface():
    """A moderate HM solve shared by the hjb and contract tests."""
    return _hm_surface(81, 50)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary ---------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one pass/fail line per acceptance criterion, then assert."""

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line, flush=True)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
