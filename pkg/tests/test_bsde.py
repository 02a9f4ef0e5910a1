import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from pacontract.bsde import (
    agent_value_estimate,
    ce_utility_transform,
    discounted_agent_process,
    export_solution_csv,
    forward_Y,
    jump_sign,
    martingale_drift,
    solve_backward_lsmc,
)
from pacontract.errors import SimulationError
from pacontract.model_core import JumpSpec
from pacontract.nash import ControlPoint
from pacontract.sim import ConstantPolicy, TimeGrid, simulate_paths

from conftest import one_agent


@pytest.fixture(scope="module")
def hm_ref(hm):
    return simulate_paths(hm, None, TimeGrid(1.0, 20), 4000, seed=1)


# -- forward --------------------------------------------------------------


def test_forward_constant_when_generator_vanishes():
    js = JumpSpec(marks=((1.0,),), weights=(0.5,), size=("-e",))
    m = one_agent(drift="0", jumps=js)
    bundle = simulate_paths(m, None, TimeGrid(1.0, 20), 200, seed=0)
    fy = forward_Y(m, 0.3, ControlPoint.zeros(m), bundle)
    assert np.all(fy.Y == 0.3)


def test_forward_general_mode_exponential_growth():
    r0, y, M = 0.4, 1.5, 200
    m = one_agent(cara=False, drift="0", discount="r0", params={"r0": r0})
    bundle = simulate_paths(m, None, TimeGrid(1.0, M), 3, seed=0)
    fy = forward_Y(m, y, ControlPoint.zeros(m), bundle, mode="general_f")
    dt = 1.0 / M
    np.testing.assert_allclose(fy.Y[0, :, 0], y * (1 + r0 * dt) ** np.arange(M + 1), rtol=1e-12)
    ode = solve_ivp(lambda t, v: r0 * v, (0.0, 1.0), [y], t_eval=bundle.grid.nodes, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(fy.Y[0, :, 0], ode.y[0], rtol=1e-2)


def test_forward_drifted_mean(hm):
    # G = 0 at z = 0.5; the effort drift a* = 0.5 adds z a* T = 0.25 under the drifted measure
    cp = ControlPoint.constant(hm, z=0.5)
    drifted = simulate_paths(hm, ConstantPolicy([0.5]), TimeGrid(1.0, 20), 10_000, seed=2)
    fy = forward_Y(hm, 0.1, cp, drifted)
    assert np.all(np.abs(fy.generator) <= 1e-12)
    vals = fy.terminal[:, 0] - 0.1
    se = vals.std(ddof=1) / np.sqrt(vals.size)
    assert abs(vals.mean() - 0.25) <= 3 * se


def test_forward_reference_is_martingale(hm, hm_ref):
    fy = forward_Y(hm, 0.1, ControlPoint.constant(hm, z=0.5), hm_ref)
    vals = fy.terminal[:, 0]
    assert abs(vals.mean() - 0.1) <= 3 * vals.std(ddof=1) / np.sqrt(vals.size)


def test_jump_sign_convention():
    assert jump_sign("general_f") == 1.0 and jump_sign("cara_g") == -1.0
    js = JumpSpec(marks=((1.0,),), weights=(1.0,), size=("-e",))
    m = one_agent(drift="0", jumps=js)
    bundle = simulate_paths(m, None, TimeGrid(1.0, 20), 300, seed=3)
    cp = ControlPoint.constant(m, h=0.2)
    fy = forward_Y(m, 0.0, cp, bundle)
    n_jumps = bundle.jumps[:, :, 0].sum(axis=1)
    # Y_T = -G T - h * (number of jumps) with G constant along the path
    G = fy.generator[0, 0, 0]
    np.testing.assert_allclose(fy.terminal[:, 0], -G * 1.0 - 0.2 * n_jumps, atol=1e-12)


# -- backward -------------------------------------------------------------


def test_backward_constant_terminal():
    js = JumpSpec(marks=((1.0,),), weights=(0.5,), size=("-e",))
    m = one_agent(drift="0", jumps=js)
    bundle = simulate_paths(m, None, TimeGrid(1.0, 10), 500, seed=0)
    sol = solve_backward_lsmc(m, np.full(500, 1.7), None, bundle)
    np.testing.assert_allclose(sol.Y, 1.7, atol=1e-12)
    assert np.abs(sol.Z).max() <= 1e-10 and np.abs(sol.H).max() <= 1e-10


def test_backward_terminal_matches_exactly(hm, hm_ref):
    xi = np.sin(hm_ref.X[:, -1, 0])
    sol = solve_backward_lsmc(hm, xi, None, hm_ref)
    assert np.array_equal(sol.Y[:, -1, 0], xi)


def test_backward_roundtrip(hm, hm_ref):
    fy = forward_Y(hm, 0.0, ControlPoint.constant(hm, z=0.5), hm_ref)
    sol = solve_backward_lsmc(hm, fy.terminal, None, hm_ref, degree=2)
    assert abs(sol.y0[0]) <= 5e-2


def test_backward_linear_contract_loading(hm):
    ref = simulate_paths(hm, None, TimeGrid(1.0, 20), 10_000, seed=4)
    sol = solve_backward_lsmc(hm, 0.5 * ref.X[:, -1, :], None, ref)
    per_step = sol.Z[:, 1:, 0, 0].mean(axis=0)
    assert np.all(np.abs(per_step - 0.5) <= 0.05)


def test_backward_rejects_drifted_paths(hm):
    drifted = simulate_paths(hm, ConstantPolicy([0.5]), TimeGrid(1.0, 4), 50, seed=0)
    with pytest.raises(SimulationError, match="reference"):
        solve_backward_lsmc(hm, drifted.X[:, -1, :], None, drifted)
    ref = simulate_paths(hm, None, TimeGrid(1.0, 4), 50, seed=0)
    with pytest.raises(ValueError):
        solve_backward_lsmc(hm, ref.X[:, -1, :], None, ref, degree=0)


def test_ce_and_utility_forms_agree(hm, hm_ref):
    xi = 0.5 * hm_ref.X[:, -1, 0]
    ce = solve_backward_lsmc(hm, xi, None, hm_ref, mode="cara_g")
    util = solve_backward_lsmc(hm, -np.exp(-xi), None, hm_ref, mode="general_f")
    lhs = ce_utility_transform(ce.y0, 1.0, "to_utility")[0]
    assert abs(lhs - util.y0[0]) <= 5e-2


def test_monte_carlo_rate(hm):
    def stderr(P):
        ref = simulate_paths(hm, None, TimeGrid(1.0, 20), P, seed=2)
        x = ref.X[:, -1, :]
        return solve_backward_lsmc(hm, 0.5 * x + 0.3 * x**2, None, ref).y0_stderr[0]

    ratio = stderr(4000) / stderr(1000)
    assert 0.4 <= ratio <= 0.6


def test_export_solution_csv(hm, tmp_path):
    ref = simulate_paths(hm, None, TimeGrid(1.0, 3), 20, seed=0)
    sol = solve_backward_lsmc(hm, ref.X[:, -1, :], None, ref, degree=1)
    out = tmp_path / "bsde.csv"
    export_solution_csv(sol, out)
    lines = out.read_text().splitlines()
    assert lines[0].startswith("path,node,Y0")
    assert len(lines) == 1 + 20 * 4


# -- CE transform ---------------------------------------------------------


def test_ce_transform_examples():
    assert ce_utility_transform(0.0, 1.0, "to_utility") == -1.0
    assert ce_utility_transform(-1.0, 1.0, "to_ce") == 0.0
    with pytest.raises(ValueError):
        ce_utility_transform(0.0, 1.0, "to_ce")
    with pytest.raises(ValueError):
        ce_utility_transform(1.0, -1.0, "to_utility")


@settings(max_examples=50, deadline=None)
@given(v=st.floats(-1e6, -1e-6), R=st.floats(0.05, 20.0))
def test_ce_transform_roundtrip(v, R):
    back = ce_utility_transform(ce_utility_transform(v, R, "to_ce"), R, "to_utility")
    assert abs(back - v) <= 1e-12 * abs(v)


# -- agent value ----------------------------------------------------------


def test_agent_value_of_constant_payment(hm):
    m = one_agent(drift="0")
    bundle = simulate_paths(m, ConstantPolicy([0.0]), TimeGrid(1.0, 5), 100, seed=0)
    val, se = agent_value_estimate(m, np.full(100, 0.4), None, bundle)
    assert val[0] == m.utility(0, np.array(0.4))
    assert se[0] == 0.0


def test_agent_value_rejects_non_finite(hm):
    bundle = simulate_paths(hm, ConstantPolicy([0.5]), TimeGrid(1.0, 5), 10, seed=0)
    xi = np.zeros(10)
    xi[4] = np.inf
    with pytest.raises(SimulationError, match="path 4"):
        agent_value_estimate(hm, xi, None, bundle)


# -- martingale / supermartingale structure -------------------------------


def _drift_ratio(model, cp, actions, n_paths=3000, seed=3):
    b = simulate_paths(model, ConstantPolicy(actions), TimeGrid(1.0, 20), n_paths, seed=seed)
    R = discounted_agent_process(model, forward_Y(model, 0.0, cp, b), b)
    d, se = martingale_drift(R)
    return d / se


def test_equilibrium_drift_is_zero(hm):
    ratio = _drift_ratio(hm, ControlPoint.constant(hm, z=0.5), [0.5])
    assert np.all(np.abs(ratio) <= 4)


@pytest.mark.parametrize("dev", [0.0, 1.0, 2.0])
def test_deviation_drift_is_nonpositive(hm, dev):
    ratio = _drift_ratio(hm, ControlPoint.constant(hm, z=0.5), [dev])
    assert np.all(ratio <= 4)
