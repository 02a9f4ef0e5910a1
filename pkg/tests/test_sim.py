import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pacontract.errors import SimulationError
from pacontract.model_core import JumpSpec
from pacontract.sim import (
    ConstantPolicy,
    TimeGrid,
    estimate_expectation,
    export_paths_csv,
    girsanov_density,
    path_rng,
    simulate_paths,
)

from conftest import one_agent


def test_time_grid():
    g = TimeGrid(1.3, 7)
    assert np.all(np.diff(g.nodes) > 0)
    assert abs(g.nodes[-1] - g.nodes[0] - 1.3) <= 1e-12
    with pytest.raises(ValueError):
        TimeGrid(1.0, 0)


def test_zero_action_is_driftless_brownian(hm):
    grid = TimeGrid(1.0, 10)
    bundle = simulate_paths(hm, ConstantPolicy([0.0]), grid, 50, seed=3)
    ref = simulate_paths(hm, None, grid, 50, seed=3)
    assert np.array_equal(bundle.density, np.ones_like(bundle.density))
    np.testing.assert_array_equal(bundle.X, ref.X)
    W = np.concatenate([np.zeros((50, 1)), np.cumsum(bundle.dW[:, :, 0], axis=1)], axis=1)
    np.testing.assert_allclose(bundle.X[:, :, 0], W, atol=1e-14)


def test_degenerate_diffusion_stays_at_x0():
    m = one_agent(sigma="0", drift="0")
    bundle = simulate_paths(m, ConstantPolicy([1.0]), TimeGrid(1.0, 5), 20, seed=0)
    assert np.all(bundle.X == 0.0)
    assert estimate_expectation(bundle, bundle.X[:, -1, 0]) == (0.0, 0.0)


def test_euler_recursion_is_rederivable(cf):
    bundle = simulate_paths(cf, ConstantPolicy([0.7, 1.2]), TimeGrid(1.0, 40), 200, seed=5)
    sigma, dt = 1.0, bundle.grid.dt
    dXc = sigma * (bundle.b[:, :, 0] * dt + bundle.dW[:, :, 0])
    dXj = -1.0 * bundle.jumps[:, :, 0]
    X = np.concatenate([np.zeros((200, 1)), np.cumsum(dXc + dXj, axis=1)], axis=1)
    np.testing.assert_allclose(bundle.X[:, :, 0], X, atol=1e-12)
    assert bundle.jumps.any()


def test_drifted_mean(hm):
    bundle = simulate_paths(hm, ConstantPolicy([0.5]), TimeGrid(1.0, 20), 10_000, seed=11)
    mean, se = estimate_expectation(bundle, bundle.X[:, -1, 0])
    assert abs(mean - 0.5) <= 3 * se


def test_identity_measure_change(hm):
    ref = simulate_paths(hm, None, TimeGrid(1.0, 10), 100, seed=1)
    dens = girsanov_density(hm, ref, ConstantPolicy([0.0]))
    assert np.all(dens == 1.0)


@pytest.mark.parametrize("a", [0.25, 1.0, 2.0])
def test_density_is_a_martingale(hm, a):
    ref = simulate_paths(hm, None, TimeGrid(1.0, 20), 10_000, seed=21)
    dens = girsanov_density(hm, ref, ConstantPolicy([a]))
    assert np.all(dens > 0)
    mean = dens.mean(axis=0)
    se = dens.std(axis=0, ddof=1) / np.sqrt(dens.shape[0])
    assert np.all(np.abs(mean - 1.0) <= 4 * np.maximum(se, 1e-15))


def test_density_martingale_with_jumps(cf):
    ref = simulate_paths(cf, None, TimeGrid(1.0, 50), 10_000, seed=2)
    dens = girsanov_density(cf, ref, ConstantPolicy([0.5, 1.8]))
    mean = dens.mean(axis=0)
    se = dens.std(axis=0, ddof=1) / np.sqrt(dens.shape[0])
    assert np.all(np.abs(mean - 1.0) <= 4 * np.maximum(se, 1e-15))


def test_single_jump_density_by_hand():
    w, T, M = 0.5, 1.0, 20
    js = JumpSpec(marks=((1.0,),), weights=(w,), size=("-e",), intensity="2")
    m = one_agent(jumps=js, drift="a0")
    ref = simulate_paths(m, None, TimeGrid(T, M), 2000, seed=4)
    dens = girsanov_density(m, ref, ConstantPolicy([0.0]))[:, -1]
    count = ref.jumps[:, :, 0].sum(axis=1)
    one = count == 1
    assert one.any()
    np.testing.assert_allclose(dens[one], 2.0 * np.exp(-(2.0 - 1.0) * w * T), rtol=1e-12)
    # step-by-step oracle on every path
    oracle = np.ones(ref.n_paths)
    dt = T / M
    for k in range(M):
        oracle *= np.where(ref.jumps[:, k, 0], 2.0, 1.0) * np.exp(-(2.0 - 1.0) * w * dt)
    np.testing.assert_allclose(dens, oracle, rtol=1e-12)


def test_reweighted_matches_drifted(hm):
    grid, pol = TimeGrid(1.0, 20), ConstantPolicy([0.5])
    drifted = simulate_paths(hm, pol, grid, 10_000, seed=8)
    ref = simulate_paths(hm, None, grid, 10_000, seed=9)
    m1, s1 = estimate_expectation(drifted, drifted.X[:, -1, 0])
    m2, s2 = estimate_expectation(ref, ref.X[:, -1, 0], reweight=girsanov_density(hm, ref, pol))
    assert abs(m1 - m2) <= 3 * np.hypot(s1, s2)


def test_estimate_constant_and_errors(hm):
    bundle = simulate_paths(hm, None, TimeGrid(1.0, 4), 30, seed=0)
    assert estimate_expectation(bundle, np.full(30, 2.5)) == (2.5, 0.0)
    with pytest.raises(SimulationError):
        estimate_expectation(bundle, np.array([]))
    with pytest.raises(SimulationError, match="path 3"):
        estimate_expectation(bundle, np.where(np.arange(30) == 3, np.nan, 1.0))


def test_jump_probability_guards(cf):
    pol = ConstantPolicy([0.0, 2.0])
    with pytest.raises(SimulationError, match="refine"):
        simulate_paths(cf, pol, TimeGrid(1.0, 5), 10, seed=0)
    simulate_paths(cf, pol, TimeGrid(1.0, 5), 10, seed=0, allow_large_jump_prob=True)
    with pytest.raises(SimulationError, match="exceeds 1"):
        simulate_paths(cf, pol, TimeGrid(1.0, 1), 10, seed=0, allow_large_jump_prob=True)


def test_policy_outside_action_space(hm):
    with pytest.raises(SimulationError, match="action space"):
        simulate_paths(hm, ConstantPolicy([5.0]), TimeGrid(1.0, 4), 10, seed=0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_euler_weak_order():
    # nearly deterministic mean reversion dX = (1 - X) dt: Euler error is O(dt);
    # the density of this huge drift loading overflows and is not used
    m = one_agent(sigma="s", drift="(1 - x0)/s", params={"s": 1e-9})
    exact = 1.0 - np.exp(-1.0)

    def mean(M):
        b = simulate_paths(m, ConstantPolicy([0.0]), TimeGrid(1.0, M), 4, seed=0)
        return b.X[:, -1, 0].mean()

    e1, e2 = abs(mean(20) - exact), abs(mean(40) - exact)
    assert np.log2(e1 / e2) >= 0.8
    d1, d2, d3 = mean(20), mean(40), mean(80)
    assert np.log2(abs(d1 - d2) / abs(d2 - d3)) >= 0.8


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32), workers=st.integers(2, 4))
def test_reproducible_across_workers(cf, seed, workers):
    grid, pol = TimeGrid(1.0, 20), ConstantPolicy([0.3, 1.1])
    a = simulate_paths(cf, pol, grid, 13, seed)
    b = simulate_paths(cf, pol, grid, 13, seed, workers=workers)
    for field in ("X", "dW", "jumps", "density"):
        assert np.array_equal(getattr(a, field), getattr(b, field))


def test_paths_are_keyed_by_index(hm):
    grid = TimeGrid(1.0, 8)
    full = simulate_paths(hm, ConstantPolicy([1.0]), grid, 10, seed=6)
    tail = simulate_paths(hm, ConstantPolicy([1.0]), grid, 4, seed=6, first_path=6)
    assert np.array_equal(full.X[6:], tail.X)
    assert np.array_equal(path_rng(6, 2).standard_normal(3), path_rng(6, 2).standard_normal(3))


def test_export_paths_csv(hm, tmp_path):
    bundle = simulate_paths(hm, ConstantPolicy([0.5]), TimeGrid(1.0, 3), 2, seed=0)
    out = tmp_path / "paths.csv"
    export_paths_csv(bundle, out)
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["path", "node", "t", "x0", "density"]
    assert len(rows) == 1 + 2 * 4
    assert float(rows[-1][3]) == bundle.X[1, 3, 0]
