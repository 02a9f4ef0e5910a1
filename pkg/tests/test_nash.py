import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pacontract.builtins import BUILTIN_NAMES, builtin_model, holmstrom_milgrom_closed_form
from pacontract.errors import ModelError
from pacontract.model_core import JumpSpec
from pacontract.nash import (
    ControlPoint,
    F_G_eval,
    HamiltonianSettings,
    agent_generator_f,
    agent_generator_g,
    best_response_fixed_point,
    hamiltonian_sup,
    phi_eval,
    principal_objective,
)

from conftest import one_agent

X0 = np.zeros(1)


def _hm_g_oracle(z, a, kappa=1.0, R=1.0, sigma=1.0):
    return -kappa * a**2 / 2 + z * a - 0.5 * R * z**2 * sigma**2


# -- generators -----------------------------------------------------------


def test_generators_vanish_at_zero():
    m = one_agent(cara=False)
    cp = ControlPoint.zeros(m)
    assert agent_generator_f(m, 0, 0.0, X0, np.zeros(1), cp, np.array([1.0])) == 0.0
    mc = one_agent(drift="0")
    assert agent_generator_g(mc, 0, 0.0, X0, ControlPoint.zeros(mc), np.array([1.0])) == 0.0


def test_f_with_constant_discount():
    m = one_agent(cara=False, discount="r0", params={"r0": 0.3})
    cp = ControlPoint.constant(m, z=0.7)
    y, a = np.array([2.0]), np.array([1.5])
    assert agent_generator_f(m, 0, 0.0, X0, y, cp, a) == pytest.approx(-0.3 * 2.0 + 0.7 * 1.5)


def test_f_holmstrom_milgrom(hm):
    cp = ControlPoint.constant(hm, z=0.5)
    assert agent_generator_f(hm, 0, 0.0, X0, np.zeros(1), cp, np.array([0.5])) == pytest.approx(0.25)
    # term-summing oracle at y != 0: -rho y + z sigma b
    y, a = 1.3, 0.8
    rho = -1.0 * a**2 / 2
    want = -rho * y + 0.5 * a
    assert agent_generator_f(hm, 0, 0.0, X0, np.array([y]), cp, np.array([a])) == pytest.approx(want)


@settings(max_examples=30, deadline=None)
@given(z=st.floats(-3, 3), a=st.floats(0, 2), kappa=st.floats(0.2, 3), R=st.floats(0.2, 3), s=st.floats(0.2, 2))
def test_g_holmstrom_milgrom_matches_integrand(z, a, kappa, R, s):
    m = builtin_model("holmstrom_milgrom", {"kappa": kappa, "R_A": R, "sigma": s})
    # z is the loading on X, so the Brownian loading is z * sigma
    got = agent_generator_g(m, 0, 0.0, X0, ControlPoint.constant(m, z=z), np.array([a]))
    assert got == pytest.approx(_hm_g_oracle(z, a, kappa, R, s), abs=1e-12)


def test_g_single_atom():
    R, mass = 2.0, 0.7
    js = JumpSpec(marks=((1.0,),), weights=(mass,), size=("-e",))
    m = one_agent(jumps=js, drift="0", R_A=R)
    cp = ControlPoint.constant(m, h=np.log(2.0) / R)
    got = agent_generator_g(m, 0, 0.0, X0, cp, np.array([1.0]))
    oracle = sum((1.0 - np.exp(R * h)) * w / R for h, w in [(np.log(2.0) / R, mass)])
    assert got == pytest.approx(oracle) and got == pytest.approx(-mass / R)


def test_g_overflow_names_atom():
    js = JumpSpec(marks=((1.0,),), weights=(1.0,), size=("-e",))
    m = one_agent(jumps=js, drift="0")
    with pytest.raises(ModelError, match="atom"):
        agent_generator_g(m, 0, 0.0, X0, ControlPoint.constant(m, h=800.0), np.array([1.0]))


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_g_concave_in_z(name):
    m = builtin_model(name)
    rng = np.random.default_rng(7)
    lo, hi = m.actions.bounds()
    for _ in range(10):
        cp = ControlPoint.constant(m, z=rng.normal(size=(m.n_agents, m.dim)), h=rng.normal(size=(m.n_agents, m.atoms.size)) * 0.5)
        x = rng.uniform(-1, 1, m.dim)
        a = best_response_fixed_point(m, 0.0, x, None, cp).a
        d = rng.normal(size=cp.z.shape)
        eps = 1e-2
        for i in range(m.n_agents):
            vals = [
                agent_generator_g(m, i, 0.0, x, ControlPoint(cp.z + s * eps * d, cp.h, cp.k), a)
                for s in (-1, 0, 1)
            ]
            assert (vals[0] - 2 * vals[1] + vals[2]) / eps**2 <= 1e-6


# -- best response --------------------------------------------------------


def test_best_response_holmstrom_milgrom(hm):
    br = best_response_fixed_point(hm, 0.0, X0, None, ControlPoint.constant(hm, z=0.5))
    grid = np.linspace(0.0, 2.0, 10_001)
    oracle = grid[np.argmax(_hm_g_oracle(0.5, grid))]
    assert br.a[0] == pytest.approx(0.5, abs=1e-9)
    assert abs(br.a[0] - oracle) <= 2e-4
    assert best_response_fixed_point(hm, 0.0, X0, None, ControlPoint.zeros(hm)).a[0] == pytest.approx(0.0, abs=1e-12)


def test_decoupled_game_is_per_agent_argmax(multi):
    z = np.array([[0.5, 0.1], [0.2, 0.5]])
    br = best_response_fixed_point(multi, 0.0, np.zeros(2), None, ControlPoint.constant(multi, z=z))
    gamma = 0.2
    # agent i's own action loads z_ii + gamma z_ij; the cost is a^2 / 2
    want = np.array([z[0, 0] + gamma * z[0, 1], z[1, 1] + gamma * z[1, 0]])
    np.testing.assert_allclose(br.a, want, atol=1e-9)
    # the second sweep only confirms the first
    assert br.sweeps <= 2
    # the same answer from any starting point
    again = best_response_fixed_point(multi, 0.0, np.zeros(2), None, ControlPoint.constant(multi, z=z), a0=np.array([[2.0, 0.0]]))
    np.testing.assert_allclose(again.a, want, atol=1e-9)


@settings(max_examples=15, deadline=None)
@given(z=st.lists(st.floats(-2, 2), min_size=4, max_size=4), x=st.floats(-2, 2))
def test_fixed_point_certificate(z, x):
    m = builtin_model("multi_agent_cara", {"gamma": 0.5})
    cp = ControlPoint.constant(m, z=np.reshape(z, (2, 2)))
    br = best_response_fixed_point(m, 0.0, np.array([x, -x]), None, cp, certify=True)
    assert br.converged and br.residual <= 1e-9
    assert np.all(m.actions.contains(br.a))


@settings(max_examples=15, deadline=None)
@given(z=st.floats(-2, 2), h=st.floats(-1.5, 1.5))
def test_fixed_point_certificate_with_jumps(z, h):
    m = builtin_model("capponi_frei")
    cp = ControlPoint.constant(m, z=z, h=h)
    br = best_response_fixed_point(m, 0.0, X0, None, cp, certify=True)
    assert br.residual <= 1e-9


def test_jump_intensity_matches_grid_scan(cf):
    rng = np.random.default_rng(0)
    lam = np.linspace(0.5, 2.0, 1000)
    for _ in range(5):
        z, h = rng.uniform(-2, 2), rng.uniform(-2, 2)
        cp = ControlPoint.constant(cf, z=z, h=h)
        br = best_response_fixed_point(cf, 0.0, X0, None, cp)
        acts = np.stack([np.full_like(lam, br.a[0]), lam], axis=-1)
        g = agent_generator_g(cf, 0, 0.0, np.zeros((lam.size, 1)), cp.broadcast((lam.size,)), acts)
        assert abs(br.a[1] - lam[np.argmax(g)]) <= 1e-3


# -- F / G and phi --------------------------------------------------------


def test_G_holmstrom_milgrom(hm):
    cp = ControlPoint.constant(hm, z=0.5)
    G = F_G_eval(hm, 0.0, X0, None, cp)
    grid = np.linspace(0.0, 2.0, 10_001)
    assert G[0] == pytest.approx(0.0, abs=1e-12)
    assert abs(G[0] - _hm_g_oracle(0.5, grid).max()) <= 1e-8


def test_G_zero_and_symmetric(multi):
    m = one_agent(drift="0")
    assert F_G_eval(m, 0.0, X0, None, ControlPoint.zeros(m))[0] == 0.0
    z = np.array([[0.4, 0.1], [0.1, 0.4]])
    G = F_G_eval(multi, 0.0, np.zeros(2), None, ControlPoint.constant(multi, z=z))
    assert G[0] == pytest.approx(G[1], abs=1e-14)


def test_phi_examples(hm, cf):
    assert phi_eval(hm, 0.0, X0, ControlPoint.zeros(hm)) == pytest.approx(0.0, abs=1e-14)
    assert phi_eval(hm, 0.0, X0, ControlPoint.constant(hm, z=0.5)) == pytest.approx(-0.25, abs=1e-12)
    # with h = 0 the jump term of phi vanishes: phi = rho(a*)/R - R z^2 sigma^2 / 2
    cp = ControlPoint.constant(cf, z=0.3, h=0.0)
    a = best_response_fixed_point(cf, 0.0, X0, None, cp).a
    rho = -(a[0] ** 2 / 2 + (2.0 - a[1]) ** 2 / 2)
    assert phi_eval(cf, 0.0, X0, cp) == pytest.approx(rho - 0.5 * 0.3**2, abs=1e-12)


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_objective_is_phi_plus_drift(name):
    m = builtin_model(name)
    rng = np.random.default_rng(3)
    for _ in range(5):
        x = rng.uniform(-1, 1, m.dim)
        cp = ControlPoint.constant(m, z=rng.normal(size=(m.n_agents, m.dim)), h=0.3 * rng.normal(size=(m.n_agents, m.atoms.size)), k=0.0)
        a = best_response_fixed_point(m, 0.0, x, None, cp).a
        p = rng.normal(size=m.dim)
        drift = m.state_drift(0.0, x[None], a[None])[0]
        want = phi_eval(m, 0.0, x, cp, a) + p @ drift
        assert principal_objective(m, 0.0, x, cp, p, a) == want


def test_phi_requires_cara_risk_neutral():
    m = one_agent(cara=False)
    with pytest.raises(ModelError):
        phi_eval(m, 0.0, X0, ControlPoint.zeros(m))


# -- Hamiltonian ----------------------------------------------------------


@pytest.mark.parametrize("p", [1.0, 2.0])
def test_hamiltonian_holmstrom_milgrom(hm, p):
    res = hamiltonian_sup(hm, 0.0, X0, np.array([p]))
    cf = holmstrom_milgrom_closed_form(p=p)
    z_star, a_star, H = cf["z"], cf["a"], cf["H"]
    assert res.value == pytest.approx(H, rel=1e-10)
    assert res.cp.z[0, 0] == pytest.approx(z_star, abs=1e-8)
    assert res.a[0] == pytest.approx(a_star, abs=1e-8)
    assert res.cp.k[0] == 0.0
    # brute-force oracle over z
    zs = np.linspace(-3, 3, 10_001)
    obj = p * zs - zs**2
    assert abs(res.cp.z[0, 0] - zs[np.argmax(obj)]) <= 1e-3
    assert res.value >= obj.max() - 1e-12


def test_hamiltonian_zero_gradient(hm):
    res = hamiltonian_sup(hm, 0.0, X0, np.zeros(1))
    assert res.value == pytest.approx(0.0, abs=1e-14)
    assert res.cp.z[0, 0] == pytest.approx(0.0, abs=1e-8) and res.cp.k[0] == 0.0


def test_hamiltonian_batched_matches_single(hm):
    ps = np.array([[0.0], [0.5], [1.0], [1.5]])
    batch = hamiltonian_sup(hm, 0.0, np.zeros((4, 1)), ps)
    for r in range(4):
        single = hamiltonian_sup(hm, 0.0, X0, ps[r])
        assert batch.value[r] == single.value


@pytest.mark.parametrize("name", ["holmstrom_milgrom", "capponi_frei", "multi_agent_cara"])
def test_hamiltonian_monotone_in_search_box(name):
    m = builtin_model(name)
    rng = np.random.default_rng(1)
    x = np.zeros((6, m.dim))
    p = rng.normal(size=(6, m.dim)) * 1.5
    prev = None
    for box in (0.2, 1.0, 5.0):
        s = HamiltonianSettings(z_max=box, h_max=box, k_max=box)
        val = hamiltonian_sup(m, 0.0, x, p, settings=s).value
        if prev is not None:
            assert np.all(val >= prev - 1e-12)
        prev = val


def test_hamiltonian_flags_box_edge(hm):
    res = hamiltonian_sup(hm, 0.0, X0, np.array([1.0]), settings=HamiltonianSettings(z_max=0.3))
    assert res.cp.z[0, 0] == pytest.approx(0.3)
    assert bool(res.on_box_boundary)
