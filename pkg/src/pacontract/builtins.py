"""Built-in problem instances.

``holmstrom_milgrom``
    One CARA agent, ``dX = a dt + sigma dW^a``, quadratic effort cost
    ``kappa a^2 / 2`` entered as ``rho(a) = -R_A kappa a^2 / 2``; the
    principal keeps ``L(x) = x``.
``capponi_frei``
    One CARA agent controlling drift ``u`` and the intensity ``lambda`` of
    downward compound-Poisson shocks of size ``loss``.  Lowering the
    intensity below ``lam_max`` costs ``kappa_lam (lam_max - lambda)^2 / 2``.
``market_maker``
    Simplified market-making desk: state ``(S, N^a, N^b)`` with ``S`` a
    Brownian mid-price and ``N^a, N^b`` fill counters whose intensities
    ``A exp(-kappa delta)`` are controlled by the quoted spreads ``delta``.
    The spread revenue enters through its compensator
    (``rho = R_A sum delta A exp(-kappa delta)``), the inventory term on
    ``dS`` is dropped, and the principal earns ``fee`` per fill.
``multi_agent_cara``
    ``N`` CARA agents, ``dX^i = (a^i + gamma sum_{j != i} a^j) dt + sigma dW^i``
    with quadratic costs; each agent's best response only involves its own
    action, so the game is decoupled.
"""

from __future__ import annotations

from typing import Mapping

from .errors import ModelError
from .model_core import ActionSpace, AgentSpec, JumpSpec, ModelSpec, PrincipalSpec

__all__ = ["BUILTIN_NAMES", "builtin_model", "builtin_defaults", "holmstrom_milgrom_closed_form"]

_DEFAULTS: dict[str, dict[str, float]] = {
    "holmstrom_milgrom": {
        "kappa": 1.0, "R_A": 1.0, "sigma": 1.0, "T": 1.0, "X0": 0.0, "R0": -1.0,
        "a_max": 2.0, "box": 4.0,
    },
    "capponi_frei": {
        "kappa": 1.0, "kappa_lam": 1.0, "R_A": 1.0, "sigma": 1.0, "loss": 1.0,
        "lam_min": 0.5, "lam_max": 2.0, "u_max": 2.0, "T": 1.0, "X0": 0.0, "R0": -1.0,
        "box": 4.0,
    },
    "market_maker": {
        "sigma": 1.0, "A": 1.0, "kappa": 1.0, "R_A": 1.0, "fee": 0.1, "delta_max": 2.0,
        "T": 1.0, "R0": -1.0, "box": 4.0,
    },
    "multi_agent_cara": {
        "N": 2, "kappa": 1.0, "R_A": 1.0, "sigma": 1.0, "gamma": 0.2, "T": 1.0,
        "X0": 0.0, "R0": -1.0, "a_max": 2.0, "box": 4.0,
    },
}

BUILTIN_NAMES = tuple(_DEFAULTS)

_POSITIVE = ("kappa", "kappa_lam", "R_A", "sigma", "T", "A", "loss", "lam_min")


def builtin_defaults(name: str) -> dict[str, float]:
    if name not in _DEFAULTS:
        raise ModelError(f"unknown builtin model {name!r}; supported: {', '.join(BUILTIN_NAMES)}")
    return dict(_DEFAULTS[name])


def _params(name: str, params: Mapping | None) -> dict[str, float]:
    p = builtin_defaults(name)
    params = dict(params or {})
    unknown = set(params) - set(p)
    if unknown:
        raise ModelError(f"unknown parameters for {name}: {sorted(unknown)}; known: {sorted(p)}")
    p.update({k: float(v) for k, v in params.items()})
    for key in _POSITIVE:
        if key in p and not p[key] > 0:
            raise ModelError(f"parameter {key} of {name} must be positive, got {p[key]}")
    return p


def _box(x0, half):
    return (tuple(v - half for v in x0), tuple(v + half for v in x0))


def _holmstrom_milgrom(p):
    x0 = (p["X0"],)
    return ModelSpec(
        name="holmstrom_milgrom",
        n_agents=1, state_dim=1, noise_dim=1,
        sigma=(("sigma",),),
        drift=("a0/sigma",),
        jumps=(JumpSpec(),),
        agents=(AgentSpec.cara(p["R_A"], discount="-R_A*kappa*a0**2/2", reservation=p["R0"]),),
        principal=PrincipalSpec(liquidation="x0", flow_disutility="k0"),
        actions=ActionSpace(((0.0,),), ((p["a_max"],),)),
        x0=x0, horizon=p["T"], state_box=_box(x0, p["box"]),
        params={k: v for k, v in p.items() if k not in ("T", "X0", "R0", "a_max", "box")},
    )


def _capponi_frei(p):
    if not p["lam_min"] < p["lam_max"]:
        raise ModelError("capponi_frei needs lam_min < lam_max")
    x0 = (p["X0"],)
    return ModelSpec(
        name="capponi_frei",
        n_agents=1, state_dim=1, noise_dim=1,
        sigma=(("sigma",),),
        drift=("a0/sigma",),
        jumps=(JumpSpec(marks=((p["loss"],),), weights=(1.0,), size=("-e",), intensity="a1"),),
        agents=(
            AgentSpec.cara(
                p["R_A"],
                discount="-R_A*(kappa*a0**2/2 + kappa_lam*(lam_max - a1)**2/2)",
                reservation=p["R0"],
            ),
        ),
        principal=PrincipalSpec(liquidation="x0", flow_disutility="k0"),
        actions=ActionSpace(((0.0, p["lam_min"]),), ((p["u_max"], p["lam_max"]),)),
        x0=x0, horizon=p["T"], state_box=_box(x0, p["box"]),
        params={k: p[k] for k in ("kappa", "kappa_lam", "R_A", "sigma", "lam_max")},
    )


def _market_maker(p):
    x0 = (0.0, 0.0, 0.0)
    fill = "A*exp(-kappa*a0)"
    fill_b = "A*exp(-kappa*a1)"
    return ModelSpec(
        name="market_maker",
        n_agents=1, state_dim=3, noise_dim=1,
        sigma=(("sigma",), ("0",), ("0",)),
        drift=("0",),
        jumps=(
            JumpSpec(
                marks=((1.0, 0.0), (0.0, 1.0)),
                weights=(1.0, 1.0),
                size=("0", "e0", "e1"),
                intensity=f"e0*{fill} + e1*{fill_b}",
            ),
        ),
        agents=(
            AgentSpec.cara(
                p["R_A"], discount=f"R_A*(a0*{fill} + a1*{fill_b})", reservation=p["R0"]
            ),
        ),
        principal=PrincipalSpec(liquidation="fee*(x1 + x2)", flow_disutility="k0"),
        actions=ActionSpace(((0.0, 0.0),), ((p["delta_max"], p["delta_max"]),)),
        x0=x0, horizon=p["T"], state_box=_box(x0, p["box"]),
        params={k: p[k] for k in ("sigma", "A", "kappa", "R_A", "fee")},
    )


def _multi_agent_cara(p):
    N = int(p["N"])
    if N < 1 or N != p["N"]:
        raise ModelError("multi_agent_cara needs a positive integer N")
    drift = []
    for i in range(N):
        others = " + ".join(f"a{j}" for j in range(N) if j != i)
        drift.append(f"(a{i} + gamma*({others}))/sigma" if others else f"a{i}/sigma")
    sigma = tuple(tuple("sigma" if r == c else "0" for c in range(N)) for r in range(N))
    x0 = (p["X0"],) * N
    return ModelSpec(
        name="multi_agent_cara",
        n_agents=N, state_dim=1, noise_dim=N,
        sigma=sigma,
        drift=tuple(drift),
        jumps=tuple(JumpSpec() for _ in range(N)),
        agents=tuple(
            AgentSpec.cara(p["R_A"], discount=f"-R_A*kappa*a{i}**2/2", reservation=p["R0"])
            for i in range(N)
        ),
        principal=PrincipalSpec(
            liquidation=" + ".join(f"x{i}" for i in range(N)),
            flow_disutility=" + ".join(f"k{i}" for i in range(N)),
        ),
        actions=ActionSpace(tuple((0.0,) for _ in range(N)), tuple((p["a_max"],) for _ in range(N))),
        x0=x0, horizon=p["T"], state_box=_box(x0, p["box"]),
        params={k: p[k] for k in ("kappa", "R_A", "sigma", "gamma")},
    )


_BUILDERS = {
    "holmstrom_milgrom": _holmstrom_milgrom,
    "capponi_frei": _capponi_frei,
    "market_maker": _market_maker,
    "multi_agent_cara": _multi_agent_cara,
}


def builtin_model(name: str, params: Mapping | None = None) -> ModelSpec:
    """Build a named instance; missing parameters take the documented defaults."""
    p = _params(name, params)
    return _BUILDERS[name](p)


def holmstrom_milgrom_closed_form(kappa=1.0, R_A=1.0, sigma=1.0, p=1.0):
    """Optimal loading, action and Hamiltonian for the linear-quadratic desk.

    ``z* = p / (1 + kappa R_A sigma^2)``, ``a* = z*/kappa`` (before box
    clipping) and ``H = p^2 / (2 kappa (1 + kappa R_A sigma^2))``.
    """
    denom = 1.0 + kappa * R_A * sigma**2
    z = p / denom
    return {"z": z, "a": z / kappa, "H": p * p / (2.0 * kappa * denom)}
