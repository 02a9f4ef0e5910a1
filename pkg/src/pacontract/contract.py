"""Optimal contract synthesis and Monte Carlo verification.

The contract paid to agent ``i`` is the terminal value of the forward
certainty-equivalent recursion

    xi^i = y0^i + sum_k [-G^i dt + z^i . dX^c - h^i . dN]

driven by the feedback controls ``(z*, h*, chi*)`` along the realized
path.  It is a functional of the output path only, so it can be
re-evaluated on paths simulated under any deviation.
"""

from __future__ import annotations

import csv
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bsde import agent_value_paths, forward_Y
from .errors import ModelError, SimulationError
from .model_core import ModelSpec
from .sim import PathBundle, TimeGrid, simulate_paths

__all__ = [
    "ContractOutcome",
    "Deviation",
    "DeviationResult",
    "DeviationReport",
    "synthesize_contract",
    "default_deviations",
    "verify_incentive_compatibility",
    "verify_participation",
    "principal_value",
    "export_xi_csv",
]


@dataclass
class ContractOutcome:
    """Per-path payments of a synthesized contract and their value estimates."""

    model: ModelSpec
    policy: object
    y0: np.ndarray  # (N,)
    bundle: PathBundle
    xi: np.ndarray  # (P, N) terminal payments
    chi: np.ndarray  # (P, M, N) flow payments
    agent_value: np.ndarray  # (N,)
    agent_stderr: np.ndarray  # (N,)
    reservation_ok: np.ndarray  # (N,) bool
    principal_value: float
    principal_stderr: float
    provenance: str = ""
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "model": self.model.name,
            "y0": self.y0.tolist(),
            "n_paths": int(self.bundle.n_paths),
            "n_steps": int(self.bundle.grid.n_steps),
            "seed": int(self.bundle.seed),
            "agent_value": self.agent_value.tolist(),
            "agent_stderr": self.agent_stderr.tolist(),
            "reservation": _reservations(self.model).tolist(),
            "reservation_ok": [bool(v) for v in self.reservation_ok],
            "principal_value": float(self.principal_value),
            "principal_stderr": float(self.principal_stderr),
            "xi_mean": self.xi.mean(axis=0).tolist(),
            "provenance": self.provenance,
            "warnings": list(self.warnings),
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)


def export_xi_csv(contract: ContractOutcome, path) -> None:
    """Columns: path, xi_0..xi_{N-1}."""
    N = contract.xi.shape[1]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["path"] + [f"xi_{i}" for i in range(N)])
        for pid, row in zip(contract.bundle.path_ids, contract.xi):
            wr.writerow([int(pid)] + [repr(float(v)) for v in row])


def _reservations(model: ModelSpec) -> np.ndarray:
    return np.array([float(ag.reservation) for ag in model.agents])


def _provenance(policy) -> str:
    surface = getattr(policy, "surface", None)
    if surface is not None and hasattr(surface, "fingerprint"):
        return surface.fingerprint() or ""
    return ""


def _chi_along(model, policy, bundle) -> np.ndarray:
    P, M = bundle.n_paths, bundle.grid.n_steps
    times = bundle.grid.nodes
    out = np.empty((P, M, model.n_agents))
    for k in range(M):
        cp = policy(times[k], bundle.X[:, k]).broadcast((P,))
        out[:, k] = cp.k
    return out


def _payments(model, policy, y0, bundle):
    """Terminal payments through the shared forward recursion (cara_g mode)."""
    fy = forward_Y(model, y0, policy, bundle, "cara_g")
    return fy.terminal.copy(), _chi_along(model, policy, bundle)


def _chi_policy(policy):
    def chi(t, x):
        return policy(t, x).k

    return chi


def _boundedness_scan(model, policy, bundle, limit: float) -> list[str]:
    """Warn when controls along the paths reach the size of the search box."""
    notes = []
    times = bundle.grid.nodes
    big = 0.0
    for k in range(bundle.grid.n_steps):
        cp = policy(times[k], bundle.X[:, k])
        big = max(big, float(np.max(np.abs(cp.z), initial=0.0)), float(np.max(np.abs(cp.h), initial=0.0)))
    if big >= 0.999 * limit:
        notes.append(f"controls reach {big:.3g} along the paths, at the search box limit {limit:.3g}")
    for msg in notes:
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
    return notes


def _principal_samples(model, xi, chi, bundle) -> np.ndarray:
    dt = bundle.grid.dt
    times = bundle.grid.nodes
    P, M = bundle.n_paths, bundle.grid.n_steps
    logd = np.zeros(P)
    flow = np.zeros(P)
    for k in range(M):
        r = np.broadcast_to(model.principal_discount(times[k], bundle.X[:, k]), (P,))
        flow = flow + np.exp(logd) * model.principal_flow(chi[:, k]) * dt
        logd = logd - r * dt
    terminal = model.principal_utility(model.liquidation(bundle.X[:, -1]) - xi.sum(axis=1))
    return np.exp(logd) * terminal - flow


def _mean_se(vals: np.ndarray):
    P = vals.shape[0]
    mean = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / np.sqrt(P) if P > 1 else np.zeros_like(mean)
    return mean, se


def synthesize_contract(
    model: ModelSpec,
    policy,
    y0=None,
    bundle: PathBundle | None = None,
    *,
    n_paths: int = 2000,
    n_steps: int = 50,
    seed: int = 0,
    workers: int = 1,
    search_limit: float | None = None,
) -> ContractOutcome:
    """Pay ``xi`` from the feedback controls along paths of the recommended action.

    ``policy`` maps ``(t, x)`` to the paid :class:`ControlPoint` and has an
    ``actions(t, x)`` method giving the recommended joint action (a
    :class:`FeedbackPolicy` does both).  ``y0`` defaults to the reservation
    certainty equivalents.  Without ``bundle`` paths are simulated under the
    recommended action.
    """
    if not model.is_cara:
        raise ModelError("contract synthesis uses the certainty-equivalent recursion and needs CARA agents")
    y0 = model.reservation_ce() if y0 is None else np.asarray(y0, dtype=float)
    y0 = np.broadcast_to(y0, (model.n_agents,)).astype(float)
    if bundle is None:
        grid = TimeGrid(model.horizon, n_steps)
        bundle = simulate_paths(model, policy.actions, grid, n_paths, seed, workers=workers)
    elif bundle.actions is None:
        raise SimulationError("the bundle must be simulated under the recommended action")
    xi, chi = _payments(model, policy, y0, bundle)
    vals = agent_value_paths(model, xi, _chi_policy(policy), bundle)
    v, se = _mean_se(vals)
    R0 = _reservations(model)
    pv, pse = _mean_se(_principal_samples(model, xi, chi, bundle))
    if search_limit is None:
        s = getattr(getattr(getattr(policy, "surface", None), "settings", None), "hamiltonian", None)
        search_limit = min(s.z_max, s.h_max) if s is not None else np.inf
    notes = _boundedness_scan(model, policy, bundle, search_limit)
    return ContractOutcome(
        model=model, policy=policy, y0=y0, bundle=bundle, xi=xi, chi=chi,
        agent_value=v, agent_stderr=se, reservation_ok=v - R0 >= -3.0 * se,
        principal_value=float(pv), principal_stderr=float(pse),
        provenance=_provenance(policy), warnings=notes,
    )


# --------------------------------------------------------------------------
# Deviations
# --------------------------------------------------------------------------


@dataclass
class Deviation:
    """Agent ``agent`` plays ``action`` (a constant of its own action size or a
    feedback ``(t, x) -> (P, size)``); the others keep the recommended action."""

    agent: int
    action: object
    description: str = ""

    def label(self) -> str:
        if self.description:
            return self.description
        if callable(self.action):
            return f"agent {self.agent}: {self.action!r}"
        return f"agent {self.agent}: a = {np.asarray(self.action, float).tolist()}"


@dataclass
class DeviationResult:
    description: str
    agent: int
    value: float
    stderr: float
    gain: float
    gain_stderr: float


@dataclass
class DeviationReport:
    equilibrium_value: np.ndarray  # (N,)
    equilibrium_stderr: np.ndarray
    results: list[DeviationResult]
    passed: bool
    n_paths: int
    seed: int
    threshold: float = 3.0

    def worst(self) -> DeviationResult:
        return max(self.results, key=lambda r: r.gain - self.threshold * r.gain_stderr)

    def to_dict(self) -> dict:
        return {
            "passed": bool(self.passed),
            "n_paths": int(self.n_paths),
            "seed": int(self.seed),
            "threshold_stderr": self.threshold,
            "equilibrium_value": self.equilibrium_value.tolist(),
            "equilibrium_stderr": self.equilibrium_stderr.tolist(),
            "deviations": [vars(r) for r in self.results],
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["description", "agent", "value", "stderr", "gain", "gain_stderr"])
            for r in self.results:
                wr.writerow([r.description, r.agent] + [repr(float(v)) for v in
                                                       (r.value, r.stderr, r.gain, r.gain_stderr)])


def default_deviations(model: ModelSpec, policy=None, n: int = 9) -> list[Deviation]:
    """Constant actions on an ``n``-point grid per action coordinate, plus zero.

    Coordinates not on the grid sit at the recommended action at the
    initial state (at the box center without a policy).
    """
    lo, hi = model.actions.bounds()
    if policy is not None:
        base = np.asarray(policy.actions(0.0, np.asarray(model.x0, float)[None]), float).reshape(-1)
    else:
        base = model.actions.center()
    out = []
    for i in range(model.n_agents):
        sl = model.actions.agent_slice(i)
        seen = set()
        for m in range(sl.start, sl.stop):
            for v in np.linspace(lo[m], hi[m], n):
                a = base[sl].copy()
                a[m - sl.start] = v
                key = tuple(np.round(a, 12))
                if key not in seen:
                    seen.add(key)
                    out.append(Deviation(i, a))
        zero = np.clip(np.zeros(sl.stop - sl.start), lo[sl], hi[sl])
        if tuple(np.round(zero, 12)) not in seen:
            out.append(Deviation(i, zero, f"agent {i}: zero action"))
    return out


def _check_deviations(model: ModelSpec, deviations) -> list[Deviation]:
    if deviations is None:
        raise ValueError("deviation list is required")
    deviations = list(deviations)
    if not deviations:
        raise ValueError("empty deviation list: nothing to verify")
    lo, hi = model.actions.bounds()
    out = []
    for idx, d in enumerate(deviations):
        if not isinstance(d, Deviation):
            d = Deviation(*d) if isinstance(d, (tuple, list)) else None
            if d is None:
                raise ValueError(f"deviation {idx}: expected Deviation or (agent, action)")
        if not 0 <= d.agent < model.n_agents:
            raise ValueError(f"deviation {idx}: agent index {d.agent} out of range")
        sl = model.actions.agent_slice(d.agent)
        if not callable(d.action):
            a = np.atleast_1d(np.asarray(d.action, dtype=float))
            if a.shape != (sl.stop - sl.start,):
                raise ValueError(f"deviation {idx}: action must have {sl.stop - sl.start} entries")
            if np.any(a < lo[sl] - 1e-12) or np.any(a > hi[sl] + 1e-12):
                raise ValueError(f"deviation {idx}: action {a.tolist()} is outside the action space")
            d = Deviation(d.agent, a, d.description)
        out.append(d)
    return out


def _joint_policy(model, policy, dev: Deviation):
    sl = model.actions.agent_slice(dev.agent)

    def joint(t, x):
        x = np.atleast_2d(x)
        P = x.shape[0]
        own = dev.action(t, x) if callable(dev.action) else dev.action
        own = np.broadcast_to(np.asarray(own, float), (P, sl.stop - sl.start))
        if model.n_agents == 1:
            return own.copy()
        a = np.asarray(policy.actions(t, x), float).reshape(P, model.n_actions).copy()
        a[:, sl] = own
        return a

    joint.__name__ = dev.label()
    return joint


def verify_incentive_compatibility(
    model: ModelSpec,
    contract: ContractOutcome,
    deviations=None,
    n_paths: int | None = None,
    seed: int | None = None,
    *,
    threshold: float = 3.0,
    rtol: float = 1e-9,
    workers: int = 1,
) -> DeviationReport:
    """Monte Carlo test of unilateral deviations from the recommended action.

    Every deviation re-simulates the output with the same seed (common
    random numbers), re-evaluates the contract on the new paths and
    compares the deviating agent's value with the equilibrium value path
    by path.  The verdict fails when some gain exceeds ``threshold``
    combined standard errors plus a rounding floor ``rtol * |value|``.
    """
    devs = _check_deviations(model, deviations)
    policy = contract.policy
    grid = contract.bundle.grid
    n_paths = contract.bundle.n_paths if n_paths is None else int(n_paths)
    seed = contract.bundle.seed if seed is None else int(seed)
    x0 = contract.bundle.X[0, 0]
    if n_paths == contract.bundle.n_paths and seed == contract.bundle.seed:
        eq_bundle, xi = contract.bundle, contract.xi
    else:
        eq_bundle = simulate_paths(model, policy.actions, grid, n_paths, seed, x0=x0, workers=workers)
        xi, _ = _payments(model, policy, contract.y0, eq_bundle)
    chi_pol = _chi_policy(policy)
    eq_vals = agent_value_paths(model, xi, chi_pol, eq_bundle)
    eq_mean, eq_se = _mean_se(eq_vals)

    def run(dev: Deviation) -> DeviationResult:
        joint = _joint_policy(model, policy, dev)
        try:
            b = simulate_paths(model, joint, grid, n_paths, seed, x0=x0)
        except SimulationError as exc:
            raise ValueError(f"deviation {dev.label()!r}: {exc}") from exc
        xi_d, _ = _payments(model, policy, contract.y0, b)
        vals = agent_value_paths(model, xi_d, chi_pol, b)[:, dev.agent]
        diff = vals - eq_vals[:, dev.agent]
        v, s = _mean_se(vals)
        g, gs = _mean_se(diff)
        return DeviationResult(dev.label(), dev.agent, float(v), float(s), float(g), float(gs))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run, devs))
    else:
        results = [run(d) for d in devs]
    eq_rows = [
        DeviationResult(f"agent {i}: recommended action", i, float(eq_mean[i]), float(eq_se[i]), 0.0, 0.0)
        for i in range(model.n_agents)
    ]
    results = eq_rows + results
    passed = all(
        r.gain <= threshold * r.gain_stderr + rtol * max(abs(eq_mean[r.agent]), 1.0) for r in results
    )
    return DeviationReport(eq_mean, eq_se, results, passed, n_paths, seed, threshold)


def verify_participation(contract: ContractOutcome, R0=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-agent flags ``value - R0 >= -3 stderr`` and the margins ``value - R0``."""
    R0 = _reservations(contract.model) if R0 is None else np.asarray(R0, dtype=float)
    margin = contract.agent_value - np.broadcast_to(R0, contract.agent_value.shape)
    return margin >= -3.0 * contract.agent_stderr, margin


def principal_value(model: ModelSpec, contract: ContractOutcome, bundle: PathBundle | None = None):
    """``E[e^{-int r} U_P(L(X_T) - sum xi) - int e^{-int r} u_P(chi) dt]`` and its stderr.

    With a ``bundle`` other than the contract's own, the contract is
    re-evaluated on those paths (they must follow the recommended action).
    """
    if bundle is None or bundle is contract.bundle:
        xi, chi, bundle = contract.xi, contract.chi, contract.bundle
    else:
        xi, chi = _payments(model, contract.policy, contract.y0, bundle)
    mean, se = _mean_se(_principal_samples(model, xi, chi, bundle))
    return float(mean), float(se)
