"""Continuation-utility processes: forward recursion and backward LSMC solver.

Two bookkeeping modes share every helper:

``general_f``
    ``Y`` in utility units, ``dY = -F dt + Z dX^c + H dmu`` (jumps add ``+H``).
``cara_g``
    ``Y`` in certainty-equivalent (money) units,
    ``dY = -G dt + Z dX^c - H dmu`` (jumps add ``-H``).
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ModelError, RegressionError, SimulationError
from .model_core import ModelSpec
from .nash import ControlPoint, _Game, _solve_game
from .sim import PathBundle, girsanov_density

__all__ = [
    "jump_sign",
    "ForwardY",
    "BSDESolution",
    "forward_Y",
    "solve_backward_lsmc",
    "ce_utility_transform",
    "agent_value_estimate",
    "agent_value_paths",
    "discounted_agent_process",
    "martingale_drift",
    "polynomial_features",
    "export_solution_csv",
    "utility_range",
]

MODES = ("general_f", "cara_g")


def jump_sign(mode: str) -> float:
    """Sign of the ``H`` increment of ``Y`` at a realized jump."""
    if mode == "general_f":
        return 1.0
    if mode == "cara_g":
        return -1.0
    raise ValueError(f"mode must be one of {MODES}")


def _policy_at(policy, model: ModelSpec, t, x) -> ControlPoint:
    if isinstance(policy, ControlPoint):
        return policy.broadcast((x.shape[0],))
    cp = policy(t, x)
    return cp.broadcast((x.shape[0],))


def _chi_at(chi_policy, model, t, x):
    if chi_policy is None:
        return np.zeros((x.shape[0], model.n_agents))
    k = np.asarray(chi_policy(t, x), dtype=float)
    return np.broadcast_to(k, (x.shape[0], model.n_agents))


@dataclass
class ForwardY:
    Y: np.ndarray  # (P, M+1, N)
    a: np.ndarray  # (P, M, nA) best responses used in the generator
    generator: np.ndarray  # (P, M, N) F or G values
    mode: str

    @property
    def terminal(self) -> np.ndarray:
        return self.Y[:, -1]


def forward_Y(
    model: ModelSpec,
    y,
    policy,
    bundle: PathBundle,
    mode: str = "cara_g",
    *,
    tol: float = 1e-9,
) -> ForwardY:
    """Euler recursion ``Y_{k+1} = Y_k - F dt + z dX^c + sign * sum_j h_j 1{jump j}``.

    ``policy`` is a :class:`ControlPoint` (constant) or a map
    ``(t, x) -> ControlPoint`` batched over paths.  ``dX^c`` is the
    continuous part of the simulated state increment, so the generator must
    be the one matching the measure the bundle was simulated under.
    """
    sign = jump_sign(mode)
    P, M = bundle.n_paths, bundle.grid.n_steps
    N = model.n_agents
    dt = bundle.grid.dt
    Y = np.empty((P, M + 1, N))
    Y[:, 0] = np.broadcast_to(np.asarray(y, dtype=float), (P, N))
    acts = np.empty((P, M, model.n_actions))
    gen = np.empty((P, M, N))
    times = bundle.grid.nodes
    prev = None
    for k in range(M):
        t, x = times[k], bundle.X[:, k]
        cp = _policy_at(policy, model, t, x)
        cp.validate(model)
        game = _Game(model, np.full(P, t), x, Y[:, k], cp, mode)
        br = _solve_game(game, tol, 50, a0=prev)
        prev = br.a if model.n_agents > 1 else None
        acts[:, k], gen[:, k] = br.a, br.values
        inc = -br.values * dt + np.einsum("pim,pm->pi", cp.z, bundle.dXc[:, k])
        if model.atoms.size:
            inc = inc + sign * np.einsum("pij,pj->pi", cp.h, bundle.jumps[:, k].astype(float))
        Y[:, k + 1] = Y[:, k] + inc
    return ForwardY(Y, acts, gen, mode)


# --------------------------------------------------------------------------
# Regression
# --------------------------------------------------------------------------


def polynomial_features(x: np.ndarray, degree: int) -> np.ndarray:
    """Total-degree monomials of standardized ``x`` (first column constant)."""
    P, D = x.shape
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    live = sd > 1e-12 * np.maximum(1.0, np.abs(mu))
    xs = (x[:, live] - mu[live]) / sd[live]
    cols = [np.ones(P)]
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(xs.shape[1]), deg):
            cols.append(np.prod(xs[:, combo], axis=1))
    return np.stack(cols, axis=1)


class _Regressor:
    """Ridge least squares on a fixed design, reused for several targets."""

    def __init__(self, phi: np.ndarray, ridge: float):
        P, K = phi.shape
        if P < K:
            raise RegressionError(
                f"{P} paths for {K} basis functions: use a smaller basis degree or more paths"
            )
        self.phi = phi
        gram = phi.T @ phi / P
        # the intercept is left unpenalized so constants are reproduced exactly
        idx = np.arange(1, K)
        gram[idx, idx] += ridge
        try:
            self.chol = np.linalg.cholesky(gram)
        except np.linalg.LinAlgError:
            raise RegressionError("regression design is rank deficient; reduce the basis degree") from None
        self.P = P

    def fit(self, target: np.ndarray) -> np.ndarray:
        rhs = self.phi.T @ target.reshape(self.P, -1) / self.P
        coef = np.linalg.solve(self.chol.T, np.linalg.solve(self.chol, rhs))
        fitted = self.phi @ coef
        if not np.all(np.isfinite(fitted)):
            raise RegressionError("regression produced non-finite values; reduce the basis degree")
        return fitted.reshape(target.shape)


def _r2(target, fitted):
    var = np.var(target, axis=0)
    res = np.mean((target - fitted) ** 2, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(var > 0, 1.0 - res / var, 1.0)


@dataclass
class BSDESolution:
    Y: np.ndarray  # (P, M+1, N)
    Z: np.ndarray  # (P, M, N, dN)
    H: np.ndarray  # (P, M, N, J)
    a: np.ndarray  # (P, M, nA)
    r2: np.ndarray  # (M, N) R^2 of the conditional-expectation regression
    mode: str
    y0_stderr: np.ndarray  # (N,)
    meta: dict = field(default_factory=dict)

    @property
    def y0(self) -> np.ndarray:
        return self.Y[0, 0]


def utility_range(model: ModelSpec, big: float = 1e6) -> tuple[np.ndarray, np.ndarray]:
    """Closure of the range of each agent's ``U_A`` (probed far out)."""
    with np.errstate(over="ignore", invalid="ignore"):
        lo = np.array([model.utility(i, np.array(-big)) for i in range(model.n_agents)], dtype=float)
        hi = np.array([model.utility(i, np.array(big)) for i in range(model.n_agents)], dtype=float)
    lo = np.where(np.isnan(lo), -np.inf, lo)
    hi = np.where(np.isnan(hi), np.inf, hi)
    return lo, hi


def solve_backward_lsmc(
    model: ModelSpec,
    terminal,
    chi_policy,
    bundle: PathBundle,
    degree: int = 2,
    mode: str = "cara_g",
    *,
    ridge: float = 1e-8,
    tol: float = 1e-9,
    min_jumps: int = 20,
) -> BSDESolution:
    """Least-squares Monte Carlo for the agents' BSDE on reference-measure paths.

    Per step: ``E_k[Y_{k+1}]`` by regression on polynomial features of
    ``X_k``; ``Z Sigma`` by regressing ``(Y_{k+1} - E_k Y_{k+1}) dW / dt``;
    ``H_j`` by regressing ``(Y_{k+1} - E_k Y_{k+1})(1_j - p_j) / (p_j (1 - p_j))``
    (the conditional jump/no-jump gap), falling back to a constant fit when
    atom ``j`` fired fewer than ``min_jumps`` times in the step.  The
    generator is evaluated at the best response of the regressed point.
    """
    if degree < 1:
        raise ValueError("basis degree must be at least 1")
    if bundle.policy != "reference":
        raise SimulationError("the backward solver needs paths simulated under the reference measure")
    sign = jump_sign(mode)
    P, M = bundle.n_paths, bundle.grid.n_steps
    N, dN, J = model.n_agents, model.dim, model.atoms.size
    dt = bundle.grid.dt
    w = model.atoms.weights
    xi = terminal(bundle) if callable(terminal) else terminal
    xi = np.broadcast_to(np.asarray(xi, dtype=float).reshape(P, -1), (P, N))
    if not np.all(np.isfinite(xi)):
        bad = int(np.argmin(np.all(np.isfinite(xi), axis=1)))
        raise SimulationError(f"non-finite terminal value on path {int(bundle.path_ids[bad])}")

    # regressed utilities can leave the range of U_A; the generator only
    # sees values in its closure
    urange = utility_range(model) if mode == "general_f" else None
    Y = np.empty((P, M + 1, N))
    Y[:, M] = xi
    pathwise = xi.copy()
    Z = np.zeros((P, M, N, dN))
    H = np.zeros((P, M, N, J))
    acts = np.zeros((P, M, model.n_actions))
    r2 = np.ones((M, N))
    times = bundle.grid.nodes
    dWref = bundle.dW_reference
    y0_se = np.zeros(N)
    prev = None
    for k in range(M - 1, -1, -1):
        t, x = times[k], bundle.X[:, k]
        nxt = Y[:, k + 1]
        phi = polynomial_features(x, degree) if k > 0 else np.ones((P, 1))
        reg = _Regressor(phi, ridge)
        cond = reg.fit(nxt)
        r2[k] = _r2(nxt, cond)
        resid = nxt - cond
        zs = reg.fit(resid[:, :, None] * dWref[:, k, None, :] / dt)  # (P, N, n)
        sig = model.sigma_matrix(t, x)
        Z[:, k] = np.einsum("pin,pnm->pim", zs, np.linalg.pinv(sig))
        if J:
            for j in range(J):
                pj = w[j] * dt
                if pj <= 0:
                    continue
                ind = bundle.jumps[:, k, j]
                target = resid * ((ind - pj) / (pj * (1.0 - pj)))[:, None]
                hits = int(ind.sum())
                if hits == 0:
                    continue
                if hits < min_jumps or k == 0:
                    gap = np.broadcast_to(target.mean(axis=0), (P, N))
                else:
                    gap = reg.fit(target)
                H[:, k, :, j] = sign * gap
        chi = _chi_at(chi_policy, model, t, x)
        cp = ControlPoint(Z[:, k], H[:, k], chi)
        y_gen = cond if urange is None else np.clip(cond, urange[0], urange[1])
        game = _Game(model, np.full(P, t), x, y_gen, cp, mode)
        br = _solve_game(game, tol, 50, a0=prev)
        prev = br.a if N > 1 else None
        acts[:, k] = br.a
        jump_comp = np.zeros((P, N))
        if J:
            mask = np.stack([np.any(model.jump_size(j, t, x) != 0, axis=-1) for j in range(J)], axis=-1)
            jump_comp = np.einsum("pij,j,pj->pi", H[:, k], w, mask.astype(float)) * dt
        step = br.values * dt - sign * jump_comp
        pathwise = pathwise + step
        if k == 0:
            y0 = (nxt + step).mean(axis=0)
            # regressed values understate the Monte Carlo spread; the stderr
            # comes from the pathwise sum xi + sum of generator steps
            y0_se = pathwise.std(axis=0, ddof=1) / np.sqrt(P) if P > 1 else np.zeros(N)
            Y[:, 0] = y0
        else:
            Y[:, k] = cond + step
    return BSDESolution(Y, Z, H, acts, r2, mode, y0_se)


# --------------------------------------------------------------------------
# Utility / certainty equivalent
# --------------------------------------------------------------------------


def ce_utility_transform(Y, R_A, direction: str) -> np.ndarray:
    """Componentwise ``U_A(y) = -exp(-R_A y)`` (``to_utility``) or its inverse (``to_ce``).

    The last axis of ``Y`` indexes agents; ``R_A`` broadcasts against it.
    """
    Y = np.asarray(Y, dtype=float)
    R = np.asarray(R_A, dtype=float)
    if np.any(R <= 0):
        raise ValueError("risk aversion must be positive")
    if direction == "to_utility":
        return -np.exp(-R * Y)
    if direction == "to_ce":
        if np.any(Y >= 0):
            raise ValueError("certainty equivalent needs strictly negative utilities")
        return -np.log(-Y) / R
    raise ValueError("direction must be 'to_utility' or 'to_ce'")


def _discount_factors(model, bundle, actions, chi):
    """Left-endpoint ``exp(-sum rho dt)`` at every node, ``(P, M+1, N)``."""
    P, M = bundle.n_paths, bundle.grid.n_steps
    N = model.n_agents
    dt = bundle.grid.dt
    times = bundle.grid.nodes
    logd = np.zeros((P, M + 1, N))
    flows = np.zeros((P, M, N))
    for k in range(M):
        t, x, a = times[k], bundle.X[:, k], actions[:, k]
        for i in range(N):
            rho = model.discount(i, t, x, chi[:, k], a)
            logd[:, k + 1, i] = logd[:, k, i] - rho * dt
            flows[:, k, i] = model.flow_utility(i, chi[:, k]) - model.cost(i, t, x, a)
    return np.exp(logd), flows


def _actions_on(model, bundle, policy):
    if policy is not None:
        P, M = bundle.n_paths, bundle.grid.n_steps
        times = bundle.grid.nodes
        return np.stack(
            [np.broadcast_to(np.asarray(policy(times[k], bundle.X[:, k]), float), (P, model.n_actions))
             for k in range(M)],
            axis=1,
        )
    if bundle.actions is None:
        raise SimulationError("bundle carries no actions; pass the response policy")
    return bundle.actions


def _chi_path(model, bundle, chi_policy):
    P, M = bundle.n_paths, bundle.grid.n_steps
    times = bundle.grid.nodes
    return np.stack([_chi_at(chi_policy, model, times[k], bundle.X[:, k]) for k in range(M)], axis=1)


def agent_value_paths(model: ModelSpec, xi, chi_policy, bundle: PathBundle, policy=None) -> np.ndarray:
    """Per-path samples ``(P, N)`` behind :func:`agent_value_estimate`."""
    xi = xi(bundle) if callable(xi) else xi
    P = bundle.n_paths
    N = model.n_agents
    xi = np.broadcast_to(np.asarray(xi, dtype=float).reshape(P, -1), (P, N))
    finite = np.all(np.isfinite(xi), axis=1)
    if not np.all(finite):
        bad = int(np.argmin(finite))
        raise SimulationError(f"non-finite payment on path {int(bundle.path_ids[bad])}")
    acts = _actions_on(model, bundle, policy)
    chi = _chi_path(model, bundle, chi_policy)
    disc, flows = _discount_factors(model, bundle, acts, chi)
    dt = bundle.grid.dt
    util = np.stack([model.utility(i, xi[:, i]) for i in range(N)], axis=-1)
    vals = disc[:, -1] * util + np.sum(disc[:, :-1] * flows, axis=1) * dt
    if policy is not None:
        weight = girsanov_density(model, bundle, policy)[:, -1] / bundle.density[:, -1]
        vals = vals * weight[:, None]
    return vals


def agent_value_estimate(model: ModelSpec, xi, chi_policy, bundle: PathBundle, policy=None):
    """Monte Carlo of ``e^{-int rho} U_A(xi) + int e^{-int rho} (u_A - c) dt`` per agent.

    Without ``policy`` the bundle must have been simulated under the
    response policy (its stored actions are used).  With ``policy`` the
    actions are recomputed along the paths and the estimate is reweighted by
    the policy's Girsanov density.  Returns ``(values (N,), stderr (N,))``.
    """
    vals = agent_value_paths(model, xi, chi_policy, bundle, policy)
    P = vals.shape[0]
    # centring on the first path keeps constant samples exact
    spread = vals - vals[0]
    mean = vals[0] + spread.mean(axis=0)
    se = spread.std(axis=0, ddof=1) / np.sqrt(P) if P > 1 else np.zeros(model.n_agents)
    return mean, se


def discounted_agent_process(model: ModelSpec, fy: ForwardY, bundle: PathBundle, chi_policy=None, policy=None):
    """``R_t = e^{-int_0^t rho} U(Y_t) + int_0^t e^{-int rho} (u_A - c) ds`` along the bundle's actions.

    ``U`` is ``U_A`` in ``cara_g`` mode and the identity in ``general_f``
    mode.  Along the Nash action this is a martingale; along a deviation of
    one agent it is a supermartingale for that agent.
    """
    acts = _actions_on(model, bundle, policy)
    chi = _chi_path(model, bundle, chi_policy)
    disc, flows = _discount_factors(model, bundle, acts, chi)
    N = model.n_agents
    if fy.mode == "cara_g":
        util = np.stack([model.utility(i, fy.Y[:, :, i]) for i in range(N)], axis=-1)
    else:
        util = fy.Y
    dt = bundle.grid.dt
    running = np.concatenate(
        [np.zeros_like(flows[:, :1]), np.cumsum(disc[:, :-1] * flows * dt, axis=1)], axis=1
    )
    return disc * util + running


def martingale_drift(R: np.ndarray):
    """Per-step sample mean of ``R_{k+1} - R_k`` and its standard error, ``(M, N)`` each."""
    inc = np.diff(R, axis=1)
    P = inc.shape[0]
    return inc.mean(axis=0), inc.std(axis=0, ddof=1) / np.sqrt(P)


def export_solution_csv(sol: BSDESolution, path) -> None:
    """Columns: path, node, Y_i..., |Z_i|..., r2_i... (R^2 of the step's regression)."""
    P, M1, N = sol.Y.shape
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(
            ["path", "node"] + [f"Y{i}" for i in range(N)] + [f"Znorm{i}" for i in range(N)]
            + [f"r2_{i}" for i in range(N)]
        )
        for p in range(P):
            for k in range(M1):
                zn = np.linalg.norm(sol.Z[p, k], axis=-1) if k < M1 - 1 else np.zeros(N)
                r2 = sol.r2[k] if k < M1 - 1 else np.ones(N)
                wr.writerow([p, k] + [repr(float(v)) for v in sol.Y[p, k]]
                            + [repr(float(v)) for v in zn] + [repr(float(v)) for v in r2])
