"""Agent generators, Nash best responses and the principal's Hamiltonian.

Batching convention: every function accepts a leading batch dimension on
``x`` (``(B, dN)``), on the control point (``z: (B, N, dN)``,
``h: (B, N, J)``, ``k: (B, N)``) and on ``y`` (``(B, N)``).  ``t`` is a
scalar or ``(B,)``.  Unbatched inputs are accepted and give unbatched
outputs.  ``J`` counts the non-inert jump atoms of all agents (see
:attr:`ModelSpec.atoms`); column ``j`` of ``h`` is the compensation paid
to each agent when atom ``j`` fires.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConvergenceError, ModelError
from .model_core import ModelSpec
from .optimize import grid_scan, maximize, newton_polish

__all__ = [
    "ControlPoint",
    "BestResponse",
    "HamiltonianSettings",
    "HamiltonianResult",
    "agent_generator_f",
    "agent_generator_g",
    "best_response_fixed_point",
    "F_G_eval",
    "phi_eval",
    "principal_objective",
    "hamiltonian_sup",
    "hamiltonian_objective",
    "payments_inactive",
]

MODES = ("general_f", "cara_g")
_EXP_LIMIT = 700.0


@dataclass
class ControlPoint:
    """Candidate principal control ``(z, h, k)`` at one or many points."""

    z: np.ndarray
    h: np.ndarray
    k: np.ndarray

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        self.h = np.asarray(self.h, dtype=float)
        self.k = np.asarray(self.k, dtype=float)

    @classmethod
    def zeros(cls, model: ModelSpec, shape: tuple[int, ...] = ()) -> "ControlPoint":
        N, J = model.n_agents, model.atoms.size
        return cls(np.zeros(shape + (N, model.dim)), np.zeros(shape + (N, J)), np.zeros(shape + (N,)))

    @classmethod
    def constant(cls, model: ModelSpec, z=0.0, h=0.0, k=0.0, shape=()) -> "ControlPoint":
        N, J = model.n_agents, model.atoms.size
        return cls(
            np.broadcast_to(np.asarray(z, float), shape + (N, model.dim)).copy(),
            np.broadcast_to(np.asarray(h, float), shape + (N, J)).copy(),
            np.broadcast_to(np.asarray(k, float), shape + (N,)).copy(),
        )

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.k.shape[:-1]

    def broadcast(self, shape: tuple[int, ...]) -> "ControlPoint":
        return ControlPoint(
            np.broadcast_to(self.z, shape + self.z.shape[-2:]),
            np.broadcast_to(self.h, shape + self.h.shape[-2:]),
            np.broadcast_to(self.k, shape + self.k.shape[-1:]),
        )

    def take(self, idx) -> "ControlPoint":
        return ControlPoint(self.z[idx], self.h[idx], self.k[idx])

    def validate(self, model: ModelSpec) -> None:
        N, J = model.n_agents, model.atoms.size
        if self.z.shape[-2:] != (N, model.dim):
            raise ModelError(f"z must have trailing shape {(N, model.dim)}, got {self.z.shape}")
        if self.h.shape[-2:] != (N, J):
            raise ModelError(f"h must have trailing shape {(N, J)} (one column per jump atom)")
        if self.k.shape[-1:] != (N,):
            raise ModelError(f"k must have trailing shape {(N,)}")
        if np.any(self.k < 0):
            raise ModelError("flow payments k must be nonnegative")


@dataclass
class BestResponse:
    a: np.ndarray  # (..., n_actions)
    values: np.ndarray  # (..., N) generator values at a
    sweeps: int
    residual: np.ndarray  # (...,)
    converged: bool = True


# --------------------------------------------------------------------------
# Batched evaluation context
# --------------------------------------------------------------------------


def _as_batch(model: ModelSpec, t, x, y, cp: ControlPoint):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None]
    B = x.shape[0]
    cp = ControlPoint(cp.z, cp.h, cp.k)
    if single and cp.k.ndim == 1:
        cp = cp.broadcast((1,))
    cp = cp.broadcast((B,))
    cp.validate(model)
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        t = np.full(B, float(t))
    t = np.broadcast_to(t, (B,))
    if y is None:
        y = np.zeros((B, model.n_agents))
    y = np.broadcast_to(np.asarray(y, dtype=float).reshape(-1, model.n_agents) if np.ndim(y) else
                        np.full((1, model.n_agents), float(y)), (B, model.n_agents))
    return single, t, x, y, cp


class _Game:
    """Per-batch quantities that do not depend on the candidate action."""

    def __init__(self, model: ModelSpec, t, x, y, cp: ControlPoint, mode: str):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if mode == "cara_g" and not model.is_cara:
            raise ModelError("cara_g mode requires CARA agents")
        self.model, self.mode = model, mode
        self.t, self.x, self.y, self.cp = t, x, y, cp
        self.sigma = model.sigma_matrix(t, x)  # (B, dN, n)
        self.zs = np.einsum("bim,bmn->bin", cp.z, self.sigma)  # (B, N, n)
        atoms = model.atoms
        self.J = atoms.size
        self.w = atoms.weights
        mask = np.ones((x.shape[0], self.J))
        for j in range(self.J):
            mask[:, j] = np.any(model.jump_size(j, t, x) != 0, axis=-1)
        self.mask = mask
        self.lam_fixed = None
        if self.J and not any(
            model.jumps[int(atoms.owner[j])].intensity.depends_on("a", model.params)
            for j in range(self.J)
        ):
            self.lam_fixed = np.stack([model.intensity(j, t, x, np.zeros((1, model.n_actions)))
                                       for j in range(self.J)], axis=-1)
        if mode == "cara_g":
            R = model.risk_aversions
            Rh = R[None, :, None] * cp.h
            if np.any(np.abs(Rh) > _EXP_LIMIT):
                b, i, j = np.argwhere(np.abs(Rh) > _EXP_LIMIT)[0]
                raise ModelError(
                    f"exp(R_A h) overflows for agent {i} at atom {model.atoms.marks[j]} (R_A h = {Rh[b, i, j]})"
                )
            self.R = R
            self.jcoef = (1.0 - np.exp(Rh)) / R[None, :, None]  # (B, N, J)
        else:
            self.jcoef = cp.h

    def take(self, idx) -> "_Game":
        sub = object.__new__(_Game)
        sub.__dict__.update(self.__dict__)
        sub.t, sub.x = self.t[idx], self.x[idx]
        sub.y = None if self.y is None else self.y[idx]
        sub.cp = self.cp.take(idx)
        for name in ("sigma", "zs", "mask", "jcoef"):
            setattr(sub, name, getattr(self, name)[idx])
        if self.lam_fixed is not None:
            sub.lam_fixed = self.lam_fixed[idx]
        return sub

    def unique_rows(self):
        """Indices of distinct best-response problems and the inverse map."""
        dep = self.model.agent_problem_dependence
        parts = [self.zs.reshape(len(self.x), -1), self.jcoef.reshape(len(self.x), -1), self.cp.k]
        if "t" in dep:
            parts.append(self.t[:, None])
        if "x" in dep:
            parts.append(self.x)
        if self.mode == "general_f":
            parts.append(self.y)
        key = np.concatenate(parts, axis=1)
        _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
        return first, inverse.reshape(-1)

    def intensities(self, a, tt, xx):
        """(B, K, J) intensities times weights times nonzero-size mask."""
        B, K = a.shape[:2]
        if self.J == 0:
            return np.zeros((B, K, 0))
        if self.lam_fixed is not None:
            lam = np.broadcast_to(self.lam_fixed[:, None, :], (B, K, self.J))
        else:
            lam = np.stack([self.model.intensity(j, tt, xx, a) for j in range(self.J)], axis=-1)
            if np.any(lam <= 0):
                raise ModelError("jump intensity must stay strictly positive")
        return lam * self.w * self.mask[:, None, :]

    def value(self, i: int, a: np.ndarray) -> np.ndarray:
        """Generator of agent ``i`` at candidate joint actions ``a: (B, K, nA)``."""
        m = self.model
        tt = self.t[:, None]
        xx = self.x[:, None, :]
        kk = self.cp.k[:, None, :]
        b = m.drift_loading(tt, xx, a)  # (B, K, n)
        rho = m.discount(i, tt, xx, kk, a)
        lw = self.intensities(a, tt, xx)
        zs = self.zs[:, None, i, :]
        jump = np.einsum("bkj,bj->bk", lw, self.jcoef[:, i, :])
        drift = np.sum(zs * b, axis=-1)
        if self.mode == "cara_g":
            R = self.R[i]
            return rho / R + drift - 0.5 * R * np.sum(zs * zs, axis=-1) + jump
        return (
            m.flow_utility(i, kk)
            - m.cost(i, tt, xx, a)
            - rho * self.y[:, None, i]
            + drift
            + jump
        )


def agent_generator_f(model: ModelSpec, i: int, t, x, y, cp: ControlPoint, a) -> np.ndarray:
    """``f^i = u_A(k) - c - rho y^i + z^i Sigma b + sum_j h^{i,j} lambda_j w_j``."""
    single, t, x, y, cp = _as_batch(model, t, x, y, cp)
    a = np.broadcast_to(np.asarray(a, dtype=float).reshape(-1, model.n_actions), (x.shape[0], model.n_actions))
    val = _Game(model, t, x, y, cp, "general_f").value(i, a[:, None, :])[:, 0]
    return val[0] if single else val


def agent_generator_g(model: ModelSpec, i: int, t, x, cp: ControlPoint, a) -> np.ndarray:
    """``g^i = rho/R + z^i Sigma b - R|z^i Sigma|^2/2 + sum_j (1 - e^{R h^{i,j}}) lambda_j w_j / R``."""
    single, t, x, y, cp = _as_batch(model, t, x, None, cp)
    a = np.broadcast_to(np.asarray(a, dtype=float).reshape(-1, model.n_actions), (x.shape[0], model.n_actions))
    val = _Game(model, t, x, y, cp, "cara_g").value(i, a[:, None, :])[:, 0]
    return val[0] if single else val


# --------------------------------------------------------------------------
# Best response
# --------------------------------------------------------------------------


def _agent_objective(game: _Game, i: int, a: np.ndarray, sl: slice):
    def fn(cand):
        full = np.repeat(a[:, None, :], cand.shape[1], axis=1)
        full[:, :, sl] = cand
        return game.value(i, full)

    return fn


def _certify(game: _Game, a: np.ndarray, values: np.ndarray, n: int = 101) -> np.ndarray:
    model = game.model
    lo, hi = model.actions.bounds()
    res = np.zeros(a.shape[0])
    for i in range(model.n_agents):
        sl = model.actions.agent_slice(i)
        fn = _agent_objective(game, i, a, sl)
        if sl.stop - sl.start <= 2:
            _, best = grid_scan(fn, lo[sl], hi[sl], n)
        else:
            best = np.full(a.shape[0], -np.inf)
            for m in range(sl.start, sl.stop):
                axis = np.linspace(lo[m], hi[m], n)
                cand = np.repeat(a[:, None, sl], n, axis=1)
                cand[:, :, m - sl.start] = axis
                best = np.maximum(best, fn(cand).max(axis=1))
        res = np.maximum(res, best - values[:, i])
    return res


def _newton_polish(game: _Game, a: np.ndarray, values: np.ndarray) -> None:
    """One Newton step per agent on its own coordinates (in place).

    The search returns ``a*`` only to about the square root of machine
    precision while the principal's objective is first order in ``a*``.
    """
    lo, hi = game.model.actions.bounds()
    for i in range(game.model.n_agents):
        sl = game.model.actions.agent_slice(i)
        fn = _agent_objective(game, i, a, sl)
        # values from the sweep may predate the other agents' last move
        current = fn(a[:, None, sl])[:, 0] if game.model.n_agents > 1 else values[:, i]
        x, v = newton_polish(fn, a[:, sl], current, lo[sl], hi[sl])
        a[:, sl] = x
        values[:, i] = v


def _solve_game(game: _Game, tol: float, max_sweeps: int, a0=None, certify=False) -> BestResponse:
    B = game.x.shape[0]
    if B > 1:
        first, inverse = game.unique_rows()
        if first.size < B:
            sub = game.take(first)
            br = _solve_unique(sub, tol, max_sweeps, None if a0 is None else np.asarray(a0)[first], certify)
            return BestResponse(br.a[inverse], br.values[inverse], br.sweeps, br.residual[inverse], br.converged)
    return _solve_unique(game, tol, max_sweeps, a0, certify)


def _solve_unique(game: _Game, tol: float, max_sweeps: int, a0=None, certify=False) -> BestResponse:
    model = game.model
    B = game.x.shape[0]
    lo, hi = model.actions.bounds()
    a = np.broadcast_to(model.actions.center() if a0 is None else a0, (B, model.n_actions)).copy()
    N = model.n_agents
    values = np.zeros((B, N))
    change = np.inf
    sweeps = 0
    done = np.zeros(B, bool)
    for sweeps in range(1, max_sweeps + 1):
        before = a.copy()
        live = ~done
        for i in range(N):
            sl = model.actions.agent_slice(i)
            warm = sweeps > 1 or a0 is not None
            res = maximize(
                _agent_objective(game, i, a, sl),
                np.broadcast_to(lo[sl], (B, sl.stop - sl.start)),
                np.broadcast_to(hi[sl], (B, sl.stop - sl.start)),
                tol=tol,
                x0=a[:, sl] if (warm and sl.stop - sl.start > 1) else None,
            )
            # converged rows stay frozen: results never depend on batch mates
            a[live, sl] = res.x[live]
            values[live, i] = res.value[live]
        step = np.max(np.abs(a - before), axis=1) if B else np.zeros(0)
        done |= step <= tol
        change = float(np.max(step[live])) if np.any(live) else 0.0
        if N == 1 or np.all(done):
            break
    else:
        raise ConvergenceError(
            f"best-response iteration did not converge in {max_sweeps} sweeps (last change {change:.3g})",
            last_iterate=a,
            residual=change,
        )
    _newton_polish(game, a, values)
    # values must correspond to the final joint action
    if N > 1:
        values = np.stack([game.value(i, a[:, None, :])[:, 0] for i in range(N)], axis=-1)
    residual = _certify(game, a, values) if certify else np.zeros(B)
    return BestResponse(a, values, sweeps, residual, True)


def best_response_fixed_point(
    model: ModelSpec,
    t,
    x,
    y,
    cp: ControlPoint,
    mode: str = "cara_g",
    *,
    tol: float = 1e-9,
    max_sweeps: int = 50,
    certify: bool = False,
    a0=None,
) -> BestResponse:
    """Gauss-Seidel best-response sweeps to the Nash fixed point ``a*``.

    Each agent maximizes its own generator over its box with the other
    agents' actions fixed.  With ``certify`` the residual is the gap between
    a 101-point grid scan of each agent's own action and the value at ``a*``.
    """
    single, t, x, y, cp = _as_batch(model, t, x, y, cp)
    game = _Game(model, t, x, y, cp, mode)
    br = _solve_game(game, tol, max_sweeps, a0=a0, certify=certify)
    if single:
        return BestResponse(br.a[0], br.values[0], br.sweeps, br.residual[0], br.converged)
    return br


def F_G_eval(model: ModelSpec, t, x, y, cp: ControlPoint, mode: str = "cara_g", **kw) -> np.ndarray:
    """Generator values at the Nash fixed point (``F`` or ``G``)."""
    return best_response_fixed_point(model, t, x, y, cp, mode, **kw).values


# --------------------------------------------------------------------------
# Principal
# --------------------------------------------------------------------------


def _require_cara_rn(model: ModelSpec):
    if not model.is_cara_risk_neutral:
        raise ModelError("principal Hamiltonian requires CARA agents and a risk-neutral principal")


def _phi(game: _Game, a: np.ndarray, lw: np.ndarray | None = None) -> np.ndarray:
    """phi at actions ``a: (B, nA)`` using a cara_g context."""
    m = game.model
    R = game.R
    tt, xx, kk = game.t[:, None], game.x[:, None, :], game.cp.k[:, None, :]
    aa = a[:, None, :]
    total = -m.principal_flow(kk)[:, 0]
    for i in range(m.n_agents):
        rho = m.discount(i, tt, xx, kk, aa)[:, 0]
        total = total + rho / R[i] - 0.5 * R[i] * np.sum(game.zs[:, i, :] ** 2, axis=-1)
    if game.J:
        if lw is None:
            lw = game.intensities(aa, tt, xx)[:, 0, :]
        total = total + np.einsum("bj,bij->b", lw, game.jcoef + game.cp.h)
    return total


def phi_eval(model: ModelSpec, t, x, cp: ControlPoint, a=None, *, tol: float = 1e-9) -> np.ndarray:
    """``phi(t, x, z, h, k)`` evaluated at ``a* = a*(t, x, z, h, k)`` (or at ``a`` if given)."""
    _require_cara_rn(model)
    single, t, x, y, cp = _as_batch(model, t, x, None, cp)
    game = _Game(model, t, x, y, cp, "cara_g")
    if a is None:
        a = _solve_game(game, tol, 50).a
    else:
        a = np.broadcast_to(np.asarray(a, float).reshape(-1, model.n_actions), (x.shape[0], model.n_actions))
    val = _phi(game, a)
    return val[0] if single else val


def principal_objective(model: ModelSpec, t, x, cp: ControlPoint, p, a=None, *, tol: float = 1e-9):
    """``h_t(x, p, z, h, k, a*) = phi + p . Sigma b(x, a*)``."""
    _require_cara_rn(model)
    single, t, x, y, cp = _as_batch(model, t, x, None, cp)
    game = _Game(model, t, x, y, cp, "cara_g")
    if a is None:
        a = _solve_game(game, tol, 50).a
    else:
        a = np.broadcast_to(np.asarray(a, float).reshape(-1, model.n_actions), (x.shape[0], model.n_actions))
    drift = model.state_drift(t, x, a, sigma=game.sigma)
    p = np.broadcast_to(np.asarray(p, float), drift.shape)
    val = _phi(game, a) + np.sum(p * drift, axis=-1)
    return val[0] if single else val


def payments_inactive(model: ModelSpec, k_max: float = 5.0) -> bool:
    """True when ``k* = 0`` is optimal: no discount depends on ``k`` and ``u_P`` is nondecreasing."""
    if model.discount_depends_on_payments():
        return False
    N = model.n_agents
    if not model.principal.flow_disutility.depends_on("k", model.params):
        return True
    grid = np.linspace(0.0, k_max, 21)
    for m in range(N):
        for base in (0.0, 0.5 * k_max):
            k = np.full((grid.size, N), base)
            k[:, m] = grid
            if np.any(np.diff(model.principal_flow(k)) < -1e-14):
                return False
    return True


@dataclass
class HamiltonianSettings:
    """Search boxes and tolerances for the principal's sup.

    The z-box applies to the effective loading ``z^{i,:} Sigma`` (n entries
    per agent); ``z`` itself is recovered with the pseudo-inverse of Sigma.
    """

    z_max: float = 5.0
    h_max: float = 5.0
    k_max: float = 5.0
    tol: float = 1e-8
    inner_tol: float = 1e-9
    max_sweeps: int = 60
    jump_measure_correction: bool = True
    chunk: int = 4096


@dataclass
class HamiltonianResult:
    value: np.ndarray  # (B,)
    cp: ControlPoint
    a: np.ndarray  # (B, nA)
    converged: np.ndarray
    drift: np.ndarray  # (B, dN) Sigma b at a*
    on_box_boundary: np.ndarray  # (B,) sup reached at the edge of the search box
    warnings: list[str] = field(default_factory=list)


class _Layout:
    def __init__(self, model: ModelSpec, s: HamiltonianSettings):
        N, n, J = model.n_agents, model.noise_dim, model.atoms.size
        self.N, self.n, self.J = N, n, J
        self.k_on = not payments_inactive(model, s.k_max)
        nk = N if self.k_on else 0
        self.D = N * n + N * J + nk
        lo = np.concatenate([np.full(N * n, -s.z_max), np.full(N * J, -s.h_max), np.zeros(nk)])
        hi = np.concatenate([np.full(N * n, s.z_max), np.full(N * J, s.h_max), np.full(nk, s.k_max)])
        if model.is_cara and J:
            # keep exp(R_A h) finite
            rmax = float(np.max(model.risk_aversions))
            lim = _EXP_LIMIT / rmax
            lo[N * n: N * n + N * J] = np.maximum(lo[N * n: N * n + N * J], -lim)
            hi[N * n: N * n + N * J] = np.minimum(hi[N * n: N * n + N * J], lim)
        self.lo, self.hi = lo, hi

    def split(self, c):
        N, n, J = self.N, self.n, self.J
        w = c[..., : N * n].reshape(c.shape[:-1] + (N, n))
        h = c[..., N * n: N * n + N * J].reshape(c.shape[:-1] + (N, J))
        if self.k_on:
            k = c[..., N * n + N * J:]
        else:
            k = np.zeros(c.shape[:-1] + (N,))
        return w, h, k


def _sup_chunk(model, t, x, s: HamiltonianSettings, lay: _Layout, extra, cp0=None):
    """Maximize over controls for one chunk; ``extra(a, drift, lw) -> (B, K)`` adds p/zeta terms."""
    B = x.shape[0]
    sigma = model.sigma_matrix(t, x)  # (B, dN, n)
    pinv = np.linalg.pinv(sigma)  # (B, n, dN)

    def build(c):
        Bk, K = c.shape[:2]
        w, h, k = lay.split(c)
        z = np.einsum("bkin,bnm->bkim", w, pinv)
        flat = ControlPoint(z.reshape(B * K, lay.N, -1), h.reshape(B * K, lay.N, lay.J), k.reshape(B * K, lay.N))
        tt = np.repeat(t, K)
        xx = np.repeat(x, K, axis=0)
        game = _Game(model, tt, xx, None, flat, "cara_g")
        br = _solve_game(game, s.inner_tol, 50)
        a = br.a
        aa = a[:, None, :]
        lw = game.intensities(aa, tt[:, None], xx[:, None, :])[:, 0, :] if lay.J else np.zeros((B * K, 0))
        phi = _phi(game, a, lw)
        drift = np.einsum("bmn,bn->bm", game.sigma, model.drift_loading(tt, xx, a))
        return game, a, lw, phi, drift

    def fn(c):
        Bk, K = c.shape[:2]
        _, a, lw, phi, drift = build(c)
        val = phi + extra(a.reshape(B, K, -1), drift.reshape(B, K, -1), lw.reshape(B, K, -1)).reshape(-1)
        return val.reshape(B, K)

    x0 = None
    if cp0 is not None:
        w0 = np.einsum("bim,bmn->bin", cp0.z, sigma).reshape(B, -1)
        parts = [w0, cp0.h.reshape(B, -1)]
        if lay.k_on:
            parts.append(cp0.k)
        x0 = np.concatenate(parts, axis=-1)
    res = maximize(
        fn,
        np.broadcast_to(lay.lo, (B, lay.D)),
        np.broadcast_to(lay.hi, (B, lay.D)),
        tol=s.tol,
        x0=x0,
        max_sweeps=s.max_sweeps,
    )
    cx, _ = newton_polish(fn, res.x, res.value, lay.lo, lay.hi)
    game, a, lw, phi, drift = build(cx[:, None, :])
    value = phi + extra(a[:, None, :], drift[:, None, :], lw[:, None, :])[:, 0]
    w, h, k = lay.split(cx)
    z = np.einsum("bin,bnm->bim", w, pinv)
    span = lay.hi - lay.lo
    edge = np.any(
        (span > 0) & ((np.abs(cx - lay.lo) < 1e-6 * span) | (np.abs(cx - lay.hi) < 1e-6 * span))
        & (np.arange(lay.D) < lay.N * lay.n + lay.N * lay.J),
        axis=-1,
    )
    return value, ControlPoint(z, h, k), a, res.converged, drift, edge


def _extra_terms(model: ModelSpec, s: HamiltonianSettings, kind: str, data: dict, ts, xs):
    """``extra(a, drift, lw) -> (B, K)``: the p / zeta / jump part of the objective."""
    w = model.atoms.weights
    jd = data.get("jump_diff")
    corr = jd is not None and s.jump_measure_correction
    if kind == "p":
        pc = data["p"]

        def extra(a, drift, lw):
            val = np.einsum("bkm,bm->bk", drift, pc)
            return val + np.einsum("bkj,bj->bk", lw, jd) if corr else val
    elif kind == "zeta":
        zc = data["zeta"]

        def extra(a, drift, lw):
            b = model.drift_loading(ts[:, None], xs[:, None, :], a)
            val = np.einsum("bkn,bn->bk", b, zc)
            # reference-measure compensator: only the excess intensity enters
            return val + np.einsum("bkj,bj->bk", lw - w * (lw > 0), jd) if corr else val
    else:
        pp, pm = data["p_plus"], data["p_minus"]

        def extra(a, drift, lw):
            val = np.einsum("bkm,bm->bk", np.maximum(drift, 0.0), pp) + np.einsum(
                "bkm,bm->bk", np.minimum(drift, 0.0), pm
            )
            return val + np.einsum("bkj,bj->bk", lw, jd) if corr else val

    return extra


def _mode_data(model, B, p, zeta, p_plus, p_minus, jump_diff):
    modes = [p is not None, zeta is not None, p_plus is not None or p_minus is not None]
    if sum(modes) != 1:
        raise ValueError("give exactly one of p, zeta or (p_plus, p_minus)")
    dN, J = model.dim, model.atoms.size

    def full(arr, width):
        return np.broadcast_to(np.asarray(arr, float).reshape(-1, width), (B, width))

    if p is not None:
        kind, data = "p", {"p": full(p, dN)}
    elif zeta is not None:
        kind, data = "zeta", {"zeta": full(zeta, model.noise_dim)}
    else:
        if p_plus is None or p_minus is None:
            raise ValueError("upwind mode needs both p_plus and p_minus")
        kind, data = "upwind", {"p_plus": full(p_plus, dN), "p_minus": full(p_minus, dN)}
    if jump_diff is not None and J:
        data["jump_diff"] = full(jump_diff, J)
    return kind, data


def _batch_tx(model, t, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None]
    t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],)).astype(float)
    return single, t, x


def hamiltonian_sup(
    model: ModelSpec,
    t,
    x,
    p=None,
    *,
    zeta=None,
    p_plus=None,
    p_minus=None,
    jump_diff=None,
    settings: HamiltonianSettings | None = None,
    cp0: ControlPoint | None = None,
) -> HamiltonianResult:
    """Sup of the principal's Hamiltonian over ``(z, h, k)``.

    Modes (exactly one of ``p``, ``zeta``, ``(p_plus, p_minus)``):

    ``p``
        ``H(x, p) = sup phi + p . Sigma b(a*)``.
    ``p_plus, p_minus``
        upwind form ``sup phi + sum_m (Sigma b)_m^+ p_plus_m + (Sigma b)_m^- p_minus_m``
        used by the grid solver.
    ``zeta``
        ``psi(t, x, zeta) = sup phi + zeta . b(a*)`` for the FBSDE driver.

    ``jump_diff`` (``(B, J)``) holds ``v(x + beta_j) - v(x)`` (or the
    FBSDE's jump loadings in ``zeta`` mode).  With
    ``settings.jump_measure_correction`` the jump term inside the sup is
    weighted by the controlled intensity ``lambda_j(a*) w_j`` (``zeta`` mode:
    by ``(lambda_j(a*) - 1) w_j``), otherwise the uncontrolled operator
    ``sum_j w_j jump_diff_j`` is added outside the sup.  The returned value
    includes the jump term when ``jump_diff`` is given.

    Identical problems in the batch are solved once.
    """
    _require_cara_rn(model)
    s = settings or HamiltonianSettings()
    single, t, x = _batch_tx(model, t, x)
    B = x.shape[0]
    kind, data = _mode_data(model, B, p, zeta, p_plus, p_minus, jump_diff)
    if cp0 is not None:
        cp0 = ControlPoint(cp0.z, cp0.h, cp0.k).broadcast((B,))

    # exact deduplication
    dep = model.principal_problem_dependence
    parts = [v for v in data.values()]
    if "t" in dep:
        parts.append(t[:, None])
    if "x" in dep:
        parts.append(x)
    if cp0 is not None:
        parts += [cp0.z.reshape(B, -1), cp0.h.reshape(B, -1), cp0.k]
    first = inverse = None
    if B > 1 and parts:
        key = np.concatenate([np.asarray(q, float).reshape(B, -1) for q in parts], axis=1)
        _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
        inverse = inverse.reshape(-1)
        if first.size == B:
            first = inverse = None
    if first is not None:
        t, x = t[first], x[first]
        data = {k: v[first] for k, v in data.items()}
        cp0 = None if cp0 is None else cp0.take(first)
    Bu = x.shape[0]

    lay = _Layout(model, s)
    outs = []
    for start in range(0, Bu, s.chunk):
        idx = slice(start, min(Bu, start + s.chunk))
        xs, ts = x[idx], t[idx]
        dc = {k: v[idx] for k, v in data.items()}
        extra = _extra_terms(model, s, kind, dc, ts, xs)
        outs.append(_sup_chunk(model, ts, xs, s, lay, extra, None if cp0 is None else cp0.take(idx)))

    value = np.concatenate([o[0] for o in outs])
    cp = ControlPoint(
        np.concatenate([o[1].z for o in outs]),
        np.concatenate([o[1].h for o in outs]),
        np.concatenate([o[1].k for o in outs]),
    )
    a = np.concatenate([o[2] for o in outs])
    conv = np.concatenate([o[3] for o in outs])
    drift = np.concatenate([o[4] for o in outs])
    edge = np.concatenate([o[5] for o in outs])
    jd = data.get("jump_diff")
    if jd is not None and not s.jump_measure_correction and kind != "zeta":
        value = value + jd @ model.atoms.weights
    if inverse is not None:
        value, a, conv, drift, edge = (v[inverse] for v in (value, a, conv, drift, edge))
        cp = cp.take(inverse)
    notes = []
    if not np.all(conv):
        notes.append(f"optimizer budget exhausted at {int(np.sum(~conv))} points; value is a lower bound")
        warnings.warn(notes[-1], RuntimeWarning, stacklevel=2)
    if single:
        return HamiltonianResult(value[0], cp.take(0), a[0], conv[0], drift[0], edge[0], notes)
    return HamiltonianResult(value, cp, a, conv, drift, edge, notes)


def hamiltonian_objective(
    model: ModelSpec,
    t,
    x,
    cp: ControlPoint,
    p=None,
    *,
    zeta=None,
    p_plus=None,
    p_minus=None,
    jump_diff=None,
    settings: HamiltonianSettings | None = None,
) -> np.ndarray:
    """The objective maximized by :func:`hamiltonian_sup`, at given controls.

    ``a*`` is recomputed at ``cp``; the jump term follows the same
    convention as :func:`hamiltonian_sup`.
    """
    _require_cara_rn(model)
    s = settings or HamiltonianSettings()
    single, t, x = _batch_tx(model, t, x)
    B = x.shape[0]
    kind, data = _mode_data(model, B, p, zeta, p_plus, p_minus, jump_diff)
    cp = ControlPoint(cp.z, cp.h, cp.k).broadcast((B,))
    game = _Game(model, t, x, None, cp, "cara_g")
    a = _solve_game(game, s.inner_tol, 50).a
    aa = a[:, None, :]
    J = model.atoms.size
    lw = game.intensities(aa, t[:, None], x[:, None, :])[:, 0, :] if J else np.zeros((B, 0))
    drift = np.einsum("bmn,bn->bm", game.sigma, model.drift_loading(t, x, a))
    val = _phi(game, a, lw) + _extra_terms(model, s, kind, data, t, x)(aa, drift[:, None, :], lw[:, None, :])[:, 0]
    jd = data.get("jump_diff")
    if jd is not None and not s.jump_measure_correction and kind != "zeta":
        val = val + jd @ model.atoms.weights
    return val[0] if single else val
