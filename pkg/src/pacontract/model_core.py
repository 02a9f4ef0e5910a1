"""Problem instances: dimensions, coefficients, preferences and action boxes.

A :class:`ModelSpec` is immutable.  All coefficient evaluators are vectorized:
states are arrays of shape ``(..., dN)``, joint actions ``(..., n_actions)``
and flow payments ``(..., N)``; leading dimensions broadcast against each
other and against ``t``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import ModelError
from .expr import Expr

__all__ = [
    "ActionSpace",
    "JumpSpec",
    "AgentSpec",
    "PrincipalSpec",
    "ModelSpec",
    "AtomTable",
    "Issue",
    "ValidationReport",
    "validate",
    "eta_kernel",
    "model_to_dict",
    "model_from_dict",
]


def _expr(v) -> Expr:
    return v if isinstance(v, Expr) else Expr(v)


def _floats(v) -> tuple[float, ...]:
    return tuple(float(u) for u in np.atleast_1d(np.asarray(v, dtype=float)))


# --------------------------------------------------------------------------
# Domain types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ActionSpace:
    """Per-agent action boxes ``A_i = [lower_i, upper_i]`` (componentwise)."""

    lower: tuple[tuple[float, ...], ...]
    upper: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        lo = tuple(_floats(v) for v in self.lower)
        hi = tuple(_floats(v) for v in self.upper)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def boxes(cls, *boxes: tuple[Sequence[float], Sequence[float]]) -> "ActionSpace":
        return cls(tuple(b[0] for b in boxes), tuple(b[1] for b in boxes))

    @property
    def n_agents(self) -> int:
        return len(self.lower)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(v) for v in self.lower)

    @property
    def total(self) -> int:
        return sum(self.sizes)

    def agent_slice(self, i: int) -> slice:
        start = sum(self.sizes[:i])
        return slice(start, start + self.sizes[i])

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([v for blk in self.lower for v in blk], dtype=float)
        hi = np.array([v for blk in self.upper for v in blk], dtype=float)
        return lo, hi

    def corners(self) -> np.ndarray:
        lo, hi = self.bounds()
        pts = itertools.product(*[(l, h) if h > l else (l,) for l, h in zip(lo, hi)])
        return np.array(list(pts), dtype=float).reshape(-1, lo.size)

    def center(self) -> np.ndarray:
        lo, hi = self.bounds()
        return 0.5 * (lo + hi)

    def contains(self, a, tol: float = 1e-12) -> np.ndarray:
        lo, hi = self.bounds()
        a = np.asarray(a, dtype=float)
        return np.all((a >= lo - tol) & (a <= hi + tol), axis=-1)

    def clip(self, a) -> np.ndarray:
        lo, hi = self.bounds()
        return np.clip(a, lo, hi)


@dataclass(frozen=True)
class JumpSpec:
    """Jump component of one agent's output.

    ``marks`` and ``weights`` are the atoms of the mark measure ``F^i``;
    ``size`` gives the d components of ``beta^i(t, x, e)`` and ``intensity``
    the multiplier ``lambda^i(t, x, a, e) > 0`` applied under a joint action.
    Atoms flagged ``inert`` are allowed to have zero size and are ignored by
    the dynamics.
    """

    marks: tuple[tuple[float, ...], ...] = ()
    weights: tuple[float, ...] = ()
    size: tuple[Expr, ...] = ()
    intensity: Expr = Expr("1")
    inert: tuple[bool, ...] = ()

    def __post_init__(self):
        marks = tuple(_floats(m) for m in self.marks)
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        object.__setattr__(self, "size", tuple(_expr(s) for s in self.size))
        object.__setattr__(self, "intensity", _expr(self.intensity))
        inert = tuple(bool(v) for v in self.inert) or (False,) * len(marks)
        object.__setattr__(self, "inert", inert)
        if len(self.weights) != len(marks) or len(inert) != len(marks):
            raise ModelError("jump marks, weights and inert flags must have equal length")

    @property
    def n_atoms(self) -> int:
        return len(self.marks)

    @property
    def active(self) -> bool:
        return self.n_atoms > 0


@dataclass(frozen=True)
class AgentSpec:
    """Preferences of one agent.

    ``risk_aversion`` set means CARA: ``U_A(y) = -exp(-R_A y)`` with zero
    cost and zero flow utility (checked by :func:`validate`).
    """

    discount: Expr = Expr("0")
    cost: Expr = Expr("0")
    flow_utility: Expr = Expr("0")
    utility: Expr = Expr("y")
    utility_inv: Expr = Expr("u")
    risk_aversion: float | None = None
    reservation: float = 0.0

    def __post_init__(self):
        for name in ("discount", "cost", "flow_utility", "utility", "utility_inv"):
            object.__setattr__(self, name, _expr(getattr(self, name)))
        if self.risk_aversion is not None:
            object.__setattr__(self, "risk_aversion", float(self.risk_aversion))
        object.__setattr__(self, "reservation", float(self.reservation))

    @classmethod
    def cara(cls, risk_aversion: float, discount="0", reservation: float = -1.0) -> "AgentSpec":
        r = repr(float(risk_aversion))
        return cls(
            discount=discount,
            utility=f"-exp(-{r}*y)",
            utility_inv=f"-log(-u)/{r}",
            risk_aversion=risk_aversion,
            reservation=reservation,
        )

    @property
    def is_cara(self) -> bool:
        return self.risk_aversion is not None


@dataclass(frozen=True)
class PrincipalSpec:
    """Principal preferences; ``risk_neutral`` means ``U_P(y) = y``, ``r = 0``."""

    liquidation: Expr
    utility: Expr = Expr("y")
    flow_disutility: Expr = Expr("0")
    discount: Expr = Expr("0")
    risk_neutral: bool = True

    def __post_init__(self):
        for name in ("liquidation", "utility", "flow_disutility", "discount"):
            object.__setattr__(self, name, _expr(getattr(self, name)))


@dataclass(frozen=True)
class AtomTable:
    """Flattened list of all (non-inert) jump atoms across agents."""

    owner: np.ndarray  # (J,) agent index
    local: np.ndarray  # (J,) index within the owner's JumpSpec
    marks: tuple[tuple[float, ...], ...]
    weights: np.ndarray  # (J,)

    @property
    def size(self) -> int:
        return int(self.owner.size)

    def of_agent(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.owner == i)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Full problem instance.

    The state is ``X = (X^1, ..., X^N)`` with ``d`` components per agent,
    driven by an ``n``-dimensional Brownian motion.  ``sigma`` is the
    ``dN x n`` volatility, ``drift`` the n-vector ``b(t, x, a)`` so that the
    drift of X under an action is ``sigma @ drift``.
    """

    name: str
    n_agents: int
    state_dim: int
    noise_dim: int
    sigma: tuple[tuple[Expr, ...], ...]
    drift: tuple[Expr, ...]
    jumps: tuple[JumpSpec, ...]
    agents: tuple[AgentSpec, ...]
    principal: PrincipalSpec
    actions: ActionSpace
    x0: tuple[float, ...]
    horizon: float = 1.0
    state_box: tuple[tuple[float, ...], tuple[float, ...]] | None = None
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "n_agents", int(self.n_agents))
        set_(self, "state_dim", int(self.state_dim))
        set_(self, "noise_dim", int(self.noise_dim))
        set_(self, "sigma", tuple(tuple(_expr(v) for v in row) for row in self.sigma))
        set_(self, "drift", tuple(_expr(v) for v in self.drift))
        set_(self, "jumps", tuple(self.jumps))
        set_(self, "agents", tuple(self.agents))
        set_(self, "x0", _floats(self.x0))
        set_(self, "horizon", float(self.horizon))
        set_(self, "params", {str(k): float(v) for k, v in dict(self.params).items()})
        if self.state_box is not None:
            set_(self, "state_box", (_floats(self.state_box[0]), _floats(self.state_box[1])))
        self._check_shapes()
        owner, local, marks, weights = [], [], [], []
        for i, js in enumerate(self.jumps):
            for j in range(js.n_atoms):
                if js.inert[j]:
                    continue
                owner.append(i)
                local.append(j)
                marks.append(js.marks[j])
                weights.append(js.weights[j])
        set_(
            self,
            "_atoms",
            AtomTable(
                np.array(owner, dtype=int),
                np.array(local, dtype=int),
                tuple(marks),
                np.array(weights, dtype=float),
            ),
        )

    def _check_shapes(self):
        N, d, n = self.n_agents, self.state_dim, self.noise_dim
        if min(N, d, n) < 1:
            raise ModelError("dimensions N, d, n must be positive")
        if len(self.sigma) != N * d or any(len(r) != n for r in self.sigma):
            raise ModelError(f"sigma must be a {N * d} x {n} matrix of expressions")
        if len(self.drift) != n:
            raise ModelError(f"drift loading must have {n} components")
        if len(self.jumps) != N or len(self.agents) != N:
            raise ModelError(f"need exactly {N} jump specs and {N} agent specs")
        for i, js in enumerate(self.jumps):
            if js.active and len(js.size) != d:
                raise ModelError(f"jump size of agent {i} must have {d} components")
        if self.actions.n_agents != N:
            raise ModelError(f"action space must have {N} agent boxes")
        lo, hi = self.actions.bounds()
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ModelError("action bounds must be finite")
        if len(self.x0) != N * d:
            raise ModelError(f"initial state must have {N * d} components")
        if self.horizon <= 0:
            raise ModelError("horizon must be positive")

    # -- sizes ---------------------------------------------------------------

    @property
    def dim(self) -> int:
        """Joint state dimension dN."""
        return self.n_agents * self.state_dim

    @property
    def n_actions(self) -> int:
        return self.actions.total

    @property
    def atoms(self) -> AtomTable:
        return self._atoms

    @property
    def is_cara(self) -> bool:
        return all(a.is_cara for a in self.agents)

    @property
    def is_cara_risk_neutral(self) -> bool:
        return self.is_cara and self.principal.risk_neutral

    @property
    def risk_aversions(self) -> np.ndarray:
        return np.array([a.risk_aversion for a in self.agents], dtype=float)

    def box(self) -> tuple[np.ndarray, np.ndarray]:
        """State box used for probes and as the default HJB domain."""
        if self.state_box is not None:
            return np.array(self.state_box[0]), np.array(self.state_box[1])
        x0 = np.array(self.x0)
        return x0 - 4.0, x0 + 4.0

    def block(self, i: int) -> slice:
        return slice(i * self.state_dim, (i + 1) * self.state_dim)

    # -- structural queries (exact, from expression free variables) ----------

    def intensity_mark_independent(self) -> bool:
        return not any(js.intensity.depends_on("e", self.params) for js in self.jumps if js.active)

    def sigma_beta_time_dependent(self) -> bool:
        exprs = [v for row in self.sigma for v in row]
        exprs += [s for js in self.jumps for s in js.size]
        return any(e.depends_on("t", self.params) for e in exprs)

    def discount_depends_on_payments(self) -> bool:
        return any(a.discount.depends_on("k", self.params) for a in self.agents)

    @cached_property
    def agent_problem_dependence(self) -> frozenset[str]:
        """Variable families (``t``, ``x``) the agents' generators can see."""
        exprs = [v for row in self.sigma for v in row] + list(self.drift)
        for js in self.jumps:
            exprs += list(js.size) + [js.intensity]
        for ag in self.agents:
            exprs += [ag.discount, ag.cost]
        return frozenset(p for p in ("t", "x") if any(e.depends_on(p, self.params) for e in exprs))

    @cached_property
    def principal_problem_dependence(self) -> frozenset[str]:
        """Like :attr:`agent_problem_dependence`, adding the principal's flow terms."""
        extra = [self.principal.flow_disutility]
        more = frozenset(p for p in ("t", "x") if any(e.depends_on(p, self.params) for e in extra))
        return self.agent_problem_dependence | more

    def coefficients_time_dependent(self) -> bool:
        exprs = [v for row in self.sigma for v in row] + list(self.drift)
        for js in self.jumps:
            exprs += list(js.size) + [js.intensity]
        for ag in self.agents:
            exprs += [ag.discount, ag.cost]
        exprs.append(self.principal.discount)
        return any(e.depends_on("t", self.params) for e in exprs)

    # -- evaluation ----------------------------------------------------------

    def _env(self, t=None, x=None, a=None, k=None, mark=None, **extra) -> dict:
        env: dict[str, Any] = {}
        if t is not None:
            env["t"] = t
        if x is not None:
            for m in range(x.shape[-1]):
                env[f"x{m}"] = x[..., m]
        if a is not None:
            for m in range(a.shape[-1]):
                env[f"a{m}"] = a[..., m]
        if k is not None:
            for m in range(k.shape[-1]):
                env[f"k{m}"] = k[..., m]
        if mark is not None:
            env["e"] = mark[0]
            for m, v in enumerate(mark):
                env[f"e{m}"] = v
        env.update(extra)
        return env

    def _eval(self, expr: Expr, env, shape) -> np.ndarray:
        val = np.asarray(expr(env, self.params), dtype=float)
        if val.shape != shape:
            val = np.broadcast_to(val, shape)
        return val

    @staticmethod
    def _shape(*arrays) -> tuple[int, ...]:
        shapes = []
        for arr, trailing in arrays:
            if arr is None:
                continue
            s = np.shape(arr)
            shapes.append(s[: len(s) - trailing] if trailing else s)
        return np.broadcast_shapes(*shapes) if shapes else ()

    def sigma_matrix(self, t, x) -> np.ndarray:
        """Volatility ``Sigma(t, x)`` with shape ``(..., dN, n)``."""
        x = np.asarray(x, dtype=float)
        shape = self._shape((t, 0), (x, 1))
        env = self._env(t, x)
        out = np.empty(shape + (self.dim, self.noise_dim))
        for r, row in enumerate(self.sigma):
            for c, e in enumerate(row):
                out[..., r, c] = self._eval(e, env, shape)
        return out

    def drift_loading(self, t, x, a) -> np.ndarray:
        """``b(t, x, a)`` with shape ``(..., n)``."""
        x = np.asarray(x, dtype=float)
        a = np.asarray(a, dtype=float)
        shape = self._shape((t, 0), (x, 1), (a, 1))
        env = self._env(t, x, a)
        out = np.empty(shape + (self.noise_dim,))
        for c, e in enumerate(self.drift):
            out[..., c] = self._eval(e, env, shape)
        return out

    def state_drift(self, t, x, a, sigma=None) -> np.ndarray:
        """``Sigma b`` with shape ``(..., dN)``."""
        if sigma is None:
            sigma = self.sigma_matrix(t, x)
        b = self.drift_loading(t, x, a)
        return np.einsum("...ij,...j->...i", sigma, b)

    def jump_size(self, j: int, t, x) -> np.ndarray:
        """``beta^i(t, x, e_j)`` for global atom ``j``; shape ``(..., d)``."""
        x = np.asarray(x, dtype=float)
        i = int(self.atoms.owner[j])
        shape = self._shape((t, 0), (x, 1))
        env = self._env(t, x, mark=self.atoms.marks[j])
        out = np.empty(shape + (self.state_dim,))
        for c, e in enumerate(self.jumps[i].size):
            out[..., c] = self._eval(e, env, shape)
        return out

    def jump_shift(self, j: int, t, x) -> np.ndarray:
        """Jump of the joint state for atom ``j`` (``I_i[beta^i]``); ``(..., dN)``."""
        size = self.jump_size(j, t, x)
        out = np.zeros(size.shape[:-1] + (self.dim,))
        out[..., self.block(int(self.atoms.owner[j]))] = size
        return out

    def intensity(self, j: int, t, x, a) -> np.ndarray:
        """``lambda^i(t, x, a, e_j)`` for global atom ``j``."""
        x = np.asarray(x, dtype=float)
        a = np.asarray(a, dtype=float)
        i = int(self.atoms.owner[j])
        shape = self._shape((t, 0), (x, 1), (a, 1))
        env = self._env(t, x, a, mark=self.atoms.marks[j])
        return self._eval(self.jumps[i].intensity, env, shape)

    def discount(self, i: int, t, x, k, a) -> np.ndarray:
        x, k, a = (np.asarray(v, dtype=float) for v in (x, k, a))
        shape = self._shape((t, 0), (x, 1), (k, 1), (a, 1))
        return self._eval(self.agents[i].discount, self._env(t, x, a, k), shape)

    def cost(self, i: int, t, x, a) -> np.ndarray:
        x, a = np.asarray(x, dtype=float), np.asarray(a, dtype=float)
        shape = self._shape((t, 0), (x, 1), (a, 1))
        return self._eval(self.agents[i].cost, self._env(t, x, a), shape)

    def flow_utility(self, i: int, k) -> np.ndarray:
        k = np.asarray(k, dtype=float)
        return self._eval(self.agents[i].flow_utility, self._env(k=k), k.shape[:-1])

    def utility(self, i: int, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return self._eval(self.agents[i].utility, {"y": y}, y.shape)

    def utility_inv(self, i: int, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return self._eval(self.agents[i].utility_inv, {"u": u}, u.shape)

    def liquidation(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self._eval(self.principal.liquidation, self._env(x=x), x.shape[:-1])

    def principal_utility(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if self.principal.risk_neutral:
            return y
        return self._eval(self.principal.utility, {"y": y}, y.shape)

    def principal_flow(self, k) -> np.ndarray:
        k = np.asarray(k, dtype=float)
        return self._eval(self.principal.flow_disutility, self._env(k=k), k.shape[:-1])

    def principal_discount(self, t, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        shape = self._shape((t, 0), (x, 1))
        return self._eval(self.principal.discount, self._env(t, x), shape)

    def reservation_ce(self) -> np.ndarray:
        """``U_A^{-1}(R_0)`` per agent."""
        return np.array(
            [float(self.utility_inv(i, np.array(ag.reservation))) for i, ag in enumerate(self.agents)]
        )

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return model_to_dict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelSpec":
        return model_from_dict(data)

    def fingerprint(self) -> str:
        import hashlib

        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# Kernel
# --------------------------------------------------------------------------


def eta_kernel(model: ModelSpec, t: float, x, a, i: int) -> list[tuple[np.ndarray, float]]:
    """Atoms of the controlled jump kernel of agent ``i`` at one point.

    Returns ``[(jump_size, mass), ...]`` where mass is
    ``lambda^i(t, x, a, e_j) * w_j``.  Atoms of zero size are dropped.
    """
    x = np.asarray(x, dtype=float)
    a = np.asarray(a, dtype=float)
    out = []
    for j in model.atoms.of_agent(i):
        lam = float(model.intensity(j, t, x, a))
        if not lam > 0:
            raise ModelError(
                f"intensity of agent {i} at atom {model.atoms.marks[j]} is {lam} (must be > 0)"
            )
        size = model.jump_size(j, t, x)
        if not np.any(size != 0):
            continue
        out.append((np.array(size), lam * float(model.atoms.weights[j])))
    return out


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Issue:
    code: str
    message: str
    probe: Any = None

    def __str__(self):
        where = f" at {self.probe}" if self.probe is not None else ""
        return f"[{self.code}] {self.message}{where}"


@dataclass
class ValidationReport:
    issues: list[Issue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def codes(self) -> set[str]:
        return {i.code for i in self.issues}

    def raise_if_failed(self):
        if self.issues:
            raise ModelError("model validation failed:\n" + "\n".join(map(str, self.issues)))

    def __str__(self):
        return "valid" if self.ok else "\n".join(map(str, self.issues))


def _probe_states(model: ModelSpec) -> np.ndarray:
    lo, hi = model.box()
    axes = [np.array([l, 0.5 * (l + h), h]) for l, h in zip(lo, hi)]
    return np.array(list(itertools.product(*axes)), dtype=float)


def _finite(values, what: str, probes) -> None:
    values = np.asarray(values, dtype=float)
    bad = ~np.isfinite(values)
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        probe = probes[tuple(idx[: probes.ndim - 1])] if probes.ndim > 1 else probes
        raise ModelError(f"non-finite value of {what} at probe {np.asarray(probe).tolist()}")


def validate(model: ModelSpec) -> ValidationReport:
    """Probe the model's structural invariants.

    Probes: a 3-point lattice per state dimension over the model's state box,
    crossed with all action-box corners, payments ``k in {0, 1}`` and
    ``t in {0, T}``.  Non-finite coefficient values raise :class:`ModelError`
    immediately; all other failures are collected in the report.
    """
    rep = ValidationReport()
    xs = _probe_states(model)
    corners = model.actions.corners()
    P, C = xs.shape[0], corners.shape[0]
    X = np.repeat(xs[:, None, :], C, axis=1)  # (P, C, dN)
    A = np.broadcast_to(corners[None], (P, C, corners.shape[1]))
    probes = np.concatenate([X, A], axis=-1)
    N = model.n_agents

    lo, hi = model.actions.bounds()
    if np.any(lo > hi):
        rep.issues.append(Issue("action_box", "lower bound exceeds upper bound"))
    x0 = np.array(model.x0)
    blo, bhi = model.box()
    if np.any(blo >= bhi) or np.any(x0 < blo) or np.any(x0 > bhi):
        rep.issues.append(Issue("state_box", "initial state must lie in a non-degenerate state box"))

    for t in (0.0, model.horizon):
        _finite(model.sigma_matrix(t, X), "sigma", probes)
        _finite(model.drift_loading(t, X, A), "drift loading b", probes)
        for i in range(N):
            for kval in (0.0, 1.0):
                k = np.full((P, C, N), kval)
                _finite(model.discount(i, t, X, k, A), f"discount rho^{i}", probes)
            _finite(model.cost(i, t, X, A), f"cost c^{i}", probes)
        _finite(model.principal_discount(t, xs), "principal discount r", xs)
        if np.any(model.principal_discount(t, xs) < 0):
            rep.issues.append(Issue("principal_discount", "discount rate r must be >= 0"))

    for i, js in enumerate(model.jumps):
        if any(w < 0 for w in js.weights):
            rep.issues.append(Issue("jump_weights", f"negative mark weight for agent {i}"))
        if js.active and all(js.inert):
            rep.issues.append(Issue("jump_atoms", f"agent {i} has jumps but only inert atoms"))
    for j in range(model.atoms.size):
        i = int(model.atoms.owner[j])
        mark = model.atoms.marks[j]
        for t in (0.0, model.horizon):
            lam = model.intensity(j, t, X, A)
            _finite(lam, f"intensity lambda^{i} at mark {mark}", probes)
            if np.any(lam <= 0):
                idx = np.argwhere(lam <= 0)[0]
                rep.issues.append(
                    Issue(
                        "intensity_positive",
                        f"lambda^{i} <= 0 at mark {mark}",
                        probes[tuple(idx)].tolist(),
                    )
                )
            size = model.jump_size(j, t, xs)
            _finite(size, f"jump size beta^{i} at mark {mark}", xs)
            zero = np.all(size == 0, axis=-1)
            if np.any(zero):
                rep.issues.append(
                    Issue(
                        "zero_jump",
                        f"beta^{i} vanishes at non-inert mark {mark}",
                        xs[np.argmax(zero)].tolist(),
                    )
                )

    ys = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
    for i, ag in enumerate(model.agents):
        u = model.utility(i, ys)
        _finite(u, f"terminal utility U_A^{i}", ys)
        if np.any(np.diff(u) <= 0):
            rep.issues.append(Issue("utility_increasing", f"U_A^{i} is not strictly increasing"))
        back = model.utility_inv(i, u)
        if not np.all(np.isfinite(back)) or np.any(
            np.abs(back - ys) > 1e-10 * np.maximum(1.0, np.abs(ys))
        ):
            rep.issues.append(
                Issue("utility_roundtrip", f"U_A^{i} inverse does not round-trip", ys.tolist())
            )
        if ag.is_cara:
            R = ag.risk_aversion
            if not R > 0:
                rep.issues.append(Issue("cara", f"risk aversion of agent {i} must be > 0"))
            elif np.any(np.abs(u + np.exp(-R * ys)) > 1e-12 * np.abs(u)):
                rep.issues.append(Issue("cara", f"U_A^{i} is not -exp(-R_A y)"))
            kk = np.stack([np.zeros(N), np.ones(N)])
            if np.any(model.flow_utility(i, kk) != 0):
                rep.issues.append(Issue("cara", f"CARA agent {i} must have u_A = 0"))
            if np.any(model.cost(i, 0.0, X, A) != 0):
                rep.issues.append(Issue("cara", f"CARA agent {i} must have c = 0"))

    pr = model.principal
    if pr.risk_neutral:
        if not np.array_equal(model._eval(pr.utility, {"y": ys}, ys.shape), ys):
            rep.issues.append(Issue("risk_neutral", "risk-neutral principal needs U_P(y) = y"))
        if np.any(model.principal_discount(0.0, xs) != 0):
            rep.issues.append(Issue("risk_neutral", "risk-neutral principal needs r = 0"))
    _finite(model.liquidation(xs), "liquidation L", xs)
    return rep


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------


def model_to_dict(model: ModelSpec) -> dict:
    """Canonical plain-data form (expressions as strings, floats as floats)."""
    return {
        "name": model.name,
        "dimensions": {"N": model.n_agents, "d": model.state_dim, "n": model.noise_dim},
        "params": dict(sorted(model.params.items())),
        "sigma": [[e.source for e in row] for row in model.sigma],
        "drift": [e.source for e in model.drift],
        "jumps": [
            {
                "marks": [list(m) for m in js.marks],
                "weights": list(js.weights),
                "size": [e.source for e in js.size],
                "intensity": js.intensity.source,
                "inert": list(js.inert),
            }
            for js in model.jumps
        ],
        "agents": [
            {
                "discount": ag.discount.source,
                "cost": ag.cost.source,
                "flow_utility": ag.flow_utility.source,
                "utility": ag.utility.source,
                "utility_inv": ag.utility_inv.source,
                "risk_aversion": ag.risk_aversion,
                "reservation": ag.reservation,
            }
            for ag in model.agents
        ],
        "principal": {
            "liquidation": model.principal.liquidation.source,
            "utility": model.principal.utility.source,
            "flow_disutility": model.principal.flow_disutility.source,
            "discount": model.principal.discount.source,
            "risk_neutral": model.principal.risk_neutral,
        },
        "actions": {
            "lower": [list(v) for v in model.actions.lower],
            "upper": [list(v) for v in model.actions.upper],
        },
        "x0": list(model.x0),
        "horizon": model.horizon,
        "state_box": None
        if model.state_box is None
        else [list(model.state_box[0]), list(model.state_box[1])],
    }


_MODEL_KEYS = {
    "name", "dimensions", "params", "sigma", "drift", "jumps", "agents",
    "principal", "actions", "x0", "horizon", "state_box",
}


def model_from_dict(data: Mapping) -> ModelSpec:
    """Inverse of :func:`model_to_dict`; unknown keys are rejected."""
    unknown = set(data) - _MODEL_KEYS
    if unknown:
        raise ModelError(f"unknown model keys: {sorted(unknown)}")
    for key in ("dimensions", "sigma", "drift", "agents", "principal", "actions", "x0"):
        if key not in data:
            raise ModelError(f"missing model key {key!r}")
    dims = data["dimensions"]
    N, d = int(dims["N"]), int(dims["d"])
    jumps_data = data.get("jumps") or [{} for _ in range(N)]
    jumps = []
    for jd in jumps_data:
        extra = set(jd) - {"marks", "weights", "size", "intensity", "inert"}
        if extra:
            raise ModelError(f"unknown jump keys: {sorted(extra)}")
        jumps.append(
            JumpSpec(
                marks=tuple(tuple(m) if isinstance(m, (list, tuple)) else (m,) for m in jd.get("marks", [])),
                weights=tuple(jd.get("weights", [])),
                size=tuple(jd.get("size", [])),
                intensity=jd.get("intensity", "1"),
                inert=tuple(jd.get("inert", [])),
            )
        )
    agents = []
    for ad in data["agents"]:
        extra = set(ad) - {
            "discount", "cost", "flow_utility", "utility", "utility_inv",
            "risk_aversion", "reservation",
        }
        if extra:
            raise ModelError(f"unknown agent keys: {sorted(extra)}")
        if ad.get("risk_aversion") is not None and "utility" not in ad:
            base = AgentSpec.cara(ad["risk_aversion"])
            ad = {**ad, "utility": base.utility.source, "utility_inv": base.utility_inv.source}
        agents.append(AgentSpec(**ad))
    pd = dict(data["principal"])
    extra = set(pd) - {"liquidation", "utility", "flow_disutility", "discount", "risk_neutral"}
    if extra:
        raise ModelError(f"unknown principal keys: {sorted(extra)}")
    if "liquidation" not in pd:
        raise ModelError("missing principal key 'liquidation'")
    box = data.get("state_box")
    return ModelSpec(
        name=data.get("name", "custom"),
        n_agents=N,
        state_dim=d,
        noise_dim=int(dims["n"]),
        sigma=tuple(tuple(r) for r in data["sigma"]),
        drift=tuple(data["drift"]),
        jumps=tuple(jumps),
        agents=tuple(agents),
        principal=PrincipalSpec(**pd),
        actions=ActionSpace(
            tuple(tuple(v) for v in data["actions"]["lower"]),
            tuple(tuple(v) for v in data["actions"]["upper"]),
        ),
        x0=tuple(data["x0"]),
        horizon=data.get("horizon", 1.0),
        state_box=None if box is None else (tuple(box[0]), tuple(box[1])),
        params=data.get("params", {}),
    )
