"""Grid solver for the principal's HJB equation, feedback extraction and
an FBSDE cross-check.

The equation solved backward from ``v(T, .) = L`` is

    -v_t - H(t, x, Dv) - 1/2 Tr(Sigma Sigma^T D^2 v) - J v = 0,

with ``H`` the sup computed by :func:`pacontract.nash.hamiltonian_sup` and
``J v = sum_j w_j (v(x + beta_j) - v(x))`` the jump operator over the
atoms of all agents.

Discretization
--------------
* Drift: per-control upwinding.  The sup is taken over
  ``phi + (Sigma b)^+ . D^+ v + (Sigma b)^- . D^- v``, so every candidate
  control sees the one-sided difference in its own drift direction.
* Diffusion: central second differences, explicit or implicit (IMEX).
* Jumps: shifted values by multilinear interpolation; explicit.

With ``boundary="clamp"`` values outside the box are replaced by the
nearest face value (Neumann-type); the scheme is then monotone at every
node, which gives a discrete comparison principle.  The default
``boundary="linear"`` extrapolates linearly, which is exact for affine
data but uses negative weights at the faces.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time as _time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .bsde import _Regressor, polynomial_features
from .errors import CFLError, ConvergenceError, DimensionError, ModelError
from .model_core import ModelSpec
from .nash import (
    ControlPoint,
    HamiltonianSettings,
    best_response_fixed_point,
    hamiltonian_objective,
    hamiltonian_sup,
)
from .sim import TimeGrid, simulate_paths

__all__ = [
    "SpaceGrid",
    "SolverSettings",
    "ValueSurface",
    "FeedbackPolicy",
    "CrossCheck",
    "integral_operator_apply",
    "step_backward",
    "solve",
    "extract_policy",
    "fbsde_crosscheck",
    "MAX_GRID_DIM",
    "export_policy_csv",
    "cache_key",
]

MAX_GRID_DIM = 3
BOUNDARIES = ("linear", "clamp")
SCHEMES = ("auto", "explicit", "imex")


# --------------------------------------------------------------------------
# Grid and interpolation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SpaceGrid:
    """Uniform tensor grid on a box; nodes are stored in C order."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    n: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(v) for v in np.atleast_1d(self.lo)))
        object.__setattr__(self, "hi", tuple(float(v) for v in np.atleast_1d(self.hi)))
        object.__setattr__(self, "n", tuple(int(v) for v in np.atleast_1d(self.n)))
        if not len(self.lo) == len(self.hi) == len(self.n):
            raise ValueError("lo, hi and n must have one entry per state dimension")
        if any(k < 5 for k in self.n):
            raise ValueError("need at least 5 nodes per dimension")
        if any(not h > l for l, h in zip(self.lo, self.hi)):
            raise ValueError("grid box must have lo < hi in every dimension")

    @classmethod
    def for_model(cls, model: ModelSpec, nodes, box=None) -> "SpaceGrid":
        lo, hi = model.box() if box is None else (np.atleast_1d(box[0]), np.atleast_1d(box[1]))
        nodes = np.broadcast_to(np.atleast_1d(nodes), (model.dim,))
        return cls(tuple(lo), tuple(hi), tuple(int(v) for v in nodes))

    @property
    def dim(self) -> int:
        return len(self.n)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.n

    @property
    def size(self) -> int:
        return int(np.prod(self.n))

    @property
    def dx(self) -> np.ndarray:
        return (np.array(self.hi) - np.array(self.lo)) / (np.array(self.n) - 1)

    @property
    def axes(self) -> list[np.ndarray]:
        return [np.linspace(l, h, k) for l, h, k in zip(self.lo, self.hi, self.n)]

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=-1)

    def contains_strictly(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x > np.array(self.lo)) and np.all(x < np.array(self.hi)))

    def face_distance(self, x) -> np.ndarray:
        """Distance of ``x`` to the nearest face as a fraction of the box width, per dimension."""
        x = np.asarray(x, dtype=float)
        lo, hi = np.array(self.lo), np.array(self.hi)
        return np.minimum(x - lo, hi - x) / (hi - lo)

    def interior_mask(self, frac: float = 0.25) -> np.ndarray:
        """Nodes at least ``frac`` of the box width away from every face."""
        d = self.face_distance(self.points())
        return np.all(d >= frac - 1e-12, axis=-1)

    def interpolation(self, pts, boundary: str = "linear"):
        """Sparse matrix mapping node values to multilinear values at ``pts``.

        Returns ``(W, outside)`` where ``outside`` flags points beyond the box.
        """
        if boundary not in BOUNDARIES:
            raise ValueError(f"boundary must be one of {BOUNDARIES}")
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        P, D = pts.shape
        lo, dx, n = np.array(self.lo), self.dx, np.array(self.n)
        u = (pts - lo) / dx
        outside = np.any((u < -1e-12) | (u > n - 1 + 1e-12), axis=1)
        if boundary == "clamp":
            u = np.clip(u, 0.0, n - 1)
        cell = np.clip(np.floor(u), 0, n - 2).astype(int)
        frac = u - cell
        strides = np.array([int(np.prod(n[d + 1:])) for d in range(D)])
        rows, cols, vals = [], [], []
        for corner in range(2**D):
            bits = np.array([(corner >> (D - 1 - d)) & 1 for d in range(D)])
            wgt = np.prod(np.where(bits, frac, 1.0 - frac), axis=1)
            idx = (cell + bits) @ strides
            rows.append(np.arange(P))
            cols.append(idx)
            vals.append(wgt)
        W = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(P, self.size)
        )
        W.sum_duplicates()
        return W, outside

    def interpolate(self, values, pts, boundary: str = "linear") -> np.ndarray:
        """Multilinear interpolation of node ``values`` (``(size, ...)``) at ``pts``."""
        W, _ = self.interpolation(pts, boundary)
        vals = np.asarray(values, dtype=float)
        flat = vals.reshape(self.size, -1)
        return (W @ flat).reshape((W.shape[0],) + vals.shape[1:])

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi), "n": list(self.n)}


def _shift_operators(grid: SpaceGrid, boundary: str):
    """Sparse ``E_m^+`` / ``E_m^-``: value at the neighbor (ghost rule at faces)."""
    N = grid.size
    idx = np.arange(N).reshape(grid.shape)
    ops = []
    for m in range(grid.dim):
        pair = []
        for step in (1, -1):
            nb = np.roll(idx, -step, axis=m)
            pos = np.arange(grid.n[m])
            face = (pos == grid.n[m] - 1) if step == 1 else (pos == 0)
            shape = [1] * grid.dim
            shape[m] = grid.n[m]
            face = np.broadcast_to(face.reshape(shape), grid.shape).reshape(-1)
            inner = np.roll(idx, step, axis=m).reshape(-1)
            nb = nb.reshape(-1)
            own = np.arange(N)
            rows = [own[~face]]
            cols = [nb[~face]]
            vals = [np.ones(int((~face).sum()))]
            if boundary == "linear":
                rows += [own[face], own[face]]
                cols += [own[face], inner[face]]
                vals += [np.full(int(face.sum()), 2.0), np.full(int(face.sum()), -1.0)]
            else:
                rows.append(own[face])
                cols.append(own[face])
                vals.append(np.ones(int(face.sum())))
            E = sp.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)
            )
            pair.append(E)
        ops.append(tuple(pair))
    return ops


# --------------------------------------------------------------------------
# Operators
# --------------------------------------------------------------------------


def _check_time_independent(model: ModelSpec):
    if model.sigma_beta_time_dependent():
        raise ModelError(
            "the grid solver needs Sigma and the jump sizes to be independent of t; "
            "this model's volatility or jump sizes depend on t"
        )


def _jump_matrices(model: ModelSpec, grid: SpaceGrid, boundary: str):
    """Per atom: sparse map node values -> values at ``x + beta_j`` and the extrapolation count."""
    X = grid.points()
    mats, outside = [], []
    for j in range(model.atoms.size):
        shift = model.jump_shift(j, 0.0, X)
        W, out = grid.interpolation(X + shift, boundary)
        mats.append(W)
        outside.append(int(out.sum()))
    return mats, outside


def integral_operator_apply(
    model: ModelSpec,
    grid: SpaceGrid,
    v,
    x=None,
    *,
    boundary: str = "linear",
    weights=None,
) -> np.ndarray:
    """``J v(x) = sum_j w_j (v(x + beta_j) - v(x))`` summed over the atoms of all agents.

    ``v`` holds node values.  Without ``x`` the operator is returned at
    every node; with ``x`` (one or more points) ``v`` is interpolated.
    ``weights`` overrides the atom masses ``w_j`` (e.g. ``lambda_j w_j``).
    """
    _check_time_independent(model)
    v = np.asarray(v, dtype=float).reshape(-1)
    single = x is not None and np.ndim(x) == 1
    pts = grid.points() if x is None else np.atleast_2d(np.asarray(x, dtype=float))
    w = model.atoms.weights if weights is None else np.asarray(weights, dtype=float)
    W0, _ = grid.interpolation(pts, boundary)
    base = W0 @ v
    out = np.zeros(pts.shape[0])
    for j in range(model.atoms.size):
        Wj, _ = grid.interpolation(pts + model.jump_shift(j, 0.0, pts), boundary)
        out += w[j] * (Wj @ v - base)
    return out[0] if single else out


@dataclass
class SolverSettings:
    """Grid-solver options; ``hamiltonian`` holds the search boxes of the sup."""

    scheme: str = "auto"
    boundary: str = "linear"
    cfl: float = 0.45
    hamiltonian: HamiltonianSettings = field(default_factory=HamiltonianSettings)
    warm_start: bool = True

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"boundary must be one of {BOUNDARIES}")
        if not 0 < self.cfl <= 1:
            raise ValueError("cfl factor must lie in (0, 1]")

    def to_dict(self) -> dict:
        h = self.hamiltonian
        return {
            "scheme": self.scheme,
            "boundary": self.boundary,
            "cfl": self.cfl,
            "warm_start": self.warm_start,
            "hamiltonian": {k: getattr(h, k) for k in h.__dataclass_fields__},
        }


class _Operators:
    """Everything about the discretization that does not change with time."""

    def __init__(self, model: ModelSpec, grid: SpaceGrid, settings: SolverSettings):
        if model.dim != grid.dim:
            raise ModelError(f"grid has {grid.dim} dimensions, model state has {model.dim}")
        self.model, self.grid, self.settings = model, grid, settings
        self.X = grid.points()
        N = grid.size
        dx = grid.dx
        self.shifts = _shift_operators(grid, settings.boundary)
        I = sp.identity(N, format="csr")
        sig = model.sigma_matrix(0.0, self.X)
        A = np.einsum("bmn,bln->bml", sig, sig)  # Sigma Sigma^T per node
        D = sp.csr_matrix((N, N))
        for m in range(grid.dim):
            Ep, Em = self.shifts[m]
            D = D + sp.diags(0.5 * A[:, m, m] / dx[m] ** 2) @ (Ep + Em - 2.0 * I)
            for l in range(m + 1, grid.dim):
                if np.any(A[:, m, l] != 0):
                    Fp, Fm = self.shifts[l]
                    cross = Ep @ Fp - Ep @ Fm - Em @ Fp + Em @ Fm
                    D = D + sp.diags(A[:, m, l] / (4.0 * dx[m] * dx[l])) @ cross
        self.D = D.tocsr()
        self.cross_terms = bool(np.any(np.abs(A[:, ~np.eye(grid.dim, dtype=bool)]) > 0))
        self.jumps, self.outside = _jump_matrices(model, grid, settings.boundary)
        self.I = I
        self._lu = None
        self._lu_dt = None

    def gradients(self, v):
        dx = self.grid.dx
        pp = np.stack([(Ep @ v - v) / dx[m] for m, (Ep, _) in enumerate(self.shifts)], axis=-1)
        pm = np.stack([(v - Em @ v) / dx[m] for m, (_, Em) in enumerate(self.shifts)], axis=-1)
        return pp, pm

    def central_gradient(self, v):
        dx = self.grid.dx
        return np.stack([(Ep @ v - Em @ v) / (2 * dx[m]) for m, (Ep, Em) in enumerate(self.shifts)], axis=-1)

    def jump_diff(self, v):
        if not self.jumps:
            return None
        return np.stack([W @ v - v for W in self.jumps], axis=-1)

    def rates(self):
        """Per-node worst-case rates (diffusion, drift, jumps) used by the CFL rule."""
        model, grid = self.model, self.grid
        diff = np.maximum(-self.D.diagonal(), 0.0)
        lo, hi = model.actions.bounds()
        nA = lo.size
        per = 5 if nA <= 2 else 3
        axes = [np.linspace(l, h, per) if h > l else np.array([l]) for l, h in zip(lo, hi)]
        acts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, nA)
        dx = grid.dx
        drift = np.zeros(grid.size)
        jump = np.zeros(grid.size)
        sig = model.sigma_matrix(0.0, self.X)
        w = model.atoms.weights
        for a in acts:
            sb = np.einsum("bmn,bn->bm", sig, model.drift_loading(0.0, self.X, a[None, :]))
            drift = np.maximum(drift, np.sum(np.abs(sb) / dx, axis=-1))
            if model.atoms.size:
                lam = np.stack([model.intensity(j, 0.0, self.X, a[None, :]) for j in range(model.atoms.size)], -1)
                lam = np.broadcast_to(lam, (grid.size, model.atoms.size))
                mass = lam @ w if self.settings.hamiltonian.jump_measure_correction else np.full(grid.size, w.sum())
                jump = np.maximum(jump, mass)
        return diff, drift, jump

    def implicit_solver(self, dt):
        if self._lu is None or self._lu_dt != dt:
            self._lu = splu((self.I - dt * self.D).tocsc())
            self._lu_dt = dt
        return self._lu


def _choose_scheme(ops: _Operators, dt: float) -> tuple[str, float, float]:
    """Pick explicit / IMEX and return ``(scheme, cfl_ratio, required_dt)``."""
    s = ops.settings
    diff, drift, jump = ops.rates()
    explicit_rate = float(np.max(diff + drift + jump))
    imex_rate = float(np.max(drift + jump))
    req_exp = s.cfl / explicit_rate if explicit_rate > 0 else np.inf
    req_imex = s.cfl / imex_rate if imex_rate > 0 else np.inf
    if ops.cross_terms and s.scheme != "explicit":
        # cross derivatives stay explicit in the IMEX split
        warnings.warn("cross-diffusion terms are discretized centrally; the scheme is not monotone", RuntimeWarning)
    if s.scheme == "explicit" or (s.scheme == "auto" and dt <= req_exp):
        if dt > req_exp:
            raise CFLError(
                f"explicit step dt={dt:.3g} violates the CFL bound; need dt <= {req_exp:.3g} "
                "(or use the imex scheme)",
                required_dt=req_exp,
            )
        return "explicit", dt * explicit_rate, req_exp
    if dt > req_imex:
        raise CFLError(
            f"time step dt={dt:.3g} violates the CFL bound of the explicit drift/jump part; "
            f"need dt <= {req_imex:.3g}",
            required_dt=req_imex,
        )
    return "imex", dt * imex_rate, req_imex


@dataclass
class StepResult:
    v: np.ndarray
    H: np.ndarray
    cp: ControlPoint
    a: np.ndarray
    p_plus: np.ndarray
    p_minus: np.ndarray
    jump_diff: np.ndarray | None
    converged: np.ndarray
    on_box_boundary: np.ndarray
    realized_rate: float


def _step(ops: _Operators, v_next, t, dt, scheme, cp0=None) -> StepResult:
    model = ops.model
    pp, pm = ops.gradients(v_next)
    jd = ops.jump_diff(v_next)
    res = hamiltonian_sup(
        model, t, ops.X, p_plus=pp, p_minus=pm, jump_diff=jd,
        settings=ops.settings.hamiltonian, cp0=cp0,
    )
    rate = np.sum(np.abs(res.drift) / ops.grid.dx, axis=-1)
    if jd is not None:
        J = model.atoms.size
        lam = np.stack([model.intensity(j, t, ops.X, res.a) for j in range(J)], axis=-1)
        if ops.settings.hamiltonian.jump_measure_correction:
            rate = rate + lam @ model.atoms.weights
        else:
            rate = rate + model.atoms.weights.sum()
    if scheme == "explicit":
        rate = rate - ops.D.diagonal()
        v = v_next + dt * (res.value + ops.D @ v_next)
    else:
        # solve for the increment so data the operator annihilates (constants) pass through exactly
        v = v_next + ops.implicit_solver(dt).solve(dt * (res.value + ops.D @ v_next))
    realized = float(np.max(rate)) * dt if rate.size else 0.0
    if realized > 1.0 + 1e-12:
        raise CFLError(
            f"monotonicity lost: dt times the realized rate is {realized:.3g} > 1",
            required_dt=dt / realized,
        )
    return StepResult(v, res.value, res.cp, res.a, pp, pm, jd, res.converged, res.on_box_boundary, realized)


def step_backward(
    model: ModelSpec,
    grid: SpaceGrid,
    v_next,
    t: float,
    dt: float,
    settings: SolverSettings | None = None,
    cp0: ControlPoint | None = None,
) -> StepResult:
    """One backward step ``v(t + dt) -> v(t)`` on the grid.

    The Hamiltonian, drift upwinding and jump operator use ``v(t + dt)``;
    diffusion is explicit or implicit depending on ``settings.scheme``.
    Raises :class:`CFLError` with the required step when the step is too
    large for a monotone update.
    """
    settings = settings or SolverSettings()
    _guard(model, grid)
    ops = _Operators(model, grid, settings)
    scheme, _, _ = _choose_scheme(ops, dt)
    return _step(ops, np.asarray(v_next, dtype=float).reshape(-1), t, dt, scheme, cp0)


def _guard(model: ModelSpec, grid: SpaceGrid | None = None):
    if model.dim > MAX_GRID_DIM:
        raise DimensionError(
            f"state dimension {model.dim} exceeds the grid solver limit {MAX_GRID_DIM}; "
            "use fbsde_crosscheck for higher dimensions"
        )
    if not model.is_cara_risk_neutral:
        raise ModelError("the HJB solver needs CARA agents and a risk-neutral principal")
    _check_time_independent(model)


# --------------------------------------------------------------------------
# Full solve
# --------------------------------------------------------------------------


@dataclass
class ValueSurface:
    """Backward solution on the grid.

    ``v[k]`` is the value at time ``times[k]``; control tables ``z, h, k,
    a`` and the Hamiltonian ``H`` at index ``k`` are the maximizers used on
    ``[times[k], times[k+1])``.  ``p_plus``, ``p_minus`` and ``jump_diff``
    are the difference quotients fed to the sup, so stored controls can be
    re-evaluated.
    """

    model: ModelSpec
    grid: SpaceGrid
    times: np.ndarray
    v: np.ndarray  # (M+1, size)
    z: np.ndarray  # (M, size, N, dN)
    h: np.ndarray  # (M, size, N, J)
    chi: np.ndarray  # (M, size, N)
    a: np.ndarray  # (M, size, nA)
    H: np.ndarray  # (M, size)
    p_plus: np.ndarray  # (M, size, dN)
    p_minus: np.ndarray
    jump_diff: np.ndarray  # (M, size, J)
    settings: SolverSettings
    meta: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def value_at(self, t, x) -> float:
        """``v(t, x)`` by multilinear interpolation (time index of the grid point at or before ``t``)."""
        k = self.time_index(t, slices=True)
        return float(self.grid.interpolate(self.v[k], np.atleast_2d(x), self.settings.boundary)[0])

    def time_index(self, t, slices: bool = False) -> int:
        M = self.n_steps
        k = int(np.floor((float(t) - self.times[0]) / self.dt + 1e-9))
        return int(np.clip(k, 0, M if slices else M - 1))

    @property
    def v0(self) -> float:
        return self.value_at(self.times[0], np.array(self.model.x0))

    @property
    def principal_value(self) -> float:
        """``V_P = v(0, X_0) - sum_i U_A^{-1}(R_0^i)``."""
        return self.v0 - float(np.sum(self.model.reservation_ce()))

    def gradient(self, k: int) -> np.ndarray:
        """Central gradient of ``v[k]`` at the nodes."""
        ops = _Operators(self.model, self.grid, self.settings)
        return ops.central_gradient(self.v[k])

    def control(self, k: int) -> ControlPoint:
        return ControlPoint(self.z[k], self.h[k], self.chi[k])

    def reevaluate(self, k: int) -> np.ndarray:
        """Objective of the sup at the stored controls of step ``k``."""
        jd = self.jump_diff[k] if self.jump_diff.shape[-1] else None
        return hamiltonian_objective(
            self.model, self.times[k], self.grid.points(), self.control(k),
            p_plus=self.p_plus[k], p_minus=self.p_minus[k], jump_diff=jd,
            settings=self.settings.hamiltonian,
        )

    def fingerprint(self) -> str:
        return str(self.meta.get("key", ""))

    # -- export ----------------------------------------------------------

    def to_csv(self, path, steps=None) -> None:
        """Rows ``t, x..., v, |Dv|, z..., chi...`` for the requested time indices."""
        model, grid = self.model, self.grid
        M = self.n_steps
        steps = range(M + 1) if steps is None else steps
        X = grid.points()
        N, dN, J = model.n_agents, model.dim, model.atoms.size
        header = ["t"] + [f"x{m}" for m in range(dN)] + ["v", "grad_norm"]
        header += [f"z{i}_{m}" for i in range(N) for m in range(dN)]
        header += [f"h{i}_{j}" for i in range(N) for j in range(J)]
        header += [f"chi{i}" for i in range(N)]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(header)
            for k in steps:
                g = np.linalg.norm(self.gradient(k), axis=-1)
                kc = min(k, M - 1)
                for b in range(grid.size):
                    row = [self.times[k], *X[b], self.v[k, b], g[b]]
                    row += list(self.z[kc, b].reshape(-1)) + list(self.h[kc, b].reshape(-1))
                    row += list(self.chi[kc, b])
                    wr.writerow([f"{v:.12g}" for v in row])

    def save(self, path) -> None:
        np.savez_compressed(
            path,
            times=self.times, v=self.v, z=self.z, h=self.h, chi=self.chi, a=self.a, H=self.H,
            p_plus=self.p_plus, p_minus=self.p_minus, jump_diff=self.jump_diff,
            meta=json.dumps(self.meta, default=str),
        )

    @classmethod
    def load(cls, path, model: ModelSpec, grid: SpaceGrid, settings: SolverSettings) -> "ValueSurface":
        with np.load(path, allow_pickle=False) as f:
            data = {k: f[k] for k in f.files}
        meta = json.loads(str(data.pop("meta")))
        return cls(model=model, grid=grid, settings=settings, meta=meta, **data)


def cache_key(model: ModelSpec, grid: SpaceGrid, tgrid: TimeGrid, settings: SolverSettings) -> str:
    blob = json.dumps(
        {
            "model": model.to_dict(),
            "grid": grid.to_dict(),
            "time": [tgrid.t0, tgrid.horizon, tgrid.n_steps],
            "settings": settings.to_dict(),
        },
        sort_keys=True,
        default=str,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def solve(
    model: ModelSpec,
    grid: SpaceGrid,
    tgrid: TimeGrid,
    settings: SolverSettings | None = None,
    *,
    terminal=None,
    cache_dir=None,
    require_interior: bool = True,
    boundary_check: bool = False,
) -> ValueSurface:
    """Backward sweep from ``v(T, .) = L`` (or ``terminal``) to ``tgrid.t0``.

    ``terminal`` may be node values or a callable of the node array; it
    defaults to the model's liquidation value.  With ``cache_dir`` the
    surface is stored under a hash of (model, grids, settings) and reused.
    ``boundary_check`` re-solves on a box shrunk by 20% and reports the
    change of ``v(t0, X_0)`` in ``meta["boundary_influence"]``.
    """
    settings = settings or SolverSettings()
    _guard(model, grid)
    if model.dim != grid.dim:
        raise ModelError(f"grid has {grid.dim} dimensions, model state has {model.dim}")
    x0 = np.array(model.x0)
    if not grid.contains_strictly(x0):
        raise ModelError("the grid box must contain X_0 strictly")
    if require_interior and np.any(grid.face_distance(x0) < 0.25 - 1e-12):
        raise ModelError("X_0 must sit at least 25% of the box width away from every face")

    X = grid.points()
    if terminal is None:
        vT = model.liquidation(X)
    elif callable(terminal):
        vT = np.asarray(terminal(X), dtype=float)
    else:
        vT = np.asarray(terminal, dtype=float)
    vT = np.broadcast_to(vT, (grid.size,)).astype(float)
    if not np.all(np.isfinite(vT)):
        raise ModelError("terminal values are not finite on the grid")

    tag = hashlib.sha256(vT.tobytes()).hexdigest()[:8] if terminal is not None else "L"
    key = cache_key(model, grid, tgrid, settings) + "-" + tag
    if cache_dir is not None:
        path = Path(cache_dir) / f"surface-{key}.npz"
        if path.exists():
            surf = ValueSurface.load(path, model, grid, settings)
            surf.meta["cache_hit"] = True
            return surf

    ops = _Operators(model, grid, settings)
    dt = tgrid.dt
    scheme, ratio, req = _choose_scheme(ops, dt)
    times = tgrid.nodes
    M = tgrid.n_steps
    N, dN, J, nA = model.n_agents, model.dim, model.atoms.size, model.n_actions
    S = grid.size
    v = np.empty((M + 1, S))
    v[M] = vT
    z = np.empty((M, S, N, dN))
    h = np.empty((M, S, N, J))
    chi = np.empty((M, S, N))
    a = np.empty((M, S, nA))
    H = np.empty((M, S))
    pp = np.empty((M, S, dN))
    pm = np.empty((M, S, dN))
    jd = np.zeros((M, S, J))
    unconverged = 0
    edge = 0
    worst_rate = 0.0
    cp0 = None
    start = _time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for k in range(M - 1, -1, -1):
            st = _step(ops, v[k + 1], times[k], dt, scheme, cp0 if settings.warm_start else None)
            if not np.all(np.isfinite(st.v)):
                raise ConvergenceError(f"non-finite value at time step {k} (t={times[k]:.4g})", last_iterate=v[k + 1])
            v[k] = st.v
            z[k], h[k], chi[k], a[k], H[k] = st.cp.z, st.cp.h, st.cp.k, st.a, st.H
            pp[k], pm[k] = st.p_plus, st.p_minus
            if st.jump_diff is not None:
                jd[k] = st.jump_diff
            unconverged += int(np.sum(~st.converged))
            edge += int(np.sum(st.on_box_boundary))
            worst_rate = max(worst_rate, st.realized_rate)
            cp0 = st.cp
    meta = {
        "scheme": scheme,
        "boundary": settings.boundary,
        "dt": dt,
        "dx": grid.dx.tolist(),
        "cfl_ratio_bound": ratio,
        "cfl_ratio_realized": worst_rate,
        "required_dt": req,
        "extrapolated_jump_targets": ops.outside,
        "unconverged_sups": unconverged,
        "sup_on_search_box_edge": edge,
        "wall_time": _time.perf_counter() - start,
        "key": key,
    }
    if edge:
        meta["note"] = (
            "some maximizers sit on the edge of the control search box; the sup may only be "
            "attained in the limit and the feedback construction is then outside its hypotheses"
        )
    surf = ValueSurface(model, grid, times, v, z, h, chi, a, H, pp, pm, jd, settings, meta)
    if boundary_check:
        lo, hi = np.array(grid.lo), np.array(grid.hi)
        c = 0.5 * (lo + hi)
        small = SpaceGrid(
            tuple(c - 0.4 * (hi - lo)), tuple(c + 0.4 * (hi - lo)),
            tuple(max(5, int(round(0.8 * (k - 1))) + 1) for k in grid.n),
        )
        if small.contains_strictly(x0):
            other = solve(model, small, tgrid, settings, terminal=terminal, require_interior=False)
            surf.meta["boundary_influence"] = abs(other.v0 - surf.v0)
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        surf.save(Path(cache_dir) / f"surface-{key}.npz")
    return surf


# --------------------------------------------------------------------------
# Feedback policy
# --------------------------------------------------------------------------


class FeedbackPolicy:
    """Interpolated feedback ``(t, x) -> (z*, h*, chi*)`` with ``a*`` recomputed.

    Control tables are interpolated multilinearly in ``x`` (clamped at the
    faces, so values stay in the search box) and piecewise constant in
    time.  Calling the policy returns a batched :class:`ControlPoint`;
    :meth:`actions` and :meth:`chi` give the agents' best responses and the
    flow payments.  ``z_scale`` rescales the paid loading without changing
    the actions the agents take (used to build deliberately wrong
    contracts).
    """

    def __init__(self, surface: ValueSurface, z_scale: float = 1.0, quality: dict | None = None):
        self.surface = surface
        self.model = surface.model
        self.grid = surface.grid
        self.z_scale = float(z_scale)
        self.quality = quality or {}
        s = surface.settings.hamiltonian
        self._inner_tol = s.inner_tol

    def __repr__(self):
        tag = "" if self.z_scale == 1.0 else f", z_scale={self.z_scale}"
        return f"FeedbackPolicy({self.surface.fingerprint() or 'surface'}{tag})"

    def _tables(self, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        k = self.surface.time_index(t)
        W, _ = self.grid.interpolation(x, "clamp")
        P = x.shape[0]
        N, dN, J = self.model.n_agents, self.model.dim, self.model.atoms.size
        z = (W @ self.surface.z[k].reshape(self.grid.size, -1)).reshape(P, N, dN)
        h = (W @ self.surface.h[k].reshape(self.grid.size, -1)).reshape(P, N, J)
        chi = W @ self.surface.chi[k]
        return ControlPoint(z, h, np.maximum(chi, 0.0))

    def controls(self, t, x) -> ControlPoint:
        """Interpolated ``(z*, h*, chi*)`` that generate the agents' actions."""
        return self._tables(t, x)

    def __call__(self, t, x) -> ControlPoint:
        """Controls used for payment (``z`` rescaled by ``z_scale``)."""
        cp = self._tables(t, x)
        if self.z_scale != 1.0:
            cp = ControlPoint(cp.z * self.z_scale, cp.h, cp.k)
        return cp

    def actions(self, t, x) -> np.ndarray:
        """Agents' Nash response ``a*`` at the interpolated (unscaled) controls."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        cp = self._tables(t, x)
        br = best_response_fixed_point(self.model, t, x, None, cp, "cara_g", tol=self._inner_tol)
        return self.model.actions.clip(br.a)

    def chi(self, t, x) -> np.ndarray:
        return self._tables(t, x).k

    def corrupted(self, z_scale: float = 0.5) -> "FeedbackPolicy":
        return FeedbackPolicy(self.surface, z_scale=z_scale, quality=self.quality)


def extract_policy(surface: ValueSurface, n_probes: int = 32, seed: int = 0, rtol: float = 0.05) -> FeedbackPolicy:
    """Feedback maps from the stored maximizers, with an interpolation quality gate.

    At ``n_probes`` random interior points the sup is re-solved with
    interpolated difference quotients and compared with the interpolated
    controls; the worst relative gap is reported in ``policy.quality`` and
    a warning is issued above ``rtol``.
    """
    model, grid = surface.model, surface.grid
    rng = np.random.default_rng(seed)
    lo, hi = np.array(grid.lo), np.array(grid.hi)
    c, half = 0.5 * (lo + hi), 0.25 * (hi - lo)
    pts = c + half * rng.uniform(-1.0, 1.0, size=(n_probes, grid.dim))
    ks = rng.integers(0, surface.n_steps, size=n_probes)
    policy = FeedbackPolicy(surface)
    gaps = np.zeros(n_probes)
    for r in range(n_probes):
        k, x = int(ks[r]), pts[r : r + 1]
        t = surface.times[k]
        W, _ = grid.interpolation(x, "clamp")
        pp, pm = W @ surface.p_plus[k], W @ surface.p_minus[k]
        jd = W @ surface.jump_diff[k] if model.atoms.size else None
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = hamiltonian_sup(model, t, x, p_plus=pp, p_minus=pm, jump_diff=jd,
                                  settings=surface.settings.hamiltonian)
        cp = policy.controls(t, x)
        new = np.concatenate([res.cp.z.reshape(-1), res.cp.h.reshape(-1), res.cp.k.reshape(-1)])
        old = np.concatenate([cp.z.reshape(-1), cp.h.reshape(-1), cp.k.reshape(-1)])
        gaps[r] = np.max(np.abs(new - old)) / max(np.max(np.abs(old)), 0.1)
    worst = int(np.argmax(gaps))
    policy.quality = {
        "probes": n_probes,
        "max_relative_gap": float(gaps[worst]),
        "worst_probe": {"t": float(surface.times[ks[worst]]), "x": pts[worst].tolist()},
        "passed": bool(gaps[worst] <= rtol),
    }
    if not policy.quality["passed"]:
        warnings.warn(
            f"feedback interpolation quality gate failed: relative control gap {gaps[worst]:.3g} "
            f"at t={policy.quality['worst_probe']['t']:.3g}, x={pts[worst].tolist()}",
            RuntimeWarning,
            stacklevel=2,
        )
    return policy


def export_policy_csv(policy: FeedbackPolicy, path, steps=None) -> None:
    """Rows ``t, x..., a*..., z..., h..., chi...`` on the grid nodes."""
    surf = policy.surface
    model, grid = policy.model, policy.grid
    X = grid.points()
    M = surf.n_steps
    steps = range(M) if steps is None else steps
    N, dN, J = model.n_agents, model.dim, model.atoms.size
    header = ["t"] + [f"x{m}" for m in range(dN)] + [f"a{m}" for m in range(model.n_actions)]
    header += [f"z{i}_{m}" for i in range(N) for m in range(dN)]
    header += [f"h{i}_{j}" for i in range(N) for j in range(J)] + [f"chi{i}" for i in range(N)]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for k in steps:
            for b in range(grid.size):
                row = [surf.times[k], *X[b], *surf.a[k, b], *surf.z[k, b].reshape(-1)]
                row += [*surf.h[k, b].reshape(-1), *surf.chi[k, b]]
                wr.writerow([f"{v:.12g}" for v in row])


# --------------------------------------------------------------------------
# FBSDE cross-check
# --------------------------------------------------------------------------


@dataclass
class CrossCheck:
    value: float
    stderr: float
    iterations: int
    history: list[float]
    converged: bool


def _psi_on_paths(model, times, X, zeta, jloads, settings, psi_nodes):
    """``psi(t_k, X_k, zeta_k, H_k)`` on all paths and steps, ``(P, M)``.

    In 1-D the driver is evaluated at ``psi_nodes`` quantiles of the state
    per step, all steps in one batched call, and interpolated.
    """
    P, M = X.shape[0], len(times)
    out = np.empty((P, M))
    if model.dim == 1 and psi_nodes and P > psi_nodes:
        picks, tt = [], []
        for k in range(M):
            xs = X[:, k, 0]
            order = np.argsort(xs, kind="stable")
            pick = order[np.unique(np.linspace(0, P - 1, psi_nodes).round().astype(int))]
            if np.ptp(xs) == 0:
                pick = pick[:1]
            picks.append(pick)
            tt.append(np.full(pick.size, times[k]))
        rows = np.concatenate([np.full(pk.size, k) for k, pk in enumerate(picks)])
        cols = np.concatenate(picks)
        res = hamiltonian_sup(
            model, np.concatenate(tt), X[cols, rows], zeta=zeta[cols, rows],
            jump_diff=None if jloads is None else jloads[cols, rows], settings=settings,
        )
        start = 0
        for k, pick in enumerate(picks):
            vals = res.value[start:start + pick.size]
            start += pick.size
            xs = X[:, k, 0]
            out[:, k] = vals[0] if pick.size == 1 else np.interp(xs, xs[pick], vals)
        return out
    for k in range(M):
        res = hamiltonian_sup(
            model, times[k], X[:, k], zeta=zeta[:, k],
            jump_diff=None if jloads is None else jloads[:, k], settings=settings,
        )
        out[:, k] = res.value
    return out


def fbsde_crosscheck(
    model: ModelSpec,
    t: float,
    x,
    *,
    n_paths: int = 2000,
    n_steps: int = 20,
    seed: int = 0,
    degree: int = 2,
    settings: HamiltonianSettings | None = None,
    tol: float = 1e-4,
    max_iter: int = 25,
    psi_nodes: int = 65,
    driver_tol: float = 1e-6,
    terminal=None,
    bundle=None,
) -> CrossCheck:
    """Picard/LSMC solve of ``Y_s = L(X_T) + int psi dr - int Z dW - int H (mu - F dr)``.

    ``X`` is the driftless state started at ``(t, x)`` with unit jump
    intensities (the reference measure).  Each Picard iteration evaluates
    ``psi`` with the previous iterate's ``(Z, H)`` and redoes the backward
    regression sweep; the iteration stops when ``Y_t`` moves by less than
    ``tol`` and raises :class:`ConvergenceError` when the iterates grow.
    In one dimension ``psi`` is computed at ``psi_nodes`` quantiles of the
    state per step and interpolated.  The sup tolerances are floored at
    ``driver_tol`` (outer) and ``driver_tol / 100`` (inner): the driver only
    has to be far more accurate than the Monte Carlo error.
    """
    if not model.is_cara_risk_neutral:
        raise ModelError("the FBSDE representation needs CARA agents and a risk-neutral principal")
    s = settings or HamiltonianSettings()
    s = replace(s, tol=max(s.tol, driver_tol), inner_tol=max(s.inner_tol, driver_tol / 100))
    x = np.asarray(x, dtype=float).reshape(model.dim)
    if bundle is None:
        tg = TimeGrid(model.horizon, n_steps, t0=float(t))
        bundle = simulate_paths(model, None, tg, n_paths, seed, x0=x, allow_large_jump_prob=True)
    elif bundle.policy != "reference":
        raise ModelError("the cross-check needs paths simulated under the reference measure")
    P, M = bundle.n_paths, bundle.grid.n_steps
    dt = bundle.grid.dt
    times = bundle.grid.nodes
    J = model.atoms.size
    w = model.atoms.weights
    XT = bundle.X[:, -1]
    yT = model.liquidation(XT) if terminal is None else np.asarray(terminal(XT), dtype=float)
    dWref = bundle.dW_reference
    regs = [None] * M
    for k in range(1, M):
        regs[k] = _Regressor(polynomial_features(bundle.X[:, k], degree), 1e-8)

    def sweep(psi):
        """Backward regression with driver values ``psi (P, M)``; returns Y0, se, Z, H."""
        Y = yT.copy()
        Z = np.zeros((P, M, model.noise_dim))
        Hj = np.zeros((P, M, J))
        y0 = se = 0.0
        # the regressed values understate the Monte Carlo spread; the
        # stderr comes from the pathwise sum L(X_T) + sum psi dt instead
        pathwise = yT + psi.sum(axis=1) * dt
        for k in range(M - 1, -1, -1):
            target = Y + psi[:, k] * dt
            if k == 0:
                y0 = float(target.mean())
                se = float(pathwise.std(ddof=1) / np.sqrt(P)) if P > 1 else 0.0
                resid = Y - Y.mean()
                Z[:, 0] = np.mean(resid[:, None] * dWref[:, 0], axis=0) / dt
                for j in range(J):
                    pj = w[j] * dt
                    ind = bundle.jumps[:, 0, j]
                    Hj[:, 0, j] = np.mean(resid * (ind - pj) / (pj * (1 - pj)))
                break
            reg = regs[k]
            cond = reg.fit(Y)
            resid = Y - cond
            Z[:, k] = reg.fit(resid[:, None] * dWref[:, k] / dt)
            for j in range(J):
                pj = w[j] * dt
                ind = bundle.jumps[:, k, j]
                if ind.sum() >= 20:
                    Hj[:, k, j] = reg.fit(resid * (ind - pj) / (pj * (1 - pj)))
                elif ind.any():
                    Hj[:, k, j] = np.mean(resid * (ind - pj) / (pj * (1 - pj)))
            Y = cond + psi[:, k] * dt
        return y0, se, Z, Hj

    psi = np.zeros((P, M))
    y0, se, Z, Hj = sweep(psi)
    history = [y0]
    converged = False
    growth = 0
    it = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for it in range(1, max_iter + 1):
            psi = _psi_on_paths(model, times[:M], bundle.X[:, :M], Z, Hj if J else None, s, psi_nodes)
            y0, se, Z, Hj = sweep(psi)
            history.append(y0)
            d_new = abs(history[-1] - history[-2])
            if d_new < tol:
                converged = True
                break
            if len(history) >= 3:
                d_old = abs(history[-2] - history[-3])
                growth = growth + 1 if d_new > d_old else 0
                if growth >= 3 or not np.isfinite(y0):
                    raise ConvergenceError(
                        "Picard iterates diverge; the driver psi may not be Lipschitz in zeta "
                        "on the search box (reduce z_max / h_max or the horizon)",
                        last_iterate=history,
                        residual=d_new,
                    )
    if not converged:
        raise ConvergenceError(
            f"Picard iteration did not settle within {max_iter} iterations",
            last_iterate=history,
            residual=abs(history[-1] - history[-2]),
        )
    return CrossCheck(y0, se, it, history, converged)
