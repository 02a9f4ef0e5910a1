"""Path simulation under a feedback action, Girsanov densities, estimators.

Random numbers come from one counter-based Philox stream per path, keyed by
``(seed, path index)``, so a path does not depend on how the batch is split
across workers.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ModelError, SimulationError
from .model_core import ModelSpec

__all__ = [
    "TimeGrid",
    "PathBundle",
    "ConstantPolicy",
    "simulate_paths",
    "girsanov_density",
    "estimate_expectation",
    "path_rng",
    "export_paths_csv",
]

Policy = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t0 = t_0 < ... < t_M = T``."""

    horizon: float
    n_steps: int
    t0: float = 0.0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("need at least one time step")
        if not self.horizon > self.t0:
            raise ValueError("horizon must exceed the start time")

    @property
    def dt(self) -> float:
        return (self.horizon - self.t0) / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        nodes = self.t0 + self.dt * np.arange(self.n_steps + 1)
        nodes[-1] = self.horizon
        return nodes


class ConstantPolicy:
    """Feedback map returning the same joint action everywhere."""

    def __init__(self, a):
        self.a = np.atleast_1d(np.asarray(a, dtype=float))

    def __call__(self, t, x):
        x = np.asarray(x)
        return np.broadcast_to(self.a, x.shape[:-1] + self.a.shape)

    def __repr__(self):
        return f"ConstantPolicy({self.a.tolist()})"


@dataclass
class PathBundle:
    """Simulated paths.

    ``dW`` are Brownian increments under the simulation measure; ``b`` and
    ``lam`` are the drift loading and atom intensities that generated the
    paths (``b = 0``, ``lam = 1`` for the reference measure).  ``density``
    is the Girsanov density of the simulation measure with respect to the
    reference measure, so reference-measure expectations are
    ``mean(F / density_T)``.
    """

    grid: TimeGrid
    X: np.ndarray  # (P, M+1, dN)
    dW: np.ndarray  # (P, M, n)
    b: np.ndarray  # (P, M, n)
    lam: np.ndarray  # (P, M, J)
    jumps: np.ndarray  # (P, M, J) bool
    dXc: np.ndarray  # (P, M, dN) continuous increments Sigma (b dt + dW)
    dXj: np.ndarray  # (P, M, dN) jump increments
    actions: np.ndarray | None  # (P, M, n_actions)
    density: np.ndarray  # (P, M+1)
    seed: int
    path_ids: np.ndarray
    policy: str = "reference"
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.grid.nodes

    @property
    def dW_reference(self) -> np.ndarray:
        """Increments of the reference-measure Brownian motion ``W``."""
        return self.dW + self.b * self.grid.dt

    def jump_events(self) -> list[tuple[int, int, int]]:
        """``(path, step, atom)`` triples of realized jumps."""
        return [tuple(map(int, r)) for r in np.argwhere(self.jumps)]


def path_rng(seed: int, path: int) -> np.random.Generator:
    """Counter-based stream for one path."""
    if seed < 0 or path < 0:
        raise ValueError("seed and path index must be nonnegative")
    return np.random.Generator(np.random.Philox(key=(int(seed) << 64) | int(path)))


def _draws(seed, ids, M, n, J):
    normals = np.empty((ids.size, M, n))
    unif = np.empty((ids.size, M, J))
    for r, pid in enumerate(ids):
        g = path_rng(seed, int(pid))
        normals[r] = g.standard_normal((M, n))
        unif[r] = g.random((M, J))
    return normals, unif


def _simulate_chunk(model, policy, grid, ids, seed, x0, max_jump_prob, allow_large):
    M, dt = grid.n_steps, grid.dt
    n, dN, J = model.noise_dim, model.dim, model.atoms.size
    P = ids.size
    normals, unif = _draws(seed, ids, M, n, J)
    dW = normals * np.sqrt(dt)
    X = np.empty((P, M + 1, dN))
    X[:, 0] = x0
    bs = np.zeros((P, M, n))
    lams = np.ones((P, M, J))
    jumps = np.zeros((P, M, J), dtype=bool)
    dXc = np.empty((P, M, dN))
    dXj = np.zeros((P, M, dN))
    acts = None if policy is None else np.empty((P, M, model.n_actions))
    logd = np.zeros((P, M + 1))
    w = model.atoms.weights
    times = grid.nodes
    for k in range(M):
        t, x = times[k], X[:, k]
        sig = model.sigma_matrix(t, x)
        if policy is not None:
            a = np.asarray(policy(t, x), dtype=float).reshape(P, model.n_actions)
            if not np.all(model.actions.contains(a)):
                bad = int(np.argmin(model.actions.contains(a)))
                raise SimulationError(f"policy left the action space at t={t}, path {int(ids[bad])}: {a[bad]}")
            acts[:, k] = a
            b = model.drift_loading(t, x, a)
            bs[:, k] = b
            for j in range(J):
                lams[:, k, j] = model.intensity(j, t, x, a)
            if J and np.any(lams[:, k] <= 0):
                raise ModelError(f"non-positive jump intensity at t={t}")
        else:
            b = bs[:, k]
        if J:
            prob = lams[:, k] * w * dt
            total = prob.sum(axis=1)
            worst = float(total.max())
            if worst > 1.0:
                raise SimulationError(
                    f"per-step jump probability {worst:.3g} exceeds 1 at t={t}; refine the time grid"
                )
            if worst > max_jump_prob and not allow_large:
                raise SimulationError(
                    f"per-step jump probability {worst:.3g} exceeds {max_jump_prob}; "
                    "refine the time grid or pass allow_large_jump_prob=True"
                )
            jumps[:, k] = unif[:, k] < prob
            for j in range(J):
                hit = jumps[:, k, j]
                if np.any(hit):
                    dXj[hit, k] += model.jump_shift(j, t, x[hit])
            lj = np.where(jumps[:, k], np.log(lams[:, k]), 0.0).sum(axis=1)
            logd[:, k + 1] = logd[:, k] + lj - ((lams[:, k] - 1.0) * w * dt).sum(axis=1)
        else:
            logd[:, k + 1] = logd[:, k]
        dWref = dW[:, k] + b * dt
        logd[:, k + 1] += np.sum(b * dWref, axis=1) - 0.5 * np.sum(b * b, axis=1) * dt
        dXc[:, k] = np.einsum("pmn,pn->pm", sig, b * dt + dW[:, k])
        X[:, k + 1] = x + dXc[:, k] + dXj[:, k]
    return X, dW, bs, lams, jumps, dXc, dXj, acts, np.exp(logd)


def simulate_paths(
    model: ModelSpec,
    policy: Policy | None,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    *,
    x0=None,
    workers: int = 1,
    max_jump_prob: float = 0.1,
    allow_large_jump_prob: bool = False,
    first_path: int = 0,
) -> PathBundle:
    """Euler scheme with per-atom Bernoulli jump thinning.

    ``policy=None`` simulates the reference measure (``b = 0``, unit
    intensities).  Otherwise ``policy(t, x)`` maps ``(P, dN)`` states to
    ``(P, n_actions)`` joint actions.  ``x0`` overrides the model's initial
    state (a single state or one per path).
    """
    if n_paths < 1:
        raise SimulationError("need at least one path")
    ids = np.arange(first_path, first_path + n_paths)
    start = np.broadcast_to(np.asarray(model.x0 if x0 is None else x0, dtype=float), (n_paths, model.dim))
    workers = max(1, int(workers))
    chunks = np.array_split(np.arange(n_paths), workers) if workers > 1 else [np.arange(n_paths)]
    chunks = [c for c in chunks if c.size]

    def run(c):
        return _simulate_chunk(
            model, policy, grid, ids[c], seed, start[c], max_jump_prob, allow_large_jump_prob
        )

    if len(chunks) == 1:
        parts = [run(chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(run, chunks))
    cat = [np.concatenate([p[i] for p in parts]) if parts[0][i] is not None else None for i in range(9)]
    return PathBundle(
        grid=grid,
        X=cat[0], dW=cat[1], b=cat[2], lam=cat[3], jumps=cat[4], dXc=cat[5], dXj=cat[6],
        actions=cat[7], density=cat[8], seed=int(seed), path_ids=ids,
        policy="reference" if policy is None else repr(policy),
    )


def girsanov_density(model: ModelSpec, bundle: PathBundle, policy: Policy) -> np.ndarray:
    """Density paths ``M^alpha`` of the policy's measure w.r.t. the reference measure.

    Per step: ``exp(b . dW - |b|^2 dt / 2)`` with ``dW`` the reference
    Brownian increment, a factor ``lambda`` at each jump and
    ``exp(-sum_atoms (lambda - 1) w dt)``.
    """
    M, dt = bundle.grid.n_steps, bundle.grid.dt
    P, J = bundle.n_paths, model.atoms.size
    w = model.atoms.weights
    dWref = bundle.dW_reference
    logd = np.zeros((P, M + 1))
    times = bundle.grid.nodes
    for k in range(M):
        t, x = times[k], bundle.X[:, k]
        a = np.asarray(policy(t, x), dtype=float).reshape(P, model.n_actions)
        b = model.drift_loading(t, x, a)
        inc = np.sum(b * dWref[:, k], axis=1) - 0.5 * np.sum(b * b, axis=1) * dt
        if J:
            lam = np.stack([model.intensity(j, t, x, a) for j in range(J)], axis=-1)
            if np.any(lam <= 0):
                raise ModelError(f"non-positive jump intensity at t={t}; density would lose positivity")
            inc = inc + np.where(bundle.jumps[:, k], np.log(lam), 0.0).sum(axis=1)
            inc = inc - ((lam - 1.0) * w * dt).sum(axis=1)
        logd[:, k + 1] = logd[:, k] + inc
    return np.exp(logd)


def estimate_expectation(bundle: PathBundle, functional, reweight=None) -> tuple[float, float]:
    """Monte Carlo mean and standard error.

    ``functional`` is a per-path array or a callable on the bundle.
    ``reweight`` is a density path array (or terminal densities) of a target
    measure w.r.t. the reference measure; the estimator then uses
    ``functional * M_T / density_T`` so it is valid whatever measure the
    bundle was simulated under.
    """
    vals = functional(bundle) if callable(functional) else functional
    vals = np.asarray(vals, dtype=float).reshape(-1)
    if vals.size == 0:
        raise SimulationError("cannot estimate from zero paths")
    if vals.size != bundle.n_paths:
        raise ValueError("functional must give one value per path")
    if not np.all(np.isfinite(vals)):
        bad = int(np.argmin(np.isfinite(vals)))
        raise SimulationError(f"non-finite functional value on path {int(bundle.path_ids[bad])}")
    if reweight is not None:
        dens = np.asarray(reweight, dtype=float)
        dens = dens[:, -1] if dens.ndim == 2 else dens
        vals = vals * dens / bundle.density[:, -1]
    P = vals.size
    mean = float(np.sum(vals) / P)
    if P == 1:
        return mean, 0.0
    se = float(np.sqrt(np.sum((vals - mean) ** 2) / (P - 1) / P))
    return mean, se


def export_paths_csv(bundle: PathBundle, path) -> None:
    """Columns: path, node, t, x0..x{dN-1}, density."""
    P, M1, dN = bundle.X.shape
    times = bundle.grid.nodes
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["path", "node", "t"] + [f"x{m}" for m in range(dN)] + ["density"])
        for p in range(P):
            pid = int(bundle.path_ids[p])
            for k in range(M1):
                wr.writerow(
                    [pid, k, repr(float(times[k]))]
                    + [repr(float(v)) for v in bundle.X[p, k]]
                    + [repr(float(bundle.density[p, k]))]
                )
