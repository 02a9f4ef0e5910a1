"""Batched derivative-free maximization over boxes.

Every routine maximizes many independent problems at once.  The objective
receives candidate points of shape ``(B, K, D)`` (B problems, K candidates
each) and returns values of shape ``(B, K)``.

One-dimensional problems use a coarse scan, a few zoom rounds around the
best sample, then safeguarded parabolic steps; the parabola is exact for
quadratic objectives, which is the common case for the built-in models.
Higher dimensions use cyclic coordinate ascent with the same line search.
Ties go to the first (smallest) candidate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

Objective = Callable[[np.ndarray], np.ndarray]
_ROUND = 16 * np.finfo(float).eps


@dataclass
class OptResult:
    x: np.ndarray  # (B, D)
    value: np.ndarray  # (B,)
    converged: np.ndarray  # (B,) bool
    sweeps: int
    n_calls: int


class _Counter:
    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def __call__(self, pts):
        self.calls += 1
        vals = np.asarray(self.fn(pts), dtype=float)
        # NaN never wins a comparison
        return np.where(np.isnan(vals), -np.inf, vals)


def _clearly_better(new, old):
    """Improvement beyond rounding noise; keeps results smooth in the inputs."""
    scale = np.maximum(np.maximum(np.abs(new), np.abs(old)), 1.0)
    with np.errstate(invalid="ignore"):
        return (new - old > _ROUND * scale) | (np.isfinite(new) & ~np.isfinite(old))


def _vertex(x0, f0, x1, f1, x2, f2):
    """Abscissa of the parabola through three distinct points (any order)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        s01 = (f1 - f0) / (x1 - x0)
        s12 = (f2 - f1) / (x2 - x1)
        curv = (s12 - s01) / (x2 - x0)
        v = 0.5 * (x0 + x1) - s01 / (2.0 * curv) + 0.0 * x2
    ok = np.isfinite(v) & (curv < 0)
    return np.where(ok, v, x1)


def line_maximize(
    f: Callable[[np.ndarray], np.ndarray],
    lo: np.ndarray,
    hi: np.ndarray,
    *,
    tol: float = 1e-9,
    n_coarse: int = 17,
    n_zoom: int = 3,
    n_refine: int = 9,
    max_polish: int = 40,
    start: tuple[np.ndarray, np.ndarray] | None = None,
    radius: np.ndarray | None = None,
):
    """Maximize ``B`` scalar functions over intervals ``[lo, hi]``.

    ``f`` maps candidates ``(B, K)`` to values ``(B, K)``.  With ``start``
    (point, value) and ``radius`` the coarse scan is skipped and the search
    starts locally, expanding if the maximum sits on the local bracket.
    Returns ``(x, fx, converged)``.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    span = hi - lo
    if start is None:
        grid = lo[:, None] + span[:, None] * np.linspace(0.0, 1.0, n_coarse)[None, :]
        vals = f(grid)
        idx = np.argmax(vals, axis=1)
        rows = np.arange(lo.size)
        xb, fb = grid[rows, idx], vals[rows, idx]
        h = span / (n_coarse - 1)
        offs = np.linspace(-1.0, 1.0, n_refine)
        for _ in range(n_zoom):
            if not np.any(h > tol):
                break
            grid = np.clip(xb[:, None] + h[:, None] * offs[None, :], lo[:, None], hi[:, None])
            vals = f(grid)
            idx = np.argmax(vals, axis=1)
            better = _clearly_better(vals[rows, idx], fb)
            xb = np.where(better, grid[rows, idx], xb)
            fb = np.where(better, vals[rows, idx], fb)
            h = h * 2.0 / (n_refine - 1)
    else:
        xb, fb = (np.asarray(v, dtype=float).copy() for v in start)
        h = np.minimum(np.asarray(radius, dtype=float) * np.ones_like(xb), span)
    h = np.where(span > 0, np.maximum(h, 0.0), 0.0)

    done = ~(h > tol)
    prev_curv = np.full(xb.shape, np.nan)
    smooth = done.copy()
    for _ in range(max_polish):
        active = ~done
        if not np.any(active):
            break
        # keep three distinct abscissae when the stencil hits the box
        xm = np.where(xb - h < lo, np.minimum(hi, xb + 0.5 * h), xb - h)
        xp = np.where(xb + h > hi, np.maximum(lo, xb - 0.5 * h), xb + h)
        vals = f(np.stack([xm, xp], axis=1))
        fm, fp = vals[:, 0], vals[:, 1]
        xv = np.clip(_vertex(xm, fm, xb, fb, xp, fp), np.maximum(lo, xb - h), np.minimum(hi, xb + h))
        fv = f(xv[:, None])[:, 0]
        # a stencil point must beat the incumbent by more than rounding; the
        # vertex only has to be no worse, so the result tracks the vertex
        # formula (smooth in the inputs) instead of rounding noise
        side = np.where(fp > fm, 2, 1)
        f_side = np.where(side == 2, fp, fm)
        idx = np.where(_clearly_better(f_side, fb), side, 0)
        f_inc = np.where(idx > 0, f_side, fb)
        # a stencil whose values differ only at rounding level carries no
        # information: stop at the incumbent
        scale = np.maximum(np.abs(fb), 1.0)
        flat = np.maximum(np.abs(fm - fb), np.abs(fp - fb)) <= 64 * _ROUND * scale
        take_v = ~_clearly_better(f_inc, fv) & ~flat
        idx = np.where(take_v, 3, idx)
        cand_x = np.stack([xb, xm, xp, xv], axis=1)
        cand_f = np.stack([fb, fm, fp, fv], axis=1)
        rows = np.arange(xb.size)
        newx, newf = cand_x[rows, idx], cand_f[rows, idx]
        moved = np.abs(newx - xb)
        # the edge of the local bracket won: the maximum may lie further out
        at_edge = ((idx == 1) & (xm > lo) & (xm < xb)) | ((idx == 2) & (xp < hi) & (xp > xb))
        shrink = np.minimum(h / 4.0, np.maximum(4.0 * moved, h / 256.0))
        hnew = np.where(at_edge, np.minimum(2.0 * h, span), shrink)
        xb = np.where(active, newx, xb)
        fb = np.where(active, newf, fb)
        # a settled vertex also needs a stable curvature estimate across two
        # bracket sizes; at a kink the estimate keeps growing as h shrinks
        with np.errstate(divide="ignore", invalid="ignore"):
            curv = (fp - 2.0 * fb + fm) / (h * h)
            stable = np.abs(curv - prev_curv) <= 0.1 * np.abs(prev_curv)
        prev_curv = np.where(active, curv, prev_curv)
        settled = ((idx == 3) & (moved <= 1e-3 * h) & stable) | (flat & (idx == 0))
        h = np.where(active, hnew, h)
        smooth = smooth | (active & settled)
        done = done | (active & (settled | ~(h > tol)))
    xb, fb = _kink_step(f, xb, fb, np.where(smooth, 0.0, np.maximum(h, tol)), lo, hi)
    return xb, fb, done


def _kink_step(f, xb, fb, h, lo, hi, rounds: int = 6):
    """Intersect secants from both sides of ``xb`` (rows with ``h > 0``).

    At a concave kink the bracket only shrinks linearly and the value
    error is first order in the final bracket; the intersection of the
    two one-sided secants locates the kink to second order.  The stencil
    widens until it straddles the kink, then one more pass at the base
    width refines the estimate.
    """
    offs = np.array([-4.0, -2.0, 2.0, 4.0])
    width = h.copy()
    stage = np.where(h > 0, 0, 2)  # 0 search, 1 refine, 2 finished
    for _ in range(rounds):
        rows = (stage < 2) & (xb - 4 * width >= lo) & (xb + 4 * width <= hi)
        if not np.any(rows):
            break
        pts = xb[:, None] + np.where(rows, width, 0.0)[:, None] * offs[None, :]
        v = f(pts)
        with np.errstate(divide="ignore", invalid="ignore"):
            sl = (v[:, 1] - v[:, 0]) / (pts[:, 1] - pts[:, 0])
            sr = (v[:, 3] - v[:, 2]) / (pts[:, 3] - pts[:, 2])
            xk = (v[:, 2] - v[:, 1] + sl * pts[:, 1] - sr * pts[:, 2]) / (sl - sr)
        scale = np.maximum(np.abs(fb), 1.0)
        kink = rows & ((sl - sr) * 2 * width > 64 * _ROUND * scale) & np.isfinite(xk)
        kink &= (xk > pts[:, 1]) & (xk < pts[:, 2])
        if np.any(kink):
            fk = f(np.where(kink, xk, xb)[:, None])[:, 0]
            take = kink & ~_clearly_better(fb, fk)
            xb = np.where(take, xk, xb)
            fb = np.where(take, fk, fb)
        search = rows & (stage == 0)
        width = np.where(search & kink, h, np.where(search, 8.0 * width, width))
        stage = np.where(search & kink, 1, np.where(rows & (stage == 1), 2, stage))
        stage = np.where(~rows, 2, stage)
    return xb, fb


def maximize(
    fn: Objective,
    lo: np.ndarray,
    hi: np.ndarray,
    *,
    tol: float = 1e-9,
    x0: np.ndarray | None = None,
    max_sweeps: int = 60,
    n_coarse: int = 17,
    n_zoom: int = 3,
) -> OptResult:
    """Maximize ``B`` functions of ``D`` variables over boxes ``lo <= x <= hi``.

    ``lo`` and ``hi`` have shape ``(B, D)`` (or ``(D,)``, broadcast to the
    batch given by ``x0``).  Coordinates with ``lo == hi`` are held fixed.
    """
    lo = np.atleast_2d(np.asarray(lo, dtype=float))
    hi = np.atleast_2d(np.asarray(hi, dtype=float))
    if x0 is not None:
        x0 = np.atleast_2d(np.asarray(x0, dtype=float))
        lo, hi, x0 = np.broadcast_arrays(lo, hi, x0)
        x = np.clip(x0, lo, hi)
    else:
        x = 0.5 * (lo + hi)
    lo, hi, x = lo.copy(), hi.copy(), x.copy()
    if np.any(lo > hi):
        raise ValueError("lower bound exceeds upper bound")
    B, D = x.shape
    fn = _Counter(fn)
    free = [d for d in range(D) if np.any(hi[:, d] > lo[:, d])]

    if not free:
        val = fn(x[:, None, :])[:, 0]
        return OptResult(x, val, np.ones(B, bool), 0, fn.calls)

    def coord_fn(d):
        def f(cand):
            pts = np.repeat(x[:, None, :], cand.shape[1], axis=1)
            pts[:, :, d] = cand
            return fn(pts)

        return f

    if len(free) == 1:
        d = free[0]
        xd, val, conv = line_maximize(
            coord_fn(d), lo[:, d], hi[:, d], tol=tol, n_coarse=n_coarse, n_zoom=n_zoom
        )
        x[:, d] = xd
        return OptResult(x, val, conv, 1, fn.calls)

    val = fn(x[:, None, :])[:, 0]
    change = np.full((B, D), np.inf)
    converged = np.zeros(B, bool)
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        before = x.copy()
        live = ~converged
        for d in free:
            if sweeps == 1 and x0 is None:
                xd, vd, _ = line_maximize(
                    coord_fn(d), lo[:, d], hi[:, d], tol=tol, n_coarse=n_coarse, n_zoom=n_zoom
                )
            else:
                rad = np.maximum(np.where(np.isfinite(change[:, d]), 4.0 * change[:, d], 0.0), 8 * tol)
                if sweeps == 1:
                    rad = 0.25 * (hi[:, d] - lo[:, d])
                xd, vd, _ = line_maximize(
                    coord_fn(d), lo[:, d], hi[:, d], tol=tol, start=(x[:, d], val), radius=rad
                )
            # rows that already converged stay frozen so each row's result
            # does not depend on the rest of the batch
            take = live & ~_clearly_better(val, vd)
            x[:, d] = np.where(take, xd, x[:, d])
            val = np.where(take, vd, val)
        change = np.abs(x - before)
        converged = converged | (np.max(change, axis=1) <= tol)
        if np.all(converged):
            break
    return OptResult(x, val, converged, sweeps, fn.calls)


def newton_polish(fn: Objective, x: np.ndarray, val: np.ndarray, lo, hi, slack: float = 64 * _ROUND):
    """One finite-difference Newton step from ``x`` with a fixed stencil.

    Makes the returned maximizer a smooth function of the problem data
    (exact for quadratic objectives).  Coordinates at a bound with the
    gradient pointing outward stay fixed; the step is kept only where it
    is not worse by more than ``slack`` (relative), which absorbs the
    evaluation noise of nested objectives.  Returns new ``(x, val)``.
    """
    x = np.asarray(x, dtype=float)
    val = np.asarray(val, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    B, d = x.shape
    span = hi - lo
    live = span > 0
    if not np.any(live) or B == 0:
        return x, val
    delta = np.where(live, 1e-4 * span, 0.0)
    c = np.where(live, np.clip(x, lo + delta, hi - delta), x)
    offs = [np.zeros(d)]
    for m in range(d):
        e = np.zeros(d)
        e[m] = delta[m]
        offs += [e, -e]
    pairs = [(m, q) for m in range(d) for q in range(m + 1, d) if live[m] and live[q]]
    for m, q in pairs:
        for sm in (1, -1):
            for sq in (1, -1):
                e = np.zeros(d)
                e[m], e[q] = sm * delta[m], sq * delta[q]
                offs.append(e)
    offs = np.array(offs)
    f = np.asarray(fn(c[:, None, :] + offs[None, :, :]), dtype=float)
    g = np.zeros((B, d))
    H = np.zeros((B, d, d))
    f0 = f[:, 0]
    for m in range(d):
        if not live[m]:
            continue
        fp, fm = f[:, 1 + 2 * m], f[:, 2 + 2 * m]
        g[:, m] = (fp - fm) / (2 * delta[m])
        H[:, m, m] = (fp - 2 * f0 + fm) / delta[m] ** 2
    for r, (m, q) in enumerate(pairs):
        base = 1 + 2 * d + 4 * r
        fpp, fpm, fmp, fmm = (f[:, base + s] for s in range(4))
        H[:, m, q] = H[:, q, m] = (fpp - fpm - fmp + fmm) / (4 * delta[m] * delta[q])
    gx = g + np.einsum("bmq,bq->bm", H, x - c)
    at_lo = x <= lo + 1e-12 * span
    at_hi = x >= hi - 1e-12 * span
    free = live & ~((at_lo & (gx <= 0)) | (at_hi & (gx >= 0)))
    Hm = np.where(free[:, :, None] & free[:, None, :], H, -np.eye(d))
    gm = np.where(free, gx, 0.0)
    with np.errstate(all="ignore"):
        ok = np.all(np.isfinite(Hm), axis=(1, 2)) & np.all(np.isfinite(gm), axis=1)
        ok[ok] = np.all(np.linalg.eigvalsh(Hm[ok]) < 0, axis=1)
        step = np.zeros((B, d))
        if np.any(ok):
            step[ok] = -np.linalg.solve(Hm[ok], gm[ok][:, :, None])[:, :, 0]
    xn = np.clip(x + step, lo, hi)
    fnew = np.asarray(fn(xn[:, None, :]), dtype=float)[:, 0]
    scale = np.maximum(np.abs(val), 1.0)
    with np.errstate(invalid="ignore"):
        keep = ok & np.isfinite(fnew) & (fnew >= val - slack * scale)
    return np.where(keep[:, None], xn, x), np.where(keep, fnew, val)


def grid_scan(fn: Objective, lo: np.ndarray, hi: np.ndarray, n: int = 101):
    """Brute-force maximum over a tensor grid (oracle / certificate helper).

    ``lo``, ``hi`` have shape ``(D,)``; returns ``(argmax (B, D), max (B,))``.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    axes = [np.linspace(l, h, n) if h > l else np.array([l]) for l, h in zip(lo, hi)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, lo.size)
    vals = np.asarray(fn(mesh[None, :, :]), dtype=float)
    idx = np.argmax(vals, axis=1)
    return mesh[idx], vals[np.arange(vals.shape[0]), idx]
