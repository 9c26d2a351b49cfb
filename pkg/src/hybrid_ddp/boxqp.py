"""Projected-Newton QP for control-limited gains.

Minimizes ``0.5 d'Hd + g'd`` subject to ``lower <= d <= upper`` and,
optionally, fixed sums over disjoint index groups (the probability
blocks of mixture controls).

Within a group the Newton direction is restricted to the zero-sum
subspace, i.e. mean-centered for ``H = I``, and the Armijo step is
capped so no group entry crosses its bound. Entries outside groups are
handled by projection, as in the box-only solver.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import null_space

ARMIJO = 0.1
BACKTRACK = 0.5
MIN_STEP = 1e-20


class QpFailure(ArithmeticError):
    """Free-subspace Hessian is not positive definite."""


class QpInfeasible(ValueError):
    """A group target lies outside the range its bounds allow."""


@dataclass
class QpSolution:
    delta: np.ndarray
    clamped: np.ndarray
    free_inverse: np.ndarray  # Z (Z'HZ)^-1 Z' over the free subspace; zero on clamped rows/cols
    iterations: int
    objective: float
    converged: bool = True


def _objective(H, g, x):
    return 0.5 * x @ H @ x + g @ x


def _shift_to_sum(xg, lo, hi, tgt):
    """Scalar ``tau`` with ``sum(clip(xg + tau, lo, hi)) = tgt``; the sum is piecewise linear in ``tau``."""
    knots = np.unique(np.concatenate([lo - xg, hi - xg]))
    sums = np.clip(xg[None, :] + knots[:, None], lo, hi).sum(axis=1)
    k = int(np.searchsorted(sums, tgt))
    if k == 0:
        return knots[0]
    if k == len(knots):
        return knots[-1]
    t0, t1, s0, s1 = knots[k - 1], knots[k], sums[k - 1], sums[k]
    return t1 if s1 == s0 else t0 + (tgt - s0) * (t1 - t0) / (s1 - s0)


def project_feasible(x, lower, upper, groups, targets):
    """Euclidean projection onto the box intersected with the group-sum hyperplanes."""
    x = np.clip(np.asarray(x, dtype=float), lower, upper)
    for grp, tgt in zip(groups, targets):
        lo, hi = lower[grp], upper[grp]
        if tgt < lo.sum() - 1e-12 or tgt > hi.sum() + 1e-12:
            raise QpInfeasible(f"group {list(grp)} cannot sum to {tgt}")
        xg = x[grp]
        y = np.clip(xg + _shift_to_sum(xg, lo, hi, tgt), lo, hi)
        # spread the last rounding residue over interior entries
        inner = (y > lo) & (y < hi)
        if inner.any():
            y[inner] += (tgt - y.sum()) / inner.sum()
            y = np.clip(y, lo, hi)
        x[grp] = y
    return x


@functools.lru_cache(maxsize=None)
def _sum_free_basis(k):
    N = null_space(np.ones((1, k)))
    N.flags.writeable = False
    return N


class _Layout:
    def __init__(self, n, groups):
        self.n = n
        self.groups = [np.asarray(g, dtype=int) for g in groups]
        self.in_group = np.zeros(n, dtype=bool)
        for g in self.groups:
            self.in_group[g] = True

    def basis(self, free):
        """Orthonormal basis of free directions that keep every group sum fixed."""
        cols = []
        for i in np.nonzero(free & ~self.in_group)[0]:
            e = np.zeros(self.n)
            e[i] = 1.0
            cols.append(e[:, None])
        for g in self.groups:
            gf = g[free[g]]
            if len(gf) < 2:
                continue
            N = _sum_free_basis(len(gf))
            Z = np.zeros((self.n, N.shape[1]))
            Z[gf] = N
            cols.append(Z)
        if not cols:
            return np.zeros((self.n, 0))
        return np.hstack(cols)


def _clamped_set(x, grad, lower, upper, layout: _Layout):
    at_lo = x <= lower
    at_hi = x >= upper
    clamped = np.zeros(layout.n, dtype=bool)
    box = ~layout.in_group
    clamped[box] = (at_lo[box] & (grad[box] > 0)) | (at_hi[box] & (grad[box] < 0))
    for g in layout.groups:
        bound = at_lo[g] | at_hi[g]
        free = ~bound
        for _ in range(len(g) + 1):
            ref = grad[g][free] if free.any() else grad[g]
            lam = ref.mean()
            dev = grad[g] - lam
            release = bound & ~free & ((at_lo[g] & (dev < 0)) | (at_hi[g] & (dev > 0)))
            if not release.any():
                break
            free = free | release
        clamped[g] = ~free
    return clamped


def _direction(H, grad, clamped, x, lower, upper, layout):
    """Reduced Newton step; group entries that would leave their bound are clamped."""
    clamped = clamped.copy()
    while True:
        Z = layout.basis(~clamped)
        if Z.shape[1] == 0:
            return np.zeros(layout.n), Z, None, clamped
        Hr = Z.T @ H @ Z
        try:
            L = np.linalg.cholesky(Hr)
        except np.linalg.LinAlgError:
            raise QpFailure("free-subspace Hessian is not positive definite") from None
        rg = Z.T @ grad
        d = -Z @ np.linalg.solve(L.T, np.linalg.solve(L, rg))
        stuck = layout.in_group & ~clamped & (((x <= lower) & (d < 0)) | ((x >= upper) & (d > 0)))
        if not stuck.any():
            return d, Z, L, clamped
        clamped |= stuck


def _snap(x, lower, upper, rel: float = 1e-12):
    with np.errstate(invalid="ignore"):
        near_lo = np.isfinite(lower) & (x - lower <= rel * np.maximum(1.0, np.abs(lower)))
        near_hi = np.isfinite(upper) & (upper - x <= rel * np.maximum(1.0, np.abs(upper)))
    return np.where(near_lo, lower, np.where(near_hi, upper, x))


def _free_inverse(Z, L):
    if L is None or Z.shape[1] == 0:
        return np.zeros((Z.shape[0], Z.shape[0]))
    Linv_Zt = np.linalg.solve(L, Z.T)
    return Linv_Zt.T @ Linv_Zt


def solve_box_simplex(H, g, lower, upper, groups: Sequence[Sequence[int]] = (), targets: Optional[Sequence[float]] = None,
                      warm_start=None, tol: float = 1e-8, max_iter: int = 100) -> QpSolution:
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    n = len(g)
    lower = np.broadcast_to(np.asarray(lower, dtype=float), (n,)).copy()
    upper = np.broadcast_to(np.asarray(upper, dtype=float), (n,)).copy()
    layout = _Layout(n, groups)
    if targets is None:
        targets = [0.0] * len(layout.groups)
    x0 = np.zeros(n) if warm_start is None else np.asarray(warm_start, dtype=float)
    x = project_feasible(np.where(np.isfinite(x0), x0, 0.0), lower, upper, layout.groups, targets)

    value = _objective(H, g, x)
    it = 0
    converged = False
    while True:
        grad = g + H @ x
        clamped = _clamped_set(x, grad, lower, upper, layout)
        d, Z, L, clamped = _direction(H, grad, clamped, x, lower, upper, layout)
        if Z.shape[1] == 0 or np.linalg.norm(Z.T @ grad) <= tol:
            converged = True
            break
        if it >= max_iter:
            break
        it += 1

        cap = 1.0
        gm = layout.in_group & (d != 0)
        if gm.any():
            room = np.where(d[gm] < 0, (lower[gm] - x[gm]) / d[gm], (upper[gm] - x[gm]) / d[gm])
            cap = min(cap, float(np.min(room)))
        step = cap
        accepted = False
        while step > MIN_STEP:
            xn = x + step * d
            box = ~layout.in_group
            xn[box] = np.clip(xn[box], lower[box], upper[box])
            xn[layout.in_group] = np.clip(xn[layout.in_group], lower[layout.in_group], upper[layout.in_group])
            # a capped step leaves the blocking entry a rounding error off its bound
            xn = _snap(xn, lower, upper)
            vn = _objective(H, g, xn)
            if value - vn >= ARMIJO * grad @ (x - xn) and vn <= value:
                accepted = True
                break
            step *= BACKTRACK
        if not accepted:
            break
        improvement = value - vn
        x, value = xn, vn
        if improvement <= 1e-15 * max(1.0, abs(value)):
            grad = g + H @ x
            clamped = _clamped_set(x, grad, lower, upper, layout)
            d, Z, L, clamped = _direction(H, grad, clamped, x, lower, upper, layout)
            converged = Z.shape[1] == 0 or np.linalg.norm(Z.T @ grad) <= max(tol, 1e-10)
            break

    return QpSolution(x, clamped, _free_inverse(Z, L), it, float(value), converged)


def solve_box(H, g, lower, upper, warm_start=None, tol: float = 1e-8, max_iter: int = 100) -> QpSolution:
    """Box-constrained QP (no group constraints)."""
    return solve_box_simplex(H, g, lower, upper, (), None, warm_start, tol, max_iter)
