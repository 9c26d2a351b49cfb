"""Hybrid control problem definition and numerical differentiation helpers.

All user-supplied maps are expected to be vectorized over leading axes:
``f(x, u, a)`` receives ``x`` of shape ``(..., n_x)``, ``u`` of shape
``(..., n_u)`` and an integer action array broadcastable to ``(...)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

GRAD_STEP = 1e-5
HESS_STEP = 1e-4


class DifferentiationError(ArithmeticError):
    """A finite-difference probe produced a non-finite value."""

    def __init__(self, coordinate: int, message: str = ""):
        self.coordinate = coordinate
        super().__init__(message or f"non-finite value while differentiating coordinate {coordinate}")


class RolloutDiverged(ArithmeticError):
    def __init__(self, t: int):
        self.t = t
        super().__init__(f"non-finite state at timestep {t}")


@dataclass(frozen=True)
class ControlBounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape:
            raise ValueError("bound shapes differ")
        if np.any(lo > hi):
            raise ValueError("lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unbounded(cls, n: int) -> "ControlBounds":
        return cls(np.full(n, -np.inf), np.full(n, np.inf))

    def clamp(self, u: np.ndarray) -> np.ndarray:
        return np.clip(u, self.lower, self.upper)

    def __add__(self, other: "ControlBounds") -> "ControlBounds":
        return ControlBounds(np.concatenate([self.lower, other.lower]), np.concatenate([self.upper, other.upper]))


@dataclass(frozen=True)
class DynamicsSpec:
    """Mean transition ``f(x, u, a)`` and process-noise covariance ``M(x, u, a)``.

    ``jacobians`` optionally returns analytic ``(f_x, f_u)`` for batched inputs.
    """

    f: Callable
    noise: Optional[Callable] = None
    jacobians: Optional[Callable] = None


@dataclass(frozen=True)
class ObservationSpec:
    h: Callable
    noise: Callable
    jacobian: Optional[Callable] = None


@dataclass(frozen=True)
class CostSpec:
    """Running cost ``c(x, u, a, cov)`` and final cost ``c_T(x, cov)``.

    ``cov`` is ``None`` for fully observable problems. The optional
    derivative callables return ``(c, c_x, c_u, c_xx, c_uu, c_ux)`` and
    ``(c, c_x, c_xx)`` for batched inputs.
    """

    running: Callable
    final: Callable
    running_derivatives: Optional[Callable] = None
    final_derivatives: Optional[Callable] = None


@dataclass(frozen=True)
class ControlProblem:
    dynamics: DynamicsSpec
    cost: CostSpec
    bounds: ControlBounds
    n_x: int
    n_u: int
    n_actions: int = 1
    simplex_groups: tuple = ()
    observation: Optional[ObservationSpec] = None
    names: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.bounds.lower.shape != (self.n_u,):
            raise ValueError(f"bounds have shape {self.bounds.lower.shape}, expected ({self.n_u},)")
        groups = tuple(tuple(int(i) for i in g) for g in self.simplex_groups)
        seen: set = set()
        for g in groups:
            if seen.intersection(g):
                raise ValueError("simplex groups overlap")
            seen.update(g)
        object.__setattr__(self, "simplex_groups", groups)

    def project(self, u: np.ndarray) -> np.ndarray:
        """Clamp to bounds and renormalize every probability group."""
        u = self.bounds.clamp(u)
        if self.simplex_groups:
            # local import: hybrid depends on this module
            from .hybrid import normalize_probabilities

            u = np.array(u, dtype=float, copy=True)
            for g in self.simplex_groups:
                idx = list(g)
                u[..., idx] = normalize_probabilities(u[..., idx])
        return u

    def process_noise(self, x, u, a) -> np.ndarray:
        if self.dynamics.noise is None:
            return np.zeros(np.broadcast_shapes(x.shape[:-1], u.shape[:-1]) + (self.n_x, self.n_x))
        return self.dynamics.noise(x, u, a)


@dataclass
class TrajectoryRecord:
    """States (or belief means), controls, discrete actions and stage costs."""

    states: np.ndarray
    controls: np.ndarray
    actions: np.ndarray
    stage_costs: np.ndarray
    final_cost: float
    covariances: Optional[np.ndarray] = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.controls = np.asarray(self.controls, dtype=float)
        if self.controls.ndim != 2:
            self.controls = self.controls.reshape(len(self.stage_costs), -1)
        self.actions = np.asarray(self.actions, dtype=int)
        self.stage_costs = np.asarray(self.stage_costs, dtype=float)
        self.final_cost = float(self.final_cost)
        if len(self.states) != len(self.controls) + 1:
            raise ValueError("state sequence must be one longer than the control sequence")
        if len(self.actions) != len(self.controls):
            raise ValueError("one action per control step required")

    @property
    def horizon(self) -> int:
        return len(self.controls)

    @property
    def total_cost(self) -> float:
        return float(np.sum(self.stage_costs) + self.final_cost)


# ---------------------------------------------------------------------------
# finite differences


def _steps(z: np.ndarray, rel: float) -> np.ndarray:
    return rel * np.maximum(1.0, np.abs(z))


def finite_diff_jacobian(f: Callable, x, step: float = GRAD_STEP) -> np.ndarray:
    """Central-difference Jacobian of a vector map at a single point.

    ``step`` is an absolute step applied to every coordinate.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        fp = np.atleast_1d(np.asarray(f(x + e), dtype=float))
        fm = np.atleast_1d(np.asarray(f(x - e), dtype=float))
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise DifferentiationError(j)
        cols.append((fp - fm) / (2 * step))
    return np.stack(cols, axis=-1)


def quadratize_cost(c: Callable, x, u, step: float = HESS_STEP):
    """Value, gradients and symmetric Hessian blocks of a scalar ``c(x, u)``.

    ``c`` is called on single points. Returns
    ``(c, c_x, c_u, c_xx, c_uu, c_ux)``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n = x.size

    def fz(z):
        z = np.asarray(z)
        flat = z.reshape(-1, z.shape[-1])
        out = np.array([float(c(p[:n], p[n:])) for p in flat])
        return out.reshape(z.shape[:-1])

    z = np.concatenate([x, u])[None]
    val, grad, hess = fd_hessian(fz, z, rel=step, absolute=True)
    grad, hess = grad[0], hess[0]
    return float(val[0]), grad[:n], grad[n:], hess[:n, :n], hess[n:, n:], hess[n:, :n]


def fd_jacobian(fun: Callable, z: np.ndarray, rel: float = GRAD_STEP) -> np.ndarray:
    """Batched central-difference Jacobian.

    ``z`` has shape ``(B, d)``; ``fun`` maps ``(B, P, d)`` to ``(B, P, o)``.
    Returns ``(B, o, d)``.
    """
    B, d = z.shape
    h = _steps(z, rel)
    eye = np.eye(d)
    pts = np.concatenate([z[:, None, :] + eye * h[:, None, :], z[:, None, :] - eye * h[:, None, :]], axis=1)
    out = np.asarray(fun(pts), dtype=float)
    # maps that ignore some inputs may return unbroadcast results
    out = np.broadcast_to(out, (B, 2 * d) + out.shape[2:])
    bad = ~np.isfinite(out)
    if bad.any():
        j = int(np.nonzero(bad.reshape(B, 2 * d, -1).any(axis=(0, 2)))[0][0]) % d
        raise DifferentiationError(j)
    diff = (out[:, :d] - out[:, d:]) / (2 * h)[:, :, None]
    return np.swapaxes(diff, 1, 2)


def fd_hessian(fun: Callable, z: np.ndarray, rel: float = HESS_STEP, grad_rel: float = GRAD_STEP,
               absolute: bool = False):
    """Batched value, gradient and symmetrized Hessian of a scalar map.

    ``fun`` maps ``(B, P, d)`` to ``(B, P)``. The gradient uses the finer
    ``grad_rel`` step; the Hessian uses ``rel``.
    """
    B, d = z.shape
    if absolute:
        h = np.full_like(z, rel)
        hg = np.full_like(z, rel)
    else:
        h = _steps(z, rel)
        hg = _steps(z, grad_rel)
    eye = np.eye(d)
    iu, ju = np.triu_indices(d, 1)
    E_i = eye[iu] * h[:, None, :].repeat(len(iu), 1) if len(iu) else np.zeros((B, 0, d))
    E_j = eye[ju] * h[:, None, :].repeat(len(ju), 1) if len(ju) else np.zeros((B, 0, d))
    zc = z[:, None, :]
    pts = np.concatenate([
        zc,
        zc + eye * hg[:, None, :],
        zc - eye * hg[:, None, :],
        zc + eye * h[:, None, :],
        zc - eye * h[:, None, :],
        zc + E_i + E_j,
        zc + E_i - E_j,
        zc - E_i + E_j,
        zc - E_i - E_j,
    ], axis=1)
    out = np.broadcast_to(np.asarray(fun(pts), dtype=float), pts.shape[:-1])
    if not np.all(np.isfinite(out)):
        k = int(np.nonzero(~np.isfinite(out).all(axis=0))[0][0])
        raise DifferentiationError((k - 1) % d if 0 < k <= 4 * d else 0)
    f0 = out[:, 0]
    o = 1
    gp, gm = out[:, o:o + d], out[:, o + d:o + 2 * d]
    o += 2 * d
    hp, hm = out[:, o:o + d], out[:, o + d:o + 2 * d]
    o += 2 * d
    m = len(iu)
    fpp, fpm, fmp, fmm = (out[:, o + k * m:o + (k + 1) * m] for k in range(4))
    grad = (gp - gm) / (2 * hg)
    hess = np.zeros((B, d, d))
    hess[:, np.arange(d), np.arange(d)] = (hp - 2 * f0[:, None] + hm) / h**2
    if m:
        off = (fpp - fpm - fmp + fmm) / (4 * h[:, iu] * h[:, ju])
        hess[:, iu, ju] = off
        hess[:, ju, iu] = off
    return f0, grad, hess


def vec(m: np.ndarray) -> np.ndarray:
    """Column-wise stacking of the trailing two axes."""
    return np.swapaxes(m, -1, -2).reshape(m.shape[:-2] + (-1,))


def unvec(v: np.ndarray, n: int) -> np.ndarray:
    return np.swapaxes(v.reshape(v.shape[:-1] + (n, n)), -1, -2)


# ---------------------------------------------------------------------------
# linearization along a trajectory


@dataclass
class Linearization:
    fx: np.ndarray
    fu: np.ndarray
    c: np.ndarray
    cx: np.ndarray
    cu: np.ndarray
    cxx: np.ndarray
    cuu: np.ndarray
    cux: np.ndarray


def dynamics_jacobians(problem: ControlProblem, x: np.ndarray, u: np.ndarray, a: np.ndarray):
    """Batched ``(f_x, f_u)`` at rows of ``x``, ``u`` with actions ``a``."""
    if problem.dynamics.jacobians is not None:
        return problem.dynamics.jacobians(x, u, a)
    n = problem.n_x
    z = np.concatenate([x, u], axis=-1)
    J = fd_jacobian(lambda p: problem.dynamics.f(p[..., :n], p[..., n:], a[:, None]), z)
    return J[:, :, :n], J[:, :, n:]


def running_cost_derivatives(problem: ControlProblem, x, u, a, cov=None):
    if problem.cost.running_derivatives is not None:
        return problem.cost.running_derivatives(x, u, a, cov)
    n = problem.n_x
    z = np.concatenate([x, u], axis=-1)
    cv = None if cov is None else cov[:, None]
    c, g, H = fd_hessian(lambda p: problem.cost.running(p[..., :n], p[..., n:], a[:, None], cv), z)
    return c, g[:, :n], g[:, n:], H[:, :n, :n], H[:, n:, n:], H[:, n:, :n]


def final_cost_derivatives(problem: ControlProblem, x, cov=None):
    if problem.cost.final_derivatives is not None:
        return problem.cost.final_derivatives(x, cov)
    cv = None if cov is None else cov[:, None]
    c, g, H = fd_hessian(lambda p: problem.cost.final(p, cv), x)
    return c, g, H


def linearize(problem: ControlProblem, states, controls, actions, covs=None) -> Linearization:
    T = len(controls)
    x = states[:T]
    cv = None if covs is None else covs[:T]
    fx, fu = dynamics_jacobians(problem, x, controls, actions)
    c, cx, cu, cxx, cuu, cux = running_cost_derivatives(problem, x, controls, actions, cv)
    return Linearization(fx, fu, c, cx, cu, cxx, cuu, cux)


# ---------------------------------------------------------------------------


def rollout(problem: ControlProblem, x0, controls, actions: Optional[Sequence[int]] = None) -> TrajectoryRecord:
    """Apply the mean dynamics to a control sequence and record costs."""
    controls = np.asarray(controls, dtype=float).reshape(-1, problem.n_u)
    T = len(controls)
    actions = np.zeros(T, dtype=int) if actions is None else np.asarray(actions, dtype=int)
    x0 = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise RolloutDiverged(0)
    states = np.empty((T + 1, problem.n_x))
    states[0] = x0
    costs = np.empty(T)
    for t in range(T):
        costs[t] = problem.cost.running(states[t], controls[t], actions[t], None)
        states[t + 1] = problem.dynamics.f(states[t], controls[t], actions[t])
        if not np.all(np.isfinite(states[t + 1])):
            raise RolloutDiverged(t + 1)
    final = problem.cost.final(states[T], None)
    return TrajectoryRecord(states, controls, actions, costs, final)
