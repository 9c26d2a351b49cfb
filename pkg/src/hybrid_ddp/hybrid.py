"""Discrete actions inside DDP: mixture relaxation and greedy baselines.

The mixture relaxation appends one pseudo-probability per discrete
action to the continuous control and blends dynamics and costs:

    f_hat(x, [u, p]) = sum_a p_a f(x, u, a)
    c_hat(x, [u, p]) = sum_a phi(p_a) c(x, u, a) + C_ST * c_ST(p)

``c_ST`` is zero at every vertex of the simplex and maximal at the
uniform distribution; its weight ``C_ST`` is annealed upward during
optimization so the probabilities end up deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .problem import ControlBounds, ControlProblem, CostSpec, DynamicsSpec, fd_hessian

KAPPA = 0.01
INITIAL_NOMINAL_PROBABILITY = 1.0 - 1e-10


def pseudo_huber(p, kappa: float = KAPPA):
    p = np.asarray(p, dtype=float)
    return np.sqrt(p * p + kappa * kappa) - kappa


def pseudo_huber_grad(p, kappa: float = KAPPA):
    p = np.asarray(p, dtype=float)
    return p / np.sqrt(p * p + kappa * kappa)


def pseudo_huber_hess(p, kappa: float = KAPPA):
    p = np.asarray(p, dtype=float)
    return kappa * kappa / (p * p + kappa * kappa) ** 1.5


def _branches(p, n_actions):
    p = np.asarray(p, dtype=float)
    p_th = 1.0 / n_actions
    scale = (1.0 - p_th) / p_th  # reciprocal of p_th / (1 - p_th)
    upper = p >= p_th
    arg = np.where(upper, (1.0 - p) * scale, p)
    return upper, arg, scale


def stochasticity_cost(p, cst: float, n_actions: int | None = None):
    """Annealed penalty on non-deterministic action probabilities (last axis)."""
    p = np.asarray(p, dtype=float)
    n_actions = p.shape[-1] if n_actions is None else n_actions
    _, arg, _ = _branches(p, n_actions)
    return cst * pseudo_huber(arg).sum(axis=-1)


def stochasticity_cost_derivatives(p, cst: float, n_actions: int | None = None):
    """Gradient and (diagonal) second derivative of ``stochasticity_cost``.

    Derivatives are taken inside the active branch.
    """
    p = np.asarray(p, dtype=float)
    n_actions = p.shape[-1] if n_actions is None else n_actions
    upper, arg, scale = _branches(p, n_actions)
    d1 = np.where(upper, -scale, 1.0) * pseudo_huber_grad(arg)
    d2 = np.where(upper, scale * scale, 1.0) * pseudo_huber_hess(arg)
    return cst * d1, cst * d2


def normalize_probabilities(p_raw):
    """Clamp to [0, 1] and renormalize along the last axis (uniform if the mass vanishes)."""
    p = np.clip(np.asarray(p_raw, dtype=float), 0.0, 1.0)
    s = p.sum(axis=-1, keepdims=True)
    uniform = np.full_like(p, 1.0 / p.shape[-1])
    return np.where(s < 1e-12, uniform, p / np.where(s < 1e-12, 1.0, s))


def initial_probabilities(action: int, n_actions: int, p_nominal: float = INITIAL_NOMINAL_PROBABILITY):
    p = np.full(n_actions, (1.0 - p_nominal) / (n_actions - 1))
    p[action] = p_nominal
    return p


def extract_discrete_plan(probabilities) -> np.ndarray:
    """Most likely action per step; ties go to the lowest index."""
    return np.argmax(np.asarray(probabilities), axis=-1)


# ---------------------------------------------------------------------------
# C_ST annealing


@dataclass(frozen=True)
class CstSchedule:
    value: float = 0.0
    first: float = 0.01
    threshold: float = 0.01
    maximum: float = 1.28

    @property
    def at_max(self) -> bool:
        return self.value >= self.maximum


def update_cst(schedule: CstSchedule, last_cost_decrease: float, iteration: int, max_iterations: int) -> CstSchedule:
    if iteration >= max_iterations / 2:
        return replace(schedule, value=schedule.maximum)
    if last_cost_decrease < schedule.threshold:
        if schedule.value == 0.0:
            return replace(schedule, value=min(schedule.first, schedule.maximum))
        return replace(schedule, value=min(2.0 * schedule.value, schedule.maximum))
    return schedule


# ---------------------------------------------------------------------------
# mixture problem


@dataclass(frozen=True)
class MixtureProblem:
    """Relaxation of a hybrid problem; ``relaxed(cst)`` yields the continuous problem."""

    base: ControlProblem
    kappa: float = KAPPA

    @property
    def n_actions(self) -> int:
        return self.base.n_actions

    @property
    def n_u(self) -> int:
        return self.base.n_u + self.base.n_actions

    def split(self, u_hat):
        u_hat = np.asarray(u_hat)
        return u_hat[..., : self.base.n_u], u_hat[..., self.base.n_u:]

    def dynamics(self, x, u_hat, a=None):
        u, p = self.split(u_hat)
        acts = np.arange(self.n_actions)
        xs = self.base.dynamics.f(np.asarray(x)[..., None, :], u[..., None, :], acts)
        return np.einsum("...a,...an->...n", p, xs)

    def noise(self, x, u_hat, a=None):
        u, p = self.split(u_hat)
        acts = np.arange(self.n_actions)
        Ms = self.base.process_noise(np.asarray(x)[..., None, :], u[..., None, :], acts)
        return np.einsum("...a,...anm->...nm", p, Ms)

    def base_cost(self, x, u_hat, a=None, cov=None):
        u, p = self.split(u_hat)
        acts = np.arange(self.n_actions)
        cv = None if cov is None else np.asarray(cov)[..., None, :, :]
        cs = self.base.cost.running(np.asarray(x)[..., None, :], u[..., None, :], acts, cv)
        return np.sum(pseudo_huber(p, self.kappa) * cs, axis=-1)

    def relaxed(self, cst: float = 0.0) -> ControlProblem:
        base = self.base
        n, nu, na = base.n_x, base.n_u, self.n_actions

        def running(x, u_hat, a=None, cov=None):
            return self.base_cost(x, u_hat, a, cov) + stochasticity_cost(self.split(u_hat)[1], cst, na)

        def running_derivatives(x, u_hat, a, cov):
            z = np.concatenate([x, u_hat], axis=-1)
            cv = None if cov is None else cov[:, None]
            c, g, H = fd_hessian(lambda q: self.base_cost(q[..., :n], q[..., n:], None, cv), z)
            p = u_hat[:, nu:]
            d1, d2 = stochasticity_cost_derivatives(p, cst, na)
            c = c + stochasticity_cost(p, cst, na)
            g[:, n + nu:] += d1
            idx = np.arange(n + nu, n + nu + na)
            H[:, idx, idx] += d2
            return c, g[:, :n], g[:, n:], H[:, :n, :n], H[:, n:, n:], H[:, n:, :n]

        noise = None if base.dynamics.noise is None else self.noise
        prob_bounds = ControlBounds(np.zeros(na), np.ones(na))
        names = dict(base.names)
        if "controls" in names and "actions" in names:
            names["controls"] = tuple(names["controls"]) + tuple(f"p_{a}" for a in names["actions"])
        return ControlProblem(
            dynamics=DynamicsSpec(self.dynamics, noise),
            cost=CostSpec(running, base.cost.final, running_derivatives, base.cost.final_derivatives),
            bounds=base.bounds + prob_bounds,
            n_x=n,
            n_u=nu + na,
            n_actions=1,
            simplex_groups=(tuple(range(nu, nu + na)),),
            observation=base.observation,
            names=names,
        )

    def initial_controls(self, u0, actions) -> np.ndarray:
        u0 = np.asarray(u0, dtype=float)
        P = np.stack([initial_probabilities(int(a), self.n_actions) for a in actions])
        return np.concatenate([u0, P], axis=-1)


def augment(problem: ControlProblem, kappa: float = KAPPA) -> MixtureProblem:
    if problem.n_actions < 2:
        raise ValueError("mixture relaxation needs at least two discrete actions")
    return MixtureProblem(problem, kappa)


# ---------------------------------------------------------------------------
# greedy / interpolated baselines


def greedy_pick(scores, nominal: int) -> int:
    """Argmin of ``scores``, keeping ``nominal`` unless another action is strictly better."""
    scores = np.asarray(scores, dtype=float)
    best = int(np.argmin(scores))
    if scores[best] < scores[nominal] - 1e-12 * max(1.0, abs(scores[nominal])):
        return best
    return int(nominal)


def greedy_action_choice(x, u, value, dynamics, cost, n_actions: int, nominal: int = 0, x_next_ref=None) -> int:
    """Pick the action minimizing stage cost plus the quadratic next-step value.

    ``value`` is a ``ValueExpansion``-like object with ``V``, ``V_x`` and
    ``V_xx``; it is expanded around ``x_next_ref`` (defaults to the
    successor under the nominal action).
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x_next_ref is None:
        x_next_ref = np.asarray(dynamics(x, u, nominal), dtype=float)
    scores = []
    for a in range(n_actions):
        d = np.asarray(dynamics(x, u, a), dtype=float) - x_next_ref
        Vx = np.atleast_1d(value.V_x)
        Vxx = np.atleast_2d(value.V_xx)
        scores.append(float(cost(x, u, a)) + float(value.V) + Vx @ d + 0.5 * d @ Vxx @ d)
    return greedy_pick(scores, nominal)


def interpolate_actions(old: Sequence[int], new: Sequence[int], alpha: float) -> np.ndarray:
    """Adopt a fraction ``alpha`` of the changed actions, spread evenly over time."""
    old = np.asarray(old, dtype=int)
    new = np.asarray(new, dtype=int)
    if old.shape != new.shape:
        raise ValueError("action sequences differ in length")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    out = old.copy()
    D = np.nonzero(old != new)[0]
    count = min(len(D), math.ceil(alpha * len(D) - 1e-9))
    if count <= 0:
        return out
    pick = D[(np.arange(count) * len(D)) // count]
    out[pick] = new[pick]
    return out
