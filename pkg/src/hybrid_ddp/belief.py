"""Gaussian-belief trajectory optimization.

Beliefs ``(mean, cov)`` are propagated with an extended Kalman filter.
During planning the innovation is zero, so the mean follows the mean
dynamics and only the covariance reacts to observations. The value
function gains a linear covariance term ``V_sigma' vec(dSigma)`` whose
coupling into ``Q_x`` and ``Q_u`` comes from finite differences of the
one-step covariance map.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .ddp import (
    Engine,
    FeedbackPolicy,
    OptimizationResult,
    SolverConfig,
    StepData,
    _expand,
    backward_recursion,
    run_optimizer,
)
from .problem import (
    ControlProblem,
    Linearization,
    RolloutDiverged,
    TrajectoryRecord,
    dynamics_jacobians,
    fd_jacobian,
    final_cost_derivatives,
    running_cost_derivatives,
    unvec,
    vec,
)

COV_MAP_STEP = 1e-4
EIG_FLOOR = 0.0


class FilterFailure(ArithmeticError):
    """Innovation covariance is singular."""


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("covariance shape does not match mean")


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def repair_covariance(cov: np.ndarray) -> np.ndarray:
    """Symmetrize and floor negative eigenvalues (batched)."""
    cov = _sym(cov)
    w = np.linalg.eigvalsh(cov)
    bad = w.min(axis=-1) < EIG_FLOOR
    if bad.any():
        ww, V = np.linalg.eigh(cov[bad])
        cov = cov.copy()
        cov[bad] = np.einsum("...ij,...j,...kj->...ik", V, np.maximum(ww, EIG_FLOOR), V)
    return cov


def state_jacobian(problem: ControlProblem, x, u, a) -> np.ndarray:
    if problem.dynamics.jacobians is not None:
        return problem.dynamics.jacobians(x, u, a)[0]
    return fd_jacobian(lambda p: problem.dynamics.f(p, u[:, None], a[:, None]), x)


def observation_jacobian(problem: ControlProblem, x: np.ndarray) -> np.ndarray:
    obs = problem.observation
    if obs.jacobian is not None:
        return obs.jacobian(x)
    return fd_jacobian(lambda p: obs.h(p), x)


def ekf_predict_update(problem: ControlProblem, x, cov, u, a, z=None):
    """Batched EKF step over rows. Returns ``(mean, cov, transfer)``.

    ``transfer`` is ``(I - K H) A``, the first-order sensitivity of the
    posterior covariance to the prior one (the gain is stationary in the
    Joseph form).
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    a = np.broadcast_to(np.asarray(a), x.shape[:-1])
    n = problem.n_x
    x_pred = problem.dynamics.f(x, u, a)
    A = state_jacobian(problem, x, u, a)
    M = problem.process_noise(x, u, a)
    S_pred = A @ cov @ np.swapaxes(A, -1, -2) + M
    if problem.observation is None:
        return x_pred, repair_covariance(S_pred), A
    H = observation_jacobian(problem, x_pred)
    N = problem.observation.noise(x_pred)
    S = H @ S_pred @ np.swapaxes(H, -1, -2) + N
    PHt = S_pred @ np.swapaxes(H, -1, -2)
    try:
        Kg = np.swapaxes(np.linalg.solve(S, np.swapaxes(PHt, -1, -2)), -1, -2)
    except np.linalg.LinAlgError:
        raise FilterFailure("singular innovation covariance") from None
    if not np.all(np.isfinite(Kg)):
        raise FilterFailure("singular innovation covariance")
    IKH = np.eye(n) - Kg @ H
    post = IKH @ S_pred @ np.swapaxes(IKH, -1, -2) + Kg @ N @ np.swapaxes(Kg, -1, -2)
    mean = x_pred
    if z is not None:
        mean = x_pred + np.einsum("...ij,...j->...i", Kg, np.asarray(z) - problem.observation.h(x_pred))
    return mean, repair_covariance(post), IKH @ A


def ekf_step(belief: GaussianBelief, u, a, problem: ControlProblem, observation=None) -> GaussianBelief:
    """One EKF predict/update step. Without ``observation`` the innovation is zero."""
    z = None if observation is None else np.asarray(observation, dtype=float)[None]
    m, c, _ = ekf_predict_update(problem, belief.mean[None], belief.cov[None], np.asarray(u, dtype=float)[None],
                                 np.asarray([a]), z)
    return GaussianBelief(m[0], c[0])


def covariance_map(problem: ControlProblem, x, u, a, cov):
    return ekf_predict_update(problem, x, cov, u, a)[1]


# ---------------------------------------------------------------------------


def belief_rollout(problem: ControlProblem, mean0, cov0, controls, actions=None) -> TrajectoryRecord:
    controls = np.asarray(controls, dtype=float).reshape(-1, problem.n_u)
    T = len(controls)
    actions = np.zeros(T, dtype=int) if actions is None else np.asarray(actions, dtype=int)
    X = np.empty((T + 1, problem.n_x))
    S = np.empty((T + 1, problem.n_x, problem.n_x))
    X[0], S[0] = mean0, repair_covariance(np.asarray(cov0, dtype=float))
    C = np.empty(T)
    for t in range(T):
        C[t] = problem.cost.running(X[t], controls[t], actions[t], S[t])
        m, c, _ = ekf_predict_update(problem, X[t:t + 1], S[t:t + 1], controls[t:t + 1], actions[t:t + 1])
        X[t + 1], S[t + 1] = m[0], c[0]
        if not np.all(np.isfinite(X[t + 1])):
            raise RolloutDiverged(t + 1)
    final = problem.cost.final(X[T], S[T])
    return TrajectoryRecord(X, controls, actions, C, final, S)


def belief_forward_batch(problem: ControlProblem, nominal: TrajectoryRecord, policy: FeedbackPolicy, alphas,
                         discrete: Optional[str] = None):
    from .ddp import _candidate_actions

    alphas = np.asarray(alphas, dtype=float)
    N, T, n = len(alphas), policy.horizon, problem.n_x
    acts = _candidate_actions(nominal, policy, alphas, discrete)
    X = np.empty((N, T + 1, n))
    S = np.empty((N, T + 1, n, n))
    U = np.empty((N, T, problem.n_u))
    C = np.empty((N, T))
    x = np.repeat(nominal.states[:1], N, axis=0)
    cov = np.repeat(nominal.covariances[:1], N, axis=0)
    X[:, 0], S[:, 0] = x, cov
    alive = np.ones(N, dtype=bool)
    with np.errstate(all="ignore"):
        for t in range(T):
            u = policy.u_ref[t] + alphas[:, None] * policy.k[t] + (x - policy.x_ref[t]) @ policy.K[t].T
            u = problem.project(u)
            C[:, t] = problem.cost.running(x, u, acts[:, t], cov)
            alive &= np.all(np.isfinite(u), axis=-1) & np.all(np.isfinite(x), axis=-1)
            xs = np.where(alive[:, None], x, nominal.states[t])
            us = np.where(alive[:, None], u, nominal.controls[t])
            cov = np.where(alive[:, None, None], cov, nominal.covariances[t])
            try:
                x_new, cov_new, _ = ekf_predict_update(problem, xs, cov, us, acts[:, t])
            except (FilterFailure, np.linalg.LinAlgError, ArithmeticError):
                return [None] * N
            x = np.where(alive[:, None], x_new, np.nan)
            cov = np.where(alive[:, None, None], cov_new, nominal.covariances[t + 1])
            U[:, t], X[:, t + 1], S[:, t + 1] = u, x, cov
        final = problem.cost.final(x, cov)
    out = []
    for i in range(N):
        ok = alive[i] and np.all(np.isfinite(X[i])) and np.all(np.isfinite(C[i])) and np.isfinite(final[i])
        out.append(TrajectoryRecord(X[i], U[i], acts[i], C[i], final[i], S[i]) if ok else None)
    return out


def belief_step_data(problem: ControlProblem, nominal: TrajectoryRecord, greedy: bool = False) -> StepData:
    T = nominal.horizon
    n, m = problem.n_x, problem.n_u
    x, u, covs = nominal.states[:T], nominal.controls, nominal.covariances[:T]
    if greedy:
        A = problem.n_actions
        cand = np.arange(A)
        xr, ur, cr = (np.repeat(v, A, axis=0) for v in (x, u, covs))
        ar = np.tile(cand, T)
    else:
        A = 1
        cand = nominal.actions[:, None]
        xr, ur, cr, ar = x, u, covs, nominal.actions

    fx, fu = dynamics_jacobians(problem, xr, ur, ar)
    c, cx, cu, cxx, cuu, cux = running_cost_derivatives(problem, xr, ur, ar, cr)

    # running-cost sensitivity to the covariance
    c_s = fd_jacobian(lambda p: problem.cost.running(xr[:, None], ur[:, None], ar[:, None], unvec(p, n))[..., None],
                      vec(cr))[:, 0, :]

    # covariance map and its sensitivity to mean and control
    x_next, cov_next, transfer = ekf_predict_update(problem, xr, cr, ur, ar)

    def cmap(p):
        B, P, _ = p.shape
        flat = p.reshape(B * P, -1)
        out = covariance_map(problem, flat[:, :n], flat[:, n:], np.repeat(ar, P), np.repeat(cr, P, axis=0))
        return vec(out).reshape(B, P, -1)

    G = fd_jacobian(cmap, np.concatenate([xr, ur], axis=-1), rel=COV_MAP_STEP)
    G_x, G_u = G[:, :, :n], G[:, :, n:]

    if greedy:
        delta = x_next.reshape(T, A, n) - nominal.states[1:, None, :]
        dsig = vec(cov_next.reshape(T, A, n, n) - nominal.covariances[1:, None])
    else:
        delta = np.zeros((T, 1, n))
        dsig = np.zeros((T, 1, n * n))
    lin = Linearization(*_expand([fx, fu, c, cx, cu, cxx, cuu, cux], A))
    xT, sT = nominal.states[T:], nominal.covariances[T:]
    _, gT, hT = final_cost_derivatives(problem, xT, sT)
    final_s = fd_jacobian(lambda p: problem.cost.final(xT[:, None], unvec(p, n))[..., None], vec(sT))[0, 0]
    G_x, G_u, c_s, transfer = _expand([G_x, G_u, c_s, transfer], A)
    return StepData(lin, delta, gT[0], hT[0], cand, G_x, G_u, transfer, c_s, dsig, final_s)


def belief_backward_pass(problem: ControlProblem, nominal: TrajectoryRecord, reg: float = 0.0, warm=None,
                         greedy: bool = False):
    """Backward pass over a nominal belief trajectory. Returns ``(policy, (dV1, dV2))``."""
    if nominal.covariances is None:
        raise ValueError("nominal trajectory carries no covariances")
    data = belief_step_data(problem, nominal, greedy)
    return backward_recursion(problem, nominal, data, reg, warm, greedy)


class BeliefEngine(Engine):
    def __init__(self, mean0, cov0):
        super().__init__(mean0)
        self.cov0 = np.asarray(cov0, dtype=float)

    def rollout(self, problem, controls, actions):
        return belief_rollout(problem, self.x0, self.cov0, controls, actions)

    def backward(self, problem, nominal, reg, warm, discrete):
        return belief_backward_pass(problem, nominal, reg, warm, greedy=discrete in ("greedy", "interpolate"))

    def forward(self, problem, nominal, policy, alphas, discrete):
        return belief_forward_batch(problem, nominal, policy, alphas, discrete)


def belief_optimize(problem, belief0: GaussianBelief, initial_controls, config: SolverConfig = SolverConfig(),
                    initial_actions=None, discrete: Optional[str] = None,
                    cst_threshold: Optional[float] = None) -> OptimizationResult:
    if discrete not in (None, "greedy", "interpolate"):
        raise ValueError(f"unknown discrete update {discrete!r}")
    engine = BeliefEngine(belief0.mean, belief0.cov)
    return run_optimizer(engine, problem, initial_controls, config, initial_actions, discrete, cst_threshold)


# ---------------------------------------------------------------------------


@dataclass
class ClosedLoopRun:
    record: TrajectoryRecord  # true states, executed controls, realized costs, belief covariances
    belief_means: np.ndarray

    @property
    def total_cost(self) -> float:
        return self.record.total_cost


def simulate_closed_loop(problem: ControlProblem, policy: FeedbackPolicy, belief0: GaussianBelief, true_state0,
                         rng: np.random.Generator, decode: Optional[Callable] = None,
                         project: Optional[Callable] = None, true_step: Optional[Callable] = None) -> ClosedLoopRun:
    """Execute a belief-space policy against a sampled world.

    ``problem`` describes the executed (hybrid) system: its dynamics,
    noise, observation and costs. ``decode(u_policy, action)`` maps the
    policy's control space onto ``(u, action)``. ``true_step(x, mean, u,
    a)`` replaces the mean dynamics for the true state (e.g. to model
    missed contacts).
    """
    T = policy.horizon
    n = problem.n_x
    x = np.asarray(true_state0, dtype=float)
    b = GaussianBelief(belief0.mean.copy(), belief0.cov.copy())
    states, means, covs, controls, actions, costs = [x], [b.mean], [b.cov], [], [], []
    for t in range(T):
        u = policy.control(t, b.mean)
        if project is not None:
            u = project(u)
        a = int(policy.actions[t])
        if decode is not None:
            u, a = decode(u, a)
        costs.append(float(problem.cost.running(x, u, a, b.cov)))
        M = problem.process_noise(x, u, a)
        nxt = problem.dynamics.f(x, u, a) if true_step is None else true_step(x, b.mean, u, a)
        x = nxt + _sample(rng, M, n)
        if problem.observation is not None:
            N = problem.observation.noise(x)
            z = problem.observation.h(x) + _sample(rng, N, N.shape[-1])
        else:
            z = None
        b = ekf_step(b, u, a, problem, z)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(b.mean))):
            raise RolloutDiverged(t + 1)
        states.append(x)
        means.append(b.mean)
        covs.append(b.cov)
        controls.append(u)
        actions.append(a)
    rec = TrajectoryRecord(np.array(states), np.array(controls).reshape(T, -1), np.array(actions, dtype=int),
                           np.array(costs), float(problem.cost.final(x, b.cov)), np.array(covs))
    return ClosedLoopRun(rec, np.array(means))


def _sample(rng, cov, n):
    cov = np.asarray(cov, dtype=float)
    if not np.any(cov):
        # keep the stream aligned whether or not noise is present
        rng.standard_normal(n)
        return np.zeros(n)
    w, V = np.linalg.eigh(_sym(cov))
    return V @ (np.sqrt(np.maximum(w, 0.0)) * rng.standard_normal(n))
