"""Control-limited iLQG.

Backward pass: quadratize cost, linearize dynamics (no second-order
dynamics terms), solve a box/simplex QP per step for the forward gain
and compute the feedback gain on the free subspace. Forward pass:
``u = u_bar + alpha * k + K (x - x_bar)`` with a backtracking line
search and Levenberg-style regularization on ``Q_uu``.

The same loop drives the greedy and interpolated discrete baselines,
the mixture relaxation (with ``C_ST`` annealing) and, through
:mod:`hybrid_ddp.belief`, the Gaussian-belief solver.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .boxqp import QpFailure, QpInfeasible, solve_box_simplex
from .hybrid import CstSchedule, MixtureProblem, greedy_pick, interpolate_actions, update_cst
from .problem import (
    ControlProblem,
    Linearization,
    RolloutDiverged,
    TrajectoryRecord,
    dynamics_jacobians,
    final_cost_derivatives,
    rollout,
    running_cost_derivatives,
)

CUU_EIG_FLOOR = 1e-6


class BackwardPassFailure(ArithmeticError):
    def __init__(self, t: int):
        self.t = t
        super().__init__(f"QP failed at timestep {t}")


class ForwardDiverged(ArithmeticError):
    pass


@dataclass
class ValueExpansion:
    V: float
    V_x: np.ndarray
    V_xx: np.ndarray
    V_sigma: Optional[np.ndarray] = None


@dataclass
class QExpansion:
    Q_x: np.ndarray
    Q_u: np.ndarray
    Q_xx: np.ndarray
    Q_uu: np.ndarray
    Q_ux: np.ndarray


@dataclass
class FeedbackPolicy:
    """Time-varying affine policy around a reference trajectory."""

    k: np.ndarray  # (T, m)
    K: np.ndarray  # (T, m, n)
    clamped: np.ndarray  # (T, m) bool
    x_ref: np.ndarray  # (T+1, n)
    u_ref: np.ndarray  # (T, m)
    actions: np.ndarray  # (T,)
    alpha: float = 1.0
    cov_ref: Optional[np.ndarray] = None

    @property
    def horizon(self) -> int:
        return len(self.k)

    def control(self, t: int, x) -> np.ndarray:
        return self.u_ref[t] + self.alpha * self.k[t] + self.K[t] @ (np.asarray(x) - self.x_ref[t])

    @classmethod
    def open_loop(cls, record: TrajectoryRecord) -> "FeedbackPolicy":
        T, m = record.controls.shape
        n = record.states.shape[1]
        return cls(np.zeros((T, m)), np.zeros((T, m, n)), np.zeros((T, m), dtype=bool), record.states.copy(),
                   record.controls.copy(), record.actions.copy(), 1.0, record.covariances)


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 400
    horizon: int = 500
    reg_init: float = 1e-6
    reg_min: float = 1e-6
    reg_factor: float = 10.0
    reg_max: float = 1e10
    alphas: tuple = tuple(0.5 ** np.arange(11))
    tolerance: float = 1e-6
    acceptance_ratio: float = 1e-4
    cst_first: float = 0.01
    cst_max: float = 1.28

    def __post_init__(self):
        a = np.asarray(self.alphas)
        if self.max_iterations < 1 or self.horizon < 1:
            raise ValueError("iteration and horizon counts must be positive")
        if not (np.all(a > 0) and np.all(a <= 1) and np.all(np.diff(a) < 0)):
            raise ValueError("alphas must be strictly decreasing in (0, 1]")
        if min(self.reg_factor, self.reg_max, self.tolerance) <= 0 or self.reg_init < 0:
            raise ValueError("regularization and tolerance settings must be positive")


@dataclass
class IterationRecord:
    iteration: int
    total_cost: float
    alpha: float
    regularization: float
    cst: float
    accepted: bool


@dataclass
class OptimizationResult:
    trajectory: TrajectoryRecord
    policy: FeedbackPolicy
    log: list
    converged: bool
    problem: ControlProblem

    @property
    def iterations(self) -> int:
        return len(self.log)


def log_to_csv(log, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "total_cost", "alpha", "regularization", "C_ST"])
    for r in log:
        w.writerow([r.iteration, repr(float(r.total_cost)), repr(float(r.alpha)), repr(float(r.regularization)),
                    repr(float(r.cst))])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


# ---------------------------------------------------------------------------
# backward pass machinery shared with the belief solver


def repair_cuu(cuu: np.ndarray, floor: float = CUU_EIG_FLOOR) -> np.ndarray:
    """Raise eigenvalues of (batched) control Hessians to at least ``floor``."""
    cuu = 0.5 * (cuu + np.swapaxes(cuu, -1, -2))
    w, V = np.linalg.eigh(cuu)
    bad = (w < floor).any(axis=-1)
    if not bad.any():
        return cuu
    out = cuu.copy()
    wb = np.maximum(w[bad], floor)
    out[bad] = np.einsum("...ij,...j,...kj->...ik", V[bad], wb, V[bad])
    return out


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def compute_gains(q: QExpansion, reg: float, lower, upper, groups=(), targets=None, warm=None):
    """Forward/feedback gains from a Q-expansion via the box/simplex QP.

    ``lower``/``upper`` are bounds on the control change. Returns
    ``(k, K, clamped, V_x, V_xx, (dV1, dV2))``.
    """
    m = len(q.Q_u)
    Quu = _sym(q.Q_uu)
    sol = solve_box_simplex(Quu + reg * np.eye(m), q.Q_u, lower, upper, groups, targets, warm)
    k = sol.delta
    K = -sol.free_inverse @ q.Q_ux
    K[sol.clamped] = 0.0
    Vx = q.Q_x + K.T @ Quu @ k + K.T @ q.Q_u + q.Q_ux.T @ k
    Vxx = q.Q_xx + K.T @ Quu @ K + K.T @ q.Q_ux + q.Q_ux.T @ K
    return k, K, sol.clamped, Vx, _sym(Vxx), (float(k @ q.Q_u), float(0.5 * k @ Quu @ k))


@dataclass
class StepData:
    """Per-step expansion data with a candidate-action axis ``A``.

    ``A == 1`` unless greedy action selection is active. ``delta`` is the
    successor offset from the nominal next state for each candidate.
    """

    lin: Linearization  # arrays shaped (T, A, ...)
    delta: np.ndarray  # (T, A, n)
    final_x: np.ndarray
    final_xx: np.ndarray
    candidates: np.ndarray  # (A,) action index per candidate, or (T, A)
    # belief extras
    G_x: Optional[np.ndarray] = None  # (T, A, n2, n)
    G_u: Optional[np.ndarray] = None  # (T, A, n2, m)
    cov_transfer: Optional[np.ndarray] = None  # (T, A, n, n) L with dSigma' = L dSigma L'
    c_s: Optional[np.ndarray] = None  # (T, A, n2)
    dsig: Optional[np.ndarray] = None  # (T, A, n2)
    final_s: Optional[np.ndarray] = None  # (n2,)


def backward_recursion(problem: ControlProblem, nominal: TrajectoryRecord, data: StepData, reg: float,
                       warm: Optional[np.ndarray] = None, greedy: bool = False):
    T, m = nominal.controls.shape
    n = problem.n_x
    lin = data.lin
    cuu = repair_cuu(lin.cuu)
    Vx, Vxx = data.final_x.copy(), _sym(data.final_xx)
    VS = None if data.final_s is None else data.final_s.copy()
    k = np.zeros((T, m))
    K = np.zeros((T, m, n))
    clamped = np.zeros((T, m), dtype=bool)
    actions = nominal.actions.copy()
    dV = np.zeros(2)
    lower, upper = problem.bounds.lower, problem.bounds.upper
    groups = problem.simplex_groups
    cand = data.candidates
    for t in range(T - 1, -1, -1):
        j = 0
        if greedy:
            d = data.delta[t]
            scores = lin.c[t] + d @ Vx + 0.5 * np.einsum("ai,ij,aj->a", d, Vxx, d)
            if VS is not None:
                scores = scores + data.dsig[t] @ VS
            cand_t = cand[t] if cand.ndim == 2 else cand
            nominal_j = int(np.nonzero(cand_t == nominal.actions[t])[0][0])
            j = greedy_pick(scores, nominal_j)
            actions[t] = cand_t[j]
        d = data.delta[t, j]
        Vx1 = Vx + Vxx @ d
        fx, fu = lin.fx[t, j], lin.fu[t, j]
        Qx = lin.cx[t, j] + fx.T @ Vx1
        Qu = lin.cu[t, j] + fu.T @ Vx1
        if VS is not None:
            Qx = Qx + data.G_x[t, j].T @ VS
            Qu = Qu + data.G_u[t, j].T @ VS
        q = QExpansion(Qx, Qu, lin.cxx[t, j] + fx.T @ Vxx @ fx, cuu[t, j] + fu.T @ Vxx @ fu,
                       lin.cux[t, j] + fu.T @ Vxx @ fx)
        ubar = nominal.controls[t]
        targets = [1.0 - ubar[list(g)].sum() for g in groups]
        try:
            kt, Kt, cl, Vx, Vxx, dv = compute_gains(q, reg, lower - ubar, upper - ubar, groups, targets,
                                                     None if warm is None else warm[t])
        except (QpFailure, QpInfeasible, np.linalg.LinAlgError):
            raise BackwardPassFailure(t) from None
        if VS is not None:
            L = data.cov_transfer[t, j]
            W = L.T @ VS.reshape(n, n, order="F") @ L
            VS = data.c_s[t, j] + W.reshape(-1, order="F")
            VS = _sym(VS.reshape(n, n, order="F")).reshape(-1, order="F")
        k[t], K[t], clamped[t] = kt, Kt, cl
        dV += dv
    policy = FeedbackPolicy(k, K, clamped, nominal.states.copy(), nominal.controls.copy(), actions, 1.0,
                            nominal.covariances)
    return policy, (float(dV[0]), float(dV[1]))


def _expand(arrs, A):
    return [a.reshape((-1, A) + a.shape[1:]) for a in arrs]


def mdp_step_data(problem: ControlProblem, nominal: TrajectoryRecord, greedy: bool = False) -> StepData:
    T = nominal.horizon
    x, u = nominal.states[:T], nominal.controls
    if greedy:
        A = problem.n_actions
        cand = np.arange(A)
        xr = np.repeat(x, A, axis=0)
        ur = np.repeat(u, A, axis=0)
        ar = np.tile(cand, T)
    else:
        A = 1
        cand = np.zeros(1, dtype=int)
        xr, ur, ar = x, u, nominal.actions
    fx, fu = dynamics_jacobians(problem, xr, ur, ar)
    c, cx, cu, cxx, cuu, cux = running_cost_derivatives(problem, xr, ur, ar, None)
    if greedy:
        nxt = problem.dynamics.f(xr, ur, ar).reshape(T, A, -1)
        delta = nxt - nominal.states[1:, None, :]
    else:
        delta = np.zeros((T, 1, problem.n_x))
        cand = nominal.actions[:, None]
    lin = Linearization(*_expand([fx, fu, c, cx, cu, cxx, cuu, cux], A))
    _, fxT, fxxT = final_cost_derivatives(problem, nominal.states[T:])
    return StepData(lin, delta, fxT[0], fxxT[0], cand)


def backward_pass(problem: ControlProblem, nominal: TrajectoryRecord, reg: float = 0.0, warm=None,
                  greedy: bool = False):
    """Fully observable backward pass. Returns ``(policy, (dV1, dV2))``.

    With ``greedy`` the discrete action at each step is re-chosen from the
    quadratic value model before computing continuous gains.
    """
    data = mdp_step_data(problem, nominal, greedy)
    return backward_recursion(problem, nominal, data, reg, warm, greedy)


# ---------------------------------------------------------------------------
# forward pass


def _candidate_actions(nominal, policy, alphas, discrete):
    if discrete == "interpolate":
        return np.stack([interpolate_actions(nominal.actions, policy.actions, float(a)) for a in alphas])
    return np.broadcast_to(policy.actions, (len(alphas), len(policy.actions)))


def forward_batch(problem: ControlProblem, nominal: TrajectoryRecord, policy: FeedbackPolicy, alphas,
                  discrete: Optional[str] = None):
    """Simulate the mean dynamics for several step sizes at once.

    Returns one record per alpha, or ``None`` where the rollout diverged.
    """
    alphas = np.asarray(alphas, dtype=float)
    N, T = len(alphas), policy.horizon
    acts = _candidate_actions(nominal, policy, alphas, discrete)
    X = np.empty((N, T + 1, problem.n_x))
    U = np.empty((N, T, problem.n_u))
    C = np.empty((N, T))
    x = np.repeat(nominal.states[:1], N, axis=0)
    X[:, 0] = x
    with np.errstate(all="ignore"):
        for t in range(T):
            u = policy.u_ref[t] + alphas[:, None] * policy.k[t] + (x - policy.x_ref[t]) @ policy.K[t].T
            u = problem.project(u)
            C[:, t] = problem.cost.running(x, u, acts[:, t], None)
            x = problem.dynamics.f(x, u, acts[:, t])
            U[:, t] = u
            X[:, t + 1] = x
        final = problem.cost.final(x, None)
    out = []
    for i in range(N):
        ok = np.all(np.isfinite(X[i])) and np.all(np.isfinite(C[i])) and np.isfinite(final[i])
        out.append(TrajectoryRecord(X[i], U[i], acts[i], C[i], final[i]) if ok else None)
    return out


def forward_pass(problem: ControlProblem, nominal: TrajectoryRecord, policy: FeedbackPolicy, alpha: float,
                 discrete: Optional[str] = None) -> TrajectoryRecord:
    rec = forward_batch(problem, nominal, policy, [alpha], discrete)[0]
    if rec is None:
        raise ForwardDiverged(f"forward pass diverged for alpha={alpha}")
    return rec


# ---------------------------------------------------------------------------
# optimization loop


class Engine:
    """Rollout / backward / forward callables used by :func:`run_optimizer`."""

    def __init__(self, x0):
        self.x0 = np.asarray(x0, dtype=float)

    def rollout(self, problem, controls, actions):
        return rollout(problem, self.x0, controls, actions)

    def backward(self, problem, nominal, reg, warm, discrete):
        return backward_pass(problem, nominal, reg, warm, greedy=discrete in ("greedy", "interpolate"))

    def forward(self, problem, nominal, policy, alphas, discrete):
        return forward_batch(problem, nominal, policy, alphas, discrete)


def run_optimizer(engine, problem, initial_controls, config: SolverConfig, initial_actions=None,
                  discrete: Optional[str] = None, cst_threshold: Optional[float] = None) -> OptimizationResult:
    mixture = problem if isinstance(problem, MixtureProblem) else None
    schedule = None
    if mixture is not None:
        schedule = CstSchedule(0.0, config.cst_first, config.tolerance if cst_threshold is None else cst_threshold,
                               config.cst_max)
        current = mixture.relaxed(schedule.value)
    else:
        current = problem
    controls = np.asarray(initial_controls, dtype=float).reshape(-1, current.n_u)
    T = len(controls)
    actions = np.zeros(T, dtype=int) if initial_actions is None else np.asarray(initial_actions, dtype=int)
    nominal = engine.rollout(current, controls, actions)
    policy = FeedbackPolicy.open_loop(nominal)
    reg = config.reg_init
    warm = None
    log = []
    converged = False
    alphas = np.asarray(config.alphas)
    for it in range(1, config.max_iterations + 1):
        cst = schedule.value if schedule else 0.0
        decrease = 0.0
        accepted = False
        alpha_used = 0.0
        try:
            cand_policy, (dv1, dv2) = engine.backward(current, nominal, reg, warm, discrete)
        except BackwardPassFailure:
            cand_policy = None
        if cand_policy is None:
            reg = max(reg * config.reg_factor, config.reg_min)
        else:
            warm = cand_policy.k
            changed = discrete is not None and np.any(cand_policy.actions != nominal.actions)
            expected_full = -(dv1 + dv2)
            if expected_full < config.tolerance and not changed:
                log.append(IterationRecord(it, nominal.total_cost, 0.0, reg, cst, False))
                if schedule is None or schedule.at_max:
                    converged = True
                    break
                schedule, current, nominal = _bump(schedule, 0.0, it, config, mixture, engine, nominal)
                if schedule.value != cst:
                    # a new C_ST is a new problem; damping from the stall would mask its descent
                    reg = config.reg_init
                continue
            cands = engine.forward(current, nominal, cand_policy, alphas, discrete)
            for a, rec in zip(alphas, cands):
                if rec is None:
                    continue
                actual = nominal.total_cost - rec.total_cost
                expected = -(a * dv1 + a * a * dv2)
                if actual > 0 and (expected <= 0 or actual / expected > config.acceptance_ratio):
                    accepted, alpha_used, decrease = True, float(a), actual
                    nominal = rec
                    policy = replace(cand_policy, alpha=float(a))
                    break
            if accepted:
                reg = reg / config.reg_factor
                if reg < config.reg_min:
                    reg = 0.0
            else:
                reg = max(reg * config.reg_factor, config.reg_min)
        log.append(IterationRecord(it, nominal.total_cost, alpha_used, reg, cst, accepted))
        if reg > config.reg_max:
            break
        if schedule is not None:
            at_max_before = schedule.at_max
            # only an accepted step reports a cost difference; rejections just raise regularization
            schedule, current, nominal = _bump(schedule, decrease if accepted else np.inf, it, config, mixture,
                                               engine, nominal)
            if schedule.value != cst:
                reg = config.reg_init
            if accepted and decrease < config.tolerance and at_max_before:
                converged = True
                break
        elif accepted and decrease < config.tolerance:
            converged = True
            break
    return OptimizationResult(nominal, policy, log, converged, current)


def _bump(schedule, decrease, it, config, mixture, engine, nominal):
    new = update_cst(schedule, decrease, it, config.max_iterations)
    current = mixture.relaxed(new.value)
    if new.value != schedule.value:
        nominal = engine.rollout(current, nominal.controls, nominal.actions)
    return new, current, nominal


def optimize(problem, x0, initial_controls, config: SolverConfig = SolverConfig(), initial_actions=None,
             discrete: Optional[str] = None, cst_threshold: Optional[float] = None) -> OptimizationResult:
    """Fully observable trajectory optimization.

    ``problem`` is a :class:`ControlProblem` (continuous, or hybrid with
    ``discrete`` in ``{"greedy", "interpolate"}``) or a
    :class:`MixtureProblem`.
    """
    if discrete not in (None, "greedy", "interpolate"):
        raise ValueError(f"unknown discrete update {discrete!r}")
    return run_optimizer(Engine(x0), problem, initial_controls, config, initial_actions, discrete, cst_threshold)


def simulate_policy(problem: ControlProblem, policy: FeedbackPolicy, x0, decode: Optional[Callable] = None,
                    project: Optional[Callable] = None) -> TrajectoryRecord:
    """Run a policy closed-loop on (possibly different) deterministic dynamics.

    ``decode(u_policy, action)`` maps the policy's control space to
    ``(u, action)`` of ``problem``; ``project`` post-processes raw policy
    controls (clamping / probability normalization).
    """
    T = policy.horizon
    x = np.asarray(x0, dtype=float)
    states, controls, actions, costs = [x], [], [], []
    for t in range(T):
        u = policy.control(t, x)
        if project is not None:
            u = project(u)
        a = policy.actions[t]
        if decode is not None:
            u, a = decode(u, a)
        costs.append(float(problem.cost.running(x, u, a, None)))
        x = problem.dynamics.f(x, u, a)
        if not np.all(np.isfinite(x)):
            raise RolloutDiverged(t + 1)
        states.append(x)
        controls.append(u)
        actions.append(a)
    return TrajectoryRecord(np.array(states), np.array(controls).reshape(T, -1), np.array(actions, dtype=int),
                            np.array(costs), float(problem.cost.final(x, None)))
