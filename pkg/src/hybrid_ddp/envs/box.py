"""Quasi-static planar pushing of a unit box.

State ``(x_c, y_c, w, x_cf, y_cf, mu, dist)``: box center and rotation,
center of friction (CF) relative to the center in the box frame,
finger/box friction and the support friction distribution scale.

The discrete action is the pushed edge ``e``; the continuous control is
``(u_e, alpha, v)``: contact location along the edge, push angle from
the inward normal and finger speed. Edges are numbered counter-clockwise
starting with the bottom edge; ``u_e`` runs along the counter-clockwise
tangent.

Box twist follows the ellipsoidal limit-surface approximation about the
CF with torque scale ``c = torque_scale * dist``. Pushes outside the
friction cone slide along the cone edge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr
from scipy.stats import qmc

from ..hybrid import pseudo_huber
from ..problem import ControlBounds, ControlProblem, CostSpec, DynamicsSpec, ObservationSpec

STATE_NAMES = ("x_c", "y_c", "w", "x_cf", "y_cf", "mu", "dist")
CONTROL_NAMES = ("u_e", "alpha", "v")
ACTION_NAMES = ("e0", "e1", "e2", "e3")

EDGE_START = np.array([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]])
EDGE_TANGENT = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
EDGE_NORMAL = np.array([[0.0, 1.0], [-1.0, 0.0], [0.0, -1.0], [1.0, 0.0]])


@dataclass(frozen=True)
class BoxParams:
    dt: float = 0.02
    torque_scale: float = 0.3
    alpha_max: float = 0.35 * np.pi
    v_min: float = 0.01
    v_max: float = 3.0
    obstacle_x: float = 1.0
    obstacle_y: float = 1.0
    obstacle_weight: float = 0.1
    corner_weight: float = 0.1
    w_final_pos: float = 20.0
    w_final_angle: float = 2.0
    w_track: float = 0.01
    track_kappa: float = 0.1
    w_control: float = 1e-6
    process_sd: float = 0.01
    obs_sd_pos: float = 1e-4
    obs_sd_angle: float = 0.033
    x0: float = 2.0
    y0: float = 2.0
    w0: float = 0.0
    mu: float = 1.0
    dist: float = 1.0
    prior_sd_pos: float = 0.01
    prior_sd_angle: float = 0.1
    prior_sd_cf: float = 0.2
    prior_sd_friction: float = 0.2
    init_edge: int = 0
    init_u_e: float = 0.5
    init_alpha: float = 0.0
    init_v: float = 1.0

    def initial_state(self, cf=(0.0, 0.0), mu=None, dist=None) -> np.ndarray:
        return np.array([self.x0, self.y0, self.w0, cf[0], cf[1], self.mu if mu is None else mu,
                         self.dist if dist is None else dist])


def _rot(w):
    c, s = np.cos(w), np.sin(w)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def contact_point(edge, u_e):
    """Contact location in the box frame (relative to the center)."""
    edge = np.asarray(edge, dtype=int) % 4
    return EDGE_START[edge] + np.asarray(u_e, dtype=float)[..., None] * EDGE_TANGENT[edge]


def contact_velocity(alpha, v, mu):
    """Velocity of the box material at the contact in edge coordinates ``(normal, tangent)``.

    Returns ``(v_n, v_t, sliding)``. Inside the friction cone the contact
    sticks and follows the finger; outside it moves along the cone edge
    with the finger's normal speed.
    """
    alpha = np.asarray(alpha, dtype=float)
    v = np.asarray(v, dtype=float)
    mu = np.asarray(mu, dtype=float)
    vn = v * np.cos(alpha)
    sliding = np.abs(alpha) > np.arctan(mu)
    vt = np.where(sliding, np.sign(alpha) * mu * vn, v * np.sin(alpha))
    return vn, vt, sliding


def box_twist(p, v_contact, c):
    """Twist about the CF for a contact at ``p`` (relative to the CF) moving with ``v_contact``.

    Returns ``(v_cf, omega)`` in the box frame.
    """
    c2 = np.asarray(c, dtype=float) ** 2
    denom = c2 + np.sum(p * p, axis=-1)
    pv = np.sum(p * v_contact, axis=-1)
    v_cf = (c2[..., None] * v_contact + p * pv[..., None]) / denom[..., None]
    omega = _cross(p, v_contact) / denom
    return v_cf, omega


def push_response(state, u, edge, params: BoxParams = BoxParams()):
    """Box-frame response to one push: ``(v_center, omega, v_contact, v_finger, sliding)``."""
    state = np.asarray(state, dtype=float)
    u = np.asarray(u, dtype=float)
    edge = np.asarray(edge, dtype=int) % 4
    cf = state[..., 3:5]
    mu = np.maximum(state[..., 5], 1e-6)
    c = params.torque_scale * np.maximum(state[..., 6], 1e-6)
    u_e, alpha, v = u[..., 0], u[..., 1], u[..., 2]
    n, t = EDGE_NORMAL[edge], EDGE_TANGENT[edge]
    vn, vt, sliding = contact_velocity(alpha, v, mu)
    v_contact = vn[..., None] * n + vt[..., None] * t
    v_finger = (v * np.cos(alpha))[..., None] * n + (v * np.sin(alpha))[..., None] * t
    p = contact_point(edge, u_e) - cf
    v_cf, omega = box_twist(p, v_contact, c)
    v_center = v_cf + omega[..., None] * np.stack([cf[..., 1], -cf[..., 0]], -1)
    return v_center, omega, v_contact, v_finger, sliding


def box_push_dynamics(state, u, edge, params: BoxParams = BoxParams()):
    """One quasi-static step assuming the finger is in contact with ``edge``."""
    state = np.asarray(state, dtype=float)
    v_center, omega, *_ = push_response(state, u, edge, params)
    w = state[..., 2]
    dxy = np.einsum("...ij,...j->...i", _rot(w), v_center) * params.dt
    out = np.array(np.broadcast_to(state, np.broadcast_shapes(state.shape, dxy.shape[:-1] + (7,))), copy=True)
    out[..., :2] += dxy
    out[..., 2] += omega * params.dt
    return out


def finger_slide(state, u, edge, params: BoxParams = BoxParams()):
    """Change of the contact coordinate ``u_e`` over one step (nonzero only when sliding)."""
    *_, v_contact, v_finger, _ = push_response(state, u, edge, params)
    t = EDGE_TANGENT[np.asarray(edge, dtype=int) % 4]
    return np.sum((v_finger - v_contact) * t, axis=-1) * params.dt


def executed_push(true_state, believed_pose, u, edge, params: BoxParams = BoxParams()):
    """Map a push planned against ``believed_pose`` onto the true box.

    Returns ``(u_true, in_contact)``: the control expressed in the true
    box frame, and whether the finger meets the commanded edge at all.
    """
    true_state = np.asarray(true_state, dtype=float)
    xb, yb, wb = believed_pose
    edge = int(edge) % 4
    u_e, alpha, v = u
    world = np.array([xb, yb]) + _rot(wb) @ contact_point(edge, u_e)
    local = _rot(true_state[2]).T @ (world - true_state[:2])
    u_true = float((local - EDGE_START[edge]) @ EDGE_TANGENT[edge])
    n, t = EDGE_NORMAL[edge], EDGE_TANGENT[edge]
    d_box = np.cos(alpha) * n + np.sin(alpha) * t
    d_true = _rot(true_state[2]).T @ (_rot(wb) @ d_box)
    alpha_true = float(np.arctan2(d_true @ t, d_true @ n))
    hit = 0.0 <= u_true <= 1.0 and abs(alpha_true) < 0.5 * np.pi
    return np.array([u_true, alpha_true, v]), hit


def true_box_step(params: BoxParams = BoxParams(), decode=None):
    """Closed-loop true-state transition with missed contacts.

    ``decode`` optionally maps ``(u, a)`` of the executed problem to the
    base ``((u_e, alpha, v), edge)``.
    """

    def step(x, mean, u, a):
        if decode is not None:
            u, a = decode(u, a)
        u_true, hit = executed_push(x, mean[:3], np.asarray(u)[:3], a, params)
        if not hit:
            return np.asarray(x, dtype=float).copy()
        return box_push_dynamics(x, u_true, a, params)

    return step


# ---------------------------------------------------------------------------
# observation, noise, cost


def box_observation(state):
    return np.asarray(state, dtype=float)[..., :3]


def observation_noise(state, params: BoxParams = BoxParams()):
    d = np.array([params.obs_sd_pos, params.obs_sd_pos, params.obs_sd_angle]) ** 2
    return np.broadcast_to(np.diag(d), np.shape(state)[:-1] + (3, 3)).copy()


def observation_jacobian(state):
    H = np.zeros((3, 7))
    H[:, :3] = np.eye(3)
    return np.broadcast_to(H, np.shape(state)[:-1] + (3, 7)).copy()


def process_noise(state, u, a, params: BoxParams = BoxParams()):
    d = np.zeros(7)
    d[:3] = params.process_sd ** 2
    shape = np.broadcast_shapes(np.shape(state)[:-1], np.shape(u)[:-1], np.shape(a))
    return np.broadcast_to(np.diag(d), shape + (7, 7)).copy()


def corner_cost(u_e, var_w, weight: float = 0.1):
    """Penalty on contact locations near a corner; the safe band narrows with rotation variance."""
    u_e = np.asarray(u_e, dtype=float)
    band = np.cos(np.minimum(3.0 * np.asarray(var_w, dtype=float), 0.5 * np.pi))
    return weight * (np.exp(10.0 * (u_e - band)) + np.exp(10.0 * (1.0 - band - u_e)))


def obstacle_cost(xy, obstacle=(1.0, 1.0), weight: float = 0.1):
    d = np.asarray(obstacle) - np.asarray(xy, dtype=float)
    return -weight * log_ndtr(np.sum(d * d, axis=-1) - 0.5 * np.sqrt(2.0))


def box_cost(state, u, a=None, cov=None, params: BoxParams = BoxParams()):
    state = np.asarray(state, dtype=float)
    u = np.asarray(u, dtype=float)
    var_w = 0.0 if cov is None else np.asarray(cov)[..., 2, 2]
    track = params.w_track * (pseudo_huber(state[..., 0], params.track_kappa)
                              + pseudo_huber(state[..., 1], params.track_kappa))
    effort = params.w_control * (u[..., 1] ** 2 + u[..., 2] ** 2)
    out = (track + effort + obstacle_cost(state[..., :2], (params.obstacle_x, params.obstacle_y),
                                          params.obstacle_weight)
           + corner_cost(u[..., 0], var_w, params.corner_weight))
    if a is not None:
        out = np.broadcast_to(out, np.broadcast_shapes(out.shape, np.shape(a)))
    return out


def box_final_cost(state, cov=None, params: BoxParams = BoxParams()):
    state = np.asarray(state, dtype=float)
    out = (params.w_final_pos * (pseudo_huber(state[..., 0]) + pseudo_huber(state[..., 1]))
           + params.w_final_angle * pseudo_huber(state[..., 2]))
    if cov is not None:
        out = out + np.trace(cov, axis1=-2, axis2=-1)
    return out


# ---------------------------------------------------------------------------
# problems


def _bounds(params):
    return ControlBounds(np.array([0.0, -params.alpha_max, params.v_min]),
                         np.array([1.0, params.alpha_max, params.v_max]))


def box_problem(params: BoxParams = BoxParams(), observed: bool = False) -> ControlProblem:
    """Hybrid box pushing with the edge as discrete action.

    With ``observed`` the problem carries process noise and the pose
    observation model for belief-space planning.
    """
    obs = None
    noise = None
    if observed:
        obs = ObservationSpec(box_observation, lambda s: observation_noise(s, params), observation_jacobian)
        noise = lambda s, u, a: process_noise(s, u, a, params)  # noqa: E731
    return ControlProblem(
        dynamics=DynamicsSpec(lambda s, u, a: box_push_dynamics(s, u, a, params), noise),
        cost=CostSpec(lambda s, u, a=None, cov=None: box_cost(s, u, a, cov, params),
                      lambda s, cov=None: box_final_cost(s, cov, params)),
        bounds=_bounds(params),
        n_x=7,
        n_u=3,
        n_actions=4,
        observation=obs,
        names={"states": STATE_NAMES, "controls": CONTROL_NAMES, "actions": ACTION_NAMES},
    )


def continuous_box_parameterization(q):
    """Perimeter coordinate ``q`` to ``(edge, u_e)``; wraps modulo 4."""
    q = np.mod(np.asarray(q, dtype=float), 4.0)
    edge = np.floor(q).astype(int) % 4
    return edge, q - np.floor(q)


def perimeter_coordinate(edge, u_e):
    return np.asarray(edge, dtype=float) % 4 + np.asarray(u_e, dtype=float)


def decode_continuous(u):
    """``(q, alpha, v)`` to ``((u_e, alpha, v), edge)``."""
    u = np.asarray(u, dtype=float)
    edge, u_e = continuous_box_parameterization(u[..., 0])
    return np.concatenate([u_e[..., None], u[..., 1:3]], axis=-1), edge


def box_continuous_problem(params: BoxParams = BoxParams(), observed: bool = False) -> ControlProblem:
    """Box pushing with edge and contact location merged into one perimeter coordinate."""
    base = box_problem(params, observed)

    def f(s, u, a=None):
        ub, e = decode_continuous(u)
        return box_push_dynamics(s, ub, e, params)

    def running(s, u, a=None, cov=None):
        ub, _ = decode_continuous(u)
        return box_cost(s, ub, None, cov, params)

    noise = None
    if observed:
        noise = lambda s, u, a: process_noise(s, u, a, params)  # noqa: E731
    bounds = ControlBounds(np.array([0.0, -params.alpha_max, params.v_min]),
                           np.array([4.0, params.alpha_max, params.v_max]))
    return ControlProblem(
        dynamics=DynamicsSpec(f, noise),
        cost=CostSpec(running, base.cost.final),
        bounds=bounds,
        n_x=7,
        n_u=3,
        observation=base.observation,
        names={"states": STATE_NAMES, "controls": ("q", "alpha", "v")},
    )


def initial_controls(horizon: int, params: BoxParams = BoxParams()):
    u = np.tile([params.init_u_e, params.init_alpha, params.init_v], (horizon, 1))
    return u, np.full(horizon, params.init_edge, dtype=int)


def sample_cf_grid(count: int, seed: int = 0) -> np.ndarray:
    """CF positions covering [0.2, 0.8]^2 in box-corner coordinates (scrambled Halton).

    A single sample is the box center.
    """
    if count < 1:
        raise ValueError("count must be positive")
    if count == 1:
        return np.array([[0.5, 0.5]])
    pts = qmc.Halton(d=2, scramble=True, seed=np.random.default_rng(seed)).random(count)
    return qmc.scale(pts, [0.2, 0.2], [0.8, 0.8])


def cf_relative(cf_corner) -> np.ndarray:
    """Corner-based CF coordinates to center-relative ones."""
    return np.asarray(cf_corner, dtype=float) - 0.5


def initial_covariance(params: BoxParams = BoxParams(), cf_unknown: bool = False,
                       friction_unknown: bool = False) -> np.ndarray:
    sd = np.zeros(7)
    sd[:3] = [params.prior_sd_pos, params.prior_sd_pos, params.prior_sd_angle]
    if cf_unknown:
        sd[3:5] = params.prior_sd_cf
    if friction_unknown:
        sd[5:7] = params.prior_sd_friction
    return np.diag(sd ** 2)
