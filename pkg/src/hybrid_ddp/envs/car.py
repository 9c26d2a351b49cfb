"""Gear-switching nonholonomic car.

State ``(x, y, w, v_car)``, continuous control ``(w_wheel, acc)`` and a
discrete action: brake, 1st gear or 2nd gear. 1st gear accelerates at
``acc`` up to a soft limit of ``v = 1``; 2nd gear at ``acc / 2`` up to
``v = 4``. Above its soft limit a gear (and the brake) decelerates at
a fixed engine-braking rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..hybrid import pseudo_huber
from ..problem import ControlBounds, ControlProblem, CostSpec, DynamicsSpec

BRAKE, GEAR1, GEAR2 = 0, 1, 2
ACTION_NAMES = ("brake", "g1", "g2")
STATE_NAMES = ("x", "y", "w", "v_car")
CONTROL_NAMES = ("w_wheel", "acc")


@dataclass(frozen=True)
class CarParams:
    dt: float = 0.03
    wheelbase: float = 2.0
    engine_brake: float = -0.1
    gear1_limit: float = 1.0
    gear2_limit: float = 4.0
    brake_limit: float = 4.0
    wheel_max: float = 0.5
    acc_max: float = 0.5
    w_final_pos: float = 20.0
    w_final_angle: float = 2.0
    w_final_speed: float = 1.0
    w_control: float = 1e-3
    x0: float = -20.0
    y0: float = -2.0
    w0: float = 0.0
    v0: float = 0.0
    init_acc: float = 0.1
    init_gear: int = GEAR1

    @property
    def initial_state(self) -> np.ndarray:
        return np.array([self.x0, self.y0, self.w0, self.v0])


def _gear_terms(acc, a, params):
    a = np.asarray(a)
    acc = np.asarray(acc, dtype=float)
    drive = np.where(a == GEAR1, acc, np.where(a == GEAR2, 0.5 * acc, -acc))
    limit = np.where(a == GEAR1, params.gear1_limit, np.where(a == GEAR2, params.gear2_limit, params.brake_limit))
    return drive, limit


def effective_acceleration(v, acc, a, params: CarParams = CarParams()):
    """Instantaneous acceleration: the gear's drive, or engine braking above its soft limit."""
    drive, limit = _gear_terms(acc, a, params)
    return np.where(np.asarray(v, dtype=float) > limit, params.engine_brake, drive)


def speed_update(v, acc, a, params: CarParams = CarParams()):
    """Speed after one step, integrating the piecewise-constant acceleration exactly.

    Above the soft limit the car engine-brakes down to the limit; a gear
    that still drives forward then holds the speed at the limit.
    """
    v = np.asarray(v, dtype=float)
    dt = params.dt
    drive, limit = _gear_terms(acc, a, params)
    above = v > limit
    # time spent engine braking before reaching the limit
    tau = np.where(above, np.minimum((v - limit) / -params.engine_brake, dt), 0.0)
    start = np.where(above, np.where(tau < dt, limit, v + dt * params.engine_brake), v)
    rest = dt - tau
    moved = start + rest * drive
    held = np.where((drive > 0) & (start <= limit), np.minimum(moved, limit), moved)
    return np.maximum(held, 0.0)


def car_dynamics(x, u, a, params: CarParams = CarParams()):
    """One step of the kinematic bicycle (Euler for the pose); speed never drops below zero."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    px, py, w, v = np.moveaxis(x, -1, 0)
    wheel, acc = np.moveaxis(u, -1, 0)
    dt = params.dt
    return np.stack(np.broadcast_arrays(
        px + dt * v * np.cos(w),
        py + dt * v * np.sin(w),
        w + dt * v * np.tan(wheel) / params.wheelbase,
        speed_update(v, acc, a, params),
    ), axis=-1)


def car_running_cost(x, u, a=None, cov=None, params: CarParams = CarParams()):
    u = np.asarray(u, dtype=float)
    out = params.w_control * np.sum(u * u, axis=-1)
    return np.broadcast_to(out, np.broadcast_shapes(np.shape(x)[:-1], out.shape, np.shape(a) if a is not None else ()))


def car_final_cost(x, cov=None, params: CarParams = CarParams()):
    x = np.asarray(x, dtype=float)
    return (params.w_final_pos * (pseudo_huber(x[..., 0]) + pseudo_huber(x[..., 1]))
            + params.w_final_angle * pseudo_huber(x[..., 2]) + params.w_final_speed * pseudo_huber(x[..., 3]))


def _bounds(params):
    return ControlBounds(np.array([-params.wheel_max, 0.0]), np.array([params.wheel_max, params.acc_max]))


def car_problem(params: CarParams = CarParams()) -> ControlProblem:
    """Hybrid car with three discrete actions."""
    return ControlProblem(
        dynamics=DynamicsSpec(lambda x, u, a: car_dynamics(x, u, a, params)),
        cost=CostSpec(lambda x, u, a=None, cov=None: car_running_cost(x, u, a, cov, params),
                      lambda x, cov=None: car_final_cost(x, cov, params)),
        bounds=_bounds(params),
        n_x=4,
        n_u=2,
        n_actions=3,
        names={"states": STATE_NAMES, "controls": CONTROL_NAMES, "actions": ACTION_NAMES},
    )


# continuous baseline: the gear becomes a control coordinate g in [0, 3]


def gear_from_coordinate(g):
    return np.clip(np.floor(np.asarray(g, dtype=float)), 0, 2).astype(int)


def gear_coordinate(action) -> float:
    return float(action) + 0.5


def car_continuous_problem(params: CarParams = CarParams()) -> ControlProblem:
    """Car with the discrete action folded into a third control coordinate."""

    def f(x, u, a=None):
        u = np.asarray(u, dtype=float)
        return car_dynamics(x, u[..., :2], gear_from_coordinate(u[..., 2]), params)

    def running(x, u, a=None, cov=None):
        return car_running_cost(x, np.asarray(u)[..., :2], None, cov, params)

    bounds = _bounds(params) + ControlBounds(np.array([0.0]), np.array([3.0]))
    return ControlProblem(
        dynamics=DynamicsSpec(f),
        cost=CostSpec(running, lambda x, cov=None: car_final_cost(x, cov, params)),
        bounds=bounds,
        n_x=4,
        n_u=3,
        names={"states": STATE_NAMES, "controls": CONTROL_NAMES + ("gear",)},
    )


def decode_continuous(u):
    """Continuous-baseline control to ``(u, action)`` of the hybrid car."""
    u = np.asarray(u, dtype=float)
    return u[..., :2], gear_from_coordinate(u[..., 2])


def initial_controls(horizon: int, params: CarParams = CarParams()):
    """Straight wheel, constant acceleration, one gear throughout."""
    u = np.tile([0.0, params.init_acc], (horizon, 1))
    return u, np.full(horizon, params.init_gear, dtype=int)
