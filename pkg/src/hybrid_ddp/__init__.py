"""Hybrid discrete/continuous trajectory optimization with iLQG/DDP."""

from .belief import GaussianBelief, belief_optimize, ekf_step, simulate_closed_loop
from .boxqp import solve_box, solve_box_simplex
from .ddp import FeedbackPolicy, SolverConfig, backward_pass, optimize, simulate_policy
from .hybrid import augment, extract_discrete_plan, interpolate_actions, update_cst
from .problem import ControlBounds, ControlProblem, CostSpec, DynamicsSpec, ObservationSpec, TrajectoryRecord

__all__ = [
    "ControlBounds",
    "ControlProblem",
    "CostSpec",
    "DynamicsSpec",
    "FeedbackPolicy",
    "GaussianBelief",
    "ObservationSpec",
    "SolverConfig",
    "TrajectoryRecord",
    "augment",
    "backward_pass",
    "belief_optimize",
    "ekf_step",
    "extract_discrete_plan",
    "interpolate_actions",
    "optimize",
    "simulate_closed_loop",
    "simulate_policy",
    "solve_box",
    "solve_box_simplex",
    "update_cst",
]
