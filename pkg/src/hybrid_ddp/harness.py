"""Experiment runner: method/environment wiring, batches, statistics and CSV export."""

from __future__ import annotations

import csv
import math
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .belief import FilterFailure, GaussianBelief, belief_optimize, simulate_closed_loop
from .ddp import BackwardPassFailure, SolverConfig, optimize, simulate_policy
from .envs import box as box_env
from .envs import car as car_env
from .hybrid import augment, extract_discrete_plan
from .problem import ControlProblem, DifferentiationError, RolloutDiverged, TrajectoryRecord

ENVIRONMENTS = ("car", "box", "box-pomdp", "box-unknown", "box-all-unknown")
METHODS = ("ilqg", "greedy", "interpolate", "mixture")
STOCHASTIC = ("box-pomdp", "box-unknown", "box-all-unknown")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    env: str = "car"
    method: str = "mixture"
    methods: tuple = METHODS
    horizon: int = 500
    max_iterations: int = 400
    cst_max: float = 1.28
    cst_threshold: Optional[float] = None  # 0.01 box / 1e-4 car
    cf_count: Optional[int] = None  # 52 deterministic / 12 stochastic
    samples: int = 20
    seed: int = 0
    workers: int = 1
    out: str = "results"
    car: car_env.CarParams = car_env.CarParams()
    box: box_env.BoxParams = box_env.BoxParams()

    def __post_init__(self):
        if self.env not in ENVIRONMENTS:
            raise ConfigError(f"unknown environment {self.env!r}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        methods = tuple(self.methods)
        if not methods:
            raise ConfigError("method list is empty")
        for m in methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
        object.__setattr__(self, "methods", methods)
        if min(self.horizon, self.max_iterations, self.samples, self.workers) < 1:
            raise ConfigError("counts must be positive")
        if self.cf_count is not None and self.cf_count < 1:
            raise ConfigError("cf_count must be positive")

    @property
    def stochastic(self) -> bool:
        return self.env in STOCHASTIC

    @property
    def threshold(self) -> float:
        if self.cst_threshold is not None:
            return self.cst_threshold
        return 1e-4 if self.env == "car" else 0.01

    @property
    def n_cf(self) -> int:
        if self.env == "car":
            return 1
        if self.cf_count is not None:
            return self.cf_count
        return 12 if self.stochastic else 52

    def solver(self) -> SolverConfig:
        return SolverConfig(max_iterations=self.max_iterations, horizon=self.horizon, tolerance=self.threshold,
                            cst_max=self.cst_max)


# ---------------------------------------------------------------------------
# flat key = value configuration


def _coerce(text: str, kind):
    text = text.strip()
    if kind is bool:
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind is tuple:
        return tuple(s.strip() for s in text.split(",") if s.strip())
    return text


_TOP_TYPES = {"env": str, "method": str, "methods": tuple, "horizon": int, "max_iterations": int,
              "cst_max": float, "cst_threshold": float, "cf_count": int, "samples": int, "seed": int,
              "workers": int, "out": str}


def _param_types(cls):
    return {f.name: type(f.default) for f in fields(cls)}


def apply_overrides(config: ExperimentConfig, pairs: dict) -> ExperimentConfig:
    """Apply ``key -> text`` overrides; environment constants use ``car.<name>`` / ``box.<name>``."""
    top, env_over = {}, {"car": {}, "box": {}}
    for key, text in pairs.items():
        key = key.strip().replace("-", "_")
        if "." in key:
            scope, name = key.split(".", 1)
            if scope not in env_over:
                raise ConfigError(f"unknown key {key!r}")
            types = _param_types(car_env.CarParams if scope == "car" else box_env.BoxParams)
            if name not in types:
                raise ConfigError(f"unknown key {key!r}")
            env_over[scope][name] = _coerce(text, types[name])
        elif key in _TOP_TYPES:
            top[key] = _coerce(text, _TOP_TYPES[key])
        else:
            raise ConfigError(f"unknown key {key!r}")
    try:
        if env_over["car"]:
            top["car"] = replace(config.car, **env_over["car"])
        if env_over["box"]:
            top["box"] = replace(config.box, **env_over["box"])
        return replace(config, **top)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_config_text(text: str) -> dict:
    pairs = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path, base: ExperimentConfig = None) -> ExperimentConfig:
    return apply_overrides(base or ExperimentConfig(), parse_config_text(Path(path).read_text()))


def config_to_text(config: ExperimentConfig) -> str:
    lines = []
    for f in fields(ExperimentConfig):
        if f.name in ("car", "box"):
            continue
        v = getattr(config, f.name)
        if v is None:
            continue
        lines.append(f"{f.name} = {','.join(v) if isinstance(v, tuple) else v}")
    for scope in ("car", "box"):
        for k, v in asdict(getattr(config, scope)).items():
            lines.append(f"{scope}.{k} = {v!r}" if isinstance(v, float) else f"{scope}.{k} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# seeds and CF grid


def run_seed(master: int, env: str, method: str, cf_index: int, sample: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master), zlib.crc32(env.encode()), zlib.crc32(method.encode()),
                                   int(cf_index), int(sample)])


def seed_value(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1, np.uint64)[0])


def cf_grid(config: ExperimentConfig) -> np.ndarray:
    """Corner-based CF coordinates for the configured environment (one dummy row for the car)."""
    if config.env == "car":
        return np.array([[0.5, 0.5]])
    return box_env.sample_cf_grid(config.n_cf, config.seed)


# ---------------------------------------------------------------------------
# environment setup


@dataclass
class Setup:
    hybrid: ControlProblem  # executed system
    continuous: ControlProblem  # continuous-control baseline
    decode_continuous: Callable
    x0: np.ndarray  # planning mean
    cov0: Optional[np.ndarray]
    controls0: np.ndarray
    actions0: np.ndarray
    sample_state: Optional[Callable] = None


def build_setup(config: ExperimentConfig, cf_corner) -> Setup:
    T = config.horizon
    if config.env == "car":
        p = config.car
        u0, a0 = car_env.initial_controls(T, p)
        return Setup(car_env.car_problem(p), car_env.car_continuous_problem(p), _decode_car, p.initial_state,
                     None, u0, a0)
    p = config.box
    cf = box_env.cf_relative(cf_corner)
    u0, a0 = box_env.initial_controls(T, p)
    if config.env == "box":
        return Setup(box_env.box_problem(p), box_env.box_continuous_problem(p), _decode_box, p.initial_state(cf),
                     None, u0, a0)
    cf_unknown = config.env in ("box-unknown", "box-all-unknown")
    friction_unknown = config.env == "box-all-unknown"
    mean = p.initial_state((0.0, 0.0) if cf_unknown else cf)
    cov0 = box_env.initial_covariance(p, cf_unknown, friction_unknown)

    def sample_state(rng):
        x = mean.copy()
        x[:3] = rng.multivariate_normal(mean[:3], cov0[:3, :3])
        x[3:5] = cf
        if friction_unknown:
            x[5:7] = np.maximum(rng.normal(mean[5:7], p.prior_sd_friction), 0.05)
        return x

    return Setup(box_env.box_problem(p, observed=True), box_env.box_continuous_problem(p, observed=True),
                 _decode_box, mean, cov0, u0, a0, sample_state)


def _decode_car(u, a):
    ub, act = car_env.decode_continuous(u)
    return ub, int(act)


def _decode_box(u, a):
    ub, act = box_env.decode_continuous(u)
    return ub, int(act)


# ---------------------------------------------------------------------------
# single runs


@dataclass
class ResultRow:
    environment: str
    method: str
    cf_index: int
    cf_x: float
    cf_y: float
    seed: int
    total_cost: float
    cost_sd: float  # across closed-loop samples; 0 for deterministic runs
    iterations: int
    converged: bool
    wall_time: float = 0.0
    error: str = ""

    @property
    def key(self):
        return (self.environment, METHODS.index(self.method), self.cf_index)


@dataclass
class RunOutput:
    row: ResultRow
    record: Optional[TrajectoryRecord] = None  # executed trajectory (first sample for stochastic runs)
    probabilities: Optional[np.ndarray] = None


@dataclass
class _Plan:
    problem: object
    policy: object
    decode: Optional[Callable]
    project: Optional[Callable]
    probabilities: Callable  # executed (u, a) -> probability row
    iterations: int
    converged: bool


def _one_hot(n):
    def f(u, a):
        p = np.zeros(n)
        p[int(a)] = 1.0
        return p

    return f


def _plan(config: ExperimentConfig, setup: Setup, method: str) -> _Plan:
    solver = config.solver()
    hybrid = setup.hybrid
    n_a = hybrid.n_actions
    stochastic = setup.cov0 is not None

    def run(problem, controls, actions=None, discrete=None, threshold=None):
        if stochastic:
            return belief_optimize(problem, GaussianBelief(setup.x0, setup.cov0), controls, solver, actions,
                                   discrete, threshold)
        return optimize(problem, setup.x0, controls, solver, actions, discrete, threshold)

    if method == "ilqg":
        cp = setup.continuous
        u = setup.controls0.copy()
        if config.env == "car":
            u = np.concatenate([u, np.full((len(u), 1), car_env.gear_coordinate(setup.actions0[0]))], axis=1)
        else:
            u[:, 0] = box_env.perimeter_coordinate(setup.actions0, u[:, 0])
        res = run(cp, u)
        return _Plan(cp, res.policy, setup.decode_continuous, cp.bounds.clamp, _one_hot(n_a), res.iterations,
                     res.converged)
    if method in ("greedy", "interpolate"):
        res = run(hybrid, setup.controls0, setup.actions0, method)
        return _Plan(hybrid, res.policy, None, hybrid.bounds.clamp, _one_hot(n_a), res.iterations, res.converged)
    mix = augment(hybrid)
    res = run(mix, mix.initial_controls(setup.controls0, setup.actions0), None, None, config.threshold)
    relaxed = res.problem
    nu = hybrid.n_u

    def decode(u, a):
        return u[:nu], int(extract_discrete_plan(u[nu:]))

    return _Plan(relaxed, res.policy, decode, relaxed.project, None, res.iterations, res.converged)


def _execute(config, setup, plan, rng=None):
    """Run the plan on the hybrid system; returns ``(record, probabilities)``."""
    nu = setup.hybrid.n_u
    probs = []

    def project(u):
        u = plan.project(u)
        probs.append(u[nu:] if plan.probabilities is None else None)
        return u

    if setup.cov0 is None:
        rec = simulate_policy(setup.hybrid, plan.policy, setup.x0, plan.decode, project)
    else:
        x_true = setup.sample_state(rng)
        step = box_env.true_box_step(config.box)
        run = simulate_closed_loop(setup.hybrid, plan.policy, GaussianBelief(setup.x0, setup.cov0), x_true, rng,
                                   plan.decode, project, step)
        rec = run.record
    if plan.probabilities is None:
        P = np.array(probs)
    else:
        P = np.array([plan.probabilities(u, a) for u, a in zip(rec.controls, rec.actions)])
    return rec, P


def run_single(config: ExperimentConfig, cf_index: int = 0, method: Optional[str] = None,
               cf_corner=None) -> RunOutput:
    """Optimize one (environment, method, CF) combination and evaluate it.

    Deterministic environments record the executed cost of the plan;
    stochastic ones average ``config.samples`` closed-loop runs.
    """
    method = method or config.method
    if cf_corner is None:
        cf_corner = cf_grid(config)[cf_index]
    seq = run_seed(config.seed, config.env, method, cf_index)
    row = ResultRow(config.env, method, cf_index, float(cf_corner[0]), float(cf_corner[1]), seed_value(seq),
                    math.nan, math.nan, 0, False)
    start = time.perf_counter()
    record, probs = None, None
    try:
        setup = build_setup(config, cf_corner)
        plan = _plan(config, setup, method)
        row.iterations, row.converged = plan.iterations, plan.converged
        if setup.cov0 is None:
            record, probs = _execute(config, setup, plan)
            row.total_cost, row.cost_sd = float(record.total_cost), 0.0
        else:
            costs = []
            for s in range(config.samples):
                rng = np.random.default_rng(run_seed(config.seed, config.env, method, cf_index, s + 1))
                rec, P = _execute(config, setup, plan, rng)
                if s == 0:
                    record, probs = rec, P
                costs.append(rec.total_cost)
            costs = np.array(costs)
            row.total_cost = float(costs.mean())
            row.cost_sd = float(costs.std(ddof=1)) if len(costs) > 1 else 0.0
    except (BackwardPassFailure, RolloutDiverged, FilterFailure, DifferentiationError, np.linalg.LinAlgError,
            FloatingPointError) as exc:
        row.error = f"{type(exc).__name__}: {exc}"
    row.wall_time = time.perf_counter() - start
    if not math.isfinite(row.total_cost) and not row.error:
        row.error = "non-finite cost"
    return RunOutput(row, record, probs)


# ---------------------------------------------------------------------------
# batches


@dataclass
class Aggregate:
    environment: str
    method: str
    n: int
    mean_cost: float
    standard_error: float
    failures: int


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)

    def aggregates(self) -> list:
        out = []
        envs = sorted({r.environment for r in self.rows}, key=ENVIRONMENTS.index)
        for env in envs:
            for m in METHODS:
                rs = [r for r in self.rows if r.environment == env and r.method == m]
                if not rs:
                    continue
                costs = np.array([r.total_cost for r in rs if math.isfinite(r.total_cost)])
                n = len(costs)
                mean = float(costs.mean()) if n else math.nan
                se = float(costs.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
                out.append(Aggregate(env, m, n, mean, se, len(rs) - n))
        return out

    def to_csv(self, path=None) -> str:
        lines = [["environment", "method", "cf_index", "cf_x", "cf_y", "seed", "total_cost", "cost_sd",
                  "iterations", "converged", "error"]]
        for r in sorted(self.rows, key=lambda r: r.key):
            lines.append([r.environment, r.method, r.cf_index, repr(r.cf_x), repr(r.cf_y), r.seed,
                          repr(r.total_cost), repr(r.cost_sd), r.iterations, int(r.converged), r.error])
        for a in self.aggregates():
            se = "" if math.isnan(a.standard_error) else repr(a.standard_error)
            lines.append([a.environment, a.method, "mean", "", "", "", repr(a.mean_cost), se, "", "",
                          f"failures={a.failures}" if a.failures else ""])
        return _write_csv(lines, path)

    def timings_csv(self, path=None) -> str:
        lines = [["environment", "method", "cf_index", "iterations", "wall_time", "seconds_per_iteration"]]
        for r in sorted(self.rows, key=lambda r: r.key):
            per = r.wall_time / r.iterations if r.iterations else math.nan
            lines.append([r.environment, r.method, r.cf_index, r.iterations, f"{r.wall_time:.3f}", f"{per:.4f}"])
        return _write_csv(lines, path)


def _write_csv(lines, path):
    import io

    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(lines)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def _task(args):
    config, cf_index, method, cf = args
    return run_single(config, cf_index, method, cf).row


def run_batch(config: ExperimentConfig, out_dir=None) -> ResultTable:
    """Every configured method on every CF of the grid; rows merged in key order."""
    if not config.methods:
        raise ConfigError("method list is empty")
    grid = cf_grid(config)
    tasks = [(config, i, m, grid[i]) for m in config.methods for i in range(len(grid))]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            rows = list(pool.map(_task, tasks))
    else:
        rows = [_task(t) for t in tasks]
    table = ResultTable(sorted(rows, key=lambda r: r.key))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        table.to_csv(out / "results.csv")
        table.timings_csv(out / "timings.csv")
    return table


# ---------------------------------------------------------------------------
# trajectory export


def trajectory_columns(names: dict, n_x, n_u, n_a, with_cov: bool):
    states = list(names.get("states", [f"x{i}" for i in range(n_x)]))
    controls = list(names.get("controls", [f"u{i}" for i in range(n_u)]))[:n_u]
    actions = list(names.get("actions", [str(i) for i in range(n_a)]))
    cols = ["t"] + states
    if with_cov:
        cols += [f"var_{s}" for s in states]
    cols += controls + [f"p_{a}" for a in actions] + ["action", "cost"]
    return cols


def export_trajectory(record: TrajectoryRecord, path, names: dict = None, probabilities=None) -> str:
    """Plot-ready CSV: one row per state; the final row has empty control cells and the final cost."""
    names = names or {}
    T, n_u = record.controls.shape
    n_x = record.states.shape[1]
    n_a = len(names.get("actions", ()))
    if not n_a:
        n_a = probabilities.shape[1] if probabilities is not None else int(record.actions.max(initial=0)) + 1
    if probabilities is None:
        probabilities = np.zeros((T, n_a))
        probabilities[np.arange(T), record.actions] = 1.0
    with_cov = record.covariances is not None
    lines = [trajectory_columns(names, n_x, n_u, n_a, with_cov)]
    for t in range(T + 1):
        row = [t] + [repr(float(v)) for v in record.states[t]]
        if with_cov:
            row += [repr(float(v)) for v in np.diag(record.covariances[t])]
        if t < T:
            row += [repr(float(v)) for v in record.controls[t]] + [repr(float(v)) for v in probabilities[t]]
            row += [int(record.actions[t]), repr(float(record.stage_costs[t]))]
        else:
            row += [""] * (n_u + n_a + 1) + [repr(float(record.final_cost))]
        lines.append(row)
    return _write_csv(lines, path)


def parse_trajectory(path, n_x: int, n_u: int, n_a: int):
    """Inverse of :func:`export_trajectory`; returns ``(record, probabilities)``.

    Belief covariances come back as diagonal matrices.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    with_cov = len(header) == 1 + 2 * n_x + n_u + n_a + 2
    T = len(body) - 1
    X = np.array([[float(v) for v in r[1:1 + n_x]] for r in body])
    c0 = 1 + n_x + (n_x if with_cov else 0)
    covs = None
    if with_cov:
        covs = np.array([np.diag([float(v) for v in r[1 + n_x:c0]]) for r in body])
    U = np.array([[float(v) for v in r[c0:c0 + n_u]] for r in body[:T]]).reshape(T, n_u)
    P = np.array([[float(v) for v in r[c0 + n_u:c0 + n_u + n_a]] for r in body[:T]]).reshape(T, n_a)
    A = np.array([int(r[c0 + n_u + n_a]) for r in body[:T]], dtype=int)
    C = np.array([float(r[-1]) for r in body[:T]])
    final = float(body[-1][-1])
    return TrajectoryRecord(X, U, A, C, final, covs), P
