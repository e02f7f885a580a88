"""Time stepping for conformal Bach flow and its variants.

Variants (v is the metric velocity d/dt g):

* ``cbf``:          v = 2(n-2) (B + p g)
* ``modified_cbf``: v = 2(n-2) (B + (Delta S) g / (2(n-1)(n-2)) + p g)
* ``deturck_cbf``:  modified_cbf + L_W g, W the gauge field against a background
* ``bh_bach``:      v = B + (Delta S) g / (2(n-1)(n-2)), no pressure

The pressure p solves ((n-1) Delta + s0) p = -(n-2) A.B + div div B and is
re-solved at every Runge-Kutta stage.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .curvature import (CurvatureBundle, christoffel, cov_derivative, curvature_bundle,
                        pressure_rhs, rough_laplacian)
from .mesh import DEFAULT_ORDER, MetricField, gradient, integrate, norms, raise_all, symmetrize
from .pressure import (PressureFailure, PressureSolution, SolverOptions, laplace_beltrami,
                       solve_shifted_laplacian)

VARIANTS = ("cbf", "modified_cbf", "deturck_cbf", "bh_bach")
SCHEMES = ("rk2", "rk4")


class FlowError(RuntimeError):
    pass


class SingularMetric(FlowError):
    """The SPD guard tripped: candidate finite-time singularity."""


class ProjectionDiverged(FlowError):
    pass




@dataclass
class SolveStats:
    iterations: int = 0
    residual: float = 0.0
    margin: float = math.inf

    @classmethod
    def of(cls, sol: PressureSolution) -> "SolveStats":
        return cls(sol.iterations, sol.residual, sol.margin)


@dataclass
class FlowState:
    t: float
    step: int
    metric: MetricField
    s0: float
    variant: str = "cbf"
    p: np.ndarray | None = None
    background: MetricField | None = None
    solve: SolveStats = field(default_factory=SolveStats)

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown flow variant {self.variant!r}")
        if (self.background is not None) != (self.variant == "deturck_cbf"):
            raise ValueError("a background metric is required exactly for deturck_cbf")
        if self.variant == "bh_bach" and self.p is not None:
            raise ValueError("bh_bach carries no pressure")

    @property
    def needs_pressure(self) -> bool:
        return self.variant != "bh_bach"


@dataclass
class StepPolicy:
    scheme: str = "rk4"
    c_cfl: float = 0.05
    t_end: float = math.inf
    max_steps: int | None = None
    dt: float | None = None  # fixed step, overrides the CFL rule
    stencil_order: int = DEFAULT_ORDER
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self) -> None:
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if not self.c_cfl > 0 or (self.dt is not None and not self.dt > 0):
            raise ValueError("time step must be positive")

    def time_step(self, bundle: CurvatureBundle) -> float:
        if self.dt is not None:
            return self.dt
        rm_sup, _ = norms(bundle.Rm, bundle.metric)
        return self.c_cfl * bundle.grid.h_min ** 4 / max(1.0, rm_sup)


# ---------------------------------------------------------------- velocities

def _lap_S(b: CurvatureBundle) -> np.ndarray:
    return laplace_beltrami(b.metric, b.S, b.order)


def velocity_cbf(b: CurvatureBundle, p: np.ndarray) -> np.ndarray:
    n = b.dim
    return 2 * (n - 2) * (b.B + p * b.metric.g)


def velocity_modified_cbf(b: CurvatureBundle, p: np.ndarray) -> np.ndarray:
    n = b.dim
    return velocity_cbf(b, p) + _lap_S(b) / (n - 1) * b.metric.g


def velocity_bh_bach(b: CurvatureBundle) -> np.ndarray:
    n = b.dim
    return b.B + _lap_S(b) / (2 * (n - 1) * (n - 2)) * b.metric.g


def _deturck_covector(b: CurvatureBundle, background: MetricField) -> np.ndarray:
    n = b.dim
    metric = b.metric
    D = b.Gamma - christoffel(background, b.order)  # a genuine (1,2) tensor
    D_low = np.einsum("km...,mij...->kij...", metric.g, D)
    lap = rough_laplacian(D_low, metric, b.Gamma, b.order)
    W = -np.einsum("ij...,kij...->k...", metric.ginv, lap)
    return W + (n - 2) / (2 * (n - 1)) * gradient(b.S, b.grid, b.order)


def deturck_vector_field(b: CurvatureBundle, background: MetricField) -> np.ndarray:
    """W^k = -g^ij Delta (Gamma(g) - Gamma(bg))^k_ij + (n-2)/(2(n-1)) (grad S)^k.

    Delta is the rough Laplacian of the connection difference.
    """
    return raise_all(_deturck_covector(b, background), b.metric.ginv)


def lie_derivative_metric(b: CurvatureBundle, W_low: np.ndarray) -> np.ndarray:
    """(L_W g)_ij = nabla_i W_j + nabla_j W_i for a covector W."""
    dW = cov_derivative(W_low, b.Gamma, b.grid, b.order)
    return dW + np.swapaxes(dW, 0, 1)


def velocity_deturck_cbf(b: CurvatureBundle, p: np.ndarray, background: MetricField) -> np.ndarray:
    return velocity_modified_cbf(b, p) + lie_derivative_metric(b, _deturck_covector(b, background))


def velocity(variant: str, b: CurvatureBundle, p: np.ndarray | None,
             background: MetricField | None = None) -> np.ndarray:
    if variant == "cbf":
        v = velocity_cbf(b, p)
    elif variant == "modified_cbf":
        v = velocity_modified_cbf(b, p)
    elif variant == "deturck_cbf":
        v = velocity_deturck_cbf(b, p, background)
    elif variant == "bh_bach":
        v = velocity_bh_bach(b)
    else:
        raise ValueError(f"unknown flow variant {variant!r}")
    return symmetrize(v)


# ---------------------------------------------------------------- stepping

@dataclass
class Evaluation:
    """Everything derived from one metric: curvature, pressure, velocity."""

    bundle: CurvatureBundle
    p: np.ndarray | None
    solve: SolveStats
    velocity: np.ndarray


def solve_pressure_for(b: CurvatureBundle, s0: float, opts: SolverOptions,
                       x0: np.ndarray | None = None) -> PressureSolution:
    return solve_shifted_laplacian(b.metric, s0, pressure_rhs(b), opts, x0)


def evaluate(metric: MetricField, state: FlowState, policy: StepPolicy,
             p_guess: np.ndarray | None = None, p_fixed: np.ndarray | None = None) -> Evaluation:
    """Bundle, pressure and velocity at ``metric``.

    ``p_fixed`` reuses a stored pressure instead of solving (resume path).
    """
    b = curvature_bundle(metric, policy.stencil_order)
    p, stats = None, SolveStats()
    if state.needs_pressure:
        if p_fixed is not None:
            p, stats = p_fixed, state.solve
        else:
            sol = solve_pressure_for(b, state.s0, policy.solver, p_guess)
            p, stats = sol.p, SolveStats.of(sol)
    return Evaluation(b, p, stats, velocity(state.variant, b, p, state.background))


def evaluate_state(state: FlowState, policy: StepPolicy) -> Evaluation:
    """Evaluation at the state's own metric, reusing its pressure when present."""
    return evaluate(state.metric, state, policy, p_fixed=state.p)


def _advance(metric: MetricField, v: np.ndarray, dt: float) -> MetricField:
    try:
        return MetricField(metric.grid, metric.g + dt * v)
    except ValueError as exc:
        raise SingularMetric(str(exc)) from exc


def step(state: FlowState, policy: StepPolicy, ev: Evaluation | None = None,
         dt: float | None = None) -> tuple[FlowState, Evaluation]:
    """One explicit RK step; returns the new state and its evaluation."""
    ev = ev or evaluate_state(state, policy)
    if dt is None:
        dt = policy.time_step(ev.bundle)
    g0 = state.metric
    if policy.scheme == "rk2":
        k1 = ev.velocity
        e2 = evaluate(_advance(g0, k1, dt), state, policy, ev.p)
        g_new = g0.g + 0.5 * dt * (k1 + e2.velocity)
    else:
        k1 = ev.velocity
        e2 = evaluate(_advance(g0, k1, 0.5 * dt), state, policy, ev.p)
        e3 = evaluate(_advance(g0, e2.velocity, 0.5 * dt), state, policy, e2.p)
        e4 = evaluate(_advance(g0, e3.velocity, dt), state, policy, e3.p)
        g_new = g0.g + dt / 6.0 * (k1 + 2 * e2.velocity + 2 * e3.velocity + e4.velocity)
        e2 = e4
    try:
        new_metric = MetricField(g0.grid, g_new)
    except ValueError as exc:
        raise SingularMetric(str(exc)) from exc
    probe = replace(state, metric=new_metric)
    ev_new = evaluate(new_metric, probe, policy, e2.p)
    new_state = replace(state, t=state.t + dt, step=state.step + 1, metric=new_metric,
                        p=ev_new.p, solve=ev_new.solve)
    return new_state, ev_new


def initial_state(metric: MetricField, s0: float, variant: str = "cbf",
                  background: MetricField | None = None,
                  policy: StepPolicy | None = None) -> tuple[FlowState, Evaluation]:
    """State at t = 0 with its pressure solved."""
    policy = policy or StepPolicy()
    if variant == "deturck_cbf" and background is None:
        background = metric
    state = FlowState(0.0, 0, metric, float(s0), variant, background=background)
    ev = evaluate(metric, state, policy)
    return replace(state, p=ev.p, solve=ev.solve), ev


# ---------------------------------------------------------------- projection

@dataclass
class ProjectionInfo:
    iterations: int
    residual: float
    u: np.ndarray


def project_constant_scalar(metric: MetricField, s0: float | None, tol: float = 1e-8, *,
                            max_iter: int = 30, order: int = DEFAULT_ORDER,
                            solver: SolverOptions | None = None) -> tuple[MetricField, ProjectionInfo]:
    """Conformal change g -> e^{2u} g with discrete scalar curvature S == s0.

    First a damped Newton iteration drives the oscillation S - mean(S) to
    zero with mean(u) = 0 held fixed, which lands on the natural constant s of
    the conformal class.  A constant rescaling then moves s to s0, exactly,
    because S(c g) = S(g) / c holds for the discrete pipeline too.  ``s0=None``
    keeps the natural constant.  When s0 and s differ in sign (or s0 = 0 while
    s is not) no rescaling helps and ProjectionDiverged is raised.

    The Newton matrix is the linearization -2(n-1) Delta v - 2 S v of
    S(e^{2v} g_k), restricted to the complement of the constants (the free
    constant absorbs the rest).
    """
    grid = metric.grid
    # inexact Newton: the linear solve only needs to beat the outer tolerance by 10x
    inner = min(1e-6, max(1e-9, 0.1 * tol))
    solver = replace(solver or SolverOptions(), tol=inner, compat_tol=math.inf, eps_inv=0.0)
    ones = np.ones(grid.shape)

    def mean(f, g):
        return integrate(f, g) / integrate(ones, g)

    u = np.zeros(grid.shape)
    current = metric
    S = curvature_bundle(current, order).S
    osc = float(np.abs(S - mean(S, current)).max())
    it = 0
    while osc > 0.1 * tol and it < max_iter:
        it += 1
        sbar = mean(S, current)
        try:
            v = solve_shifted_laplacian(current, S, 0.5 * (S - sbar), solver, modes=[ones]).p
        except PressureFailure as exc:
            raise ProjectionDiverged(f"linearized solve failed at iteration {it}: {exc}") from exc
        alpha = 1.0
        while alpha >= 1.0 / 64:
            u_try = u + alpha * v
            try:
                trial = MetricField(grid, np.exp(2 * u_try) * metric.g)
                S_try = curvature_bundle(trial, order).S
                osc_try = float(np.abs(S_try - mean(S_try, trial)).max())
            except (ValueError, FloatingPointError):
                osc_try = math.inf
            if osc_try < osc:
                break
            alpha *= 0.5
        else:
            break  # stagnated at the roundoff floor (or diverged: judged below)
        u, current, S, osc = u_try, trial, S_try, osc_try
    s = mean(S, current)
    if s0 is None:
        s0 = s
    if s0 != 0.0:
        if not s * s0 > 0:
            raise ProjectionDiverged(
                f"the conformal class settles at constant scalar curvature {s:.3e}; "
                f"s0 = {s0!r} is unreachable by rescaling")
        c = s / s0
        current = MetricField(grid, c * current.g)
        u = u + 0.5 * math.log(c)
        S = S / c
    res = float(np.abs(S - s0).max())
    if not res <= tol:
        raise ProjectionDiverged(f"sup|S - s0| = {res:.3e} > {tol:.1e} after {it} Newton steps")
    return current, ProjectionInfo(it, res, u)


# ---------------------------------------------------------------- runs

@dataclass
class Trajectory:
    records: list = field(default_factory=list)
    state: FlowState | None = None
    reason: str = ""
    error: str | None = None
    error_type: str | None = None


def run(initial: FlowState, policy: StepPolicy, cadence: int = 1, *, monitor=None,
        on_record=None, on_step=None, evaluation: Evaluation | None = None) -> Trajectory:
    """Step until t_end or max_steps, recording diagnostics every ``cadence`` steps.

    ``monitor`` is a :class:`cbflow.diagnostics.Monitor` (one is created when
    omitted); ``on_record(record)`` and ``on_step(state, evaluation)`` are
    optional callbacks (the CLI writes CSV rows and checkpoints from them).
    Errors end the run and are stored on the trajectory, never raised.
    """
    from .diagnostics import Monitor

    if cadence < 1:
        raise ValueError("cadence must be >= 1")
    monitor = monitor or Monitor()
    traj = Trajectory(state=initial)
    state = initial
    ev = evaluation
    dt_last = 0.0

    def emit(dt, ev):
        rec = monitor.record(state, ev, dt)
        traj.records.append(rec)
        if on_record is not None:
            on_record(rec)

    try:
        ev = ev or evaluate_state(state, policy)
        if state.step == 0 or not monitor.started:
            emit(0.0, ev)
        while True:
            if state.t >= policy.t_end:
                traj.reason = "t_end"
                break
            if policy.max_steps is not None and state.step >= policy.max_steps:
                traj.reason = "max_steps"
                break
            dt = policy.time_step(ev.bundle)
            if state.t + dt > policy.t_end:
                dt = policy.t_end - state.t
            state, ev = step(state, policy, ev, dt)
            dt_last = dt
            traj.state = state
            if state.step % cadence == 0:
                emit(dt_last, ev)
            if on_step is not None:
                on_step(state, ev)
    except (FlowError, PressureFailure) as exc:
        traj.reason = "error"
        traj.error = str(exc)
        traj.error_type = type(exc).__name__
        # final row: the last good state, flagged with the failure
        last = traj.records[-1] if traj.records else None
        if ev is not None and (last is None or last.step != state.step):
            last = monitor.record(state, ev, dt_last)
        rec = monitor.failure_record(last, exc)
        if rec is not None:
            traj.records.append(rec)
            if on_record is not None:
                on_record(rec)
    traj.state = state
    return traj
