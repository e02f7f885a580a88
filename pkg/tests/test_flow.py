import math
from dataclasses import replace

import numpy as np
import pytest

from cbflow.curvature import curvature_bundle
from cbflow.diagnostics import Monitor
from cbflow.flow import (FlowState, ProjectionDiverged, SingularMetric, StepPolicy, evaluate_state,
                         initial_state, project_constant_scalar, run, step, velocity)
from cbflow.mesh import Grid, MetricField, integrate
from cbflow.oracle import doubly_warped
from cbflow.verify import thin_grid

S0 = -0.1


@pytest.fixture(scope="module")
def projected():
    m = doubly_warped(4, 0.05, active=2).sample_to_grid(thin_grid(4, 16))
    return project_constant_scalar(m, S0, tol=1e-6)[0]


@pytest.fixture(scope="module")
def start(projected):
    return initial_state(projected, S0)


def test_flat_velocity_is_zero():
    m = MetricField.flat(thin_grid(4, 8))
    st, ev = initial_state(m, 0.0)
    assert not ev.velocity.any() and not st.p.any()


def test_flat_step_changes_only_time():
    m = MetricField.flat(Grid((6, 6, 6, 6)))
    st, ev = initial_state(m, 0.0)
    new, _ = step(st, StepPolicy(), ev, dt=0.01)
    assert np.array_equal(new.metric.g, m.g)
    assert new.t == 0.01 and new.step == 1


def test_zero_horizon_returns_initial_row(start):
    st, ev = start
    traj = run(st, StepPolicy(t_end=0.0), evaluation=ev, monitor=Monitor(m_max=1))
    assert traj.reason == "t_end" and len(traj.records) == 1
    assert traj.records[0].step == 0 and traj.state is st


def test_flat_run_keeps_scalar_curvature():
    m = MetricField.flat(thin_grid(4, 8))
    st, ev = initial_state(m, 0.0)
    traj = run(st, StepPolicy(max_steps=100), 25, evaluation=ev, monitor=Monitor(m_max=1))
    assert traj.reason == "max_steps" and traj.state.step == 100
    assert max(r.scalar_drift for r in traj.records) < 1e-12


def test_projection_flat_is_identity():
    m = MetricField.flat(thin_grid(4, 8))
    out, info = project_constant_scalar(m, 0.0)
    assert info.iterations == 0 and not info.u.any()
    assert np.array_equal(out.g, m.g)


def test_projection_reaches_target(projected):
    S = curvature_bundle(projected).S
    assert np.abs(S - S0).max() < 1e-6


def test_projection_of_conformal_flat_torus():
    g = thin_grid(4, 16)
    x = g.coords()
    u0 = 0.05 * np.sin(2 * math.pi * x[0]) * np.cos(2 * math.pi * x[1])
    m = MetricField(g, np.exp(2 * u0) * MetricField.flat(g).g)
    out, info = project_constant_scalar(m, None, tol=1e-6)
    assert np.abs(curvature_bundle(out).S).max() < 1e-6
    # the conformal factor found undoes u0 up to a constant
    w = info.u + u0
    assert np.abs(w - w.mean()).max() < 1e-4


def test_projection_wrong_sign_diverges():
    with pytest.raises(ProjectionDiverged):
        project_constant_scalar(MetricField.flat(thin_grid(4, 8)), 1.0)


def test_modified_velocity_adds_laplacian_term(start):
    st, ev = start
    b = ev.bundle
    from cbflow.pressure import laplace_beltrami

    dv = velocity("modified_cbf", b, st.p) - velocity("cbf", b, st.p)
    want = laplace_beltrami(b.metric, b.S) / 3 * b.metric.g
    scale = np.abs(velocity("cbf", b, st.p)).max()
    assert np.abs(dv - want).max() < 1e-14 * scale


def test_velocity_trace_with_pressure(start):
    st, ev = start
    b = ev.bundle
    v = velocity("cbf", b, st.p)
    tr = np.einsum("ij...,ij...->...", b.metric.ginv, v)
    # B is trace-free, so tr v = 2 (n - 2) n p
    assert np.abs(tr - 16 * st.p).max() < 1e-6 * max(1.0, np.abs(st.p).max())


def test_short_run_preserves_constraint(start):
    st, ev = start
    traj = run(st, StepPolicy(scheme="rk2", max_steps=4), 2, evaluation=ev, monitor=Monitor(m_max=1))
    assert traj.reason == "max_steps"
    assert [r.step for r in traj.records] == [0, 2, 4]
    assert traj.records[0].scalar_drift < 1e-6
    assert max(r.scalar_drift for r in traj.records) < 1e-2 * abs(S0)
    assert traj.records[-1].weyl_energy <= traj.records[0].weyl_energy


def test_rk2_and_rk4_agree_to_second_order(start):
    st, ev = start
    dt = StepPolicy().time_step(ev.bundle)
    a, _ = step(st, StepPolicy(scheme="rk2"), ev, dt)
    b, _ = step(st, StepPolicy(scheme="rk4"), ev, dt)
    diff = np.abs(a.metric.g - b.metric.g).max()
    move = np.abs(b.metric.g - st.metric.g).max()
    assert diff < 1e-3 * move


def test_bh_bach_carries_no_pressure(projected):
    st, ev = initial_state(projected, S0, variant="bh_bach")
    assert st.p is None and ev.p is None
    with pytest.raises(ValueError):
        FlowState(0.0, 0, projected, S0, "bh_bach", p=np.zeros(projected.grid.shape))


def test_deturck_defaults_background(projected):
    st, ev = initial_state(projected, S0, variant="deturck_cbf")
    assert st.background is projected
    # at the background the connection difference vanishes and grad S ~ 0
    want = velocity("modified_cbf", ev.bundle, st.p)
    assert np.abs(ev.velocity - want).max() < 1e-6 * np.abs(want).max()


def test_state_validation(projected):
    with pytest.raises(ValueError):
        FlowState(0.0, 0, projected, S0, "ricci")
    with pytest.raises(ValueError):
        FlowState(0.0, 0, projected, S0, "cbf", background=projected)
    with pytest.raises(ValueError):
        StepPolicy(scheme="euler")
    with pytest.raises(ValueError):
        StepPolicy(dt=-1.0)


def test_cfl_step_scales_like_h4(start):
    _, ev = start
    pol = StepPolicy(c_cfl=0.05)
    dt = pol.time_step(ev.bundle)
    assert dt <= 0.05 * (1 / 16) ** 4


def test_oversized_step_is_reported(start):
    st, ev = start
    traj = run(st, StepPolicy(dt=5.0, max_steps=3), evaluation=ev, monitor=Monitor(m_max=1))
    assert traj.reason == "error"
    assert traj.error_type in ("SingularMetric", "NoConvergence", "NearSingularOperator")
    assert traj.records[-1].extension_ok == 0


def test_volume_evolution_sign(start):
    st, ev = start
    new, _ = step(st, StepPolicy(scheme="rk2"), ev)
    v0 = integrate(1.0, st.metric)
    v1 = integrate(1.0, new.metric)
    # d/dt vol = (1/2) int tr v = 8 int p
    rate = 8 * integrate(st.p, st.metric)
    assert (v1 - v0) == pytest.approx(rate * new.t, rel=1e-2, abs=1e-14)


def test_singular_metric_is_flow_error():
    assert issubclass(SingularMetric, RuntimeError)


def test_evaluate_state_reuses_pressure(start):
    st, _ = start
    ev = evaluate_state(replace(st, p=np.zeros_like(st.p)), StepPolicy())
    assert not ev.p.any()
