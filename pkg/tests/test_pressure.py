import math

import numpy as np
import pytest

from cbflow.mesh import Grid, MetricField
from cbflow.oracle import doubly_warped
from cbflow.pressure import (EllipticProblem, IncompatibleRHS, NearSingularOperator,
                             NoConvergence, SolverOptions, flat_torus_eigenvalue,
                             kernel_modes, laplace_beltrami, solve_pressure,
                             solve_shifted_laplacian)
from cbflow.verify import manufactured_pressure, near_singular_raised, thin_grid


@pytest.fixture(scope="module")
def warped_metric():
    return doubly_warped(4, 0.1, active=2).sample_to_grid(thin_grid(4, 16))


def test_laplacian_of_constant_is_zero(warped_metric):
    assert np.abs(laplace_beltrami(warped_metric, np.full(warped_metric.grid.shape, 2.0))).max() < 1e-12


def test_flat_laplacian_of_sine():
    errs = []
    for N in (32, 64):
        g = Grid((N, 1, 1, 1))
        f = np.sin(2 * math.pi * g.coords()[0])
        lap = laplace_beltrami(MetricField.flat(g), f)
        errs.append(np.abs(lap + (2 * math.pi) ** 2 * f).max() / (2 * math.pi) ** 2)
    assert errs[1] < 1e-4
    assert math.log2(errs[0] / errs[1]) > 3.5


def test_weighted_operator_is_symmetric(warped_metric, rng):
    m = warped_metric
    x, y = rng.standard_normal((2,) + m.grid.shape)
    # <y, mu Delta x> = <x, mu Delta y>
    a = np.sum(y * m.sqrt_det * laplace_beltrami(m, x))
    b = np.sum(x * m.sqrt_det * laplace_beltrami(m, y))
    assert abs(a - b) < 1e-10 * abs(a)


def test_manufactured_solution_negative_shift():
    err, its = manufactured_pressure(doubly_warped(4, 0.1, active=2), thin_grid(4, 16), -1.0)
    assert err < 1e-8 and its > 0


def test_flat_zero_rhs_gives_zero_pressure():
    g = thin_grid(4, 8)
    sol = solve_shifted_laplacian(MetricField.flat(g), 0.0, np.zeros(g.shape))
    assert not sol.p.any() and sol.iterations == 0


def test_near_singular_shift_is_caught():
    g = thin_grid(4, 16)
    assert near_singular_raised(g, (1, 0, 0, 0), 0.0)
    assert not near_singular_raised(g, (1, 0, 0, 0), -0.5 * flat_torus_eigenvalue(g, (1, 0, 0, 0)))


def test_discrete_eigenvalue_tends_to_continuum():
    lam = flat_torus_eigenvalue(Grid((64, 1, 1, 1)), (1, 0, 0, 0))
    assert lam == pytest.approx(3 * (2 * math.pi) ** 2, rel=1e-5)
    with pytest.raises(ValueError):
        flat_torus_eigenvalue(Grid((64, 1, 1, 1)), (1, 1, 0, 0))


def test_negative_shift_random_rhs(warped_metric, rng):
    m = warped_metric
    rhs = rng.standard_normal(m.grid.shape)
    sol = solve_pressure(EllipticProblem(m, -0.7, rhs, SolverOptions(tol=1e-10)))
    resid = 3 * laplace_beltrami(m, sol.p) - 0.7 * sol.p - rhs
    assert np.abs(resid).max() < 1e-7 * np.abs(rhs).max()
    assert sol.margin > 1e-8


def test_jacobi_preconditioner_agrees(warped_metric, rng):
    m = warped_metric
    rhs = rng.standard_normal(m.grid.shape)
    a = solve_shifted_laplacian(m, -1.0, rhs, SolverOptions(tol=1e-11))
    b = solve_shifted_laplacian(m, -1.0, rhs, SolverOptions(tol=1e-11, preconditioner="jacobi"))
    assert np.abs(a.p - b.p).max() < 1e-8


def test_zero_shift_needs_compatible_rhs(warped_metric):
    m = warped_metric
    with pytest.raises(IncompatibleRHS):
        solve_shifted_laplacian(m, 0.0, np.ones(m.grid.shape))
    x = m.grid.coords()
    p = np.sin(2 * math.pi * x[0]) * np.cos(2 * math.pi * x[1])
    sol = solve_shifted_laplacian(m, 0.0, 3 * laplace_beltrami(m, p))
    for mode in kernel_modes(m.grid):
        assert abs(np.sum(sol.p * mode * m.sqrt_det)) < 1e-8


def test_kernel_modes_count():
    assert len(kernel_modes(Grid((8, 8, 1, 1)))) == 4
    assert len(kernel_modes(Grid((7, 8, 1, 1)))) == 2


def test_iteration_cap_reports_no_convergence(warped_metric, rng):
    rhs = rng.standard_normal(warped_metric.grid.shape)
    with pytest.raises(NoConvergence):
        solve_shifted_laplacian(warped_metric, -1.0, rhs, SolverOptions(tol=1e-12, max_iter=3))


def test_problem_validation(warped_metric):
    with pytest.raises(ValueError):
        EllipticProblem(warped_metric, -1.0, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        EllipticProblem(warped_metric, -1.0, np.zeros(warped_metric.grid.shape), SolverOptions(tol=0.0))
