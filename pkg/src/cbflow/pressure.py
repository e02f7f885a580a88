"""The pressure equation ((n-1) Delta_g + s0) p = RHS on periodic grids.

The Laplace-Beltrami operator is discretized in divergence form,

    Delta_g f = (1/mu) sum_ij D_i (mu g^ij D_j f),   mu = sqrt(det g),

with D the antisymmetric central difference.  Multiplying by mu gives a
symmetric matrix, so the operator is self-adjoint in the discrete measure and
MINRES applies directly: the measure itself acts as the preconditioner, which
makes every Krylov inner product an L2(mu) inner product.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh_tridiagonal

from . import mesh
from .curvature import pressure_rhs  # noqa: F401  (re-exported)
from .mesh import DEFAULT_ORDER, Grid, MetricField, diff

EPS_INV = 1e-8
DEFAULT_TOL = 1e-10
PROBE_ITERS = 200
_CHECK_EVERY = 100


class PressureFailure(RuntimeError):
    """Base class for pressure-solve failures."""


class NoConvergence(PressureFailure):
    pass


class NearSingularOperator(PressureFailure):
    pass


class IncompatibleRHS(PressureFailure):
    pass


@dataclass
class SolverOptions:
    tol: float = DEFAULT_TOL
    max_iter: int | None = None  # default 10 * npoints
    project_kernel: bool = True
    preconditioner: str = "none"  # or "jacobi"
    eps_inv: float = EPS_INV
    compat_tol: float = 1e-6
    stencil_order: int = DEFAULT_ORDER
    probe_seed: int = 12345  # start vector of the zero-RHS margin probe


@dataclass
class EllipticProblem:
    metric: MetricField
    s0: float
    rhs: np.ndarray
    options: SolverOptions = field(default_factory=SolverOptions)
    x0: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.rhs = np.asarray(self.rhs, dtype=float)
        if self.rhs.shape != self.metric.grid.shape:
            raise ValueError(f"RHS shape {self.rhs.shape} != grid shape {self.metric.grid.shape}")
        if not self.options.tol > 0:
            raise ValueError("tolerance must be positive")


@dataclass
class PressureSolution:
    p: np.ndarray
    iterations: int
    residual: float
    margin: float
    compatibility_defect: float = 0.0
    ritz_min: float = math.nan
    ritz_max: float = math.nan


def laplace_beltrami(metric: MetricField, f: np.ndarray, order: int = DEFAULT_ORDER) -> np.ndarray:
    return _weighted_laplacian(metric, _flux_coeffs(metric), f, order) / metric.sqrt_det


def _flux_coeffs(metric: MetricField) -> np.ndarray:
    return metric.sqrt_det * metric.ginv


def _weighted_laplacian(metric: MetricField, C: np.ndarray, f: np.ndarray, order: int) -> np.ndarray:
    """sum_ij D_i (C^ij D_j f), the symmetric (mu-weighted) form."""
    grid = metric.grid
    active = grid.active_axes
    df = {j: diff(f, j, grid, order) for j in active}
    out = np.zeros_like(f)
    for i in active:
        flux = sum(C[i, j] * df[j] for j in active)
        out += diff(flux, i, grid, order)
    return out


class _Operator:
    """x -> mu ((n-1) Delta_g + s0) x, symmetric in the Euclidean inner product."""

    def __init__(self, metric: MetricField, s0: float, order: int):
        self.metric = metric
        self.s0 = s0 if np.ndim(s0) else float(s0)
        self.order = order
        self.n = metric.dim
        self.C = _flux_coeffs(metric)
        self.mu = metric.sqrt_det

    def sym(self, x: np.ndarray) -> np.ndarray:
        return (self.n - 1) * _weighted_laplacian(self.metric, self.C, x, self.order) + self.s0 * self.mu * x

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.sym(x) / self.mu

    def diagonal(self) -> np.ndarray:
        grid = self.metric.grid
        w = mesh._STENCILS[self.order]
        d = np.zeros(grid.shape)
        for i in grid.active_axes:
            h = grid.spacing[i]
            for off, wt in w.items():
                d -= (wt / h) ** 2 * np.roll(self.C[i, i], -off, axis=i)
        return (self.n - 1) * d + self.s0 * self.mu


def kernel_modes(grid: Grid) -> list[np.ndarray]:
    """Null space of the discrete gradient: constants times +-1 checkerboards.

    The central stencil cannot see the Nyquist mode on even-sized axes, so
    those patterns are annihilated along with the constants.
    """
    even = [a for a in grid.active_axes if grid.sizes[a] % 2 == 0]
    idx = np.indices(grid.shape)
    modes = []
    for r in range(len(even) + 1):
        for combo in itertools.combinations(even, r):
            sign = np.ones(grid.shape)
            for a in combo:
                sign = sign * np.where(idx[a] % 2 == 0, 1.0, -1.0)
            modes.append(sign)
    return modes


class _KernelProjector:
    """mu-orthogonal projection off span(modes)."""

    def __init__(self, modes: list[np.ndarray], mu: np.ndarray):
        self.modes = np.stack(modes).reshape(len(modes), -1)
        self.weighted = self.modes * mu.reshape(1, -1)
        self.gram_inv = np.linalg.inv(self.weighted @ self.modes.T)
        self.mu = mu

    def __call__(self, x: np.ndarray) -> np.ndarray:
        c = self.gram_inv @ (self.weighted @ x.ravel())
        return x - (c @ self.modes).reshape(x.shape)

    def dual(self, r: np.ndarray) -> np.ndarray:
        """The same projection for mu-weighted residual vectors."""
        return self.mu * self(r / self.mu)


def flat_torus_eigenvalue(grid: Grid, wavenumbers, order: int = DEFAULT_ORDER) -> float:
    """Eigenvalue of -(n-1) Delta on the flat grid for the Fourier mode k.

    Uses the symbol of the composed central stencil, so it is the exact
    eigenvalue of the discrete operator (it tends to (n-1)|2 pi k / L|^2).
    """
    w = mesh._STENCILS[order]
    lam = 0.0
    for a, k in enumerate(wavenumbers):
        if grid.sizes[a] == 1:
            if k:
                raise ValueError("non-zero wavenumber along a size-1 axis")
            continue
        theta = 2 * math.pi * k / grid.sizes[a]
        s = sum(wt * math.sin(off * theta) for off, wt in w.items() if off > 0) * 2
        lam += (s / grid.spacing[a]) ** 2
    return (grid.dim - 1) * lam


@dataclass
class _Lanczos:
    alphas: list[float] = field(default_factory=list)
    betas: list[float] = field(default_factory=list)  # beta_{k+1} after step k

    def margin(self, candidates: int = 8) -> tuple[float, float, float]:
        """(relative margin, min |theta|, max |theta|) from the Ritz values.

        Each Ritz pair certifies an eigenvalue within its residual bound, so
        min(|theta| + bound) / max|theta| bounds the relative distance of the
        spectrum to zero from above.  Only the ``candidates`` Ritz values
        closest to zero get eigenvectors.
        """
        k = len(self.alphas)
        if k == 0:
            return math.inf, math.nan, math.nan
        a = np.array(self.alphas)
        b = np.array(self.betas[: k - 1])
        theta = eigh_tridiagonal(a, b, eigvals_only=True)
        scale = float(np.abs(theta).max())
        if scale == 0:
            return 0.0, 0.0, 0.0
        best = math.inf
        for i in np.argsort(np.abs(theta))[:candidates]:
            _, vec = eigh_tridiagonal(a, b, select="i", select_range=(i, i))
            best = min(best, abs(theta[i]) + abs(self.betas[k - 1] * vec[-1, 0]))
        return best / scale, float(np.abs(theta).min()), scale


def _minres(A, b: np.ndarray, x0: np.ndarray, Minv, tol: float, maxiter: int,
            bnorm: float, project=None, eps_inv: float | None = None):
    """Preconditioned MINRES (Paige-Saunders) for symmetric A and SPD Minv.

    With ``eps_inv`` set, the Lanczos margin is checked every
    ``_CHECK_EVERY`` iterations and the iteration stops once it drops below.
    Returns (x, iterations, estimated relative residual, lanczos record).
    """
    lz = _Lanczos()
    x = x0.copy()
    r1 = b - A(x)
    if project is not None:
        r1 = project(r1)
    y = Minv(r1)
    beta1 = math.sqrt(max(float(np.vdot(r1, y)), 0.0))
    if beta1 == 0.0 or bnorm == 0.0:
        return x, 0, 0.0 if bnorm == 0.0 else beta1 / bnorm, lz
    oldb, beta, dbar, epsln = 0.0, beta1, 0.0, 0.0
    phibar = beta1
    cs, sn = -1.0, 0.0
    w = np.zeros_like(b)
    w2 = np.zeros_like(b)
    r2 = r1
    rel = beta1 / bnorm
    itn = 0
    while itn < maxiter:
        itn += 1
        v = y / beta
        y = A(v)
        if itn >= 2:
            y = y - (beta / oldb) * r1
        alfa = float(np.vdot(v, y))
        y = y - (alfa / beta) * r2
        if project is not None:
            y = project(y)
        r1, r2 = r2, y
        y = Minv(r2)
        oldb = beta
        beta = math.sqrt(max(float(np.vdot(r2, y)), 0.0))
        lz.alphas.append(alfa)
        lz.betas.append(beta)
        oldeps = epsln
        delta = cs * dbar + sn * alfa
        gbar = sn * dbar - cs * alfa
        epsln = sn * beta
        dbar = -cs * beta
        gamma = max(math.hypot(gbar, beta), np.finfo(float).eps)
        cs, sn = gbar / gamma, beta / gamma
        phi = cs * phibar
        phibar = sn * phibar
        w1, w2 = w2, w
        w = (v - oldeps * w1 - delta * w2) / gamma
        x = x + phi * w
        rel = phibar / bnorm
        if rel <= tol or beta == 0.0:
            break
        if eps_inv is not None and itn % _CHECK_EVERY == 0 and lz.margin()[0] < eps_inv:
            break
    return x, itn, rel, lz


def solve_pressure(problem: EllipticProblem) -> PressureSolution:
    return solve_shifted_laplacian(problem.metric, problem.s0, problem.rhs,
                                   problem.options, problem.x0)


def solve_shifted_laplacian(metric: MetricField, c, rhs: np.ndarray,
                            opts: SolverOptions | None = None,
                            x0: np.ndarray | None = None,
                            modes: list[np.ndarray] | None = None) -> PressureSolution:
    """Solve ((n-1) Delta_g + c) x = rhs; ``c`` is a constant or a field.

    The constants-and-checkerboards kernel is projected out when ``c`` is the
    constant 0.  ``modes`` instead restricts the solve to the mu-orthogonal
    complement of the given fields (RHS and solution both projected).
    """
    opts = opts or SolverOptions()
    grid = metric.grid
    op = _Operator(metric, c, opts.stencil_order)
    mu = op.mu
    vol_w = grid.cell_volume
    c_label = f"{c!r}" if np.ndim(c) == 0 else "field"

    def l2(f):
        return math.sqrt(max(float(np.sum(f * f * mu)) * vol_w, 0.0))

    rhs = np.asarray(rhs, dtype=float)
    defect = 0.0
    project = None
    if modes is not None:
        kp = _KernelProjector(modes, mu)
        rhs = kp(rhs)
        project = kp.dual
    elif np.ndim(c) == 0 and c == 0.0 and opts.project_kernel:
        volume = float(np.sum(mu)) * vol_w
        defect = abs(float(np.sum(rhs * mu)) * vol_w) / volume
        if defect > opts.compat_tol:
            raise IncompatibleRHS(f"mean of RHS is {defect:.3e} > {opts.compat_tol:.1e} at s0 = 0")
        kp = _KernelProjector(kernel_modes(grid), mu)
        rhs = kp(rhs)
        project = kp.dual

    maxiter = opts.max_iter if opts.max_iter is not None else 10 * grid.npoints
    if opts.preconditioner == "jacobi":
        dinv = 1.0 / np.abs(op.diagonal())

        def Minv(r):
            return dinv * r
    elif opts.preconditioner == "none":
        def Minv(r):
            return r / mu
    else:
        raise ValueError(f"unknown preconditioner {opts.preconditioner!r}")

    b = mu * rhs
    bnorm = math.sqrt(float(np.sum(b * Minv(b))))
    if bnorm == 0.0:
        margin, tmin, tmax = _probe_margin(op, Minv, project, grid, opts.probe_seed)
        if margin < opts.eps_inv:
            raise NearSingularOperator(
                f"invertibility margin {margin:.3e} < {opts.eps_inv:.1e} (s0 = {c_label})")
        return PressureSolution(np.zeros(grid.shape), 0, 0.0, margin, defect, tmin, tmax)

    def residual(x):
        r = op.apply(x) - rhs
        return r if project is None else kp(r)

    x0 = np.zeros(grid.shape) if x0 is None else np.array(x0, dtype=float)
    if project is not None:
        x0 = kp(x0)
    x, its, rel, lz = _minres(op.sym, b, x0, Minv, opts.tol, maxiter, bnorm, project, opts.eps_inv)
    if project is not None:
        x = kp(x)
    true_rel = l2(residual(x)) / l2(rhs)
    # the recurrence can undershoot the true residual; polish with restarts
    margin, tmin, tmax = lz.margin()
    for _ in range(3):
        if true_rel <= opts.tol or its >= maxiter or margin < opts.eps_inv:
            break
        x, more, rel, _ = _minres(op.sym, b, x, Minv, opts.tol, maxiter - its, bnorm, project)
        its += more
        if project is not None:
            x = kp(x)
        true_rel = l2(residual(x)) / l2(rhs)
    if margin < opts.eps_inv:
        raise NearSingularOperator(
            f"invertibility margin {margin:.3e} < {opts.eps_inv:.1e} (s0 = {c_label})")
    if true_rel > opts.tol:
        raise NoConvergence(f"relative residual {true_rel:.3e} after {its} iterations")
    return PressureSolution(x, its, true_rel, margin, defect, tmin, tmax)


def _probe_margin(op: _Operator, Minv, project, grid: Grid, seed: int):
    """Margin estimate from a short Lanczos run on a seeded pseudo-random vector."""
    rng = np.random.default_rng(seed)
    b = op.mu * rng.standard_normal(grid.shape)
    if project is not None:
        b = project(b)
    bnorm = math.sqrt(float(np.sum(b * Minv(b))))
    iters = min(PROBE_ITERS, grid.npoints)
    _, _, _, lz = _minres(op.sym, b, np.zeros(grid.shape), Minv, 0.0, iters, bnorm, project)
    return lz.margin()
