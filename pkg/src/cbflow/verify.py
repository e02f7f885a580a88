"""Invariant suites behind ``cbflow verify``.

Each check returns a :class:`CheckResult`; a suite is a list of checks.  The
measurements are exposed as plain functions so tests can assert on the numbers
directly instead of parsing the table.
"""
from __future__ import annotations

import math
import time
from importlib import resources
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .curvature import (bach_divergence_residual, cotton_weyl_residual, curvature_bundle,
                        curvature_variation, riemann, christoffel)
from .mesh import Grid, MetricField, corrupted_stencil, pointwise_norm_sq
from .oracle import (conformally_flat, doubly_warped, flat, fourier, off_diagonal,
                     oracle_bundle_at)
from .oracle.families import AnalyticMetricFamily
from .pressure import (NearSingularOperator, SolverOptions, flat_torus_eigenvalue,
                       laplace_beltrami, solve_shifted_laplacian)

ORDER_FLOOR = 3.5
GRID_QUANTITIES = ("Gamma", "Rm", "Rc", "S", "A", "W", "C", "B")


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


@dataclass
class Refinement:
    """Errors at successive resolutions and the observed orders between them."""

    sizes: list[int]
    errors: list[float]
    ratio: float = 2.0

    @property
    def orders(self) -> list[float]:
        out = []
        for a, b in zip(self.errors, self.errors[1:]):
            out.append(math.log(a / b) / math.log(self.ratio) if a > 0 and b > 0 else math.inf)
        return out

    @property
    def order(self) -> float:
        return self.orders[-1]

    def __str__(self) -> str:
        errs = ", ".join(f"{e:.3e}" for e in self.errors)
        return f"err[{errs}] order {self.order:.2f}"


# -- measurements ------------------------------------------------------------------

def thin_grid(n: int, N: int, periods=None) -> Grid:
    """N x N x 1 x ... grid: two active axes, the rest constant."""
    return Grid((N, N) + (1,) * (n - 2), periods or (1.0,) * n)


def sample_nodes(grid: Grid, count: int, seed: int) -> np.ndarray:
    """Seeded random node indices (P, n) on the active axes."""
    rng = np.random.default_rng(seed)
    return np.stack([rng.integers(0, N, count) if N > 1 else np.zeros(count, int)
                     for N in grid.sizes], axis=1)


def _at(T: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    return T[(Ellipsis,) + tuple(nodes.T)]


def oracle_grid_errors(family: AnalyticMetricFamily, grid: Grid, *, count: int = 12,
                       seed: int = 0, quantities=GRID_QUANTITIES) -> dict[str, float]:
    """Relative sup error of grid curvature against the oracle at sampled nodes."""
    b = curvature_bundle(family.sample_to_grid(grid))
    nodes = sample_nodes(grid, count, seed)
    pts = nodes * np.asarray(grid.spacing)
    o = oracle_bundle_at(family, pts, bach_alt=False, rm_derivatives=False)
    out = {}
    for q in quantities:
        exact = getattr(o, q)
        scale = np.abs(exact).max()
        out[q] = float(np.abs(_at(getattr(b, q), nodes) - exact).max() / scale)
    return out


def identity_residuals(metric: MetricField) -> dict[str, float]:
    """Grid residuals of the algebraic/differential identities (relative)."""
    b = curvature_bundle(metric, alt=True)
    g = metric

    def sup(T):
        return math.sqrt(max(float(pointwise_norm_sq(T, g).max()), 0.0))

    B_sup = sup(b.B)
    return {
        "dual_bach": sup(b.B - b.B_alt) / B_sup,
        "cotton_weyl": sup(cotton_weyl_residual(b)) / sup(b.C),
        "bach_divergence": float(bach_divergence_residual(b).max()) / B_sup,
        "bach_trace": float(np.abs(b.bach_raw_trace).max()) / B_sup,
    }


def refine(measure: Callable[[int], float], sizes) -> Refinement:
    sizes = list(sizes)
    return Refinement(sizes, [measure(N) for N in sizes], sizes[1] / sizes[0])


def conformal_invariance_error(family: AnalyticMetricFamily, w, grid: Grid) -> float:
    """sup|B(e^{2w} g) - e^{-2w} B(g)| / sup|B(g)| in dimension 4 (Euclidean sup)."""
    b0 = curvature_bundle(family.sample_to_grid(grid))
    b1 = curvature_bundle(family.with_conformal(w).sample_to_grid(grid))
    ew = np.exp(-2 * w.values(grid.coords()))
    return float(np.abs(b1.B - ew * b0.B).max() / np.abs(b0.B).max())


def manufactured_pressure(family: AnalyticMetricFamily, grid: Grid, s0: float,
                          tol: float = 1e-10) -> tuple[float, int]:
    """Relative L2 error of the solver against a manufactured smooth p."""
    m = family.sample_to_grid(grid)
    n = grid.dim
    x = grid.coords()
    k = [2 * math.pi / L for L in grid.periods]
    p = np.cos(k[0] * x[0] + 0.3) * (1 + 0.5 * np.sin(k[1 % n] * x[1 % n]))
    if grid.sizes[-1] > 1:
        p = p + 0.25 * np.sin(k[-1] * x[-1] + 1.1)
    rhs = (n - 1) * laplace_beltrami(m, p) + s0 * p
    sol = solve_shifted_laplacian(m, s0, rhs, SolverOptions(tol=tol))
    diff = sol.p - p
    w = m.sqrt_det
    return float(math.sqrt(np.sum(diff * diff * w) / np.sum(p * p * w))), sol.iterations


def near_singular_raised(grid: Grid, wavenumbers, offset: float) -> bool:
    """Whether s0 = eigenvalue + offset on the flat torus trips the guard."""
    lam = flat_torus_eigenvalue(grid, wavenumbers)
    m = MetricField.flat(grid)
    rng = np.random.default_rng(7)
    rhs = rng.standard_normal(grid.shape)
    try:
        solve_shifted_laplacian(m, lam + offset, rhs)
    except NearSingularOperator:
        return True
    return False


def variation_fd_error(metric: MetricField, h: np.ndarray, eps: float = 1e-5) -> float:
    """|central FD of Rm(g + e h) - curvature_variation(g, h)| / |variation|."""
    Gamma = christoffel(metric)
    Rm = riemann(metric, Gamma)
    lin = curvature_variation(metric, h, Gamma, Rm)
    plus = MetricField(metric.grid, metric.g + eps * h)
    minus = MetricField(metric.grid, metric.g - eps * h)
    fd = (riemann(plus, christoffel(plus)) - riemann(minus, christoffel(minus))) / (2 * eps)
    return float(np.abs(fd - lin).max() / np.abs(lin).max())


# -- suites ------------------------------------------------------------------------

def _check(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crashing check is a failing check
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, bool(ok), detail, time.perf_counter() - t0)


def _order_check(ref: Refinement, ceiling: float) -> tuple[bool, str]:
    ok = ref.order >= ORDER_FLOOR and ref.errors[-1] <= ceiling
    return ok, f"{ref} (need >= {ORDER_FLOOR}, final <= {ceiling:g})"


def curvature_suite(seed: int = 0) -> list[CheckResult]:
    fam = doubly_warped(4, 0.1, active=2)
    fam5 = doubly_warped(5, 0.1, active=2)
    sizes = (32, 64)
    results = []
    errs = {N: oracle_grid_errors(fam, thin_grid(4, N), seed=seed) for N in sizes}
    for q in GRID_QUANTITIES:
        ref = Refinement(list(sizes), [errs[N][q] for N in sizes])
        results.append(_check(f"oracle-grid {q}", lambda ref=ref: _order_check(ref, 1e-3)))
    ids4 = {N: identity_residuals(fam.sample_to_grid(thin_grid(4, N))) for N in sizes}
    ids5 = {N: identity_residuals(fam5.sample_to_grid(thin_grid(5, N))) for N in sizes}
    for key, label in (("dual_bach", "dual Bach"), ("cotton_weyl", "Cotton-Weyl identity")):
        ref = Refinement(list(sizes), [ids4[N][key] for N in sizes])
        results.append(_check(label, lambda ref=ref: _order_check(ref, 1e-3)))
    for dim, ids in ((4, ids4), (5, ids5)):
        ref = Refinement(list(sizes), [ids[N]["bach_divergence"] for N in sizes])
        results.append(_check(f"Bach divergence identity (n={dim})",
                              lambda ref=ref: _order_check(ref, 1e-2)))
    return results


def oracle_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    pts = rng.random((8, 4))
    out = []

    def conf_flat():
        o = oracle_bundle_at(conformally_flat(4, 0.1), pts, rm_derivatives=False)
        w, b = np.abs(o.W).max(), np.abs(o.B).max()
        return max(w, b) <= 1e-10, f"sup|W| {w:.2e}, sup|B| {b:.2e} (need <= 1e-10)"

    def dual():
        o = oracle_bundle_at(doubly_warped(4, 0.1), pts, rm_derivatives=False)
        r = np.abs(o.B - o.B_alt).max() / np.abs(o.B).max()
        return r <= 1e-9, f"relative {r:.2e} (need <= 1e-9)"

    def self_consistency():
        o = oracle_bundle_at(off_diagonal(4, 0.2), pts, rm_derivatives=False)
        fam = doubly_warped(4, 0.1)
        o2 = oracle_bundle_at(fam, pts, bach_alt=False, rm_derivatives=False)
        worst = 0.0
        for v in (o, o2):
            Bs = np.abs(v.B).max()
            worst = max(worst, np.abs(v.bach_trace).max() / Bs,
                        np.abs(v.cotton_weyl_residual).max() / np.abs(v.C).max(),
                        np.abs(v.divergence_residual).max() / Bs)
        return worst <= 1e-9, f"worst relative residual {worst:.2e} (need <= 1e-9)"

    def closed_form():
        fam = conformally_flat(4, 0.1)
        o = oracle_bundle_at(fam, pts, bach_alt=False, rm_derivatives=False)
        coords = list(pts.T)
        u, du, lap = fam.u.values(coords), fam.u.gradient(coords), fam.u.laplacian(coords)
        n = 4
        S = -np.exp(-2 * u) * (2 * (n - 1) * lap + (n - 2) * (n - 1) * np.sum(du * du, axis=0))
        r = np.abs(o.S - S).max() / np.abs(S).max()
        return r <= 1e-12, f"scalar curvature vs closed form: relative {r:.2e}"

    def flat_zero():
        o = oracle_bundle_at(flat(4), pts, rm_derivatives=False)
        z = max(np.abs(getattr(o, q)).max() for q in ("Gamma", "Rm", "B", "pressure_rhs"))
        return z == 0.0, f"max |.| {z:.1e}"

    for name, fn in (("oracle flat zeros", flat_zero), ("oracle conformally flat W=B=0", conf_flat),
                     ("oracle dual Bach", dual), ("oracle identities", self_consistency),
                     ("oracle closed-form S", closed_form)):
        out.append(_check(name, fn))
    return out


def pressure_suite(seed: int = 0) -> list[CheckResult]:
    def manufactured():
        fam = doubly_warped(4, 0.1)
        err, its = manufactured_pressure(fam, Grid((12, 12, 12, 12)), -1.0)
        return err < 1e-8, f"relative L2 error {err:.2e} in {its} iterations (need < 1e-8)"

    def singular():
        g = Grid((16, 16, 1, 1))
        hit = near_singular_raised(g, (1, 0, 0, 0), 5e-7)
        miss = near_singular_raised(g, (1, 0, 0, 0), 0.5)
        return hit and not miss, f"raised at +5e-7: {hit}; raised at +0.5: {miss}"

    return [_check("pressure manufactured solution", manufactured),
            _check("pressure near-singular guard", singular)]


def flow_suite(seed: int = 0) -> list[CheckResult]:
    from .flow import StepPolicy, initial_state, step, project_constant_scalar

    def flat_zero():
        m = MetricField.flat(thin_grid(4, 8))
        st, ev = initial_state(m, 0.0)
        v = float(np.abs(ev.velocity).max())
        return v < 1e-12, f"sup|v| {v:.1e}"

    def variation():
        fam = doubly_warped(4, 0.1, active=2)

        def err(N):
            m = fam.sample_to_grid(thin_grid(4, N))
            x = m.grid.coords()
            h = np.zeros_like(m.g)
            h[0, 1] = h[1, 0] = 0.1 * np.sin(2 * math.pi * x[0])
            h[2, 2] = 0.1 * np.cos(2 * math.pi * (x[0] + x[1]))
            h[0, 0] = 0.05 * np.cos(2 * math.pi * x[1])
            return variation_fd_error(m, h)

        return _order_check(refine(err, (16, 32)), 1e-3)

    def consistency():
        c = flow_consistency()
        ok = c.total[0] <= 0.1 and c.total[1] < c.total[0] and 3.0 <= c.ratio <= 5.0
        return ok, (f"relative mismatch {c.total[0]:.3e} at dt, {c.total[1]:.3e} at dt/4; "
                    f"temporal part shrinks {c.ratio:.2f}x (need 3..5)")

    return [_check("flow flat velocity", flat_zero), _check("first-variation formula", variation),
            _check("flow consistency", consistency)]


@dataclass
class Consistency:
    """Relative mismatch of dRm/dt against the first variation.

    ``total[k]`` is the full mismatch at dt / reduce**k; ``temporal[k]`` is its
    distance from the dt -> 0 limit, extrapolated from the two smallest steps.
    The temporal part is what has to shrink linearly in dt; the rest is the
    O(h^q) spatial floor.
    """
    dt: float
    total: list[float]
    temporal: list[float]

    @property
    def ratio(self) -> float:
        return self.temporal[0] / self.temporal[1]


def flow_consistency(N: int = 32, reduce: int = 4, amplitude: float = 0.1) -> Consistency:
    from .flow import StepPolicy, initial_state, project_constant_scalar, step

    fam = doubly_warped(4, amplitude, active=2)
    m, _ = project_constant_scalar(fam.sample_to_grid(thin_grid(4, N)), None)
    st, ev = initial_state(m, float(curvature_bundle(m).S.mean()))
    policy = StepPolicy()
    dt0 = policy.time_step(ev.bundle)
    b = ev.bundle
    lin = curvature_variation(m, ev.velocity, b.Gamma, b.Rm)
    scale = np.linalg.norm(lin)
    defects = []
    for k in range(3):
        dt = dt0 / reduce**k
        _, ev_new = step(st, policy, ev, dt)
        defects.append((ev_new.bundle.Rm - b.Rm) / dt - lin)
    limit = (reduce * defects[2] - defects[1]) / (reduce - 1)
    return Consistency(dt0, [float(np.linalg.norm(d) / scale) for d in defects[:2]],
                       [float(np.linalg.norm(d - limit) / scale) for d in defects[:2]])


def shipped_configs() -> dict[str, str]:
    """Name -> text of the configs bundled with the package."""
    root = resources.files("cbflow") / "configs"
    return {p.name: p.read_text(encoding="utf-8") for p in sorted(root.iterdir(), key=str)
            if p.name.endswith(".ini")}


def configs_suite(seed: int = 0) -> list[CheckResult]:
    from .config import RunConfig
    from .diagnostics import Monitor
    from .flow import initial_state, run

    texts = shipped_configs()

    def parse_all():
        for text in texts.values():
            RunConfig.from_text(text)
        return bool(texts), f"{len(texts)} configs parse and validate: {', '.join(texts)}"

    def flat_run():
        cfg = RunConfig.from_text(texts["flat.ini"])
        m = cfg.make_family().sample_to_grid(cfg.make_grid())
        policy = cfg.step_policy()
        st, ev = initial_state(m, cfg.flow.s0, cfg.flow.variant, policy=policy)
        tr = run(st, policy, cfg.diagnostics.cadence, evaluation=ev,
                 monitor=Monitor(cfg.diagnostics.m_max))
        drift = max(max(r.scalar_drift, r.bach_trace_rel, r.bach_div_sup, r.cotton_weyl_sup)
                    for r in tr.records)
        ok = tr.error is None and len(tr.records) == cfg.flow.max_steps + 1 and drift < 1e-12
        return ok, f"{len(tr.records)} records, max drift/residual column {drift:.1e}"

    return [_check("configs parse", parse_all), _check("configs flat run", flat_run)]


SUITES: dict[str, Callable[..., list[CheckResult]]] = {
    "curvature": curvature_suite,
    "oracle": oracle_suite,
    "pressure": pressure_suite,
    "flow": flow_suite,
    "configs": configs_suite,
}


def resolve(selector: str) -> list[str]:
    """Suite names for a comma-separated selector; ``all`` expands."""
    names = [s.strip() for s in selector.split(",") if s.strip()]
    if not names:
        raise ValueError("empty suite selector")
    out = []
    for s in names:
        if s == "all":
            out.extend(SUITES)
        elif s in SUITES:
            out.append(s)
        else:
            raise ValueError(f"unknown suite {s!r}; choose from all, {', '.join(SUITES)}")
    return list(dict.fromkeys(out))


def run_suites(selector: str, *, seed: int = 0, corrupt_stencil: bool = False) -> list[CheckResult]:
    results = []
    for name in resolve(selector):
        if corrupt_stencil:
            with corrupted_stencil():
                results.extend(SUITES[name](seed))
        else:
            results.extend(SUITES[name](seed))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max((len(r.name) for r in results), default=10)
    lines = [f"{'check':<{width}}  result  seconds  detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  "
                     f"{r.seconds:7.1f}  {r.detail}")
    return "\n".join(lines)
