"""Monitored quantities along a flow: constraint drift, identity residuals,
Weyl energy, Shi-type derivative ratios, f_m and the extension status."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .curvature import CurvatureBundle, bach_divergence_residual, cotton_weyl_residual
from .mesh import _diff_axis, integrate, pointwise_norm_sq

M_MAX = 2


def _grid_first(T: np.ndarray, G: int) -> np.ndarray:
    r = T.ndim - G
    return np.moveaxis(T, list(range(r)), list(range(G, G + r)))


def _component_first(T: np.ndarray, G: int) -> np.ndarray:
    r = T.ndim - G
    return np.moveaxis(T, list(range(G, G + r)), list(range(r)))


# The derivative monitors work on grid-first arrays (grid axes, then component
# axes) so that every connection contraction is a batched matmul over the grid;
# for rank-5 and rank-6 tensors that is far cheaper than einsum.

def _covd_gf(T: np.ndarray, Gam_gf: np.ndarray, grid, order: int) -> np.ndarray:
    G, n = grid.dim, grid.dim
    r = T.ndim - G
    out = np.zeros(grid.shape + (n,) + T.shape[G:])
    for a in grid.active_axes:
        out[(slice(None),) * G + (a,)] = _diff_axis(T, a, grid.spacing[a], order)
    Gr = Gam_gf.reshape(grid.shape + (n, n * n))  # [m, (a, i)] = Gamma^m_ai
    for s in range(r):
        X = np.moveaxis(T, G + s, -1).reshape(grid.shape + (n ** (r - 1), n))
        prod = np.matmul(X, Gr).reshape(grid.shape + (n,) * (r - 1) + (n, n))
        out -= np.moveaxis(prod, [G + r - 1, G + r], [G, G + 1 + s])
    return out


def _norm_sq_gf(T: np.ndarray, ginv_gf: np.ndarray, G: int) -> np.ndarray:
    n = ginv_gf.shape[-1]
    r = T.ndim - G
    X = T
    for s in range(r):
        Xs = np.moveaxis(X, G + s, -1)
        up = np.matmul(Xs.reshape(X.shape[:G] + (n ** (r - 1), n)), ginv_gf)
        X = np.moveaxis(up.reshape(Xs.shape), -1, G + s)
    return np.sum((T * X).reshape(T.shape[:G] + (-1,)), axis=-1)


def _rm_derivatives_gf(b: CurvatureBundle, m: int) -> list[np.ndarray]:
    G = b.grid.dim
    Gam = np.ascontiguousarray(_grid_first(b.Gamma, G))
    T = np.ascontiguousarray(_grid_first(b.Rm, G))
    out = []
    for _ in range(m):
        T = _covd_gf(T, Gam, b.grid, b.order)
        out.append(T)
    return out


def rm_derivatives(b: CurvatureBundle, m: int) -> list[np.ndarray]:
    """[nabla Rm, nabla^2 Rm, ...] up to order m (component-first, derivative indices first)."""
    G = b.grid.dim
    return [np.ascontiguousarray(_component_first(T, G)) for T in _rm_derivatives_gf(b, m)]


def rm_derivative_norms_sq(b: CurvatureBundle, m: int) -> list[np.ndarray]:
    """Pointwise |nabla^j Rm|^2 for j = 1..m."""
    G = b.grid.dim
    ginv = np.ascontiguousarray(_grid_first(b.metric.ginv, G))
    return [_norm_sq_gf(T, ginv, G) for T in _rm_derivatives_gf(b, m)]


def shi_l2_monitor(b: CurvatureBundle, m: int, t: float, norms_sq=None) -> float:
    """t^{m/2} int |nabla^m Rm|^2 dmu."""
    if m < 1 or t < 0:
        raise ValueError("need m >= 1 and t >= 0")
    if t == 0:
        return 0.0
    sq = (norms_sq or rm_derivative_norms_sq(b, m))[m - 1]
    return t ** (m / 2) * integrate(sq, b.metric)


def shi_pointwise_monitor(b: CurvatureBundle, m: int, t: float, K: float, norms_sq=None) -> float:
    """sup |nabla^m Rm| / (K + t^{-1/2})^{1 + m/2}."""
    if m < 1 or t < 0 or not K > 0:
        raise ValueError("need m >= 1, t >= 0 and K > 0")
    if t == 0:
        return 0.0
    sq = (norms_sq or rm_derivative_norms_sq(b, m))[m - 1]
    sup = math.sqrt(max(float(sq.max()), 0.0))
    return sup / (K + t ** -0.5) ** (1 + m / 2)


def f_m_field(b: CurvatureBundle, m: int, norms_sq=None) -> np.ndarray:
    """f_m = sum_{j=1}^m |nabla^j Rm|^{2/(2+j)} pointwise."""
    if m < 1:
        raise ValueError("m must be >= 1")
    norms_sq = norms_sq or rm_derivative_norms_sq(b, m)
    out = np.zeros(b.grid.shape)
    for j in range(1, m + 1):
        sq = np.maximum(norms_sq[j - 1], 0.0)
        out += sq ** (1.0 / (2 + j))  # |T|^{2/(2+j)} = (|T|^2)^{1/(2+j)}
    return out


def weyl_energy(b: CurvatureBundle) -> float:
    return integrate(pointwise_norm_sq(b.W, b.metric), b.metric)


@dataclass
class Thresholds:
    K: float = math.inf  # bound on sup(|Rm| + |p|)
    margin_floor: float = 1e-8


@dataclass
class ExtensionStatus:
    K_observed: float
    margin: float
    within_bounds: bool
    violated: str = ""


def extension_monitor(K_observed: float, curv_plus_p: float, margin: float,
                      thresholds: Thresholds) -> ExtensionStatus:
    K_obs = max(K_observed, curv_plus_p)
    bad = []
    if K_obs > thresholds.K:
        bad.append("curvature_pressure_bound")
    if margin < thresholds.margin_floor:
        bad.append("invertibility_margin")
    return ExtensionStatus(K_obs, margin, not bad, "+".join(bad))


@dataclass
class DiagnosticsRecord:
    step: int
    t: float
    dt: float
    scalar_drift: float
    bach_trace_rel: float
    bach_div_sup: float
    cotton_weyl_sup: float
    weyl_energy: float
    rm_sup: float
    p_sup: float
    rm_l2: float
    p_l2: float
    shi_l2: list[float]
    shi_ptwise: list[float]
    fm_sup: float
    min_eig: float
    solver_iterations: int
    solver_residual: float
    solver_margin: float
    K_observed: float
    extension_ok: int
    status: str = "ok"

    def columns(self) -> list[str]:
        return record_columns(len(self.shi_l2))

    def values(self) -> list:
        d = asdict(self)
        out = []
        for name in _BASE[:12]:
            out.append(d[name])
        out += self.shi_l2 + self.shi_ptwise
        for name in _BASE[12:]:
            out.append(d[name])
        return out


_BASE = ["step", "t", "dt", "scalar_drift", "bach_trace_rel", "bach_div_sup", "cotton_weyl_sup",
         "weyl_energy", "rm_sup", "p_sup", "rm_l2", "p_l2", "fm_sup", "min_eig",
         "solver_iterations", "solver_residual", "solver_margin", "K_observed",
         "extension_ok", "status"]


def record_columns(m_max: int) -> list[str]:
    return (_BASE[:12] + [f"shi_l2_{m}" for m in range(1, m_max + 1)]
            + [f"shi_ptwise_{m}" for m in range(1, m_max + 1)] + _BASE[12:])


def record_from_values(values: dict) -> DiagnosticsRecord:
    m_max = sum(1 for k in values if k.startswith("shi_l2_"))
    kw = {k: values[k] for k in _BASE}
    kw["shi_l2"] = [values[f"shi_l2_{m}"] for m in range(1, m_max + 1)]
    kw["shi_ptwise"] = [values[f"shi_ptwise_{m}"] for m in range(1, m_max + 1)]
    return DiagnosticsRecord(**kw)


@dataclass
class Monitor:
    """Stateful record builder for one trajectory.

    K defaults to sup(|Rm| + |p|) at the first record; K_observed is the
    running maximum of the same quantity.
    """

    m_max: int = M_MAX
    thresholds: Thresholds = field(default_factory=Thresholds)
    K: float | None = None
    K_observed: float = 0.0
    started: bool = False

    def record(self, state, ev, dt: float) -> DiagnosticsRecord:
        b = ev.bundle
        metric = b.metric
        p = ev.p if ev.p is not None else np.zeros(b.grid.shape)
        rm_sq = pointwise_norm_sq(b.Rm, metric)
        rm_sup = math.sqrt(max(float(rm_sq.max()), 0.0))
        rm_l2 = math.sqrt(max(integrate(rm_sq, metric), 0.0))
        p_sup = float(np.abs(p).max())
        p_l2 = math.sqrt(max(integrate(p * p, metric), 0.0))
        curv_p = float((np.sqrt(np.maximum(rm_sq, 0.0)) + np.abs(p)).max())
        if self.K is None:
            self.K = max(curv_p, np.finfo(float).tiny)
        B_sup = math.sqrt(max(float(pointwise_norm_sq(b.B, metric).max()), 0.0))
        # B and Rm*Rm carry the same units; the second keeps the ratio finite when B ~ 0
        scale = max(B_sup, rm_sup * rm_sup)
        trace_rel = float(np.abs(b.bach_raw_trace).max()) / scale if scale > 0 else 0.0
        t = state.t
        sq = rm_derivative_norms_sq(b, self.m_max) if self.m_max else []
        shi_l2 = [shi_l2_monitor(b, m, t, sq) for m in range(1, self.m_max + 1)]
        shi_pt = [shi_pointwise_monitor(b, m, t, self.K, sq) for m in range(1, self.m_max + 1)]
        fm = float(f_m_field(b, self.m_max, sq).max()) if self.m_max else 0.0
        cw = math.sqrt(max(float(pointwise_norm_sq(cotton_weyl_residual(b), metric).max()), 0.0))
        ext = extension_monitor(self.K_observed, curv_p, state.solve.margin, self.thresholds)
        self.K_observed = ext.K_observed
        self.started = True
        return DiagnosticsRecord(
            step=state.step, t=t, dt=dt,
            scalar_drift=float(np.abs(b.S - state.s0).max()),
            bach_trace_rel=trace_rel,
            bach_div_sup=float(bach_divergence_residual(b).max()),
            cotton_weyl_sup=cw,
            weyl_energy=weyl_energy(b),
            rm_sup=rm_sup, p_sup=p_sup, rm_l2=rm_l2, p_l2=p_l2,
            shi_l2=shi_l2, shi_ptwise=shi_pt, fm_sup=fm,
            min_eig=metric.min_eigenvalue,
            solver_iterations=state.solve.iterations,
            solver_residual=state.solve.residual,
            solver_margin=state.solve.margin,
            K_observed=ext.K_observed,
            extension_ok=int(ext.within_bounds),
            status="ok" if ext.within_bounds else f"extension_violated:{ext.violated}",
        )

    def failure_record(self, last: DiagnosticsRecord | None, exc: Exception) -> DiagnosticsRecord | None:
        """Copy of the last record flagged with the failure that ended the run."""
        if last is None:
            return None
        d = asdict(last)
        d["extension_ok"] = 0
        d["status"] = f"extension_violated:{type(exc).__name__}"
        return DiagnosticsRecord(**d)

    def state_dict(self) -> dict:
        return {"m_max": self.m_max, "K": self.K, "K_observed": self.K_observed,
                "started": self.started, "K_bound": self.thresholds.K,
                "margin_floor": self.thresholds.margin_floor}

    @classmethod
    def from_state_dict(cls, d: dict) -> "Monitor":
        return cls(m_max=d["m_max"], thresholds=Thresholds(d["K_bound"], d["margin_floor"]),
                   K=d["K"], K_observed=d["K_observed"], started=d["started"])
