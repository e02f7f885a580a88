"""Closed-form periodic metric families for oracle checks and initial data."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..mesh import Grid, MetricField
from .jets import JetAlgebra

TAGS = ("flat", "constant_diagonal", "conformally_flat", "doubly_warped",
        "off_diagonal_perturbation")


@dataclass(frozen=True)
class FourierMode:
    amplitude: float
    wavenumbers: tuple[int, ...]
    phase: float = 0.0


@dataclass(frozen=True)
class FourierScalar:
    """u(x) = sum_m a_m cos(2 pi k_m . x / L + phi_m)."""

    modes: tuple[FourierMode, ...]
    periods: tuple[float, ...]

    def _omega(self, mode: FourierMode) -> np.ndarray:
        return np.array([2 * math.pi * k / L for k, L in zip(mode.wavenumbers, self.periods)])

    def _phase(self, mode: FourierMode, coords) -> np.ndarray:
        w = self._omega(mode)
        return sum(w[a] * coords[a] for a in range(len(coords))) + mode.phase

    def values(self, coords) -> np.ndarray:
        out = np.zeros(np.shape(coords[0]))
        for m in self.modes:
            out = out + m.amplitude * np.cos(self._phase(m, coords))
        return out

    def gradient(self, coords) -> np.ndarray:
        out = np.zeros((len(coords),) + np.shape(coords[0]))
        for m in self.modes:
            s = -m.amplitude * np.sin(self._phase(m, coords))
            w = self._omega(m)
            for a in range(len(coords)):
                out[a] = out[a] + w[a] * s
        return out

    def hessian(self, coords) -> np.ndarray:
        n = len(coords)
        out = np.zeros((n, n) + np.shape(coords[0]))
        for m in self.modes:
            c = -m.amplitude * np.cos(self._phase(m, coords))
            w = self._omega(m)
            out = out + np.multiply.outer(np.outer(w, w), np.ones(np.shape(c))) * c
        return out

    def laplacian(self, coords) -> np.ndarray:
        H = self.hessian(coords)
        return sum(H[a, a] for a in range(len(coords)))

    def jet(self, alg: JetAlgebra, points: np.ndarray) -> np.ndarray:
        """Jets of u at ``points`` (shape (P, n))."""
        P = points.shape[0]
        out = alg.constant(np.zeros(P))
        for m in self.modes:
            w = self._omega(m)
            theta = alg.linear(points @ w + m.phase, np.broadcast_to(w, (P, len(w))))
            c, _ = alg.cos_sin(theta)
            out = out + m.amplitude * c
        return out


def fourier(periods, *modes) -> FourierScalar:
    """Shorthand: ``fourier(periods, (amp, (k1, .., kn), phase), ...)``."""
    return FourierScalar(tuple(FourierMode(float(a), tuple(int(x) for x in k), float(ph))
                               for a, k, ph in modes), tuple(float(p) for p in periods))


@dataclass(frozen=True)
class AnalyticMetricFamily:
    """Closed-form metric on the torus prod [0, L_a).

    * ``flat``: delta.
    * ``constant_diagonal``: diag(c_1..c_n), ``diagonal`` parameter.
    * ``conformally_flat``: e^{2u} delta.
    * ``doubly_warped``: e^{2u} on axes < split plus e^{2v} on axes >= split.
    * ``off_diagonal_perturbation``: delta + eps cos(theta)(e_a e_b + e_b e_a), |eps| < 1.

    Any family may carry an extra conformal factor ``e^{2w}`` (``conformal``).
    """

    tag: str
    dim: int
    periods: tuple[float, ...] = ()
    u: FourierScalar | None = None
    v: FourierScalar | None = None
    split: int = 2
    diagonal: tuple[float, ...] = ()
    amplitude: float = 0.0
    mode: tuple[int, ...] = ()
    axes: tuple[int, int] = (0, 1)
    phase: float = 0.0
    conformal: FourierScalar | None = None

    def __post_init__(self) -> None:
        if self.tag not in TAGS:
            raise ValueError(f"unknown family {self.tag!r}")
        if self.dim < 4:
            raise ValueError("dimension must be >= 4")
        periods = tuple(float(p) for p in self.periods) or (1.0,) * self.dim
        object.__setattr__(self, "periods", periods)
        if self.tag == "constant_diagonal":
            if len(self.diagonal) != self.dim or min(self.diagonal) <= 0:
                raise ValueError("constant_diagonal needs dim positive entries")
        if self.tag == "off_diagonal_perturbation" and not abs(self.amplitude) < 1.0:
            raise ValueError("off-diagonal amplitude must satisfy |eps| < 1 for SPD")
        if self.tag == "doubly_warped" and not 0 < self.split < self.dim:
            raise ValueError("split must lie strictly between 0 and dim")

    # -- grid values --------------------------------------------------------
    def metric_values(self, coords) -> np.ndarray:
        n = self.dim
        shape = np.shape(coords[0])
        g = np.zeros((n, n) + shape)
        if self.tag == "flat":
            for i in range(n):
                g[i, i] = 1.0
        elif self.tag == "constant_diagonal":
            for i in range(n):
                g[i, i] = self.diagonal[i]
        elif self.tag == "conformally_flat":
            e = np.exp(2 * self.u.values(coords))
            for i in range(n):
                g[i, i] = e
        elif self.tag == "doubly_warped":
            eu = np.exp(2 * self.u.values(coords))
            ev = np.exp(2 * self.v.values(coords))
            for i in range(n):
                g[i, i] = eu if i < self.split else ev
        else:
            for i in range(n):
                g[i, i] = 1.0
            a, b = self.axes
            g[a, b] = g[b, a] = self.amplitude * np.cos(self._theta(coords))
        if self.conformal is not None:
            g = g * np.exp(2 * self.conformal.values(coords))
        return g

    def _omega(self) -> np.ndarray:
        k = self.mode or (0, 0, 1) + (0,) * (self.dim - 3)
        return np.array([2 * math.pi * kk / L for kk, L in zip(k, self.periods)])

    def _theta(self, coords):
        w = self._omega()
        return sum(w[a] * coords[a] for a in range(self.dim)) + self.phase

    def sample_to_grid(self, grid: Grid) -> MetricField:
        if grid.dim != self.dim or not np.allclose(grid.periods, self.periods):
            raise ValueError("family and grid disagree on dimension or periods")
        return MetricField(grid, self.metric_values(grid.coords()))

    # -- jets ---------------------------------------------------------------
    def metric_jet(self, alg: JetAlgebra, points: np.ndarray) -> np.ndarray:
        n = self.dim
        P = points.shape[0]
        one = alg.constant(np.ones(P))
        zero = alg.constant(np.zeros(P))
        g = np.stack([np.stack([zero] * n)] * n).copy()
        if self.tag == "flat":
            for i in range(n):
                g[i, i] = one
        elif self.tag == "constant_diagonal":
            for i in range(n):
                g[i, i] = self.diagonal[i] * one
        elif self.tag == "conformally_flat":
            e = alg.exp(2 * self.u.jet(alg, points))
            for i in range(n):
                g[i, i] = e
        elif self.tag == "doubly_warped":
            eu = alg.exp(2 * self.u.jet(alg, points))
            ev = alg.exp(2 * self.v.jet(alg, points))
            for i in range(n):
                g[i, i] = eu if i < self.split else ev
        else:
            for i in range(n):
                g[i, i] = one
            w = self._omega()
            theta = alg.linear(points @ w + self.phase, np.broadcast_to(w, (P, n)))
            c, _ = alg.cos_sin(theta)
            a, b = self.axes
            g[a, b] = g[b, a] = self.amplitude * c
        if self.conformal is not None:
            e = alg.exp(2 * self.conformal.jet(alg, points))
            g = alg.mul(g, e[None, None])
        return g

    def with_conformal(self, w: FourierScalar) -> "AnalyticMetricFamily":
        if self.conformal is not None:
            raise ValueError("family already carries a conformal factor")
        return _replace(self, conformal=w)


def _replace(fam: AnalyticMetricFamily, **kw) -> AnalyticMetricFamily:
    from dataclasses import replace

    return replace(fam, **kw)


# -- canonical instances used by tests, demos and the verify command ------------

def flat(dim: int = 4, periods=()) -> AnalyticMetricFamily:
    return AnalyticMetricFamily("flat", dim, tuple(periods))


def conformally_flat(dim: int = 4, amplitude: float = 0.1, periods=(),
                     active: int | None = None) -> AnalyticMetricFamily:
    """e^{2u} delta with a couple of low modes over the first ``active`` axes."""
    periods = tuple(periods) or (1.0,) * dim
    active = dim if active is None else active
    k1 = tuple(1 if a == 0 else 0 for a in range(dim))
    k2 = tuple(1 if a == min(1, active - 1) else 0 for a in range(dim))
    u = fourier(periods, (amplitude, k1, 0.3), (0.5 * amplitude, k2, 1.1))
    return AnalyticMetricFamily("conformally_flat", dim, periods, u=u)


def doubly_warped(dim: int = 4, amplitude: float = 0.1, periods=(), active: int | None = None,
                  split: int = 2) -> AnalyticMetricFamily:
    """Non-conformally-flat warped metric; warps vary over the first ``active`` axes."""
    periods = tuple(periods) or (1.0,) * dim
    active = dim if active is None else active

    def k(*nonzero):
        return tuple(1 if (a in nonzero and a < active) else 0 for a in range(dim))

    u_modes = [(amplitude, k(0), 0.2), (0.6 * amplitude, k(1), 0.9)]
    v_modes = [(amplitude, k(0, 1), 1.7), (0.7 * amplitude, k(1), 0.4)]
    if active > 2:
        u_modes.append((0.5 * amplitude, k(2), 2.3))
        v_modes.append((0.5 * amplitude, k(active - 1), 0.6))
    u_modes = [m for m in u_modes if any(m[1])]
    v_modes = [m for m in v_modes if any(m[1])]
    return AnalyticMetricFamily("doubly_warped", dim, periods, u=fourier(periods, *u_modes),
                                v=fourier(periods, *v_modes), split=split)


def off_diagonal(dim: int = 4, amplitude: float = 0.1, periods=(),
                 mode: tuple[int, ...] | None = None) -> AnalyticMetricFamily:
    # a mode transverse to the coupled axes; along them the metric is flat
    mode = mode or (0, 0, 1) + (0,) * (dim - 3)
    return AnalyticMetricFamily("off_diagonal_perturbation", dim, tuple(periods) or (1.0,) * dim,
                                amplitude=amplitude, mode=tuple(mode), phase=0.4)
