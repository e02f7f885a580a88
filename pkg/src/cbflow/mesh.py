"""Periodic structured grids, tensor fields and finite-difference stencils.

Fields are stored component-first: a rank-r tensor on an n-dimensional grid is
an array of shape ``(n,)*r + grid.shape``.  All grid axes are periodic, so every
stencil is total and translation equivariant.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

# Central first-derivative weights, keyed by order: offset -> weight (times 1/h).
_STENCILS: dict[int, dict[int, float]] = {
    2: {1: 0.5, -1: -0.5},
    4: {1: 8.0 / 12.0, -1: -8.0 / 12.0, 2: -1.0 / 12.0, -2: 1.0 / 12.0},
}

DEFAULT_ORDER = 4
SPD_EPS = 1e-10


@contextlib.contextmanager
def corrupted_stencil(scale: float = 1.02) -> Iterator[None]:
    """Debug hook: temporarily perturb the order-4 stencil (fault injection)."""
    saved = dict(_STENCILS[4])
    _STENCILS[4] = {1: saved[1] * scale, -1: saved[-1] * scale, 2: saved[2], -2: saved[-2]}
    try:
        yield
    finally:
        _STENCILS[4] = saved


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid on the flat torus prod_a [0, L_a)."""

    sizes: tuple[int, ...]
    periods: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        sizes = tuple(int(s) for s in self.sizes)
        periods = tuple(float(p) for p in self.periods) or (1.0,) * len(sizes)
        if len(sizes) < 4:
            raise ValueError(f"grid dimension must be >= 4, got {len(sizes)}")
        if len(periods) != len(sizes):
            raise ValueError("periods and sizes must have the same length")
        if any(s < 1 for s in sizes):
            raise ValueError(f"axis sizes must be >= 1, got {sizes}")
        if any(not (p > 0 and math.isfinite(p)) for p in periods):
            raise ValueError(f"periods must be positive, got {periods}")
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "periods", periods)

    @property
    def dim(self) -> int:
        return len(self.sizes)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.sizes

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(L / N for L, N in zip(self.periods, self.sizes))

    @property
    def cell_volume(self) -> float:
        return math.prod(self.spacing)

    @property
    def npoints(self) -> int:
        return math.prod(self.sizes)

    @property
    def active_axes(self) -> tuple[int, ...]:
        """Axes with more than one node (derivatives along the rest vanish)."""
        return tuple(a for a, N in enumerate(self.sizes) if N > 1)

    @property
    def h_min(self) -> float:
        active = self.active_axes
        if not active:
            return min(self.periods)
        return min(self.spacing[a] for a in active)

    def coords(self) -> list[np.ndarray]:
        """Node coordinates x_a = i * h_a, broadcast to the full grid shape."""
        axes = [np.arange(N) * h for N, h in zip(self.sizes, self.spacing)]
        return np.meshgrid(*axes, indexing="ij")

    def refined(self, factor: int = 2) -> "Grid":
        """Same torus with every active axis refined by ``factor``."""
        return Grid(tuple(N * factor if N > 1 else 1 for N in self.sizes), self.periods)


SYMMETRY_TAGS = ("none", "symmetric", "riemann")


@dataclass(frozen=True)
class TensorField:
    """Rank-(0,r) tensor field on a grid with optional symmetry metadata."""

    grid: Grid
    data: np.ndarray
    symmetry: str = "none"

    def __post_init__(self) -> None:
        if self.symmetry not in SYMMETRY_TAGS:
            raise ValueError(f"unknown symmetry tag {self.symmetry!r}")
        n = self.grid.dim
        comp = self.data.shape[: self.data.ndim - n]
        if self.data.shape[self.data.ndim - n :] != self.grid.shape or any(c != n for c in comp):
            raise ValueError(
                f"data shape {self.data.shape} inconsistent with grid {self.grid.shape}"
            )
        if self.symmetry == "symmetric" and self.rank != 2:
            raise ValueError("symmetric tag requires rank 2")
        if self.symmetry == "riemann" and self.rank != 4:
            raise ValueError("riemann tag requires rank 4")

    @property
    def rank(self) -> int:
        return self.data.ndim - self.grid.dim

    def symmetry_defect(self) -> float:
        """Largest violation of the declared component symmetries."""
        T = self.data
        if self.symmetry == "symmetric":
            return float(np.max(np.abs(T - np.swapaxes(T, 0, 1)), initial=0.0))
        if self.symmetry == "riemann":
            d1 = np.abs(T + np.swapaxes(T, 0, 1))
            d2 = np.abs(T + np.swapaxes(T, 2, 3))
            d3 = np.abs(T - T.transpose((2, 3, 0, 1) + tuple(range(4, T.ndim))))
            return float(max(d1.max(initial=0.0), d2.max(initial=0.0), d3.max(initial=0.0)))
        return 0.0


def _array(f) -> np.ndarray:
    return f.data if isinstance(f, TensorField) else np.asarray(f)


def diff(f: np.ndarray, axis: int, grid: Grid, order: int = DEFAULT_ORDER) -> np.ndarray:
    """Periodic central difference of a component-first array along grid ``axis``."""
    if order not in _STENCILS:
        raise ValueError(f"stencil_order must be one of {sorted(_STENCILS)}, got {order}")
    if not 0 <= axis < grid.dim:
        raise ValueError(f"axis {axis} out of range for dimension {grid.dim}")
    if grid.sizes[axis] == 1:
        return np.zeros_like(f)
    return _diff_axis(f, f.ndim - grid.dim + axis, grid.spacing[axis], order)


def _diff_axis(f: np.ndarray, ax: int, h: float, order: int) -> np.ndarray:
    weights = _STENCILS[order]
    m = max(weights)
    size = f.shape[ax]
    pad = np.concatenate([f.take(range(size - m, size), axis=ax), f,
                          f.take(range(m), axis=ax)], axis=ax)

    def shifted(off):
        sl = [slice(None)] * f.ndim
        sl[ax] = slice(m + off, m + off + size)
        return pad[tuple(sl)]

    out = None
    # Pair symmetric offsets so the arithmetic is identical at every node.
    for off in sorted(o for o in weights if o > 0):
        term = weights[off] * (shifted(off) - shifted(-off))
        out = term if out is None else out + term
    return out / h


def gradient(f: np.ndarray, grid: Grid, order: int = DEFAULT_ORDER) -> np.ndarray:
    """Stack of partial derivatives, derivative index first: out[a] = d_a f."""
    out = np.empty((grid.dim,) + f.shape)
    for a in range(grid.dim):
        out[a] = diff(f, a, grid, order)
    return out


def partial_derivative(f: TensorField, axis: int, stencil_order: int = DEFAULT_ORDER) -> TensorField:
    return TensorField(f.grid, diff(f.data, axis, f.grid, stencil_order))


class MetricField:
    """Symmetric positive-definite (0,2) field with cached inverse and density.

    Raises ``ValueError`` when the SPD guard fails anywhere on the grid.
    """

    def __init__(self, grid: Grid, g: np.ndarray, *, check: bool = True):
        n = grid.dim
        g = np.asarray(g, dtype=float)
        if g.shape != (n, n) + grid.shape:
            raise ValueError(f"metric shape {g.shape} != {(n, n) + grid.shape}")
        g = 0.5 * (g + np.swapaxes(g, 0, 1))
        self.grid = grid
        self.g = g
        pts = np.moveaxis(g.reshape(n, n, -1), -1, 0)  # (P, n, n)
        eig = np.linalg.eigvalsh(pts)
        self.min_eigenvalue = float(eig[:, 0].min())
        self.max_eigenvalue = float(eig[:, -1].max())
        if check and not (eig[:, 0] > SPD_EPS * np.abs(eig[:, -1])).all():
            raise ValueError(
                f"metric not positive definite (min eigenvalue {self.min_eigenvalue:.3e})"
            )
        inv = np.linalg.inv(pts)
        inv = 0.5 * (inv + np.swapaxes(inv, 1, 2))
        self.ginv = np.moveaxis(inv, 0, -1).reshape((n, n) + grid.shape)
        self.sqrt_det = np.sqrt(np.prod(eig, axis=1)).reshape(grid.shape)

    @property
    def dim(self) -> int:
        return self.grid.dim

    @classmethod
    def flat(cls, grid: Grid) -> "MetricField":
        n = grid.dim
        g = np.zeros((n, n) + grid.shape)
        for i in range(n):
            g[i, i] = 1.0
        return cls(grid, g)

    def as_field(self) -> TensorField:
        return TensorField(self.grid, self.g, "symmetric")

    def identity_defect(self) -> float:
        """max_x |g g^-1 - I| (relative to 1)."""
        n = self.dim
        prod = np.einsum("ik...,kj...->ij...", self.g, self.ginv)
        for i in range(n):
            prod[i, i] -= 1.0
        return float(np.abs(prod).max())


def integrate(f, g: MetricField) -> float:
    """Midpoint rule sum_x f sqrt(det g) prod h_a on the periodic grid."""
    f = _array(f)
    return float(np.sum(f * g.sqrt_det) * g.grid.cell_volume)


def _index_letters(k: int, skip: str = "") -> str:
    letters = [c for c in "abcdefghijklmnopqrstuvwxyz" if c not in skip]
    return "".join(letters[:k])


def raise_all(T: np.ndarray, ginv: np.ndarray) -> np.ndarray:
    """Raise every component index of a component-first tensor with g^{-1}."""
    n = ginv.shape[0]
    r = T.ndim - (ginv.ndim - 2)
    out = T
    for s in range(r):
        idx = _index_letters(r, "yz")
        src = idx[:s] + "z" + idx[s + 1 :]
        out = np.einsum(f"{idx[s]}z...,{src}...->{idx}...", ginv, out)
    return out


def pointwise_norm_sq(T, g: MetricField) -> np.ndarray:
    """|T|^2 with every index contracted through g^{-1}."""
    T = _array(T)
    r = T.ndim - g.grid.dim
    if r == 0:
        return T * T
    up = raise_all(T, g.ginv)
    return np.sum((T * up).reshape((-1,) + g.grid.shape), axis=0)


def norms(T, g: MetricField) -> tuple[float, float]:
    """(sup norm, L2 norm) of a tensor field with respect to g."""
    sq = pointwise_norm_sq(T, g)
    sup = float(np.sqrt(max(sq.max(), 0.0)))
    l2 = math.sqrt(max(integrate(sq, g), 0.0))
    return sup, l2


def symmetrize(T: np.ndarray) -> np.ndarray:
    return 0.5 * (T + np.swapaxes(T, 0, 1))


def sample(grid: Grid, func) -> np.ndarray:
    """Evaluate ``func(*coords)`` on the grid nodes."""
    return np.asarray(func(*grid.coords()), dtype=float)

