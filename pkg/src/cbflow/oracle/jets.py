"""Truncated multivariate Taylor arithmetic (forward-mode jets).

A jet of degree d in m variables at a point x0 stores the Taylor coefficients
c_alpha of f(x0 + delta) = sum_{|alpha| <= d} c_alpha delta^alpha.  Arrays of
jets keep the coefficient axis last; everything in front (tensor indices, a
batch of points) is carried along by broadcasting.

Differentiation lowers the valid degree by one, so the algebra keeps one
coefficient space per degree and every result lives in the space of its
lowest-degree operand.
"""
from __future__ import annotations

import itertools
import math
from functools import cached_property

import numpy as np
import scipy.sparse as sp


class JetSpace:
    """Monomial bookkeeping for jets of a fixed degree."""

    def __init__(self, nvars: int, degree: int):
        self.nvars = nvars
        self.degree = degree
        monos = [
            alpha
            for d in range(degree + 1)
            for alpha in _compositions(d, nvars)
        ]
        self.monomials = monos
        self.index = {alpha: i for i, alpha in enumerate(monos)}
        self.size = len(monos)
        self.degrees = np.array([sum(a) for a in monos])

    @cached_property
    def _product_tables(self):
        ia, ib, ic = [], [], []
        for a, alpha in enumerate(self.monomials):
            da = sum(alpha)
            for b, beta in enumerate(self.monomials):
                if da + sum(beta) > self.degree:
                    continue
                ia.append(a)
                ib.append(b)
                ic.append(self.index[tuple(x + y for x, y in zip(alpha, beta))])
        ia, ib, ic = (np.array(v, dtype=np.intp) for v in (ia, ib, ic))
        scatter = sp.csr_matrix(
            (np.ones(len(ic)), (np.arange(len(ic)), ic)), shape=(len(ic), self.size)
        )
        return ia, ib, scatter

    def derivative_map(self, var: int, target: "JetSpace"):
        """(dest indices, source indices, factors) for d/dx_var into ``target``."""
        dest, src, fac = [], [], []
        for i, alpha in enumerate(target.monomials):
            up = list(alpha)
            up[var] += 1
            up = tuple(up)
            if up in self.index:
                dest.append(i)
                src.append(self.index[up])
                fac.append(up[var])
        return np.array(dest, dtype=np.intp), np.array(src, dtype=np.intp), np.array(fac, float)


def _compositions(total: int, parts: int):
    """Exponent tuples of the given total degree, in a fixed lexicographic order."""
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


class JetAlgebra:
    """Jets in ``nvars`` variables up to ``max_degree``, one space per degree."""

    def __init__(self, nvars: int, max_degree: int):
        self.nvars = nvars
        self.max_degree = max_degree
        self.spaces = [JetSpace(nvars, d) for d in range(max_degree + 1)]
        self._by_size = {s.size: s for s in self.spaces}
        self._dmaps: dict[tuple[int, int], tuple] = {}

    # -- bookkeeping ------------------------------------------------------
    def space_of(self, x: np.ndarray) -> JetSpace:
        try:
            return self._by_size[x.shape[-1]]
        except KeyError:
            raise ValueError(f"array with trailing size {x.shape[-1]} is not a jet") from None

    def degree(self, x: np.ndarray) -> int:
        return self.space_of(x).degree

    def restrict(self, x: np.ndarray, degree: int) -> np.ndarray:
        d = self.degree(x)
        if degree > d:
            raise ValueError(f"cannot raise jet degree {d} to {degree}")
        return x[..., : self.spaces[degree].size]

    def _common(self, *xs: np.ndarray) -> list[np.ndarray]:
        d = min(self.degree(x) for x in xs)
        return [self.restrict(x, d) for x in xs]

    # -- construction -----------------------------------------------------
    def constant(self, values, degree: int | None = None) -> np.ndarray:
        d = self.max_degree if degree is None else degree
        values = np.asarray(values, dtype=float)
        out = np.zeros(values.shape + (self.spaces[d].size,))
        out[..., 0] = values
        return out

    def linear(self, values, slopes, degree: int | None = None) -> np.ndarray:
        """Jet of values + sum_v slopes[..., v] delta_v."""
        out = self.constant(values, degree)
        slopes = np.asarray(slopes, dtype=float)
        for v in range(self.nvars):
            e = tuple(1 if w == v else 0 for w in range(self.nvars))
            out[..., self.space_of(out).index[e]] = slopes[..., v]
        return out

    # -- arithmetic ---------------------------------------------------------
    def mul(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x, y = self._common(x, y)
        ia, ib, scatter = self.space_of(x)._product_tables
        prod = x[..., ia] * y[..., ib]
        shape = prod.shape[:-1]
        out = scatter.T @ prod.reshape(-1, prod.shape[-1]).T
        return np.asarray(out).T.reshape(shape + (x.shape[-1],))

    def contract(self, subscripts: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """einsum over leading tensor indices of two jet arrays, e.g. ``"ik,kj->ij"``.

        Both operands carry a trailing batch axis before the coefficient axis.
        """
        x, y = self._common(x, y)
        ia, ib, scatter = self.space_of(x)._product_tables
        lhs, out_idx = subscripts.split("->")
        sx, sy = lhs.split(",")
        prod = np.einsum(f"{sx}ZQ,{sy}ZQ->{out_idx}ZQ", x[..., ia], y[..., ib], optimize=True)
        shape = prod.shape[:-1]
        res = scatter.T @ prod.reshape(-1, prod.shape[-1]).T
        return np.asarray(res).T.reshape(shape + (x.shape[-1],))

    def deriv(self, x: np.ndarray, var: int) -> np.ndarray:
        src_space = self.space_of(x)
        if src_space.degree == 0:
            raise ValueError("cannot differentiate a degree-0 jet")
        tgt = self.spaces[src_space.degree - 1]
        key = (src_space.degree, var)
        if key not in self._dmaps:
            self._dmaps[key] = src_space.derivative_map(var, tgt)
        dest, src, fac = self._dmaps[key]
        out = np.zeros(x.shape[:-1] + (tgt.size,))
        out[..., dest] = x[..., src] * fac
        return out

    def grad(self, x: np.ndarray) -> np.ndarray:
        """Stack of partial derivatives, derivative index first."""
        return np.stack([self.deriv(x, v) for v in range(self.nvars)])

    def _nilpotent_powers(self, eta: np.ndarray, kmax: int) -> list[np.ndarray]:
        powers = [self.constant(np.ones(eta.shape[:-1]), self.degree(eta)), eta]
        for _ in range(2, kmax + 1):
            powers.append(self.mul(powers[-1], eta))
        return powers

    def _split(self, x: np.ndarray):
        c = x[..., 0].copy()
        eta = x.copy()
        eta[..., 0] = 0.0
        return c, eta

    def exp(self, x: np.ndarray) -> np.ndarray:
        c, eta = self._split(x)
        d = self.degree(x)
        pw = self._nilpotent_powers(eta, d)
        s = sum(p / math.factorial(k) for k, p in enumerate(pw))
        return np.exp(c)[..., None] * s

    def cos_sin(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        c, eta = self._split(x)
        d = self.degree(x)
        pw = self._nilpotent_powers(eta, d)
        ce = sum((-1) ** (k // 2) * pw[k] / math.factorial(k) for k in range(0, d + 1, 2))
        se = sum((-1) ** (k // 2) * pw[k] / math.factorial(k) for k in range(1, d + 1, 2))
        cc, sc = np.cos(c)[..., None], np.sin(c)[..., None]
        return cc * ce - sc * se, sc * ce + cc * se

    def matrix_inverse(self, G: np.ndarray) -> np.ndarray:
        """Inverse of an (n, n, P, M) matrix jet by the Neumann series about G(x0)."""
        d = self.degree(G)
        G0 = np.moveaxis(G[..., 0], -1, 0)  # (P, n, n)
        inv0 = np.moveaxis(np.linalg.inv(G0), 0, -1)  # (n, n, P)
        inv0_jet = self.constant(inv0, d)
        N = -self.contract("ik,kj->ij", inv0_jet, G - self.constant(G[..., 0], d))
        term = inv0_jet
        total = inv0_jet.copy()
        for _ in range(d):
            term = self.contract("ik,kj->ij", N, term)
            total += term
        return total

    def value(self, x: np.ndarray) -> np.ndarray:
        return x[..., 0]
