"""Curvature pipeline on periodic grids: Christoffel symbols through the Bach tensor.

Index conventions (all arrays component-first, grid axes trailing):

* ``Gamma[k, i, j]`` is Gamma^k_{ij}.
* ``Rm[i, j, k, l] = <R(d_i, d_j) d_k, d_l>`` with
  ``R(X, Y) = [nabla_X, nabla_Y] - nabla_[X, Y]``, so R_{ijji} is the sectional
  curvature of the (i, j) plane and Ricci is the trace ``R_ij = g^{kl} R_{iklj}``.
* ``W = Rm + A (.) g`` where ``(A (.) g)_{ijkl} = A_ik g_jl + A_jl g_ik - A_il g_jk - A_jk g_il``
  (this sign makes W totally trace-free in the convention above).
* Derivative indices come first: ``cov_derivative(T)[a, ...] = nabla_a T_{...}``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import DEFAULT_ORDER, Grid, MetricField, diff, gradient, raise_all, symmetrize

_LETTERS = "abcdefghijklmnopqrstuvwx"


def _letters(k: int, exclude: str = "") -> list[str]:
    return [c for c in _LETTERS if c not in exclude][:k]


def christoffel(metric: MetricField, order: int = DEFAULT_ORDER) -> np.ndarray:
    """Gamma^k_ij = 1/2 g^{kl} (d_i g_jl + d_j g_il - d_l g_ij)."""
    return christoffel_both(metric, order)[1]


def christoffel_both(metric: MetricField, order: int = DEFAULT_ORDER):
    """(Gamma_{l,ij}, Gamma^k_ij): first and second kind."""
    dg = gradient(metric.g, metric.grid, order)  # dg[l, i, j] = d_l g_ij
    first = _christoffel_first_kind(dg)
    return first, np.einsum("kl...,lij...->kij...", metric.ginv, first)


def _christoffel_first_kind(dg: np.ndarray) -> np.ndarray:
    # out[l, i, j] = 1/2 (d_i g_jl + d_j g_il - d_l g_ij)
    return 0.5 * (np.einsum("ijl...->lij...", dg) + np.einsum("jil...->lij...", dg) - dg)


def cov_derivative(T: np.ndarray, Gamma: np.ndarray, grid: Grid,
                   order: int = DEFAULT_ORDER) -> np.ndarray:
    """Levi-Civita derivative of a covariant tensor; new index first."""
    r = T.ndim - grid.dim
    out = gradient(T, grid, order)
    if r == 0:
        return out
    idx = _letters(r, "amz")
    full = "".join(idx)
    for s in range(r):
        src = full[:s] + "m" + full[s + 1:]
        out -= np.einsum(f"ma{idx[s]}...,{src}...->a{full}...", Gamma, T)
    return out


def divergence(T: np.ndarray, slot: int, metric: MetricField, Gamma: np.ndarray,
               order: int = DEFAULT_ORDER) -> np.ndarray:
    """g^{ab} nabla_a T_{..b..} with b in position ``slot``; that index is removed.

    Computed without materialising the full rank-(r+1) covariant derivative.
    """
    grid = metric.grid
    n = grid.dim
    r = T.ndim - grid.dim
    idx = _letters(r, "bmqz")
    full = "".join(idx)
    with_b = full[:slot] + "b" + full[slot + 1:]
    result = full[:slot] + full[slot + 1:]
    out = None
    for a in range(n):
        if grid.sizes[a] == 1:
            continue
        term = np.einsum(f"b...,{with_b}...->{result}...", metric.ginv[a], diff(T, a, grid, order))
        out = term if out is None else out + term
    if out is None:
        out = np.zeros((n,) * (r - 1) + grid.shape)
    gam_c, G = _raised_connection(metric, Gamma, r > 1)
    # connection term on the contracted slot: g^{ab} Gamma^m_ab T_{..m..}
    with_m = full[:slot] + "m" + full[slot + 1:]
    out -= np.einsum(f"m...,{with_m}...->{result}...", gam_c, T)
    if r > 1:
        for s in range(r):
            if s == slot:
                continue
            src = list(with_b)
            src[s] = "m"
            out -= np.einsum(f"bm{idx[s]}...,{''.join(src)}...->{result}...", G, T)
    return out


def _raised_connection(metric: MetricField, Gamma: np.ndarray, need_full: bool):
    # (g^{ab} Gamma^m_ab, G[b, m, i] = g^{ab} Gamma^m_ai), memoised per (metric, Gamma)
    cache = metric.__dict__.setdefault("_connection_cache", {})
    hit = cache.get("entry")
    if hit is None or hit[0] is not Gamma:
        hit = [Gamma, np.einsum("ab...,mab...->m...", metric.ginv, Gamma), None]
        cache["entry"] = hit
    if need_full and hit[2] is None:
        hit[2] = np.einsum("ab...,mai...->bmi...", metric.ginv, Gamma)
    return hit[1], hit[2]


def rough_laplacian(T: np.ndarray, metric: MetricField, Gamma: np.ndarray,
                    order: int = DEFAULT_ORDER) -> np.ndarray:
    """g^{ab} nabla_a nabla_b T, composed as the divergence of nabla T."""
    return divergence(cov_derivative(T, Gamma, metric.grid, order), 0, metric, Gamma, order)


def riemann(metric: MetricField, Gamma: np.ndarray, order: int = DEFAULT_ORDER,
            first: np.ndarray | None = None) -> np.ndarray:
    """Rm_{ijkl} = d_i G_{l,jk} - d_j G_{l,ik} - G_{m,il} G^m_jk + G_{m,jl} G^m_ik.

    This is g_lm R^m_{ijk} with the index lowered inside the derivative; ``first``
    is the Christoffel symbol of the first kind, recomputed when omitted.
    """
    if first is None:
        first = christoffel_both(metric, order)[0]
    dG = gradient(first, metric.grid, order)  # dG[i, l, j, k] = d_i G_{l,jk}
    half = np.einsum("iljk...->ijkl...", dG) - np.einsum("mil...,mjk...->ijkl...", first, Gamma)
    return _riemann_project(half - np.swapaxes(half, 0, 1))


def _riemann_project(Rm: np.ndarray) -> np.ndarray:
    """Impose the algebraic antisymmetries/pair symmetry exactly (roundoff level)."""
    Rm = 0.5 * (Rm - np.swapaxes(Rm, 0, 1))
    Rm = 0.5 * (Rm - np.swapaxes(Rm, 2, 3))
    rest = tuple(range(4, Rm.ndim))
    Rm = 0.5 * (Rm + Rm.transpose((2, 3, 0, 1) + rest))
    # remove the totally antisymmetric part so the first Bianchi identity is exact
    bianchi = (Rm + Rm.transpose((1, 2, 0, 3) + rest) + Rm.transpose((2, 0, 1, 3) + rest)) / 3.0
    return Rm - bianchi


def ricci_scalar_schouten(metric: MetricField, Rm: np.ndarray):
    """(Rc, S, A) with R_ij = g^{kl} R_{iklj} and A = (Rc - S g / (2(n-1))) / (n-2)."""
    n = metric.dim
    Rc = symmetrize(np.einsum("kl...,iklj...->ij...", metric.ginv, Rm))
    S = np.einsum("ij...,ij...->...", metric.ginv, Rc)
    A = (Rc - S / (2.0 * (n - 1)) * metric.g) / (n - 2)
    return Rc, S, A


def kulkarni_nomizu_g(A: np.ndarray, g: np.ndarray) -> np.ndarray:
    """(A (.) g)_{ijkl} = A_ik g_jl + A_jl g_ik - A_il g_jk - A_jk g_il."""
    P = np.einsum("ik...,jl...->ijkl...", A, g)
    rest = tuple(range(4, P.ndim))
    # the other three terms are index permutations of P
    return (P + P.transpose((1, 0, 3, 2) + rest)
            - P.transpose((0, 1, 3, 2) + rest) - P.transpose((1, 0, 2, 3) + rest))


def weyl(metric: MetricField, Rm: np.ndarray, A: np.ndarray) -> np.ndarray:
    # Rm is already projected and A (.) g has the Riemann symmetries by construction
    return Rm + kulkarni_nomizu_g(A, metric.g)


def cotton(metric: MetricField, A: np.ndarray, Gamma: np.ndarray,
           order: int = DEFAULT_ORDER) -> np.ndarray:
    """C_ijk = nabla_k A_ij - nabla_j A_ik (antisymmetric in the last pair)."""
    dA = cov_derivative(A, Gamma, metric.grid, order)  # dA[k, i, j]
    C = np.einsum("kij...->ijk...", dA) - np.einsum("jik...->ijk...", dA)
    return 0.5 * (C - np.swapaxes(C, 1, 2))


def trace(T: np.ndarray, metric: MetricField) -> np.ndarray:
    return np.einsum("ij...,ij...->...", metric.ginv, T)


def trace_free(T: np.ndarray, metric: MetricField) -> np.ndarray:
    return T - trace(T, metric) / metric.dim * metric.g


def bach(metric: MetricField, A: np.ndarray, W: np.ndarray, Gamma: np.ndarray,
         Rc: np.ndarray | None = None, order: int = DEFAULT_ORDER, *,
         alt: bool = True):
    """Bach tensor from both printed expressions.

    ``B_primary = nabla_k nabla_k A_ij - nabla_k nabla_i A_jk + A_kl W_iklj``;
    ``B_alt = nabla_k nabla_l W_iklj / (n-3) + R_kl W_iklj / (n-2)``.

    Returns ``(B_primary, B_alt, raw_trace)``.  ``B_primary`` is symmetrized and
    projected trace-free; ``raw_trace`` is g^{ij} B_ij before that projection
    (a pure discretization residual).  ``B_alt`` is symmetrized only, or None.
    """
    n = metric.dim
    dA = cov_derivative(A, Gamma, metric.grid, order)  # dA[k, i, j] = nabla_k A_ij
    lap = divergence(dA, 0, metric, Gamma, order)
    mixed = divergence(dA, 2, metric, Gamma, order)  # g^{kq} nabla_k nabla_i A_jq
    Aup = raise_all(A, metric.ginv)
    quad = np.einsum("kl...,iklj...->ij...", Aup, W)
    B = symmetrize(lap - mixed + quad)
    raw_trace = trace(B, metric)
    B = B - raw_trace / n * metric.g
    B_alt = None
    if alt:
        if Rc is None:
            raise ValueError("Rc required for the Weyl-form Bach tensor")
        V = divergence(W, 2, metric, Gamma, order)  # V[i, k, j] = nabla_l W_iklj
        dd = divergence(V, 1, metric, Gamma, order)
        Rup = raise_all(Rc, metric.ginv)
        B_alt = symmetrize(dd / (n - 3) + np.einsum("kl...,iklj...->ij...", Rup, W) / (n - 2))
    return B, B_alt, raw_trace


@dataclass
class CurvatureBundle:
    """All curvature objects of one metric on one grid (read-only by convention)."""

    metric: MetricField
    order: int
    Gamma: np.ndarray
    Rm: np.ndarray
    Rc: np.ndarray
    S: np.ndarray
    A: np.ndarray
    W: np.ndarray
    C: np.ndarray
    B: np.ndarray
    B_alt: np.ndarray | None
    bach_raw_trace: np.ndarray

    @property
    def grid(self) -> Grid:
        return self.metric.grid

    @property
    def dim(self) -> int:
        return self.metric.dim


def curvature_bundle(metric: MetricField, order: int = DEFAULT_ORDER, *,
                     alt: bool = False) -> CurvatureBundle:
    first, Gamma = christoffel_both(metric, order)
    Rm = riemann(metric, Gamma, order, first)
    Rc, S, A = ricci_scalar_schouten(metric, Rm)
    W = weyl(metric, Rm, A)
    C = cotton(metric, A, Gamma, order)
    B, B_alt, tr = bach(metric, A, W, Gamma, Rc, order, alt=alt)
    return CurvatureBundle(metric, order, Gamma, Rm, Rc, S, A, W, C, B, B_alt, tr)


# ---------------------------------------------------------------- identities

def cotton_weyl_factor(n: int) -> float:
    """c with C_ijk = c nabla_l W_lijk for the conventions of this module.

    Pinned by the jet oracle; the alternative (n-2)/(n-3) leaves an O(1) residual.
    """
    return 1.0 / (n - 3)


def bach_divergence_coefficient(n: int) -> float:
    """k with nabla_j B_ij = k C_jki R_jk (zero in dimension 4).

    Pinned by the jet oracle in dimensions 5 and 6.
    """
    return (n - 4) / (n - 2)


def cotton_weyl_residual(b: CurvatureBundle, factor: float | None = None) -> np.ndarray:
    """C_ijk - c nabla_l W_lijk as a rank-3 field."""
    c = cotton_weyl_factor(b.dim) if factor is None else factor
    divW = divergence(b.W, 0, b.metric, b.Gamma, b.order)
    return b.C - c * divW


def bach_divergence_residual(b: CurvatureBundle, *, cotton_term: bool = True,
                             coefficient: float | None = None) -> np.ndarray:
    """Pointwise |nabla_j B_ij - k C_jki R_jk| (a scalar field).

    ``coefficient`` overrides k (default :func:`bach_divergence_coefficient`).
    """
    n = b.dim
    k = bach_divergence_coefficient(n) if coefficient is None else coefficient
    v = divergence(b.B, 1, b.metric, b.Gamma, b.order)
    if cotton_term:
        Rup = raise_all(b.Rc, b.metric.ginv)
        v = v - k * np.einsum("jk...,jki...->i...", Rup, b.C)
    sq = np.einsum("ij...,i...,j...->...", b.metric.ginv, v, v)
    return np.sqrt(np.maximum(sq, 0.0))


def hessian(f: np.ndarray, metric: MetricField, Gamma: np.ndarray,
            order: int = DEFAULT_ORDER) -> np.ndarray:
    df = gradient(f, metric.grid, order)
    return cov_derivative(df, Gamma, metric.grid, order)


def curvature_variation(metric: MetricField, h: np.ndarray, Gamma: np.ndarray,
                        Rm: np.ndarray, order: int = DEFAULT_ORDER) -> np.ndarray:
    """First variation of Rm in direction h.

    1/2 (n_i n_k h_jl - n_i n_l h_jk - n_j n_k h_il + n_j n_l h_ik)
    + 1/2 (R_ijkp h_pl + R_ijpl h_pk), indices raised with g.
    """
    grid = metric.grid
    Dh = cov_derivative(h, Gamma, grid, order)
    DDh = cov_derivative(Dh, Gamma, grid, order)  # DDh[a, b, i, j] = n_a n_b h_ij
    t = (np.einsum("ikjl...->ijkl...", DDh) - np.einsum("iljk...->ijkl...", DDh)
         - np.einsum("jkil...->ijkl...", DDh) + np.einsum("jlik...->ijkl...", DDh))
    hmix = np.einsum("pq...,ql...->pl...", metric.ginv, h)  # h^p_l
    t2 = np.einsum("ijkp...,pl...->ijkl...", Rm, hmix) + np.einsum("ijpl...,pk...->ijkl...", Rm, hmix)
    return 0.5 * (t + t2)


def t_tensor(metric: MetricField, p: np.ndarray, Gamma: np.ndarray,
             order: int = DEFAULT_ORDER) -> np.ndarray:
    """T_ijkl = g_jl H_ik - g_jk H_il - g_il H_jk + g_ik H_jl with H the Hessian of p."""
    H = symmetrize(hessian(p, metric, Gamma, order))
    g = metric.g
    return (np.einsum("jl...,ik...->ijkl...", g, H) - np.einsum("jk...,il...->ijkl...", g, H)
            - np.einsum("il...,jk...->ijkl...", g, H) + np.einsum("ik...,jl...->ijkl...", g, H))


def pressure_rhs(b: CurvatureBundle) -> np.ndarray:
    """-(n-2) A.B + nabla_i nabla_j B_ij."""
    n = b.dim
    AB = np.einsum("ij...,ij...->...", raise_all(b.A, b.metric.ginv), b.B)
    divB = divergence(b.B, 1, b.metric, b.Gamma, b.order)
    ddB = divergence(divB, 0, b.metric, b.Gamma, b.order)
    return -(n - 2) * AB + ddB
