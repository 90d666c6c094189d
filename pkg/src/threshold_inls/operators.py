"""Linearised operators about the ground state, the forms Q and B, and the remainder R.

Conventions: a perturbation v = v1 + i v2 is stored as a :class:`PairField`
(v1, v2).  The discrete Laplacian is -M^{-1}K with K the stiffness matrix of
:mod:`grid` and M the diagonal of cell measures, so that

    L_plus  = M^{-1}K - (alpha+1) V,     L_minus = M^{-1}K - V,

and the linearised flow is  v_t + Lmat v + R(v) = 0  with
Lmat (v1, v2) = (-L_minus v2, L_plus v1).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import binom

from .grid import GridMismatchError, Params, RadialField, RadialGrid
from .groundstate import GroundStateBundle

KINDS = ("Lplus", "Lminus")


@dataclass(frozen=True, eq=False)
class PairField:
    grid: RadialGrid
    re: np.ndarray
    im: np.ndarray

    @classmethod
    def from_field(cls, u: RadialField) -> "PairField":
        return cls(u.grid, u.values.real.copy(), u.values.imag.copy())

    @classmethod
    def zeros(cls, grid: RadialGrid) -> "PairField":
        return cls(grid, np.zeros(grid.n_cells), np.zeros(grid.n_cells))

    def to_field(self) -> RadialField:
        return RadialField(self.grid, self.re + 1j * self.im)

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate([self.re, self.im])

    @classmethod
    def from_stacked(cls, grid: RadialGrid, x: np.ndarray) -> "PairField":
        n = grid.n_cells
        return cls(grid, np.array(x[:n], dtype=float), np.array(x[n:], dtype=float))

    def conj(self) -> "PairField":
        return PairField(self.grid, self.re, -self.im)

    def _check(self, other: "PairField"):
        if not self.grid.same_as(other.grid):
            raise GridMismatchError("pair fields live on different grids")

    def __add__(self, other: "PairField") -> "PairField":
        self._check(other)
        return PairField(self.grid, self.re + other.re, self.im + other.im)

    def __sub__(self, other: "PairField") -> "PairField":
        self._check(other)
        return PairField(self.grid, self.re - other.re, self.im - other.im)

    def __mul__(self, c: float) -> "PairField":
        return PairField(self.grid, self.re * c, self.im * c)

    __rmul__ = __mul__

    def __neg__(self):
        return PairField(self.grid, -self.re, -self.im)

    def times_i(self) -> "PairField":
        """Multiplication by i: (v1, v2) -> (-v2, v1)."""
        return PairField(self.grid, -self.im, self.re.copy())


@dataclass(frozen=True, eq=False)
class OperatorMatrix:
    """Radial Schroedinger-type operator.

    ``entries`` is the symmetric matrix acting on w = sqrt(cell measure) * u,
    the discrete counterpart of r^{(d-1)/2} u.  ``apply`` acts on plain samples.
    """

    sector_ell: int
    kind: str
    entries: sp.csr_matrix
    stiffness: sp.csr_matrix
    cell_measure: np.ndarray
    potential: np.ndarray

    def apply(self, u: np.ndarray) -> np.ndarray:
        return (self.stiffness @ u) / self.cell_measure - self.potential * u

    def dense(self) -> np.ndarray:
        return self.entries.toarray()

    def to_plain(self) -> sp.csr_matrix:
        """Matrix acting on plain samples (similar to ``entries``)."""
        return (sp.diags(1.0 / self.cell_measure) @ self.stiffness - sp.diags(self.potential)).tocsr()


def coupling(kind: str, params: Params) -> float:
    if kind == "Lplus":
        return params.alpha + 1.0
    if kind == "Lminus":
        return 1.0
    raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")


def assemble(params: Params, grid: RadialGrid, kind: str, ell: int = 0,
             bundle: GroundStateBundle | None = None) -> OperatorMatrix:
    if ell < 0 or int(ell) != ell:
        raise ValueError("angular sector must be a non-negative integer")
    c = coupling(kind, params)
    if bundle is not None:
        V = bundle.v
    else:
        from .groundstate import potential_profile
        V = potential_profile(params, grid.r)
    K = grid.stiffness(int(ell))
    pot = c * V
    s = 1.0 / np.sqrt(grid.w)
    S = sp.diags(s) @ K @ sp.diags(s) - sp.diags(pot)
    S = ((S + S.T) * 0.5).tocsr()
    return OperatorMatrix(int(ell), kind, S, K, grid.w, pot)


class LinearizedSystem:
    """Cached L_plus, L_minus and the 2N x 2N block matrix of Lmat for one bundle."""

    def __init__(self, bundle: GroundStateBundle):
        self.bundle = bundle
        self.params = bundle.params
        self.grid = bundle.grid
        self.Lp = assemble(self.params, self.grid, "Lplus", 0, bundle)
        self.Lm = assemble(self.params, self.grid, "Lminus", 0, bundle)
        self._block = None

    def apply_L(self, v: PairField) -> PairField:
        return PairField(v.grid, -self.Lm.apply(v.im), self.Lp.apply(v.re))

    def block(self) -> sp.csr_matrix:
        if self._block is None:
            Lp = self.Lp.to_plain()
            Lm = self.Lm.to_plain()
            self._block = sp.bmat([[None, -Lm], [Lp, None]], format="csc")
        return self._block


_SYSTEMS: dict[int, LinearizedSystem] = {}


def system_for(bundle: GroundStateBundle) -> LinearizedSystem:
    key = id(bundle)
    sys_ = _SYSTEMS.get(key)
    if sys_ is None or sys_.bundle is not bundle:
        if len(_SYSTEMS) > 16:
            _SYSTEMS.clear()
        sys_ = LinearizedSystem(bundle)
        _SYSTEMS[key] = sys_
    return sys_


def apply_L(v: PairField, bundle: GroundStateBundle, params: Params | None = None) -> PairField:
    """Lmat v with output.re = (Lap + V) v2 and output.im = -(Lap + (alpha+1)V) v1."""
    return system_for(bundle).apply_L(v)


def pair_inner_h1(f: PairField, g: PairField) -> float:
    f._check(g)
    K = f.grid.stiffness()
    return f.grid.omega * float(f.re @ (K @ g.re) + f.im @ (K @ g.im))


def pair_inner_l2(f: PairField, g: PairField) -> float:
    f._check(g)
    w = f.grid.w
    return f.grid.omega * float(np.sum((f.re * g.re + f.im * g.im) * w))


def pair_norm_l2(f: PairField) -> float:
    return math.sqrt(max(pair_inner_l2(f, f), 0.0))


def pair_norm_h1(f: PairField) -> float:
    return math.sqrt(max(pair_inner_h1(f, f), 0.0))


def bilinear_B(f: PairField, g: PairField, bundle: GroundStateBundle,
               params: Params | None = None) -> float:
    f._check(g)
    p = bundle.params
    grid = f.grid
    Vw = bundle.v * grid.w * grid.omega
    kin = pair_inner_h1(f, g)
    pot = float(np.sum(Vw * ((p.alpha + 1.0) * f.re * g.re + f.im * g.im)))
    return 0.5 * kin - 0.5 * pot


def quad_Q(g: PairField, bundle: GroundStateBundle, params: Params | None = None) -> float:
    return bilinear_B(g, g, bundle)


# --- nonlinear remainder --------------------------------------------------------------

def J_of(z: np.ndarray, alpha: float) -> np.ndarray:
    """J(z) = |1+z|^alpha (1+z) - 1 - (alpha+2)/2 z - alpha/2 conj(z)."""
    z = np.asarray(z, dtype=complex)
    one = 1.0 + z
    mod2 = np.maximum((one * np.conj(one)).real, 1e-24)
    return np.exp(0.5 * alpha * np.log(mod2)) * one - 1.0 - 0.5 * (alpha + 2.0) * z - 0.5 * alpha * np.conj(z)


def J_pair_extended(z: np.ndarray, zs: np.ndarray, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Holomorphic continuation of (Re J, Im J) with z and conj(z) treated as independent.

    For zs = conj(z) this reduces to the real and imaginary parts of J(z).
    """
    a = 1.0 + z
    c = 1.0 + zs
    la, lc = np.log(a), np.log(c)
    main = np.exp((1.0 + alpha / 2.0) * la + (alpha / 2.0) * lc)
    main_s = np.exp((1.0 + alpha / 2.0) * lc + (alpha / 2.0) * la)
    lin = 0.5 * (alpha + 2.0) * z + 0.5 * alpha * zs
    lin_s = 0.5 * (alpha + 2.0) * zs + 0.5 * alpha * z
    J = main - 1.0 - lin
    Js = main_s - 1.0 - lin_s
    return 0.5 * (J + Js), (J - Js) / 2j


def remainder_R(v: PairField, bundle: GroundStateBundle, params: Params | None = None) -> PairField:
    """R(v) = -i r^{-b} W^{alpha+1} J(v/W) in factored form."""
    p = bundle.params
    W = bundle.w
    z = (v.re + 1j * v.im) / W
    J = J_of(z, p.alpha)
    amp = v.grid.r ** (-p.b) * W ** (p.alpha + 1.0)
    R = -1j * amp * J
    return PairField(v.grid, R.real, R.imag)


def remainder_R_direct(v: PairField, bundle: GroundStateBundle) -> PairField:
    """R(v) from the unfactored definition (cross-check of the factored form)."""
    p = bundle.params
    W = bundle.w
    a = p.alpha
    u = W + v.re + 1j * v.im
    inner = np.abs(u) ** a * u - W ** (a + 1.0) - (a + 1.0) * W ** a * v.re - 1j * W ** a * v.im
    R = -1j * v.grid.r ** (-p.b) * inner
    return PairField(v.grid, R.real, R.imag)


def remainder_R_extended(v1: np.ndarray, v2: np.ndarray, bundle: GroundStateBundle) -> tuple[np.ndarray, np.ndarray]:
    """(R1, R2) for complexified components v1, v2 (holomorphic in both)."""
    p = bundle.params
    W = bundle.w
    z = (v1 + 1j * v2) / W
    zs = (v1 - 1j * v2) / W
    reJ, imJ = J_pair_extended(z, zs, p.alpha)
    amp = bundle.grid.r ** (-p.b) * W ** (p.alpha + 1.0)
    # -i * amp * (reJ + i imJ) = amp*imJ - i amp*reJ
    return amp * imJ, -amp * reJ


def series_J_coeffs(params: Params, max_total_degree: int) -> dict[tuple[int, int], float]:
    """Taylor coefficients a_{j1 j2} of J in (z, conj z)."""
    if max_total_degree > 8 or max_total_degree < 0:
        raise ValueError("max_total_degree must lie in [0, 8]")
    a = params.alpha
    out = {}
    for j1 in range(max_total_degree + 1):
        for j2 in range(max_total_degree + 1 - j1):
            if j1 + j2 < 2:
                out[(j1, j2)] = 0.0
            else:
                out[(j1, j2)] = float(binom(1.0 + a / 2.0, j1) * binom(a / 2.0, j2))
    return out


def eval_J_series(coeffs: dict[tuple[int, int], float], z: complex) -> complex:
    zc = np.conj(z)
    return sum(c * z ** j1 * zc ** j2 for (j1, j2), c in coeffs.items())


# --- projections ----------------------------------------------------------------------

def _constrained_projection(f: PairField, directions, functionals) -> PairField:
    """f - sum c_k g_k with l_i(f - sum c_k g_k) = 0 for all i."""
    m = len(directions)
    G = np.empty((m, m))
    rhs = np.empty(m)
    for i, li in enumerate(functionals):
        rhs[i] = li(f)
        for k, gk in enumerate(directions):
            G[i, k] = li(gk)
    c = np.linalg.solve(G, rhs)
    out = f
    for ck, gk in zip(c, directions):
        out = out - gk * ck
    return out


def h_directions(bundle: GroundStateBundle) -> list[PairField]:
    g = bundle.grid
    z = np.zeros(g.n_cells)
    return [PairField(g, bundle.w.copy(), z), PairField(g, z, bundle.w.copy()),
            PairField(g, bundle.w1.copy(), z)]


def project_H_perp(f: PairField, bundle: GroundStateBundle) -> PairField:
    """Ḣ¹-orthogonal projection off span{W, iW, W1}."""
    dirs = h_directions(bundle)
    funcs = [lambda h, gk=gk: pair_inner_h1(h, gk) for gk in dirs]
    return _constrained_projection(f, dirs, funcs)


def project_G_perp(f: PairField, bundle: GroundStateBundle, Yplus: PairField) -> PairField:
    """Projection onto {Ḣ¹-orthogonal to iW, W1; B-orthogonal to Y+ and Y-}."""
    _, iW, W1 = h_directions(bundle)
    Yminus = Yplus.conj()
    dirs = [iW, W1, Yplus, Yminus]
    funcs = [lambda h: pair_inner_h1(h, iW), lambda h: pair_inner_h1(h, W1),
             lambda h: bilinear_B(Yplus, h, bundle), lambda h: bilinear_B(Yminus, h, bundle)]
    return _constrained_projection(f, dirs, funcs)
