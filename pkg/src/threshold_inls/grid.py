"""Problem parameters, the stretched radial mesh and weighted quadrature.

Fields live at cell centres of a mesh on [0, r_max]; the origin is never a
sample point.  The Dirichlet form of the radial Laplacian is discretised in
flux (finite-volume) form, which makes the stiffness matrix symmetric and the
discrete identity (-Lap f, g)_{L2} = (f, g)_{H1dot} exact.  Beyond r_max a
field is continued as the decaying harmonic function matching its boundary
value, so the Dirichlet energy and the potential integrals include that tail.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
import scipy.sparse as sp
from scipy.special import gamma as gamma_fn


class ParameterError(ValueError):
    """Invalid dimension, exponent or mesh request."""


class GridMismatchError(ValueError):
    """Two fields sampled on different meshes were combined."""


@dataclass(frozen=True)
class Params:
    d: int
    b: float
    e0_cache: float | None = None

    def __post_init__(self):
        if int(self.d) != self.d or not 3 <= self.d <= 5:
            raise ParameterError(f"dimension must be 3, 4 or 5, got {self.d!r}")
        if not (0.0 < self.b < min(2.0, self.d / 2.0)):
            raise ParameterError(f"b={self.b} outside (0, min(2, d/2))")

    @property
    def alpha(self) -> float:
        return (4.0 - 2.0 * self.b) / (self.d - 2.0)

    @property
    def gamma_t(self) -> float:
        return 2.0 * (self.alpha + 1.0)

    @property
    def rho_x(self) -> float:
        a, d, b = self.alpha, self.d, self.b
        return 2.0 * d * (a + 1.0) / (d + 2.0 - 2.0 * b + 2.0 * a)

    @property
    def p_x(self) -> float:
        return 2.0 * self.d * (self.alpha + 1.0) / (self.d - 2.0 * self.b)

    @property
    def threshold_valid(self) -> bool:
        return self.b < 1.0 - 0.5 * (self.d - 4) ** 2

    @property
    def omega(self) -> float:
        """Surface area of the unit sphere in R^d."""
        return 2.0 * math.pi ** (self.d / 2.0) / gamma_fn(self.d / 2.0)

    @property
    def ball_volume(self) -> float:
        return self.omega / self.d

    def with_e0(self, e0: float) -> "Params":
        return Params(self.d, self.b, e0)

    def scaling_residuals(self) -> tuple[float, float, float]:
        d, b, a, p, rho, g = self.d, self.b, self.alpha, self.p_x, self.rho_x, self.gamma_t
        lhs = (d + 2.0) / (2.0 * d)
        return (lhs - (b / d + a / p + 1.0 / rho),
                lhs - ((b + 1.0) / d + (a + 1.0) / p),
                0.5 - (a + 1.0) / g)


DEFAULT_STRETCH = {"kind": "geomlin", "r_inner": 0.03, "r_outer": 100.0}


def _normalize_stretch(stretch: Any) -> dict:
    if stretch is None:
        return dict(DEFAULT_STRETCH)
    if isinstance(stretch, str):
        if stretch == "uniform":
            return {"kind": "uniform"}
        if stretch == "geomlin":
            return dict(DEFAULT_STRETCH)
        raise ParameterError(f"unknown stretch {stretch!r}")
    out = dict(stretch)
    kind = out.get("kind")
    if kind == "uniform":
        return {"kind": "uniform"}
    if kind == "geomlin":
        ra = float(out.get("r_inner", DEFAULT_STRETCH["r_inner"]))
        rc = float(out.get("r_outer", DEFAULT_STRETCH["r_outer"]))
        if not (0.0 < ra < rc):
            raise ParameterError(f"bad geomlin stretch {out}")
        return {"kind": "geomlin", "r_inner": ra, "r_outer": rc}
    raise ParameterError(f"unknown stretch kind {kind!r}")


def _edge_map(s: np.ndarray, r_max: float, stretch: dict) -> np.ndarray:
    """Cell edges for a uniform parameter s in [0, 1].

    For "geomlin" the local cell width is proportional to
    (r + r_inner) * r_outer / (r + r_outer): geometric growth between r_inner
    and r_outer, then constant (linear placement) out to r_max.  The counting
    function  S(r) = r + (r_outer - r_inner) log(1 + r/r_inner)  is inverted
    by Newton's method.
    """
    if stretch["kind"] == "uniform":
        return r_max * s
    ra, rc = stretch["r_inner"], stretch["r_outer"]

    def count(r):
        return r + (rc - ra) * np.log1p(r / ra)

    target = s * count(r_max)
    # start from the geometric branch, then Newton (S is increasing and concave)
    r = np.minimum(ra * np.expm1(target / (rc - ra + ra)), r_max)
    for _ in range(100):
        f = count(r) - target
        step = f / (1.0 + (rc - ra) / (r + ra))
        r = np.clip(r - step, 0.0, r_max)
        if np.max(np.abs(step) / (r + ra)) < 1e-15:
            break
    return r


@dataclass(frozen=True, eq=False)
class RadialGrid:
    """Cell-centred radial mesh.

    ``w[j]`` is the exact measure of cell j for r^{d-1}dr (without the sphere
    area).  ``r[j]`` is the cell midpoint on uniform meshes and the cell
    centroid for that measure on stretched ones.
    """

    d: int
    n_cells: int
    r_max: float
    stretch: dict
    edges: np.ndarray
    r: np.ndarray
    w: np.ndarray
    outer_bc: str = "harmonic"
    omega: float = field(default=0.0)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def key(self) -> str:
        payload = json.dumps([self.d, self.n_cells, repr(self.r_max), self.stretch, self.outer_bc],
                             sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def descriptor(self) -> dict:
        return {"d": self.d, "n_cells": self.n_cells, "r_max": self.r_max,
                "stretch": self.stretch, "outer_bc": self.outer_bc}

    def same_as(self, other: "RadialGrid") -> bool:
        return self is other or (self.d == other.d and self.n_cells == other.n_cells
                                 and self.r_max == other.r_max and self.stretch == other.stretch
                                 and self.outer_bc == other.outer_bc)

    # --- discrete gradient machinery -------------------------------------------------
    @property
    def face_dr(self) -> np.ndarray:
        """Centre-to-centre spacings across interior faces (length n-1)."""
        return np.diff(self.r)

    @property
    def face_r(self) -> np.ndarray:
        return self.edges[1:-1]

    def boundary_conductance(self, ell: int = 0) -> float:
        """Coefficient c of the outer boundary term c*u[-1]^2 in the Dirichlet form.

        The half cell between the last centre and r_max is in series with the
        exterior harmonic continuation (decay r^{-(d-2+ell)}).
        """
        R = self.r_max
        a = R ** (self.d - 1) / (R - self.r[-1])
        if self.outer_bc == "dirichlet":
            return a
        k = (self.d - 2 + ell) * R ** (self.d - 2)
        return a * k / (a + k)

    def boundary_value(self, values: np.ndarray, ell: int = 0) -> np.ndarray:
        """Value at r_max implied by the outer closure."""
        if self.outer_bc == "dirichlet":
            return np.zeros_like(values[..., -1])
        R = self.r_max
        a = R ** (self.d - 1) / (R - self.r[-1])
        k = (self.d - 2 + ell) * R ** (self.d - 2)
        return values[..., -1] * a / (a + k)

    def stiffness(self, ell: int = 0) -> sp.csr_matrix:
        """Symmetric matrix K with u.K.v = (1/omega)(u, v)_{H1dot} (plus centrifugal part)."""
        key = ("K", ell)
        if key in self._cache:
            return self._cache[key]
        n = self.n_cells
        cf = self.face_r ** (self.d - 1) / self.face_dr
        diag = np.zeros(n)
        diag[:-1] += cf
        diag[1:] += cf
        diag[-1] += self.boundary_conductance(ell)
        if ell:
            mu = ell * (ell + self.d - 2)
            diag += mu * self.w / self.r ** 2
        K = sp.diags([-cf, diag, -cf], [-1, 0, 1], format="csr")
        self._cache[key] = K
        return K

    def cell_gradient(self, values: np.ndarray) -> np.ndarray:
        """Derivative at cell centres from the averaged face differences."""
        g = np.diff(values) / self.face_dr
        ub = self.boundary_value(values)
        gb = (ub - values[-1]) / (self.r_max - self.r[-1])
        left = np.concatenate([[0.0], g])
        right = np.concatenate([g, [gb]])
        return 0.5 * (left + right)

    def ball_measure(self) -> float:
        return self.omega * float(np.sum(self.w))


def make_grid(params: Params, n_cells: int, r_max: float = 100.0, stretch: Any = None,
              outer_bc: str = "harmonic") -> RadialGrid:
    if int(n_cells) != n_cells or n_cells < 16:
        raise ParameterError(f"n_cells must be an integer >= 16, got {n_cells!r}")
    if not (r_max > 0 and math.isfinite(r_max)):
        raise ParameterError(f"r_max must be positive, got {r_max!r}")
    if outer_bc not in ("harmonic", "dirichlet"):
        raise ParameterError(f"outer_bc must be 'harmonic' or 'dirichlet', got {outer_bc!r}")
    st = _normalize_stretch(stretch)
    n = int(n_cells)
    s = np.linspace(0.0, 1.0, n + 1)
    edges = _edge_map(s, float(r_max), st)
    edges[0], edges[-1] = 0.0, float(r_max)
    if np.any(np.diff(edges) <= 0):
        raise ParameterError("stretch produced non-increasing edges")
    d = params.d
    w = (edges[1:] ** d - edges[:-1] ** d) / d
    if st["kind"] == "uniform":
        r = 0.5 * (edges[1:] + edges[:-1])
    else:
        # centroid of each cell for the measure r^{d-1}dr: the one-point rule is
        # then exact for linear integrands on the stretched cells
        r = d / (d + 1.0) * (edges[1:] ** (d + 1) - edges[:-1] ** (d + 1)) / (d * w)
    return RadialGrid(d=d, n_cells=n, r_max=float(r_max), stretch=st, edges=edges, r=r, w=w,
                      outer_bc=outer_bc, omega=params.omega)


@dataclass(frozen=True, eq=False)
class RadialField:
    grid: RadialGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape != (self.grid.n_cells,):
            raise ValueError(f"expected {self.grid.n_cells} samples, got shape {v.shape}")
        object.__setattr__(self, "values", v.astype(complex) if not np.iscomplexobj(v) else v)

    @property
    def real(self) -> np.ndarray:
        return self.values.real

    @property
    def imag(self) -> np.ndarray:
        return self.values.imag

    def _check(self, other: "RadialField"):
        if not self.grid.same_as(other.grid):
            raise GridMismatchError("fields live on different grids")

    def __add__(self, other):
        if isinstance(other, RadialField):
            self._check(other)
            return RadialField(self.grid, self.values + other.values)
        return RadialField(self.grid, self.values + other)

    def __sub__(self, other):
        if isinstance(other, RadialField):
            self._check(other)
            return RadialField(self.grid, self.values - other.values)
        return RadialField(self.grid, self.values - other)

    def __mul__(self, c):
        return RadialField(self.grid, self.values * c)

    __rmul__ = __mul__

    def __neg__(self):
        return RadialField(self.grid, -self.values)

    def conj(self) -> "RadialField":
        return RadialField(self.grid, np.conj(self.values))


def field_from(grid: RadialGrid, values) -> RadialField:
    return RadialField(grid, np.asarray(values, dtype=complex))


def zeros(grid: RadialGrid) -> RadialField:
    return RadialField(grid, np.zeros(grid.n_cells, dtype=complex))


def inner_h1_arrays(grid: RadialGrid, f: np.ndarray, g: np.ndarray) -> float:
    """Re integral of grad f . conj(grad g) for raw sample arrays."""
    K = grid.stiffness()
    return grid.omega * float(np.real(np.vdot(g, K @ f)))


def inner_h1(f: RadialField, g: RadialField) -> float:
    f._check(g)
    return inner_h1_arrays(f.grid, f.values, g.values)


def grad_norm_sq(f: RadialField) -> float:
    return inner_h1(f, f)


def inner_l2(f: RadialField, g: RadialField) -> float:
    f._check(g)
    return f.grid.omega * float(np.real(np.sum(f.values * np.conj(g.values) * f.grid.w)))


def weighted_integral(grid: RadialGrid, values: np.ndarray, weight_exponent: float, q: float,
                      tail: bool = True) -> float:
    """Integral of r^s |u|^q over R^d, with the harmonic exterior tail when it converges."""
    d = grid.d
    if weight_exponent <= -d:
        raise ValueError(f"weight r^{weight_exponent} is not integrable at the origin in d={d}")
    a = np.abs(values)
    total = float(np.sum(grid.r ** weight_exponent * a ** q * grid.w))
    if tail and grid.outer_bc == "harmonic":
        decay = (d - 2) * q - weight_exponent - d
        if decay > 0:
            ub = abs(grid.boundary_value(np.asarray(values)))
            R = grid.r_max
            total += ub ** q * R ** (weight_exponent + d) / decay
    return grid.omega * total


def norm_l2_weighted(f: RadialField, weight_exponent: float = 0.0, q: float = 2.0,
                     tail: bool = True) -> float:
    """(integral of r^s |f|^q dx)^(1/q)."""
    val = weighted_integral(f.grid, f.values, weight_exponent, q, tail=tail)
    return val ** (1.0 / q)


def mass(f: RadialField) -> float:
    """Discrete mass on the computational domain (the quantity the integrator conserves)."""
    return weighted_integral(f.grid, f.values, 0.0, 2.0, tail=False)


def params_from_mapping(m: Mapping[str, Any]) -> Params:
    return Params(int(m["d"]), float(m["b"]))
