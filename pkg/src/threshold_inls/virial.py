"""Truncated virial V_R = int phi_R |u|^2 and the pieces of its second derivative.

phi(r) = r^2 on [0, 1]; on [1, 2] its derivative is 2r(1 - S(r-1)) with S the
degree-9 smoothstep (flat to fourth order at both ends); constant for r >= 2.
Then phi'' = 2(1-S) - 2r S' <= 2, phi >= 1 away from the origin, and phi is C^5,
so the bi-Laplacian needed by A_R is continuous.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import Polynomial

from .grid import Params, RadialField, RadialGrid, grad_norm_sq, weighted_integral
from .groundstate import GroundStateBundle, potential_energy_integral

_SMOOTHSTEP = Polynomial([0, 0, 0, 0, 0, 126, -420, 540, -315, 70])


def _build_pieces():
    shift = Polynomial([-1.0, 1.0])  # t = r - 1
    S = _SMOOTHSTEP(shift)
    dphi = Polynomial([0.0, 2.0]) * (1 - S)
    phi = dphi.integ(lbnd=1.0, k=1.0)
    return phi


_BLEND = _build_pieces()
_PHI_TOP = float(_BLEND(2.0))


@dataclass(frozen=True)
class VirialProfile:
    """Closed-form cutoff profile phi and its derivatives (order 0..4)."""
    name: str = "smoothstep9"

    def deriv(self, r, order: int = 0) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        out = np.zeros_like(r)
        inner = r <= 1.0
        mid = (r > 1.0) & (r < 2.0)
        outer = r >= 2.0
        inner_vals = {0: r ** 2, 1: 2 * r, 2: 2.0 + 0 * r, 3: 0 * r, 4: 0 * r}[order]
        out[inner] = inner_vals[inner]
        out[mid] = _BLEND.deriv(order)(r[mid]) if order else _BLEND(r[mid])
        out[outer] = _PHI_TOP if order == 0 else 0.0
        return out

    def __call__(self, r):
        return self.deriv(r, 0)


@dataclass(frozen=True)
class VirialConfig:
    R: float
    profile: VirialProfile = field(default_factory=VirialProfile)

    def __post_init__(self):
        if not self.R > 0:
            raise ValueError("R must be positive")

    def phi_R(self, r, order: int = 0) -> np.ndarray:
        """d^k/dr^k of R^2 phi(r/R)."""
        return self.R ** (2 - order) * self.profile.deriv(np.asarray(r, dtype=float) / self.R, order)

    def bilaplacian(self, r, d: int) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        f1, f2, f3, f4 = (self.phi_R(r, k) for k in (1, 2, 3, 4))
        return f4 + 2 * (d - 1) / r * f3 + (d - 1) * (d - 3) / r ** 2 * f2 - (d - 1) * (d - 3) / r ** 3 * f1


def profile_legality(profile: VirialProfile | None = None, n: int = 10_000, r_max: float = 4.0) -> dict:
    profile = VirialProfile() if profile is None else profile
    r = np.linspace(0.0, r_max, n)
    inner = r[r <= 1.0]
    return {"max_phi2": float(np.max(profile.deriv(r, 2))), "min_phi": float(np.min(profile(r))),
            "inner_dev": float(np.max(np.abs(profile(inner) - inner ** 2)))}


def virial_V(u: RadialField, cfg: VirialConfig) -> float:
    g = u.grid
    return g.omega * float(np.sum(cfg.phi_R(g.r) * np.abs(u.values) ** 2 * g.w))


def virial_first_derivative(u: RadialField, cfg: VirialConfig) -> float:
    """2 Im int conj(u) u_r phi_R'(r) dx, in the face form matching the discrete Laplacian.

    Per face: conductance * (phi_R(r_{j+1}) - phi_R(r_j)) * Im(conj(u_j) u_{j+1}); this is the
    exact time derivative of virial_V under the semi-discrete linear flow.
    """
    g = u.grid
    f = u.values
    cf = g.face_r ** (g.d - 1) / g.face_dr
    phi = cfg.phi_R(g.r)
    flux = cf * np.diff(phi) * np.imag(np.conj(f[:-1]) * f[1:])
    return 2.0 * g.omega * float(np.sum(flux))


def virial_first_derivative_continuum(u: RadialField, cfg: VirialConfig) -> float:
    g = u.grid
    f = u.values
    ur = g.cell_gradient(f)
    return 2.0 * g.omega * float(np.sum(np.imag(np.conj(f) * ur) * cfg.phi_R(g.r, 1) * g.w))


def A_R(u: RadialField, cfg: VirialConfig, params: Params) -> dict:
    """The four integrals of A_R by quadrature; returns the total and each term."""
    g = u.grid
    d, b, alpha = params.d, params.b, params.alpha
    f = u.values
    R = cfg.R
    # gradient terms: for radial u they combine to 4 int_{r>=R} (phi_R'' - 2)|u_r|^2
    cf = g.face_r ** (d - 1) / g.face_dr
    kin_face = cf * np.abs(np.diff(f)) ** 2
    wgt = np.where(g.face_r >= R, cfg.phi_R(g.face_r, 2) - 2.0, 0.0)
    grad_term = 4.0 * g.omega * float(np.sum(wgt * kin_face))
    if g.outer_bc == "harmonic" and g.r_max >= R:
        cb = g.boundary_conductance()
        ext = cb * abs(f[-1]) ** 2
        grad_term += 4.0 * g.omega * float(cfg.phi_R(g.r_max, 2) - 2.0) * ext
    bil = -g.omega * float(np.sum(cfg.bilaplacian(g.r, d) * np.abs(f) ** 2 * g.w))
    bracket = (cfg.phi_R(g.r, 2) + (d - 1 + 2 * b / alpha) * cfg.phi_R(g.r, 1) / g.r
               - 4 * (alpha + 2) / alpha)
    bracket = np.where(g.r >= R, bracket, 0.0)
    pot_density = g.r ** (-b) * np.abs(f) ** (alpha + 2)
    pot = float(np.sum(bracket * pot_density * g.w))
    if g.outer_bc == "harmonic" and g.r_max >= 2 * R:
        # outside 2R the bracket is the constant -4(alpha+2)/alpha
        tail = weighted_integral(g, f, -b, alpha + 2.0) / g.omega - float(np.sum(pot_density * g.w))
        pot += -4 * (alpha + 2) / alpha * tail
    pot_term = -2 * alpha / (alpha + 2) * g.omega * pot
    total = grad_term + bil + pot_term
    return {"A_R": total, "gradient": grad_term, "bilaplacian": bil, "potential": pot_term}


def virial_second_identity(u: RadialField, cfg: VirialConfig, bundle: GroundStateBundle,
                           params: Params | None = None, side_tol: float = 1e-12) -> dict:
    params = bundle.params if params is None else params
    K = grad_norm_sq(u)
    P = potential_energy_integral(u, params)
    gap = K - bundle.grad_norm_sq
    d_u = abs(gap)
    ar = A_R(u, cfg, params)
    if abs(gap) <= side_tol * bundle.grad_norm_sq:
        side = 0
    else:
        side = -1 if gap < 0 else 1
    lead = 4 * params.alpha * d_u * (-side if side else 0)
    return {"A_R": ar["A_R"], "terms": ar, "d_u": d_u, "side": side,
            "identity": lead + ar["A_R"], "direct": 8.0 * (K - P) + ar["A_R"]}


def A_R_sign_bound_rhs(u: RadialField, cfg: VirialConfig, params: Params) -> float:
    """int_{r>=R} (r^{-b}|u|^{alpha+2} + r^{-2}|u|^2)."""
    g = u.grid
    m = g.r >= cfg.R
    a = np.abs(u.values)
    dens = g.r ** (-params.b) * a ** (params.alpha + 2) + g.r ** -2 * a ** 2
    return g.omega * float(np.sum(dens[m] * g.w[m]))


def A_R_near_orbit_rhs(mu: float, R: float, d_u: float, d: int) -> float:
    """(mu R)^{-(d-2)/2} d + d^2."""
    return (mu * R) ** (-(d - 2) / 2.0) * d_u + d_u ** 2


def virial_second_difference(u_prev, u_mid, u_next, cfg: VirialConfig, spacing: float) -> float:
    """(V(t+s) - 2V(t) + V(t-s)) / s^2 with the densities combined before summing.

    V itself can be ~1e7 (W is not in L^2 for d <= 4), so differencing the three
    totals loses everything to rounding once s is small.
    """
    vals = [np.asarray(getattr(x, "values", x)) for x in (u_prev, u_mid, u_next)]
    g = getattr(u_mid, "grid", None)
    if g is None:
        raise TypeError("u_mid must be a RadialField")
    dens = np.abs(vals[2]) ** 2 - 2 * np.abs(vals[1]) ** 2 + np.abs(vals[0]) ** 2
    return g.omega * float(np.sum(cfg.phi_R(g.r) * dens * g.w)) / spacing ** 2


def second_difference(values, dt: float) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    return (v[2:] - 2 * v[1:-1] + v[:-2]) / dt ** 2
