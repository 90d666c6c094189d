"""Inductive construction of the approximate threshold solutions W + sum_j q^j Phi_j.

Here q = exp(-e0 t).  Each new profile solves
    (Lmat - (k+1) e0) Phi_{k+1} = -Psi_k,
where Psi_k is the q^{k+1} Taylor coefficient of q -> R(v_k(q)).

Psi_k is extracted by a discrete Cauchy integral on a circle in the complex
q-plane.  R is not holomorphic in v, but writing J in terms of z and conj(z)
as independent variables gives an analytic continuation in q of the two real
components of R, so the contour integral returns the Taylor coefficients to
round-off.  A least-squares polynomial fit in real q is kept as a cross-check.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import Params, RadialField, RadialGrid
from .groundstate import GroundStateBundle, grad_norm_sq, energy
from .lorentz import LorentzSpec, lorentz_norm
from .operators import (PairField, pair_norm_h1, pair_norm_l2, remainder_R,
                        remainder_R_extended, system_for)
from .spectral import EigenBundle

log = logging.getLogger(__name__)

K_MAX = 6


class SeriesExtractionError(RuntimeError):
    pass


class SpectralClashError(RuntimeError):
    pass


class ValidityRadiusError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ApproxFamily:
    a: float
    k: int
    Phi: list
    e0: float
    q_radius: float
    bundle: GroundStateBundle
    provenance: dict = field(default_factory=dict)

    @property
    def grid(self) -> RadialGrid:
        return self.bundle.grid

    def truncated(self, k: int) -> "ApproxFamily":
        if k > self.k:
            raise ValueError(f"family only has {self.k} profiles")
        return ApproxFamily(self.a, k, self.Phi[:k], self.e0, validity_radius(self.Phi[:k], self.bundle),
                            self.bundle, self.provenance)

    def v_of_q(self, q: float) -> PairField:
        out = PairField.zeros(self.grid)
        for j, P in enumerate(self.Phi, start=1):
            out = out + P * q ** j
        return out


def validity_radius(Phi, bundle: GroundStateBundle, margin: bool = True) -> float:
    """Largest dyadic q with sum_j q^j |Phi_j| <= W/2 everywhere, halved once."""
    if not Phi or all(not np.any(P.re) and not np.any(P.im) for P in Phi):
        return 1.0
    W = bundle.w
    mods = [np.hypot(P.re, P.im) for P in Phi]
    q = 1.0
    for _ in range(60):
        bound = sum(q ** j * m for j, m in enumerate(mods, start=1))
        if np.all(bound <= 0.5 * W):
            break
        q *= 0.5
    else:
        raise ValidityRadiusError("no admissible q found")
    return 0.5 * q if margin else q


def _cauchy_coefficient(Phi, bundle: GroundStateBundle, m: int, radius: float,
                        n_nodes: int = 64) -> PairField:
    """Taylor coefficient of q^m in R(v(q)) by the trapezoidal rule on |q| = radius."""
    grid = bundle.grid
    nodes = radius * np.exp(2j * np.pi * np.arange(n_nodes) / n_nodes)
    acc1 = np.zeros(grid.n_cells, dtype=complex)
    acc2 = np.zeros(grid.n_cells, dtype=complex)
    for q in nodes:
        v1 = np.zeros(grid.n_cells, dtype=complex)
        v2 = np.zeros(grid.n_cells, dtype=complex)
        for j, P in enumerate(Phi, start=1):
            v1 += q ** j * P.re
            v2 += q ** j * P.im
        R1, R2 = remainder_R_extended(v1, v2, bundle)
        acc1 += R1 * q ** (-m)
        acc2 += R2 * q ** (-m)
    return PairField(grid, (acc1 / n_nodes).real, (acc2 / n_nodes).real)


def fit_coefficient(Phi, bundle: GroundStateBundle, m: int, q0: float) -> tuple[PairField, float]:
    """q^m coefficient by least squares on real q in (0, q0]; returns (coef, relative fit residual).

    Uses M = 2(k+3) samples and degree k+3 where k = len(Phi).
    """
    k = len(Phi)
    deg = k + 3
    M = 2 * (k + 3)
    qs = q0 * np.arange(1, M + 1) / M
    grid = bundle.grid
    samples = []
    for q in qs:
        v = PairField.zeros(grid)
        for j, P in enumerate(Phi, start=1):
            v = v + P * q ** j
        samples.append(remainder_R(v, bundle).stacked)
    Y = np.array(samples)
    # monomials q^2..q^deg (R has no constant or linear part)
    powers = np.arange(2, deg + 1)
    A = qs[:, None] ** powers[None, :]
    coef, *_ = np.linalg.lstsq(A, Y, rcond=None)
    fitted = A @ coef
    resid = float(np.linalg.norm(fitted - Y) / max(np.linalg.norm(Y), 1e-300))
    idx = int(np.where(powers == m)[0][0])
    return PairField.from_stacked(grid, coef[idx]), resid


def build_family(a: float, k_max: int, eig: EigenBundle, bundle: GroundStateBundle,
                 params: Params | None = None, grid: RadialGrid | None = None,
                 method: str = "cauchy", fit_tol: float = 1e-6) -> ApproxFamily:
    if k_max > K_MAX or k_max < 1:
        raise ValueError(f"k_max must lie in [1, {K_MAX}]")
    grid = bundle.grid
    sys_ = system_for(bundle)
    B = sys_.block()
    n2 = B.shape[0]
    e0 = eig.e0
    Phi = [eig.Yplus * float(a)]
    prov = {"method": method, "fit_residuals": [], "resolvent_residuals": [], "e0": e0,
            "grid_key": grid.key}
    if a == 0:
        Phi = [PairField.zeros(grid) for _ in range(k_max)]
        return ApproxFamily(float(a), k_max, Phi, e0, 1.0, bundle, prov)
    for k in range(1, k_max):
        q0 = validity_radius(Phi, bundle)
        if method == "cauchy":
            psi = _cauchy_coefficient(Phi, bundle, k + 1, q0)
            # self-consistency: coefficient independent of the contour radius
            psi_b = _cauchy_coefficient(Phi, bundle, k + 1, 0.5 * q0)
            fit_res = pair_norm_l2(psi - psi_b) / max(pair_norm_l2(psi), 1e-300)
        elif method == "fit":
            psi, fit_res = fit_coefficient(Phi, bundle, k + 1, q0)
        else:
            raise ValueError(f"unknown extraction method {method!r}")
        if not math.isfinite(fit_res) or fit_res > fit_tol:
            raise SeriesExtractionError(f"order {k}: extraction residual {fit_res:.3e} > {fit_tol:.1e}")
        prov["fit_residuals"].append(fit_res)
        shift = (k + 1) * e0
        try:
            lu = spla.splu((B - shift * sp.identity(n2, format="csc")).tocsc())
        except RuntimeError as exc:
            raise SpectralClashError(f"resolvent at {shift} is singular") from exc
        x = lu.solve(-psi.stacked)
        if not np.all(np.isfinite(x)):
            raise SpectralClashError(f"resolvent at {shift} produced non-finite values")
        nxt = PairField.from_stacked(grid, x)
        chk = sys_.apply_L(nxt) - nxt * shift + psi
        prov["resolvent_residuals"].append(pair_norm_l2(chk) / max(pair_norm_l2(psi), 1e-300))
        Phi.append(nxt)
    q0 = validity_radius(Phi, bundle)
    return ApproxFamily(float(a), k_max, Phi, e0, q0, bundle, prov)


@dataclass
class ResidualReport:
    t: float
    q: float
    eps: PairField
    l2: float
    h1: float
    lorentz_dual: float

    @property
    def h1_l2(self) -> float:
        return math.hypot(self.l2, self.h1)


def residual(family: ApproxFamily, t: float, check_radius: bool = True) -> ResidualReport:
    """eps_k(t) = sum_j q^j (-j e0 Phi_j + Lmat Phi_j) + R(v_k(q)), evaluated directly."""
    q = math.exp(-family.e0 * t)
    if check_radius and q > family.q_radius * (1 + 1e-12):
        raise ValidityRadiusError(f"q={q:.4g} exceeds the validity radius {family.q_radius:.4g}")
    bundle = family.bundle
    sys_ = system_for(bundle)
    grid = family.grid
    eps = PairField.zeros(grid)
    v = PairField.zeros(grid)
    for j, P in enumerate(family.Phi, start=1):
        eps = eps + (sys_.apply_L(P) - P * (j * family.e0)) * q ** j
        v = v + P * q ** j
    eps = eps + remainder_R(v, bundle)
    d = grid.d
    spec = LorentzSpec(2.0 * d / (d + 2.0), 2.0)
    lz = lorentz_norm(eps.to_field(), spec)
    return ResidualReport(t, q, eps, pair_norm_l2(eps), pair_norm_h1(eps), lz)


def t_of_q(family: ApproxFamily, q: float) -> float:
    return -math.log(q) / family.e0


def residual_slope(family: ApproxFamily, t_start: float, span: float, n: int = 7,
                   norm: str = "h1_l2") -> float:
    ts = np.linspace(t_start, t_start + span, n)
    vals = [getattr(residual(family, float(t)), norm) for t in ts]
    return float(np.polyfit(ts, np.log(vals), 1)[0])


def initial_data_Wpm(sign: int, t0: float, family: ApproxFamily) -> RadialField:
    """W + sum_j exp(-j e0 t0) Phi_j for the family with parameter a = sign."""
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    if family.a != sign:
        raise ValueError(f"family was built with a={family.a}, requested sign {sign}")
    q = math.exp(-family.e0 * t0)
    if q > family.q_radius * (1 + 1e-12):
        raise ValidityRadiusError(f"exp(-e0 t0)={q:.4g} exceeds the validity radius {family.q_radius:.4g}")
    v = family.v_of_q(q)
    return RadialField(family.grid, family.bundle.w + v.re + 1j * v.im)


def kinetic_linear_coefficient(eig: EigenBundle, bundle: GroundStateBundle, a: float,
                               q1: float = 1e-3, q2: float = 2e-3) -> float:
    """Slope in q of ||W + q a Y+||^2_{H1dot} at q -> 0 (Richardson on two q values)."""
    def gap(q):
        u = RadialField(bundle.grid, bundle.w + q * a * (eig.Y1.real + 1j * eig.Y2.real))
        return grad_norm_sq(u) - bundle.grad_norm_sq
    g1, g2 = gap(q1), gap(q2)
    # gap = c1 q + c2 q^2 -> eliminate c2
    return (g1 * q2 ** 2 - g2 * q1 ** 2) / (q1 * q2 ** 2 - q2 * q1 ** 2)


def energy_offset(family: ApproxFamily, t0: float) -> float:
    u = initial_data_Wpm(int(family.a), t0, family)
    return energy(u, family.bundle.params) - family.bundle.energy_W
