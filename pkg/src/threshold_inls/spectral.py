"""Unstable eigenpair of the linearised operator, spectral scans and ODE asymptotics."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import solve_ivp
from scipy.optimize import brentq
from scipy.special import kv

from .grid import Params, RadialField, RadialGrid, inner_h1
from .groundstate import GroundStateBundle, W_profile, elliptic_residual, potential_profile
from .operators import (PairField, pair_inner_l2, pair_norm_h1, pair_norm_l2, quad_Q,
                        system_for)

log = logging.getLogger(__name__)


class SpectralError(RuntimeError):
    """The discrete problem did not produce the expected unstable eigenpair."""


@dataclass(frozen=True, eq=False)
class EigenBundle:
    e0: float
    Y1: RadialField
    Y2: RadialField
    residual_plus: float
    sign_convention_ok: bool
    info: dict = field(default_factory=dict)

    @property
    def grid(self) -> RadialGrid:
        return self.Y1.grid

    @property
    def Yplus(self) -> PairField:
        return PairField(self.grid, self.Y1.real.copy(), self.Y2.real.copy())

    @property
    def Yminus(self) -> PairField:
        return self.Yplus.conj()


def _eig_residual(sys_, y: PairField, e0: float) -> float:
    r = sys_.apply_L(y) - y * e0
    return pair_norm_l2(r) / pair_norm_l2(y)


def compute_eigen(bundle: GroundStateBundle, params: Params | None = None,
                  grid: RadialGrid | None = None, method: str = "product", refine: bool = True,
                  clamp_factor: float = 10.0) -> EigenBundle:
    """Unstable eigenpair (e0, Y+) from the operator P = sqrt(L-) L+ sqrt(L-).

    P is similar to L- L+ through sqrt(L-): if P f = -e0^2 f then
    Y1 = sqrt(L-) f satisfies L- L+ Y1 = -e0^2 Y1, and Y2 = L+ Y1 / e0.

    method="dense" forms P with a dense square root of the clamped L-.  On
    strongly graded meshes the largest eigenvalues of L- are ~1/h_min^2 and
    the O(1) negative eigenvalue of P drowns in round-off, so the default
    "product" method finds the same eigenvalue as the most negative one of the
    sparse product L- L+ by shift-invert Arnoldi.  Either way the pair is
    polished by inverse iteration on the sparse block matrix.
    """
    params = bundle.params
    grid = bundle.grid
    sys_ = system_for(bundle)
    if method == "dense":
        e0, y, info = _eigen_dense(bundle, sys_, clamp_factor)
    elif method == "product":
        e0, y, info = _eigen_product(bundle, sys_)
    else:
        raise ValueError(f"unknown method {method!r}")
    info["method"] = method
    info["e0_initial"] = e0
    info["residual_initial"] = _eig_residual(sys_, y, e0)
    if refine:
        y, e0 = _inverse_iteration(sys_, y, e0)
    y = y * (1.0 / pair_norm_l2(y))
    W = bundle.W
    if inner_h1(W, RadialField(grid, y.re.astype(complex))) < 0:
        y = -y
    res = _eig_residual(sys_, y, e0)
    sign_ok = inner_h1(W, RadialField(grid, y.re.astype(complex))) > 0
    info["Q_rel"] = float(quad_Q(y, bundle) / pair_norm_h1(y) ** 2)
    return EigenBundle(float(e0), RadialField(grid, y.re.astype(complex)),
                       RadialField(grid, y.im.astype(complex)), float(res), bool(sign_ok), info)


def _eigen_dense(bundle, sys_, clamp_factor):
    params, grid = bundle.params, bundle.grid
    Sm = sys_.Lm.dense()
    Sp = sys_.Lp.dense()
    lam, U = sla.eigh(Sm)
    tol = clamp_factor * elliptic_residual(params, grid) * max(1.0, float(np.max(bundle.v)))
    n_neg = int(np.sum(lam < -tol))
    if n_neg:
        raise SpectralError(f"L_minus has {n_neg} eigenvalues below -{tol:.3e}")
    n_clamped = int(np.sum(lam < 0))
    lam = np.clip(lam, 0.0, None)
    sqrtLm = (U * np.sqrt(lam)) @ U.T
    P = sqrtLm @ Sp @ sqrtLm
    P = 0.5 * (P + P.T)
    mu, F = sla.eigh(P, subset_by_index=[0, 1])
    if mu[0] >= 0:
        raise SpectralError("no negative eigenvalue of P: grid too coarse or domain too small")
    e0 = math.sqrt(-mu[0])
    y1w = sqrtLm @ F[:, 0]
    y2w = (Sp @ y1w) / e0
    s = 1.0 / np.sqrt(grid.w)
    info = {"P_eigs": [float(mu[0]), float(mu[1])], "n_negative_P": int(np.sum(mu < 0)),
            "clamp_tol": tol, "n_clamped": n_clamped}
    return e0, PairField(grid, y1w * s, y2w * s), info


def _eigen_product(bundle, sys_, shift: float = -25.0, k: int = 3):
    grid = bundle.grid
    Lp = sys_.Lp.to_plain()
    Lm = sys_.Lm.to_plain()
    prod = (Lm @ Lp).tocsc()
    vals, vecs = spla.eigs(prod, k=k, sigma=shift, which="LM", tol=1e-13,
                           v0=np.ones(grid.n_cells))
    order = np.argsort(vals.real)
    vals, vecs = vals[order], vecs[:, order]
    if abs(vals[0].imag) > 1e-8 * abs(vals[0]) or vals[0].real >= 0:
        raise SpectralError(f"no negative eigenvalue of P found near the shift (got {vals[0]})")
    mu = vals.real
    e0 = math.sqrt(-mu[0])
    y1 = vecs[:, 0].real
    y2 = sys_.Lp.apply(y1) / e0
    info = {"P_eigs": [float(m) for m in mu[:2]],
            "n_negative_P": int(np.sum(mu < -1e-8 * abs(mu[0])))}
    return e0, PairField(grid, y1, y2), info


def _inverse_iteration(sys_, y: PairField, e0: float, iters: int = 6):
    grid = y.grid
    B = sys_.block()
    n2 = B.shape[0]
    w2 = np.concatenate([grid.w, grid.w])
    lu = spla.splu((B - e0 * sp.identity(n2, format="csc")).tocsc())
    x = y.stacked
    lam = e0
    for _ in range(iters):
        x = lu.solve(x)
        x /= math.sqrt(np.sum(x * x * w2))
        Bx = B @ x
        lam = float(np.sum(x * Bx * w2) / np.sum(x * x * w2))
    return PairField.from_stacked(grid, x), lam


def check_eigen_pair(eig: EigenBundle, bundle: GroundStateBundle) -> dict:
    sys_ = system_for(bundle)
    y = eig.Yplus
    e0 = eig.e0
    minus = PairField(y.grid, y.re, -y.im)
    cross = sys_.Lm.apply(y.im) + e0 * y.re
    l2 = lambda a: math.sqrt(y.grid.omega * float(np.sum(a * a * y.grid.w)))
    return {
        "residual_plus": _eig_residual(sys_, y, e0),
        "residual_minus": _eig_residual(sys_, minus, -e0),
        "cross_check": l2(cross) / l2(y.im),
        "Q_rel": quad_Q(y, bundle) / pair_norm_h1(y) ** 2,
        "W_Y1": inner_h1(bundle.W, eig.Y1),
        "max_abs": float(np.max(np.hypot(y.re, y.im))),
    }


# --- decay ---------------------------------------------------------------------------

def annulus_norms(grid: RadialGrid, values: np.ndarray, R_values) -> list[float]:
    out = []
    for R in R_values:
        m = (grid.r >= R) & (grid.r < 2 * R)
        if not np.any(m):
            raise ValueError(f"annulus [{R}, {2 * R}) contains no cells")
        out.append(math.sqrt(grid.omega * float(np.sum(np.abs(values[m]) ** 2 * grid.w[m]))))
    return out


def decay_slope(grid: RadialGrid, values: np.ndarray, R_values) -> float:
    """Least-squares slope of log(annulus L2 norm) against log R (-inf if it vanishes)."""
    norms = np.array(annulus_norms(grid, values, R_values))
    if np.any(norms == 0.0):
        return -math.inf
    return float(np.polyfit(np.log(R_values), np.log(norms), 1)[0])


def eigen_decay_check(eig: EigenBundle, R_values) -> dict:
    vals = eig.Y1.real + 1j * eig.Y2.real
    norms = annulus_norms(eig.grid, vals, R_values)
    # restrict the fit to annuli above the round-off floor
    keep = [i for i, v in enumerate(norms) if v > 1e-13 * max(norms)]
    Rk = [R_values[i] for i in keep]
    slope = decay_slope(eig.grid, vals, Rk) if len(Rk) >= 2 else -math.inf
    return {"R_values": list(R_values), "annulus_norms": norms, "slope": slope,
            "super_polynomial": slope < -4.0}


# --- spectrum scan ---------------------------------------------------------------------

def spectrum_scan(bundle: GroundStateBundle, e0: float, n_per_shift: int = 24,
                  imag_tol: float = 1e-8) -> dict:
    """Real eigenvalues of the block matrix in [-2 e0, 2 e0] via shift-invert Arnoldi."""
    sys_ = system_for(bundle)
    B = sys_.block()
    shifts = [-1.5 * e0, -e0 * 0.999, -0.5 * e0, 1e-3 * e0, 0.5 * e0, 0.999 * e0, 1.5 * e0]
    found = []
    for s in shifts:
        try:
            vals = spla.eigs(B, k=n_per_shift, sigma=s, which="LM", return_eigenvectors=False,
                             tol=1e-12, v0=np.ones(B.shape[0]))
        except spla.ArpackNoConvergence as exc:
            raise SpectralError(f"Arnoldi did not converge at shift {s}") from exc
        found.extend(vals.tolist())
    found = np.array(found)
    scale = max(e0, 1.0)
    real = found[np.abs(found.imag) <= imag_tol * scale].real
    real = real[np.abs(real) <= 2 * e0]
    real = np.unique(np.round(real, 10))
    near_zero = real[np.abs(real) < 1e-2 * e0]
    near_pm = real[np.abs(np.abs(real) - e0) < 1e-6 * scale]
    other = real[(np.abs(real) >= 1e-2 * e0) & (np.abs(np.abs(real) - e0) >= 1e-6 * scale)]
    # multiplicity of the zero eigenvalue: generalized kernel from iW and W1
    W = bundle.w
    W1 = bundle.w1
    ker = [PairField(bundle.grid, np.zeros_like(W), W), PairField(bundle.grid, W1, np.zeros_like(W1))]
    ker_res = [pair_norm_l2(sys_.apply_L(k)) / pair_norm_l2(k) for k in ker]
    return {"real_eigenvalues": real.tolist(), "near_zero": near_zero.tolist(),
            "plus_minus_e0": near_pm.tolist(), "other_real": other.tolist(),
            "kernel_residuals": ker_res,
            "margin": float(np.min(np.abs(np.abs(other) - e0))) if other.size else None}


# --- shooting oracle -------------------------------------------------------------------

def _coupled_rhs(params: Params, e0: float):
    d, a = params.d, params.alpha

    def rhs(r, y):
        V = potential_profile(params, r)
        y1, p1, y2, p2 = y
        return [p1, -(d - 1) / r * p1 - (a + 1.0) * V * y1 - e0 * y2,
                p2, -(d - 1) / r * p2 - V * y2 + e0 * y1]
    return rhs


def _regular_seed(params: Params, e0: float, r0: float, a1: float, c: float):
    d, b, al = params.d, params.b, params.alpha
    s = 2.0 - b
    k = 1.0 / (s * (d - b))
    y1 = a1 - (al + 1.0) * a1 * k * r0 ** s - e0 * c * r0 ** 2 / (2 * d)
    p1 = -(al + 1.0) * a1 * k * s * r0 ** (s - 1) - e0 * c * r0 / d
    y2 = c - c * k * r0 ** s + e0 * a1 * r0 ** 2 / (2 * d)
    p2 = -c * k * s * r0 ** (s - 1) + e0 * a1 * r0 / d
    return [y1, p1, y2, p2]


def _decaying_seeds(params: Params, e0: float, R: float):
    """Two real solutions of the free system decaying at infinity, Z = Y1 + i Y2 with Lap Z = i e0 Z."""
    d = params.d
    nu = (d - 2) / 2.0
    kap = np.sqrt(1j * e0)  # principal root, positive real part
    def Z(r):
        return r ** (-nu) * kv(nu, kap * r)

    def dZ(r):
        # d/dr [r^{-nu} K_nu(k r)] = -k r^{-nu} K_{nu+1}(k r)
        return -kap * r ** (-nu) * kv(nu + 1, kap * r)
    z, dz = Z(R), dZ(R)
    sa = [z.real, dz.real, z.imag, dz.imag]
    sb = [(-z.imag), (-dz.imag), z.real, dz.real]  # i Z
    return sa, sb


def _shoot_matrix(params: Params, e0: float, r0: float, rm: float, R: float, rtol: float):
    rhs = _coupled_rhs(params, e0)
    cols = []
    for a1, c in ((1.0, 0.0), (0.0, 1.0)):
        sol = solve_ivp(rhs, (r0, rm), _regular_seed(params, e0, r0, a1, c), method="DOP853",
                        rtol=rtol, atol=1e-14)
        if not sol.success:
            raise SpectralError(sol.message)
        cols.append(sol.y[:, -1])
    for seed in _decaying_seeds(params, e0, R):
        sc = np.max(np.abs(seed))
        sol = solve_ivp(rhs, (R, rm), np.array(seed) / sc, method="DOP853", rtol=rtol, atol=1e-300)
        if not sol.success:
            raise SpectralError(sol.message)
        cols.append(sol.y[:, -1])
    M = np.array(cols).T
    M = M / np.linalg.norm(M, axis=0)
    return M


def shooting_e0(params: Params, e_lo: float = 0.02, e_hi: float = 20.0, n_scan: int = 60,
                r_match: float = 1.0, rtol: float = 1e-11) -> float:
    """Independent oracle for e0: matching determinant of regular and decaying solutions."""
    r0 = 1e-5

    def det(e):
        R = max(40.0, 36.0 / math.sqrt(e / 2.0))
        return float(np.linalg.det(_shoot_matrix(params, e, r0, r_match, R, rtol)))

    grid_e = np.geomspace(e_lo, e_hi, n_scan)
    vals = [det(e) for e in grid_e]
    roots = []
    for i in range(len(grid_e) - 1):
        if vals[i] == 0.0:
            roots.append(grid_e[i])
        elif vals[i] * vals[i + 1] < 0:
            roots.append(brentq(det, grid_e[i], grid_e[i + 1], xtol=1e-13, rtol=1e-12))
    if not roots:
        raise SpectralError("shooting found no positive eigenvalue in the scanned window")
    if len(roots) > 1:
        log.warning("shooting found several sign changes: %s", roots)
    return float(roots[0])


# --- kernel ODE in the l = 1 sector ----------------------------------------------------

def _kernel_rhs(params: Params):
    d, b, a = params.d, params.b, params.alpha

    def rhs(t, y):
        r = math.exp(t)
        g, gt = y
        pot = (a + 1.0) * r ** (2.0 - b) * W_profile(params, r) ** a
        return [gt, -(d - 2) * gt + (d - 1) * g - pot * g]
    return rhs


def _fitted_exponent(sol, t_a, t_b, n=21):
    """Slope of log|G| against log r over [t_a, t_b]."""
    ts = np.linspace(min(t_a, t_b), max(t_a, t_b), n)
    g = np.abs(sol.sol(ts)[0])
    return float(np.polyfit(ts, np.log(g), 1)[0])


def kernel_ode_asymptotics(params: Params, r_small: float = 1e-8, r_large: float = 1e8) -> dict:
    """Fitted power laws of the l=1 kernel ODE at its two singular points.

    In t = log r the equation reads g'' + (d-2) g' - (d-1) g + (alpha+1) r^{2-b} W^alpha g = 0.
    Seeds are generic (g=1, g'=0); the direction of integration selects the branch:
    outward from r_small the r^1 branch dominates, inward towards r_small and inward
    from r_large the r^{-(d-1)} branch dominates.  Exponents are fitted over one decade.
    """
    d = params.d
    rhs = _kernel_rhs(params)
    opts = dict(method="DOP853", rtol=1e-11, atol=1e-30, dense_output=True)
    t0, T = math.log(r_small), math.log(r_large)
    dec = math.log(10.0)
    out = solve_ivp(rhs, (t0, T), [1.0, 0.0], **opts)
    inw0 = solve_ivp(rhs, (t0 + 4 * dec, t0), [1.0, 0.0], **opts)
    inwT = solve_ivp(rhs, (T, T - 4 * dec), [1.0, 0.0], **opts)
    for sol in (out, inw0, inwT):
        if not sol.success:
            raise SpectralError(f"kernel ODE integration failed: {sol.message}")
    return {
        "admissible_at_zero": _fitted_exponent(out, t0 + 2 * dec, t0 + 3 * dec),
        "inadmissible_at_zero": _fitted_exponent(inw0, t0 + dec, t0),
        "admissible_at_infinity": _fitted_exponent(inwT, T - 4 * dec, T - 3 * dec),
        "regular_branch_at_infinity": _fitted_exponent(out, T - dec, T),
        "expected": {"zero": 1.0, "infinity": -(d - 1.0)},
    }
