"""Modulation decomposition near the ground-state orbit.

Convention: f_[theta,mu](x) = e^{i theta} mu^{-(d-2)/2} f(x/mu).  Since the
Hdot1 product is invariant under this map, the orthogonality conditions are
evaluated as (u, g_[-theta,1/mu])_{Hdot1} with g one of iW, W1, whose
rescalings are sampled from closed forms.  No interpolation of u is needed
for (theta, mu, beta); only u_tilde itself is resampled.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .grid import Params, RadialField, RadialGrid, grad_norm_sq, inner_h1_arrays
from .groundstate import (GroundStateBundle, W1_profile, W11_profile, W_profile, rescale,
                          scaled_profile)
from .operators import PairField

log = logging.getLogger(__name__)


class ModulationError(RuntimeError):
    """Newton failed: the field is outside the modulation neighbourhood."""


@dataclass
class ModulationState:
    theta: float
    mu: float
    beta: float
    u_tilde: PairField | None
    d_u: float
    valid: bool
    iterations: int = 0
    u_tilde_norm: float = math.nan
    v_norm: float = math.nan

    @property
    def log_mu(self) -> float:
        return math.log(self.mu)


def _h1(grid: RadialGrid, f: np.ndarray, g: np.ndarray) -> float:
    """Real Hdot1 product Re int grad f . conj(grad g)."""
    return inner_h1_arrays(grid, f, g)


def _pullbacks(params: Params, grid: RadialGrid, theta: float, s: float):
    """Samples of W, W1, W11 pulled back by [-theta, e^{-s}], i.e. e^{-i theta} mu^{(d-2)/2} g(mu r)."""
    mu_inv = math.exp(-s)
    Wp = scaled_profile(params, grid, W_profile, -theta, mu_inv)
    W1p = scaled_profile(params, grid, W1_profile, -theta, mu_inv)
    W11p = scaled_profile(params, grid, W11_profile, -theta, mu_inv)
    return Wp, W1p, W11p


def orthogonality_residuals(u: RadialField, params: Params, theta: float, s: float):
    """(J0, J1) and their Jacobian in (theta, log mu)."""
    grid = u.grid
    f = u.values
    Wp, W1p, W11p = _pullbacks(params, grid, theta, s)
    J0 = _h1(grid, f, 1j * Wp)
    J1 = _h1(grid, f, W1p)
    # d/dtheta of e^{-i theta} g is -i e^{-i theta} g; d/ds of the pulled-back g is the pulled-back Lambda g
    jac = np.array([[_h1(grid, f, Wp), _h1(grid, f, 1j * W1p)],
                    [_h1(grid, f, -1j * W1p), _h1(grid, f, W11p)]])
    return np.array([J0, J1]), jac, Wp


def _newton(u, params, theta, s, scale, tol, max_iter):
    for it in range(1, max_iter + 1):
        F, Jm, _ = orthogonality_residuals(u, params, theta, s)
        try:
            step = np.linalg.solve(Jm, -F)
        except np.linalg.LinAlgError:
            return theta, s, it, False
        # damp very large steps to stay on one branch
        lim = 1.0
        nrm = float(np.max(np.abs(step)))
        if nrm > lim:
            step *= lim / nrm
        theta += step[0]
        s += step[1]
        if not (math.isfinite(theta) and math.isfinite(s)):
            return theta, s, it, False
        if nrm < tol and np.max(np.abs(F)) < 1e-9 * scale:
            return theta, s, it, True
    F, _, _ = orthogonality_residuals(u, params, theta, s)
    return theta, s, max_iter, bool(np.max(np.abs(F)) < 1e-8 * scale)


def decompose(u: RadialField, bundle: GroundStateBundle, params: Params | None = None,
              delta0: float | None = None, seed: tuple[float, float] = (0.0, 1.0),
              tol: float = 1e-12, max_iter: int = 50, with_field: bool = True,
              scan: bool = True) -> ModulationState:
    params = bundle.params if params is None else params
    grid = u.grid
    delta0 = bundle.delta0 if delta0 is None else delta0
    gW = bundle.grad_norm_sq
    d_u = abs(grad_norm_sq(u) - gW)
    valid = d_u < delta0
    scale = gW
    theta, s = float(seed[0]), math.log(seed[1])
    th, sv, it, ok = _newton(u, params, theta, s, scale, tol, max_iter)
    if not ok and scan:
        # coarse scan of the orbit for a better seed
        best = None
        for t0 in np.linspace(-math.pi, math.pi, 12, endpoint=False):
            for s0 in np.linspace(-3, 3, 13):
                F, _, Wp = orthogonality_residuals(u, params, t0, s0)
                overlap = -_h1(grid, u.values, Wp)
                if best is None or overlap < best[0]:
                    best = (overlap, t0, s0)
        th, sv, it2, ok = _newton(u, params, best[1], best[2], scale, tol, max_iter)
        it += it2
    if not ok:
        raise ModulationError(f"Newton did not converge in {max_iter} iterations")
    # theta + pi also zeroes both conditions; keep the branch with positive overlap on W
    _, _, Wp = orthogonality_residuals(u, params, th, sv)
    if _h1(grid, u.values, Wp) < 0:
        th += math.pi
    th = float(math.remainder(th, 2 * math.pi)) if seed == (0.0, 1.0) else float(th)
    mu = math.exp(sv)
    _, _, Wp = orthogonality_residuals(u, params, th, sv)
    beta = _h1(grid, u.values, Wp) / gW - 1.0
    ut = None
    ut_norm = v_norm = math.nan
    if with_field:
        z = rescale(u, th, mu).values
        tilde = z - (1.0 + beta) * bundle.w
        ut = PairField(grid, tilde.real.copy(), tilde.imag.copy())
        ut_norm = math.sqrt(max(_h1(grid, tilde, tilde), 0.0))
        vv = z - bundle.w
        v_norm = math.sqrt(max(_h1(grid, vv, vv), 0.0))
    return ModulationState(th, mu, beta, ut, d_u, bool(valid), it, ut_norm, v_norm)


def comparability_quantities(state: ModulationState, bundle: GroundStateBundle) -> dict:
    """Scale-free versions of |beta|, ||v||, ||u_tilde||, d(u)."""
    nW = math.sqrt(bundle.grad_norm_sq)
    return {"beta": abs(state.beta), "v": state.v_norm / nW, "u_tilde": state.u_tilde_norm / nW,
            "d": state.d_u / bundle.grad_norm_sq}


def max_pairwise_ratio(values: dict) -> float:
    vals = [v for v in values.values()]
    if min(vals) <= 0:
        return math.inf
    return max(vals) / min(vals)


# ---------------------------------------------------------------- energy-surface corpus

def project_to_energy_surface(f: RadialField, bundle: GroundStateBundle, side: int) -> RadialField:
    """c*f with E(c f) = E(W); side=-1 picks the root below the kinetic level of W, +1 above."""
    from .groundstate import energy, potential_energy_integral

    p = bundle.params
    K = grad_norm_sq(f)
    P = potential_energy_integral(f, p)
    EW = bundle.energy_W
    a2 = p.alpha + 2.0
    c_star = (K / P) ** (1.0 / p.alpha)

    def g(c):
        return 0.5 * c * c * K - c ** a2 * P / a2 - EW

    if g(c_star) < 0:
        raise ValueError("field cannot reach the ground-state energy level by scaling")
    if side < 0:
        c = brentq(g, 1e-12, c_star, xtol=1e-15, rtol=1e-15)
    else:
        hi = 2.0 * c_star
        while g(hi) > 0:
            hi *= 2.0
        c = brentq(g, c_star, hi, xtol=1e-15, rtol=1e-15)
    return RadialField(f.grid, c * f.values)


def perturbation_corpus(bundle: GroundStateBundle, n: int, seed: int = 0,
                        amp_range=(1e-3, 3e-2)) -> list[RadialField]:
    """Random smooth perturbations of W placed on the energy surface E = E(W)."""
    rng = np.random.default_rng(seed)
    grid = bundle.grid
    r = grid.r
    out = []
    while len(out) < n:
        width = rng.uniform(0.3, 3.0)
        centre = rng.uniform(0.0, 2.0)
        shape = np.exp(-((r - centre) / width) ** 2) * (1 + r) ** -1.0
        phase = rng.uniform(0, 2 * np.pi)
        h = shape * np.exp(1j * phase) * rng.choice([-1.0, 1.0])
        h = h / math.sqrt(_h1(grid, h, h)) * math.sqrt(bundle.grad_norm_sq)
        eps = math.exp(rng.uniform(math.log(amp_range[0]), math.log(amp_range[1])))
        f = RadialField(grid, bundle.w + eps * h)
        try:
            u = project_to_energy_surface(f, bundle, int(rng.choice([-1, 1])))
        except ValueError:
            continue
        if abs(grad_norm_sq(u) - bundle.grad_norm_sq) < 0.5 * bundle.delta0:
            out.append(u)
    return out


# ---------------------------------------------------------------- trajectories

def _derivative(t: np.ndarray, y: np.ndarray) -> np.ndarray:
    if len(t) < 2:
        return np.zeros_like(y)
    return np.gradient(y, t)


def track(traj, bundle: GroundStateBundle, params: Params | None = None,
          delta0: float | None = None, with_field: bool = False) -> list[dict]:
    """Warm-started decomposition of every snapshot plus the parameter-rate ratio."""
    params = bundle.params if params is None else params
    states: list = []
    rows: list[dict] = []
    for k, (t, u) in enumerate(zip(traj.times, traj.snapshots)):
        if len(states) >= 2 and states[-1] is not None and states[-2] is not None:
            a, b = states[-2], states[-1]
            seed = (2 * b.theta - a.theta, math.exp(2 * b.log_mu - a.log_mu))
        elif states and states[-1] is not None:
            seed = (states[-1].theta, states[-1].mu)
        else:
            seed = (0.0, 1.0)
        try:
            st = decompose(u, bundle, params, delta0, seed=seed, with_field=with_field, scan=not states)
        except ModulationError as exc:
            log.warning("decomposition failed at t=%g: %s", t, exc)
            st = None
        states.append(st)
    t = np.asarray(traj.times, dtype=float)
    ok = np.array([s is not None for s in states])
    th = np.array([s.theta if s else np.nan for s in states])
    lm = np.array([s.log_mu if s else np.nan for s in states])
    be = np.array([s.beta if s else np.nan for s in states])
    dth, dlm, dbe = _derivative(t, th), _derivative(t, lm), _derivative(t, be)
    for k, st in enumerate(states):
        row = {"t": float(t[k]), "valid": bool(st.valid) if st else False, "state": st}
        if st is None:
            row.update(theta=math.nan, mu=math.nan, beta=math.nan, d_u=math.nan, parameter_rate_ratio=math.nan)
        else:
            num = abs(dbe[k]) + abs(dth[k]) + abs(dlm[k])
            den = st.mu ** 2 * st.d_u
            ratio = 0.0 if num == 0 else (num / den if den > 0 else math.inf)
            row.update(theta=st.theta, mu=st.mu, beta=st.beta, d_u=st.d_u, parameter_rate_ratio=ratio,
                       dtheta=float(dth[k]), dlog_mu=float(dlm[k]), dbeta=float(dbe[k]))
        rows.append(row)
    return rows


TRACK_COLUMNS = ("t", "theta", "mu", "beta", "d_u", "parameter_rate_ratio", "valid")


def compactness_scale(u: RadialField, bundle: GroundStateBundle, params: Params | None = None) -> float:
    """Largest lambda with int_{r <= 1/lambda} |grad u|^2 = E(W).

    The discrete kinetic energy is a sum of face contributions; each is spread
    uniformly between the two adjacent cell centres, which makes the cumulative
    integral piecewise linear and strictly increasing where u varies.
    """
    grid = u.grid
    f = u.values
    cf = grid.face_r ** (grid.d - 1) / grid.face_dr
    dens = grid.omega * cf * np.abs(np.diff(f)) ** 2
    nodes = grid.r
    cum = np.concatenate([[0.0], np.cumsum(dens)])
    level = bundle.energy_W
    if cum[-1] < level:
        raise ValueError("kinetic energy on the grid never reaches E(W)")
    rho = float(np.interp(level, cum, nodes)) if np.all(np.diff(cum) > 0) else _first_crossing(cum, nodes, level)
    return 1.0 / rho


def _first_crossing(cum, nodes, level):
    j = int(np.searchsorted(cum, level))
    lo, hi = cum[j - 1], cum[j]
    return float(nodes[j - 1] + (level - lo) / (hi - lo) * (nodes[j] - nodes[j - 1]))


# ---------------------------------------------------------------- parameter equations

def parameter_equation_residuals(states_rows: list[dict], traj, bundle: GroundStateBundle) -> list[dict]:
    """Closure errors of the three projected parameter equations in self-similar time.

    With V = r^{-b} W^alpha and Lap the discrete Laplacian:
      beta_s |W|^2 + (Lap ut2, W) + (V ut2, W)
      -theta_s |W|^2 - (Lap ut1, W) - ((alpha+1) V ut1, W) + alpha beta (r^{-b} W^{alpha+1}, W)
      (mu_s/mu) |W1|^2 + (Lap ut2, W1) + (V ut2, W1)
    all in the Hdot1 product; each should be O(E) with
    E = d (d + |theta_s| + |mu_s/mu|), d the scale-free kinetic gap.
    """
    p = bundle.params
    grid = bundle.grid
    K = grid.stiffness()
    W, W1 = bundle.w, bundle.w1
    V = bundle.v
    gW = bundle.grad_norm_sq
    g1 = bundle.grad_norm_sq_W1
    src = grid.r ** (-p.b) * W ** (p.alpha + 1.0)
    out = []
    for row in states_rows:
        st = row.get("state")
        if st is None or st.u_tilde is None:
            out.append({"t": row["t"], "eq_beta": math.nan, "eq_theta": math.nan, "eq_mu": math.nan,
                        "calE": math.nan})
            continue
        mu2 = st.mu ** 2
        beta_s = row["dbeta"] / mu2
        theta_s = row["dtheta"] / mu2
        lmu_s = row["dlog_mu"] / mu2
        u1, u2 = st.u_tilde.re, st.u_tilde.im
        lap1 = -(K @ u1) / grid.w
        lap2 = -(K @ u2) / grid.w
        h = lambda a, b: _h1(grid, a, b)
        e1 = beta_s * gW + h(lap2, W) + h(V * u2, W)
        e2 = -theta_s * gW - h(lap1, W) - (p.alpha + 1.0) * h(V * u1, W) + p.alpha * st.beta * h(src, W)
        e3 = lmu_s * g1 + h(lap2, W1) + h(V * u2, W1)
        dd = st.d_u / gW
        calE = dd * (dd + abs(theta_s) + abs(lmu_s))
        out.append({"t": row["t"], "eq_beta": e1 / gW, "eq_theta": e2 / gW, "eq_mu": e3 / g1, "calE": calE,
                    "d": dd})
    return out


def parameter_closure_residual(states_rows, traj, bundle, params=None) -> dict:
    rows = parameter_equation_residuals(states_rows, traj, bundle)
    arr = {k: np.array([r[k] for r in rows], dtype=float) for k in ("eq_beta", "eq_theta", "eq_mu", "calE")}
    return {"rows": rows, "max_abs": {k: float(np.nanmax(np.abs(arr[k]))) for k in ("eq_beta", "eq_theta", "eq_mu")},
            "max_calE": float(np.nanmax(arr["calE"]))}
