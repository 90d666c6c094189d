"""Decreasing rearrangement and Lorentz norms of radial fields.

The rearrangement of a grid field is the exact step function obtained by
sorting cell values: each cell contributes its measure omega*w_j as one step.
Norms are computed on the computational domain only (no exterior tail).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from .grid import Params, RadialField, RadialGrid


@dataclass(frozen=True)
class LorentzSpec:
    r_exp: float
    rho_exp: float  # math.inf for the weak space

    def __post_init__(self):
        if not self.r_exp > 1.0 or not math.isfinite(self.r_exp):
            raise ValueError(f"r_exp must lie in (1, inf), got {self.r_exp}")
        if not self.rho_exp >= 1.0:
            raise ValueError(f"rho_exp must be >= 1 or inf, got {self.rho_exp}")


@dataclass(frozen=True)
class Rearrangement:
    """Step function f*(s) = values[k] for s in [cum[k-1], cum[k]), with cum[-1] := 0."""
    values: np.ndarray
    cum: np.ndarray

    def __call__(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        idx = np.searchsorted(self.cum, s, side="right")
        padded = np.append(self.values, 0.0)
        return padded[np.minimum(idx, len(self.values))]

    @property
    def total_measure(self) -> float:
        return float(self.cum[-1]) if len(self.cum) else 0.0


def decreasing_rearrangement(f: RadialField | np.ndarray, grid: RadialGrid | None = None) -> Rearrangement:
    if isinstance(f, RadialField):
        grid, vals = f.grid, f.values
    else:
        vals = np.asarray(f)
        if grid is None:
            raise ValueError("a grid is needed for raw arrays")
    a = np.abs(vals)
    if not np.all(np.isfinite(a)):
        raise ValueError("field has non-finite values")
    order = np.argsort(-a, kind="stable")
    meas = grid.omega * grid.w[order]
    return Rearrangement(a[order], np.cumsum(meas))


def _norm_from_steps(vals: np.ndarray, cum: np.ndarray, spec: LorentzSpec) -> float:
    r, rho = spec.r_exp, spec.rho_exp
    if not len(vals):
        return 0.0
    if math.isinf(rho):
        # f* is right-continuous, so at the breakpoint s_k it takes the next step value
        return float(np.max(cum[:-1] ** (1.0 / r) * vals[1:])) if len(vals) > 1 else 0.0
    prev = np.concatenate(([0.0], cum[:-1]))
    incr = cum ** (rho / r) - prev ** (rho / r)
    return float(np.sum(vals ** rho * incr) ** (1.0 / rho))


def lorentz_norm(f: RadialField, spec: LorentzSpec) -> float:
    """Lorentz quasi-norm with the normalisation ((rho/r) int (s^{1/r} f*)^rho ds/s)^{1/rho}."""
    fs = decreasing_rearrangement(f)
    return _norm_from_steps(fs.values, fs.cum, spec)


def lorentz_norm_analytic(fstar: Callable[[float], float], spec: LorentzSpec,
                          s_min: float = 1e-12, s_max: float = 1e12, n_sup: int = 2001) -> float:
    """Same norm for an analytically given rearrangement; returns inf if the integral diverges."""
    r, rho = spec.r_exp, spec.rho_exp
    if math.isinf(rho):
        ss = np.logspace(math.log10(s_min), math.log10(s_max), n_sup)
        return float(max(s ** (1.0 / r) * fstar(s) for s in ss))

    def integrand(x):
        s = math.exp(x)
        return (rho / r) * (s ** (1.0 / r) * fstar(s)) ** rho

    val, err = integrate.quad(integrand, math.log(s_min), math.log(s_max), limit=400)
    if not math.isfinite(val) or err > 1e-3 * max(abs(val), 1.0):
        return math.inf
    return val ** (1.0 / rho)


def power_weight_rearrangement(d: int, b: float) -> Callable[[float], float]:
    """f* for |x|^{-b}: the level set {|x|^{-b} > lam} is a ball."""
    vol = math.pi ** (d / 2.0) / math.gamma(d / 2.0 + 1.0)
    return lambda s: (s / vol) ** (-b / d)


def lebesgue_norm(f: RadialField, q: float) -> float:
    g = f.grid
    return float((g.omega * np.sum(np.abs(f.values) ** q * g.w)) ** (1.0 / q))


# ---------------------------------------------------------------- space-time norms

def spatial_spec(params: Params, kind: str) -> tuple[float, LorentzSpec, bool]:
    """(time exponent, spatial spec, apply gradient first) for S, Z or N."""
    d = params.d
    if kind == "S":
        return params.gamma_t, LorentzSpec(params.p_x, 2.0), False
    if kind == "Z":
        return params.gamma_t, LorentzSpec(params.rho_x, 2.0), True
    if kind == "N":
        return 2.0, LorentzSpec(2.0 * d / (d + 2.0), 2.0), True
    raise ValueError(f"unknown space-time norm {kind!r}")


def spacetime_norm_from_samples(times: Sequence[float], snapshots: Sequence[RadialField],
                                params: Params, kind: str) -> float:
    if len(snapshots) == 0:
        raise ValueError("empty trajectory")
    t = np.asarray(times, dtype=float)
    gamma, spec, grad = spatial_spec(params, kind)
    vals = []
    for u in snapshots:
        if grad:
            u = RadialField(u.grid, u.grid.cell_gradient(u.values))
        vals.append(lorentz_norm(u, spec))
    vals = np.asarray(vals)
    if len(t) == 1:
        return 0.0
    dt = np.diff(t)
    if np.max(np.abs(dt - dt[0])) > 1e-9 * max(abs(dt[0]), 1e-300):
        raise ValueError("snapshots must be uniformly spaced in time")
    return float(integrate.trapezoid(vals ** gamma, t) ** (1.0 / gamma))


def spacetime_norm(traj, kind: str) -> float:
    """traj needs .times, .snapshots and .params."""
    return spacetime_norm_from_samples(traj.times, traj.snapshots, traj.params, kind)
