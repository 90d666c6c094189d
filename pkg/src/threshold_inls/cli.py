"""Command-line entry point: ``threshold-inls <command> [options]``.

One config file (TOML or JSON) drives a run; command-line flags override it.
Every run writes ``manifest.json`` plus command outputs into the output
directory.  Exit codes: 0 ok, 2 config error, 3 numerical failure, 4 check failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import platform
import sys
from pathlib import Path
from typing import Any

import numpy as np
import scipy

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .container import atomic_write, cached_eigen, load_field, save_eigen, save_family, save_field, write_table
from .grid import DEFAULT_STRETCH, ParameterError, Params, RadialField, make_grid

log = logging.getLogger("threshold_inls")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4


class ConfigError(ValueError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


DEFAULTS: dict[str, dict[str, Any]] = {
    "problem": {"d": 3, "b": 0.3},
    "grid": {"n_cells": 2048, "r_max": 100.0, "outer_bc": "harmonic", "stretch": dict(DEFAULT_STRETCH)},
    "spectrum": {"scan": True},
    "family": {"k": 4, "sign": -1, "q_start": 0.05},
    "evolve": {"data": "wminus", "t_span": "0:3", "dt": 1e-4, "diag_stride": 500, "snapshot_stride": 0,
               "sponge": False, "field": ""},
    "modulate": {"field": ""},
    "virial": {"R": 40.0, "data": "wminus", "steps": 40, "dt": 2e-4},
    "lorentz": {"field": "", "pairs": [[2.0, 2.0], [2.0, "inf"]]},
    "output": {"dir": "run", "eigen_cache": ""},
}

_TYPES = {("problem", "d"): int, ("problem", "b"): float, ("grid", "n_cells"): int, ("grid", "r_max"): float,
          ("grid", "outer_bc"): str, ("family", "k"): int, ("family", "sign"): int, ("family", "q_start"): float,
          ("evolve", "dt"): float, ("evolve", "diag_stride"): int, ("evolve", "snapshot_stride"): int,
          ("evolve", "t_span"): str, ("evolve", "data"): str, ("virial", "R"): float, ("virial", "steps"): int,
          ("virial", "dt"): float}


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    try:
        text = p.read_bytes()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    try:
        if p.suffix == ".json":
            return json.loads(text)
        return tomllib.loads(text.decode())
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError("config", f"parse error: {exc}") from exc


def resolve_config(user: dict, overrides: dict) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))
    for sec, vals in user.items():
        if sec not in cfg:
            raise ConfigError(sec, "unknown section")
        if not isinstance(vals, dict):
            raise ConfigError(sec, "section must be a table")
        for k, v in vals.items():
            if k not in cfg[sec]:
                raise ConfigError(f"{sec}.{k}", "unknown key")
            cfg[sec][k] = v
    for (sec, k), v in overrides.items():
        if v is not None:
            cfg[sec][k] = v
    for (sec, k), typ in _TYPES.items():
        v = cfg[sec][k]
        try:
            if typ is int and (isinstance(v, bool) or float(v) != int(float(v))):
                raise ValueError
            cfg[sec][k] = typ(v)
        except (TypeError, ValueError):
            raise ConfigError(f"{sec}.{k}", f"expected {typ.__name__}, got {v!r}") from None
    if cfg["family"]["sign"] not in (-1, 1):
        raise ConfigError("family.sign", "must be -1 or 1")
    if cfg["evolve"]["data"] not in ("w", "wminus", "wplus", "file"):
        raise ConfigError("evolve.data", "must be one of w, wminus, wplus, file")
    parse_span(cfg["evolve"]["t_span"])
    try:
        Params(cfg["problem"]["d"], cfg["problem"]["b"])
    except ParameterError as exc:
        raise ConfigError("problem", str(exc)) from exc
    return cfg


def parse_span(text: str) -> tuple[float, float]:
    try:
        a, b = (float(x) for x in str(text).split(":"))
    except ValueError:
        raise ConfigError("evolve.t_span", f"expected 'start:end', got {text!r}") from None
    if a == b:
        raise ConfigError("evolve.t_span", "empty span")
    return a, b


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _json_default(o):
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o)}")


def _clean(obj):
    """Replace non-finite floats by strings so the JSON stays standard."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)) and not math.isfinite(obj):
        return str(float(obj))
    return obj


def write_json(path: Path, payload: dict) -> None:
    payload = json.loads(json.dumps(payload, default=_json_default, allow_nan=True))
    atomic_write(path, json.dumps(_clean(payload), sort_keys=True, indent=2) + "\n")


class Context:
    def __init__(self, cfg: dict, out: Path):
        self.cfg = cfg
        self.out = out
        p = cfg["problem"]
        g = cfg["grid"]
        self.params = Params(p["d"], p["b"])
        self.grid = make_grid(self.params, g["n_cells"], g["r_max"], g["stretch"], g["outer_bc"])
        self._bundle = None
        self._eig = None

    @property
    def bundle(self):
        if self._bundle is None:
            from .groundstate import ground_state
            self._bundle = ground_state(self.params, self.grid)
        return self._bundle

    @property
    def eig(self):
        if self._eig is None:
            cache = self.cfg["output"]["eigen_cache"] or None
            self._eig = cached_eigen(self.bundle, cache)
        return self._eig

    def family(self, sign: int):
        from .approx import build_family
        return build_family(sign, self.cfg["family"]["k"], self.eig, self.bundle)

    def manifest(self, command: str) -> dict:
        return {"command": command, "config": self.cfg, "config_hash": config_hash(self.cfg),
                "grid_key": self.grid.key, "seeds": {},
                "versions": {"threshold_inls": __version__, "numpy": np.__version__,
                             "scipy": scipy.__version__, "python": platform.python_version()}}


# ---------------------------------------------------------------- commands

def cmd_ground_state(ctx: Context) -> tuple[dict, bool]:
    from .groundstate import elliptic_residual, kernel_residuals, pohozhaev_residual, sharp_inequality_check

    b = ctx.bundle
    rep = {"grad_norm_sq_W": b.grad_norm_sq, "energy_W": b.energy_W,
           "pohozhaev_residual": pohozhaev_residual(b),
           "elliptic_residual": elliptic_residual(ctx.params, ctx.grid),
           "kernel_residuals": kernel_residuals(b),
           "sharp_ratio_W": sharp_inequality_check(b.W, b)}
    print(f"pohozhaev residual: {rep['pohozhaev_residual']:.3e}")
    ok = rep["pohozhaev_residual"] <= 1e-5 and abs(rep["sharp_ratio_W"] - 1) <= 1e-6
    return rep, ok


def cmd_spectrum(ctx: Context) -> tuple[dict, bool]:
    from .spectral import spectrum_scan

    eig = ctx.eig
    rep = {"e0": eig.e0, "residual_plus": eig.residual_plus, "sign_convention_ok": eig.sign_convention_ok}
    if ctx.cfg["spectrum"]["scan"]:
        rep["scan"] = spectrum_scan(ctx.bundle, eig.e0)
    save_eigen(ctx.out / "eigen.csv", eig, ctx.params)
    print(f"e0 = {eig.e0:.10g}  residual = {eig.residual_plus:.2e}")
    return rep, bool(eig.residual_plus <= 1e-6 and eig.sign_convention_ok)


def cmd_build_wa(ctx: Context) -> tuple[dict, bool]:
    from .approx import residual_slope, t_of_q

    sign = ctx.cfg["family"]["sign"]
    fam = ctx.family(sign)
    save_family(ctx.out / "family.csv", fam, ctx.params)
    rows = []
    ok = True
    for k in range(1, fam.k + 1):
        sub = fam.truncated(k)
        t0 = t_of_q(sub, sub.q_radius)
        slope = residual_slope(sub, t0, 3.0 / fam.e0)
        target = -(k + 1) * fam.e0
        rel = abs(slope - target) / abs(target)
        rows.append({"k": k, "slope": slope, "target": target, "rel_err": rel})
        print(f"k={k}  slope={slope:.6f}  target={target:.6f}  rel={rel:.3%}")
        if k <= 3:
            ok &= rel <= 0.07
    return {"e0": fam.e0, "q_radius": fam.q_radius, "slopes": rows, "provenance": fam.provenance}, ok


def _initial_data(ctx: Context, kind: str):
    from .approx import initial_data_Wpm
    ec = ctx.cfg["evolve"]
    if kind == "w":
        return ctx.bundle.W, 0.0
    if kind == "file":
        u, _, _ = load_field(ec["field"], ctx.grid)
        return u, 0.0
    sign = -1 if kind == "wminus" else 1
    fam = ctx.family(sign)
    q = min(ctx.cfg["family"]["q_start"], fam.q_radius)
    t0 = -math.log(q) / fam.e0
    return initial_data_Wpm(sign, t0, fam), t0


def cmd_evolve(ctx: Context) -> tuple[dict, bool]:
    from .evolution import integrate, sponge_profile

    ec = ctx.cfg["evolve"]
    u0, t0 = _initial_data(ctx, ec["data"])
    a, b = parse_span(ec["t_span"])
    sponge = sponge_profile(ctx.grid) if ec["sponge"] else None
    traj = integrate(u0, (t0 + a, t0 + b), ec["dt"], bundle=ctx.bundle, diag_stride=ec["diag_stride"],
                     snapshot_stride=ec["snapshot_stride"] or None, sponge=sponge)
    cols = ("t", "energy", "mass", "grad_norm_sq", "d_u")
    write_table(ctx.out / "trajectory.csv", {c: traj.column(c) for c in cols},
                {"stop_reason": traj.stop_reason, "t0": t0})
    save_field(ctx.out / "final.csv", traj.final, ctx.params, {"t": float(traj.diag[-1]["t"])})
    e = traj.column("energy")
    du = traj.column("d_u")
    rep = {"stop_reason": traj.stop_reason, "t0": t0, "n_records": len(traj.diag),
           "energy_drift": float(np.max(np.abs(e - e[0])) / max(1.0, abs(e[0]))),
           "d_u_monotone_decreasing": bool(np.all(np.diff(du) < 0))}
    print(f"stop: {traj.stop_reason}  records: {len(traj.diag)}  energy drift: {rep['energy_drift']:.2e}")
    ok = traj.stop_reason == "time_limit"
    if ec["data"] == "wminus" and b > a:
        ok &= rep["d_u_monotone_decreasing"]
    return rep, ok


def cmd_modulate(ctx: Context) -> tuple[dict, bool]:
    from .modulation import decompose

    path = ctx.cfg["modulate"]["field"]
    if not path:
        raise ConfigError("modulate.field", "a stored field is required")
    u, _, _ = load_field(path, ctx.grid)
    st = decompose(u, ctx.bundle)
    rep = {"theta": st.theta, "mu": st.mu, "beta": st.beta, "d_u": st.d_u, "valid": st.valid,
           "u_tilde_norm": st.u_tilde_norm, "iterations": st.iterations}
    print(f"theta={st.theta:.6g} mu={st.mu:.6g} beta={st.beta:.3e} valid={st.valid}")
    return rep, st.valid


def cmd_virial(ctx: Context) -> tuple[dict, bool]:
    from .evolution import Stepper
    from .virial import VirialConfig, profile_legality, virial_V, virial_second_identity

    vc = ctx.cfg["virial"]
    cfg = VirialConfig(vc["R"])
    u0, _ = _initial_data(ctx, vc["data"])
    st = Stepper(ctx.params, ctx.grid, vc["dt"])
    us = [u0.values]
    for _ in range(vc["steps"]):
        us.append(st.step(us[-1]))
    V = np.array([virial_V(RadialField(ctx.grid, x), cfg) for x in us])
    mid = vc["steps"] // 2
    k = max(mid // 2, 1)
    dd = (V[mid + k] - 2 * V[mid] + V[mid - k]) / (k * vc["dt"]) ** 2
    vi = virial_second_identity(RadialField(ctx.grid, us[mid]), cfg, ctx.bundle)
    err = abs(dd - vi["identity"])
    rep = {"profile": profile_legality(), "second_difference": dd, "identity": vi["identity"],
           "A_R": vi["A_R"], "d_u": vi["d_u"], "side": vi["side"], "abs_error": err,
           "tolerance": 1e-4 * vc["R"] ** 2}
    print(f"second difference {dd:.6g}  identity {vi['identity']:.6g}  error {err:.2e}")
    return rep, err <= rep["tolerance"]


def cmd_lorentz(ctx: Context) -> tuple[dict, bool]:
    from .lorentz import LorentzSpec, lorentz_norm

    lc = ctx.cfg["lorentz"]
    u = load_field(lc["field"], ctx.grid)[0] if lc["field"] else ctx.bundle.W
    rows = []
    for r_exp, rho in lc["pairs"]:
        try:
            spec = LorentzSpec(float(r_exp), math.inf if rho in ("inf", math.inf) else float(rho))
        except ValueError as exc:
            raise ConfigError("lorentz.pairs", str(exc)) from exc
        val = lorentz_norm(u, spec)
        rows.append({"r": spec.r_exp, "rho": str(spec.rho_exp), "norm": val})
        print(f"L^({spec.r_exp:g},{spec.rho_exp:g}) = {val:.10g}")
    return {"norms": rows}, True


COMMANDS = {"ground-state": cmd_ground_state, "spectrum": cmd_spectrum, "build-wa": cmd_build_wa,
            "evolve": cmd_evolve, "modulate": cmd_modulate, "virial": cmd_virial, "lorentz": cmd_lorentz}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="threshold-inls", description=__doc__.splitlines()[0])
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config")
        sp.add_argument("--d", type=int)
        sp.add_argument("--b", type=float)
        sp.add_argument("--n-cells", type=int)
        sp.add_argument("--r-max", type=float)
        sp.add_argument("--out")
        sp.add_argument("--check", action="store_true", help="exit 4 if the command's checks fail")
        if name == "evolve":
            sp.add_argument("--data", choices=["w", "wminus", "wplus", "file"])
            sp.add_argument("--t-span")
            sp.add_argument("--dt", type=float)
            sp.add_argument("--field")
        if name in ("modulate", "lorentz"):
            sp.add_argument("--field")
        if name == "virial":
            sp.add_argument("--R", type=float)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    cmd = args.command
    overrides = {("problem", "d"): args.d, ("problem", "b"): args.b, ("grid", "n_cells"): args.n_cells,
                 ("grid", "r_max"): args.r_max, ("output", "dir"): args.out}
    if cmd == "evolve":
        overrides.update({("evolve", "data"): args.data, ("evolve", "t_span"): args.t_span,
                          ("evolve", "dt"): args.dt, ("evolve", "field"): args.field})
    if cmd in ("modulate", "lorentz"):
        overrides[(cmd, "field")] = args.field
    if cmd == "virial":
        overrides[("virial", "R")] = args.R
    try:
        cfg = resolve_config(load_config(args.config), overrides)
        out = Path(cfg["output"]["dir"])
        ctx = Context(cfg, out)
    except (ConfigError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "manifest.json", ctx.manifest(cmd))
    try:
        report, ok = COMMANDS[cmd](ctx)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    write_json(out / f"{cmd}.json", {"command": cmd, "ok": bool(ok), "report": report})
    if args.check and not ok:
        print("check failed", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
