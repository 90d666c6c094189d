"""Plain-text container for fields, eigenpairs and families.

Layout: header lines ``# key: <json>`` followed by a CSV table written with
'%.17g' so that values round-trip exactly.  The header always carries the grid
descriptor and the parameters, enough to rebuild the grid on load.
"""
from __future__ import annotations

import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .grid import GridMismatchError, Params, RadialField, RadialGrid, make_grid

FORMAT_VERSION = 1


def _dump_header(meta: dict) -> str:
    return "".join(f"# {k}: {json.dumps(v, sort_keys=True)}\n" for k, v in meta.items())


def atomic_write(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_table(path, columns: dict, meta: dict) -> None:
    names = list(columns)
    data = np.column_stack([np.asarray(columns[c], dtype=float) for c in names])
    buf = io.StringIO()
    buf.write(_dump_header({"format": FORMAT_VERSION, **meta}))
    buf.write(",".join(names) + "\n")
    np.savetxt(buf, data, fmt="%.17g", delimiter=",")
    atomic_write(path, buf.getvalue())


def read_table(path) -> tuple[dict, dict]:
    meta = {}
    with open(path) as fh:
        lines = fh.read().splitlines()
    body = []
    for ln in lines:
        if ln.startswith("# "):
            k, _, v = ln[2:].partition(": ")
            meta[k] = json.loads(v)
        else:
            body.append(ln)
    names = body[0].split(",")
    arr = np.loadtxt(io.StringIO("\n".join(body[1:])), delimiter=",", ndmin=2)
    if arr.size == 0:
        arr = np.zeros((0, len(names)))
    return meta, {n: arr[:, i] for i, n in enumerate(names)}


def grid_meta(params: Params, grid: RadialGrid) -> dict:
    return {"params": {"d": params.d, "b": params.b}, "grid": grid.descriptor(), "grid_key": grid.key}


def grid_from_meta(meta: dict) -> tuple[Params, RadialGrid]:
    p = Params(int(meta["params"]["d"]), float(meta["params"]["b"]))
    g = meta["grid"]
    grid = make_grid(p, g["n_cells"], g["r_max"], g["stretch"], g["outer_bc"])
    if "grid_key" in meta and grid.key != meta["grid_key"]:
        raise GridMismatchError("stored grid key does not match the rebuilt grid")
    return p, grid


def save_field(path, u: RadialField, params: Params, extra: dict | None = None) -> None:
    meta = {"kind": "field", **grid_meta(params, u.grid), **(extra or {})}
    write_table(path, {"r": u.grid.r, "re": u.values.real, "im": u.values.imag}, meta)


def load_field(path, grid: RadialGrid | None = None) -> tuple[RadialField, Params, dict]:
    meta, cols = read_table(path)
    params, g = grid_from_meta(meta)
    if grid is not None:
        if not grid.same_as(g):
            raise GridMismatchError("field was stored on a different grid")
        g = grid
    return RadialField(g, cols["re"] + 1j * cols["im"]), params, meta


def save_eigen(path, eig, params: Params) -> None:
    meta = {"kind": "eigen", **grid_meta(params, eig.grid), "e0": eig.e0,
            "residual_plus": eig.residual_plus, "sign_convention_ok": eig.sign_convention_ok,
            "info": {k: v for k, v in eig.info.items() if isinstance(v, (int, float, str, bool))}}
    write_table(path, {"r": eig.grid.r, "Y1": eig.Y1.real, "Y2": eig.Y2.real}, meta)


def load_eigen(path, grid: RadialGrid | None = None):
    from .spectral import EigenBundle

    meta, cols = read_table(path)
    params, g = grid_from_meta(meta)
    if grid is not None:
        if not grid.same_as(g):
            raise GridMismatchError("eigenpair was stored on a different grid")
        g = grid
    return EigenBundle(float(meta["e0"]), RadialField(g, cols["Y1"] + 0j), RadialField(g, cols["Y2"] + 0j),
                       float(meta["residual_plus"]), bool(meta["sign_convention_ok"]), dict(meta.get("info", {})))


def save_family(path, fam, params: Params) -> None:
    cols = {"r": fam.grid.r}
    for j, P in enumerate(fam.Phi, start=1):
        cols[f"Phi{j}_re"] = P.re
        cols[f"Phi{j}_im"] = P.im
    prov = {k: v for k, v in fam.provenance.items() if k != "grid_key"}
    meta = {"kind": "family", **grid_meta(params, fam.grid), "a": fam.a, "k": fam.k, "e0": fam.e0,
            "q_radius": fam.q_radius, "provenance": prov}
    write_table(path, cols, meta)


def load_family(path, bundle):
    from .approx import ApproxFamily
    from .operators import PairField

    meta, cols = read_table(path)
    _, g = grid_from_meta(meta)
    if not bundle.grid.same_as(g):
        raise GridMismatchError("family was stored on a different grid")
    Phi = [PairField(bundle.grid, cols[f"Phi{j}_re"], cols[f"Phi{j}_im"]) for j in range(1, meta["k"] + 1)]
    return ApproxFamily(float(meta["a"]), int(meta["k"]), Phi, float(meta["e0"]), float(meta["q_radius"]),
                        bundle, dict(meta["provenance"]))


def cached_eigen(bundle, cache_dir: str | os.PathLike | None):
    """compute_eigen with an optional on-disk cache keyed by grid and b."""
    from .spectral import compute_eigen

    if cache_dir is None:
        return compute_eigen(bundle)
    p = bundle.params
    path = Path(cache_dir) / f"eigen_{bundle.grid.key}_b{p.b!r}.csv"
    if path.exists():
        return load_eigen(path, bundle.grid)
    eig = compute_eigen(bundle)
    save_eigen(path, eig, p)
    return eig
