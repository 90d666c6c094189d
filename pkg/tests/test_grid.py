from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import gaussian_lebesgue_norm, grad_norm_sq_exact, sphere_area
from threshold_inls.grid import (GridMismatchError, ParameterError, Params, RadialField, grad_norm_sq, inner_h1,
                                 inner_l2, make_grid, mass, norm_l2_weighted, params_from_mapping,
                                 weighted_integral)

SETTINGS = settings(max_examples=25, deadline=None)


@pytest.mark.parametrize("d,b", [(2, 0.3), (6, 0.3), (3, 0.0), (3, 1.5), (4, 2.0), (3.5, 0.3)])
def test_params_rejects_out_of_range(d, b):
    with pytest.raises(ParameterError):
        Params(d, b)


@SETTINGS
@given(d=st.sampled_from([3, 4, 5]), frac=st.floats(0.01, 0.99))
def test_exponent_identities(d, frac):
    b = frac * min(2.0, d / 2.0)
    p = Params(d, b)
    assert p.alpha == pytest.approx((4 - 2 * b) / (d - 2))
    for res in p.scaling_residuals():
        assert abs(res) < 1e-12


def test_threshold_validity_window():
    assert Params(4, 0.3).threshold_valid
    assert Params(3, 0.3).threshold_valid
    assert Params(4, 0.9).threshold_valid
    assert not Params(3, 0.6).threshold_valid
    assert not Params(5, 0.9).threshold_valid


@pytest.mark.parametrize("d", [3, 4, 5])
def test_sphere_area_matches_closed_form(d):
    assert Params(d, 0.3).omega == pytest.approx(sphere_area(d), rel=1e-14)


@pytest.mark.parametrize("stretch", [None, "uniform", {"kind": "geomlin", "r_inner": 0.1, "r_outer": 50.0}])
def test_cell_measures_tile_the_ball(stretch):
    p = Params(3, 0.3)
    g = make_grid(p, 256, 40.0, stretch)
    assert np.all(np.diff(g.edges) > 0)
    assert np.all((g.r > g.edges[:-1]) & (g.r < g.edges[1:]))
    assert g.omega * g.w.sum() == pytest.approx(p.ball_volume * 40.0 ** 3, rel=1e-12)


@pytest.mark.parametrize("kwargs", [{"n_cells": 8}, {"n_cells": 64, "r_max": -1.0},
                                    {"n_cells": 64, "outer_bc": "neumann"},
                                    {"n_cells": 64, "stretch": "log"},
                                    {"n_cells": 64, "stretch": {"kind": "geomlin", "r_inner": 5, "r_outer": 1}}])
def test_make_grid_errors(kwargs):
    with pytest.raises(ParameterError):
        make_grid(Params(3, 0.3), **kwargs)


def test_grid_key_is_stable():
    p = Params(4, 0.3)
    assert make_grid(p, 128).key == make_grid(p, 128).key
    assert make_grid(p, 128).key != make_grid(p, 256).key
    assert make_grid(p, 128).same_as(make_grid(p, 128))


def test_mixing_grids_raises():
    p = Params(3, 0.3)
    a = RadialField(make_grid(p, 64), np.ones(64, complex))
    b = RadialField(make_grid(p, 128), np.ones(128, complex))
    with pytest.raises(GridMismatchError):
        a + b
    with pytest.raises(GridMismatchError):
        inner_h1(a, b)


@SETTINGS
@given(seed=st.integers(0, 10_000), d=st.sampled_from([3, 4, 5]))
def test_discrete_green_identity(seed, d):
    # (-Lap f, g)_{L2} = (grad f, grad g)_{L2} exactly for the flux-form Laplacian
    g = make_grid(Params(d, 0.3), 200, 30.0)
    rng = np.random.default_rng(seed)
    f = rng.normal(size=200) * np.exp(-g.r / 5)
    h = rng.normal(size=200) * np.exp(-g.r / 5)
    K = g.stiffness()
    lhs = g.omega * float(f @ (K @ h))
    assert lhs == pytest.approx(inner_h1(RadialField(g, f + 0j), RadialField(g, h + 0j)), rel=1e-12, abs=1e-12)
    assert abs((K - K.T)).max() < 1e-12


@SETTINGS
@given(theta=st.floats(-math.pi, math.pi), c=st.floats(0.1, 10.0))
def test_norms_are_phase_invariant_and_homogeneous(theta, c):
    p = Params(3, 0.3)
    g = make_grid(p, 128, 30.0)
    u = RadialField(g, np.exp(-g.r ** 2) * (1 + 0.5j))
    v = u * (c * np.exp(1j * theta))
    assert grad_norm_sq(v) == pytest.approx(c ** 2 * grad_norm_sq(u), rel=1e-12)
    assert mass(v) == pytest.approx(c ** 2 * mass(u), rel=1e-12)
    assert inner_l2(v, v) == pytest.approx(mass(v), rel=1e-12)


@pytest.mark.parametrize("d", [3, 4, 5])
def test_gaussian_integrals_against_closed_form(d):
    g = make_grid(Params(d, 0.3), 2048, 30.0)
    f = np.exp(-g.r ** 2)
    for q in (2.0, 3.0):
        got = weighted_integral(g, f, 0.0, q) ** (1 / q)
        assert got == pytest.approx(gaussian_lebesgue_norm(d, q), rel=1e-5)
    assert norm_l2_weighted(RadialField(g, f + 0j)) == pytest.approx(gaussian_lebesgue_norm(d, 2.0), rel=1e-5)


def test_weighted_integral_rejects_nonintegrable_weight():
    g = make_grid(Params(3, 0.3), 64)
    with pytest.raises(ValueError):
        weighted_integral(g, np.ones(64), -3.5, 2.0)


@pytest.mark.parametrize("d", [3, 4, 5])
def test_ground_state_gradient_norm_converges_to_quadrature(d):
    p = Params(d, 0.3)
    exact = grad_norm_sq_exact(d, 0.3)
    errs = []
    for n in (512, 1024, 2048):
        g = make_grid(p, n)
        W = RadialField(g, (1 + g.r ** 1.7 / ((d - 2) * (d - 0.3))) ** (-(d - 2) / 1.7) + 0j)
        errs.append(abs(grad_norm_sq(W) / exact - 1))
    assert errs[-1] < 5e-5
    assert errs[0] / errs[1] > 3.5 and errs[1] / errs[2] > 3.5


def test_params_from_mapping():
    p = params_from_mapping({"d": 4, "b": 0.3})
    assert (p.d, p.b) == (4, 0.3)
    with pytest.raises(ParameterError):
        params_from_mapping({"d": 7, "b": 0.3})
