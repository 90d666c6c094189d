from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from threshold_inls.evolution import integrate
from threshold_inls.grid import Params, RadialField, grad_norm_sq, make_grid
from threshold_inls.groundstate import energy, ground_state, rescale
from threshold_inls.modulation import (ModulationError, comparability_quantities, compactness_scale, decompose,
                                       max_pairwise_ratio, orthogonality_residuals, perturbation_corpus,
                                       project_to_energy_surface, track)

P3 = Params(3, 0.3)
BUNDLE = ground_state(P3, make_grid(P3, 1024))


def test_ground_state_decomposes_trivially():
    s = decompose(BUNDLE.W, BUNDLE)
    assert s.theta == pytest.approx(0.0, abs=1e-12)
    assert s.mu == pytest.approx(1.0, abs=1e-4)
    assert abs(s.beta) < 1e-8 and s.valid
    assert s.u_tilde_norm < 1e-4 * math.sqrt(BUNDLE.grad_norm_sq)


@settings(max_examples=15, deadline=None)
@given(theta=st.floats(-1.0, 1.0), mu=st.floats(0.5, 2.0))
def test_decomposition_inverts_the_symmetry(theta, mu):
    # rescale by [theta, mu]; the decomposition returns the pull-back [-theta, 1/mu]
    s = decompose(rescale(BUNDLE.W, theta, mu), BUNDLE)
    assert s.theta == pytest.approx(-theta, abs=1e-9)
    assert s.mu * mu == pytest.approx(1.0, rel=1e-3)
    F, _, _ = orthogonality_residuals(rescale(BUNDLE.W, theta, mu), P3, s.theta, math.log(s.mu))
    assert np.max(np.abs(F)) < 1e-8 * BUNDLE.grad_norm_sq


@settings(max_examples=10, deadline=None)
@given(phase=st.floats(-math.pi, math.pi), seed=st.integers(0, 1000))
def test_phase_rotation_shifts_theta_only(phase, seed):
    u = perturbation_corpus(BUNDLE, 1, seed=seed)[0]
    a = decompose(u, BUNDLE)
    b = decompose(u * np.exp(1j * phase), BUNDLE)
    assert math.remainder(b.theta - a.theta + phase, 2 * math.pi) == pytest.approx(0.0, abs=1e-8)
    assert b.mu == pytest.approx(a.mu, rel=1e-9)
    assert b.beta == pytest.approx(a.beta, abs=1e-10)


def test_zero_field_fails_to_decompose():
    with pytest.raises(ModulationError):
        decompose(BUNDLE.W * 0.0, BUNDLE)


def test_compactness_scale_follows_the_dilation():
    base = compactness_scale(BUNDLE.W, BUNDLE)
    assert compactness_scale(rescale(BUNDLE.W, 0.0, 2.0), BUNDLE) == pytest.approx(base / 2, rel=1e-3)
    assert compactness_scale(rescale(BUNDLE.W, 1.0, 1.0), BUNDLE) == pytest.approx(base, rel=1e-12)
    with pytest.raises(ValueError):
        compactness_scale(BUNDLE.W * 0.1, BUNDLE)


def test_corpus_lies_on_the_energy_surface():
    corpus = perturbation_corpus(BUNDLE, 20, seed=3)
    assert len(corpus) == 20
    sides = set()
    for u in corpus:
        assert energy(u, P3) == pytest.approx(BUNDLE.energy_W, rel=1e-9)
        gap = grad_norm_sq(u) - BUNDLE.grad_norm_sq
        assert abs(gap) < 0.5 * BUNDLE.delta0
        sides.add(np.sign(gap))
    assert sides == {-1.0, 1.0}


def test_projection_picks_the_requested_side():
    f = RadialField(BUNDLE.grid, BUNDLE.w * (1 + 0.05 * np.exp(-BUNDLE.grid.r ** 2)))
    lo = project_to_energy_surface(f, BUNDLE, -1)
    hi = project_to_energy_surface(f, BUNDLE, 1)
    assert grad_norm_sq(lo) < BUNDLE.grad_norm_sq < grad_norm_sq(hi)


def test_comparability_quantities_are_scale_free():
    u = perturbation_corpus(BUNDLE, 1, seed=11)[0]
    q = comparability_quantities(decompose(u, BUNDLE), BUNDLE)
    assert set(q) == {"beta", "v", "u_tilde", "d"}
    assert 1.0 <= max_pairwise_ratio(q) < math.inf
    assert max_pairwise_ratio({"a": 0.0, "b": 1.0}) == math.inf


def test_tracking_a_stationary_run():
    tr = integrate(BUNDLE.W, (0.0, 0.5), 1e-3, bundle=BUNDLE, snapshot_stride=100)
    rows = track(tr, BUNDLE)
    assert len(rows) == len(tr.snapshots)
    for row in rows:
        assert row["mu"] == pytest.approx(1.0, abs=1e-3)
        assert abs(row["theta"]) < 1e-3
