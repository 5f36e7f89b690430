import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffincl import (
    EnergyContext, F0, MinimizeOptions, Strategy, add_quadratic, build_mesh, bump, bump_geometry, energy,
    energy_difference, find_stability_intervals, gamma_truncate, inclusion_residual, minimize_over_ball,
    quadratic_model, select_subgradient, subgradient, truncate, zero_model,
)
from diffincl.energy_minimizer import _descend


@pytest.fixture(scope="module")
def mesh():
    return build_mesh(1, (0.0, 1.0), 256)


@pytest.fixture(scope="module")
def f0_level(mesh):
    A = add_quadratic(F0(), 1.0)
    iv = find_stability_intervals(A, (1e-5, 1.0), 1)[0]
    return EnergyContext(mesh, truncate(A, iv.eta), 1.0), iv


def test_energy_of_zero(mesh):
    ctx = EnergyContext(mesh, add_quadratic(F0(), 1.0), 1.0)
    assert energy(ctx, np.zeros(mesh.size)) == 0.0


def test_energy_positive_without_nonlinearity(mesh):
    ctx = EnergyContext(mesh, zero_model(), 0.5)
    u = np.random.default_rng(1).normal(size=mesh.size)
    from diffincl import h01_norm_sq, l2_norm_sq
    assert energy(ctx, u) == pytest.approx(0.5 * h01_norm_sq(mesh, u) + 0.25 * l2_norm_sq(mesh, u))
    assert energy(ctx, u) > 0


def test_context_requires_positive_k(mesh):
    with pytest.raises(ValueError):
        EnergyContext(mesh, zero_model(), 0.0)


@given(st.integers(0, 2 ** 31))
@settings(max_examples=30, deadline=None)
def test_energy_difference_consistent(seed):
    m = build_mesh(1, (0, 1), 64)
    ctx = EnergyContext(m, truncate(add_quadratic(F0(), 1.0), 0.2), 1.0)
    rng = np.random.default_rng(seed)
    u, v = rng.uniform(-0.1, 0.3, (2, m.size))
    assert energy_difference(ctx, u, v) == pytest.approx(energy(ctx, v) - energy(ctx, u), rel=1e-9, abs=1e-15)


def test_subgradient_zero_strategy(mesh):
    ctx = EnergyContext(mesh, add_quadratic(F0(), 1.0), 1.0)
    g = subgradient(ctx, np.zeros(mesh.size), Strategy.ZERO_IF_CONTAINS_ZERO)
    assert np.all(g == 0)


def test_subgradient_smooth_quadratic(mesh):
    ctx = EnergyContext(mesh, quadratic_model(1.0), 2.0)
    u = np.random.default_rng(3).uniform(0.1, 1.0, mesh.size)
    expected = mesh.stiffness @ u + 2.0 * mesh.weights * u - mesh.weights * u
    assert np.allclose(subgradient(ctx, u), expected)


def test_subgradient_at_truncation_point(mesh):
    eta = 0.3
    A = truncate(add_quadratic(zero_model(), -2.0), eta)  # grad -2 eta below eta
    lo, hi = A.grad(np.array([eta]))
    for strat in Strategy:
        xi = select_subgradient(lo, hi, strat)
        assert min(0.0, lo[0]) <= xi[0] <= max(0.0, hi[0])


def test_gamma_truncate():
    assert np.array_equal(gamma_truncate([-1.0, 0.5, 2.0], 1.0), [0.0, 0.5, 1.0])
    u = np.random.default_rng(0).normal(size=50)
    once = gamma_truncate(u, 0.4)
    assert np.array_equal(gamma_truncate(once, 0.4), once)
    with pytest.raises(ValueError):
        gamma_truncate(u, 0.0)


def test_residual_at_zero(mesh):
    ctx = EnergyContext(mesh, add_quadratic(F0(), 1.0), 1.0)
    assert inclusion_residual(ctx, np.zeros(mesh.size)) == 0.0


def test_residual_smooth_matches_subgradient(mesh):
    ctx = EnergyContext(mesh, quadratic_model(0.5), 1.0)
    u = np.random.default_rng(5).uniform(0.1, 1.0, mesh.size)
    w = mesh.weights
    g = subgradient(ctx, u)
    r = (mesh.stiffness @ u) / w + u
    expected = np.sqrt(w @ ((g / w) ** 2)) / max(np.sqrt(w @ (r * r)), np.sqrt(w @ ((0.5 * u) ** 2)))
    assert inclusion_residual(ctx, u) == pytest.approx(expected, rel=1e-12)


def test_minimize_zero_model(mesh):
    ctx = EnergyContext(mesh, zero_model(), 1.0)
    rec = minimize_over_ball(ctx, 0.7)
    assert rec.energy == 0.0 and rec.linf == 0.0


def test_minimize_level_negative_and_localized(mesh, f0_level):
    ctx, iv = f0_level
    geom = bump_geometry(mesh)
    rec = minimize_over_ball(ctx, iv.eta, delta=iv.delta, geometry=geom)
    assert rec.energy < 0
    assert rec.linf <= iv.eta
    assert rec.residual <= 1e-7
    assert rec.u.min() >= -1e-8 * iv.delta and rec.u.max() <= iv.delta * (1 + 1e-8)
    # multi-start result never above any start
    for s in (iv.delta, 0.5 * iv.delta, 1e-3):
        assert rec.energy <= energy(ctx, bump(mesh, geom, s))


def test_bump_energy_chain(mesh, f0_level):
    # small bumps of A = F0 + s^2/2 have negative energy where A(s) > L0 s^2
    ctx, _ = f0_level
    geom = bump_geometry(mesh)
    s = 1.1615e-3  # near a local max of A/s^2, see oscillation tests
    assert energy(ctx, bump(mesh, geom, s)) < 0


def test_descent_trace_monotone(mesh, f0_level):
    ctx, iv = f0_level
    geom = bump_geometry(mesh)
    u, E, res, its, ok, trace = _descend(ctx, bump(mesh, geom, iv.delta), iv.eta, MinimizeOptions(), None)
    tr = np.asarray(trace)
    assert np.all(np.diff(tr) <= 64 * np.finfo(float).eps * np.abs(tr[:-1]))
    assert ok


def test_workers_do_not_change_result(mesh, f0_level):
    ctx, iv = f0_level
    a = minimize_over_ball(ctx, iv.eta, delta=iv.delta)
    b = minimize_over_ball(ctx, iv.eta, delta=iv.delta, workers=3)
    assert np.array_equal(a.u, b.u) and a.energy == b.energy


def test_eta_must_be_positive(mesh):
    with pytest.raises(ValueError):
        minimize_over_ball(EnergyContext(mesh, zero_model(), 1.0), 0.0)
