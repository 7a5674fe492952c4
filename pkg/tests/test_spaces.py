from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cavityrb.mesh import ParameterPoint, build_uniform_mesh
from cavityrb.spaces import QUADRATURE, FESolution, TaylorHoodSpace


def _zero(space):
    return FESolution(ParameterPoint(1e3, 1.0), np.zeros(2 * space.n_p2), np.zeros(space.n_p2),
                      np.zeros(space.n_p1))


@lru_cache(maxsize=1)
def _small_space():
    return TaylorHoodSpace(build_uniform_mesh(3))


def test_layout_counts(space4):
    mesh = space4.mesh
    assert space4.n_p2 == mesh.n_vertices + mesh.n_edges
    assert space4.layout.n_velocity == 2 * space4.n_p2
    assert space4.n_p1 == mesh.n_vertices


def test_dirichlet_sets(space4):
    lay = space4.layout
    pts = space4.p2_points
    on_boundary = (np.isclose(pts[:, 0], 0) | np.isclose(pts[:, 0], 1)
                   | np.isclose(pts[:, 1], 0) | np.isclose(pts[:, 1], 1))
    n2 = space4.n_p2
    assert set(lay.velocity_fixed) == set(np.flatnonzero(on_boundary)) | set(n2 + np.flatnonzero(on_boundary))
    walls = np.isclose(pts[:, 0], 0) | np.isclose(pts[:, 0], 1)
    assert set(lay.temperature_fixed) == set(np.flatnonzero(walls))


def test_quadrature_integrates_quintics():
    pts, w = QUADRATURE
    assert abs(w.sum() - 0.5) < 1e-15
    # exact integral of x^a y^b over the unit reference triangle: a! b! / (a+b+2)!
    from math import factorial
    for a in range(6):
        for b in range(6 - a):
            exact = factorial(a) * factorial(b) / factorial(a + b + 2)
            assert abs(w @ (pts[:, 0] ** a * pts[:, 1] ** b) - exact) < 1e-15


def test_x_norm_examples(space4):
    zero = _zero(space4)
    assert space4.x_norm(zero, include_lift=False) == 0.0
    # zero fluctuation: the lifted temperature 1 - x has unit gradient norm
    assert abs(space4.x_norm(zero) - 1.0) < 1e-13


def test_x_norm_homogeneous(space4, rng):
    u, t, p = (rng.standard_normal(2 * space4.n_p2), rng.standard_normal(space4.n_p2),
               rng.standard_normal(space4.n_p1))
    a = space4.x_norm_vectors(u, t, p)
    assert abs(space4.x_norm_vectors(2 * u, 2 * t, 2 * p) - 2 * a) < 1e-12 * a


def test_x_norm_triangle_inequality(space4, rng):
    vec = lambda: rng.standard_normal(space4.layout.size)
    free = space4.free
    for _ in range(10):
        a, b = np.zeros(space4.layout.size), np.zeros(space4.layout.size)
        a[free], b[free] = vec()[free], vec()[free]
        assert space4.x_norm_of_vector(a + b) <= space4.x_norm_of_vector(a) + space4.x_norm_of_vector(b) + 1e-12
        assert space4.x_norm_of_vector(a) > 0


def test_projector_reproduces_p1(space4):
    f = space4.interpolate(lambda x, y: 3 * x - 2 * y + 0.5)
    assert np.abs(space4.vms_fluctuation(f)).max() < 1e-13


def test_projector_on_edge_bubble(space4):
    nv = space4.mesh.n_vertices
    f = np.zeros(space4.n_p2)
    f[nv + 3] = 1.0  # quadratic bubble of one edge: zero at every vertex
    proj = space4.vms_project(f)
    assert np.array_equal(proj[:nv], f[:nv])
    assert np.abs(proj).max() == 0.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_projector_idempotent(seed):
    space = _small_space()
    f = np.random.default_rng(seed).standard_normal(space.n_p2)
    p = space.vms_project(f)
    assert np.abs(space.vms_project(p) - p).max() < 1e-13
    vel = np.random.default_rng(seed + 1).standard_normal(2 * space.n_p2)
    pv = space.vms_project(vel)
    assert np.abs(space.vms_project(pv) - pv).max() < 1e-13


def test_lift_examples(space4):
    raw = space4.interpolate(lambda x, y: 1 - x)
    assert np.abs(space4.apply_lift(raw)).max() < 1e-15
    assert np.array_equal(space4.remove_lift(np.zeros(space4.n_p2)), space4.lift)


def test_lift_round_trip(space4, rng):
    fluct = rng.standard_normal(space4.n_p2)
    fluct[space4.layout.temperature_fixed] = 0.0
    raw = space4.remove_lift(fluct)
    assert np.abs(space4.apply_lift(raw) - fluct).max() < 1e-14


def test_lift_rejects_wrong_wall_values(space4):
    raw = space4.lift.copy()
    raw[space4.layout.temperature_fixed[0]] += 1e-6
    with pytest.raises(ValueError):
        space4.apply_lift(raw)


def test_pressure_mean_removal(space4, rng):
    p = rng.standard_normal(space4.n_p1)
    assert abs(space4.pressure_mean(space4.remove_pressure_mean(p))) < 1e-14
    Z = space4.zero_mean_basis()
    assert np.abs(space4.pressure_mass_vector @ Z).max() < 1e-14


def test_projector_stability_constant_finite(space4, rng):
    free = space4.layout.temperature_free
    worst = 0.0
    for _ in range(20):
        f = np.zeros(space4.n_p2)
        f[free] = rng.standard_normal(len(free))
        worst = max(worst, space4.h1_seminorm(space4.vms_fluctuation(f)) / space4.h1_seminorm(f))
    assert np.isfinite(worst) and worst > 0


def test_vtk_fields(space4, tmp_path):
    path = tmp_path / "f.vtk"
    space4.write_vtk(path, _zero(space4))
    text = path.read_text()
    assert "VECTORS velocity double" in text and "SCALARS temperature double 1" in text
