import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cavityrb.mesh import (ParameterBox, ParameterPoint, build_uniform_mesh, jacobian,
                           map_to_original, write_vtk)


@pytest.mark.parametrize("n, nv, nt", [(2, 9, 8), (50, 2601, 5000)])
def test_counts(n, nv, nt):
    mesh = build_uniform_mesh(n)
    assert mesh.n_vertices == nv
    assert mesh.n_triangles == nt


def test_total_area_and_positive_orientation():
    mesh = build_uniform_mesh(16)
    areas = mesh.signed_areas()
    assert np.all(areas > 0)
    assert abs(areas.sum() - 1.0) < 1e-14


@pytest.mark.parametrize("bad", [1, 0, -3, 2.5])
def test_rejects_too_coarse(bad):
    with pytest.raises(ValueError):
        build_uniform_mesh(bad)


def test_same_diagonal_in_every_cell():
    mesh = build_uniform_mesh(5)
    v = mesh.vertices[mesh.triangles]
    # every triangle contains the segment from its cell's lower-left to upper-right corner
    lo = v.min(axis=1)
    hi = v.max(axis=1)
    for tri, a, b in zip(v, lo, hi):
        assert any(np.allclose(p, a) for p in tri) and any(np.allclose(p, b) for p in tri)


def test_boundary_tags():
    mesh = build_uniform_mesh(6)
    for side, axis, val in (("left", 0, 0.0), ("right", 0, 1.0), ("bottom", 1, 0.0), ("top", 1, 1.0)):
        edges = mesh.edges[mesh.boundary_edges[side]]
        assert len(edges) == 6
        assert np.all(mesh.vertices[edges][..., axis] == val)
    assert len(mesh.boundary_vertices()) == 4 * 6


@pytest.mark.parametrize("point, height, expected", [
    ((0.5, 0.25), 1.0, (0.5, 0.25)),
    ((1.0, 1.0), 2.0, (1.0, 2.0)),
    ((0.3, 0.8), 0.5, (0.3, 0.4)),
])
def test_map_to_original(point, height, expected):
    assert np.allclose(map_to_original(point, height), expected, atol=1e-15)


@pytest.mark.parametrize("height", [1.0, 2.0, 0.5])
def test_jacobian(height):
    J, det = jacobian(height)
    assert np.array_equal(J, np.diag([1.0, height]))
    assert det == height


def test_identity_map_at_unit_height():
    mesh = build_uniform_mesh(7)
    assert np.array_equal(map_to_original(mesh.vertices, 1.0), mesh.vertices)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 5.0))
def test_area_ratio_is_determinant(height):
    mesh = build_uniform_mesh(4)
    _, det = jacobian(height)
    ratio = mesh.signed_areas(height) / mesh.signed_areas(1.0)
    assert np.allclose(ratio, det, rtol=0, atol=1e-14 * max(1.0, det))
    assert abs(mesh.signed_areas(height).sum() - height) < 1e-13 * max(1.0, height)


def test_parameter_validation():
    with pytest.raises(ValueError):
        ParameterPoint(-1.0, 1.0)
    with pytest.raises(ValueError):
        ParameterPoint(1e3, 0.0)
    box = ParameterBox((1e3, 1e4), (0.5, 2.0))
    assert box.contains(ParameterPoint(5e3, 1.0))
    assert not box.contains(ParameterPoint(2e4, 1.0))
    assert np.allclose(box.scaled(ParameterPoint(1e4, 0.5)), [1.0, 0.0])


def test_grid_and_sample_reproducible():
    box = ParameterBox((1e3, 1e4), (0.5, 2.0))
    g = box.grid(4, 3)
    assert len(g) == 12 and g[0].as_tuple() == (1e3, 0.5) and g[-1].as_tuple() == (1e4, 2.0)
    a = box.sample(5, np.random.default_rng(3))
    b = box.sample(5, np.random.default_rng(3))
    assert [m.as_tuple() for m in a] == [m.as_tuple() for m in b]
    assert all(box.contains(m) for m in a)


def test_vtk_export(tmp_path):
    mesh = build_uniform_mesh(3)
    path = tmp_path / "m.vtk"
    write_vtk(path, mesh, 2.0, {"t": np.arange(mesh.n_vertices, dtype=float),
                                "u": np.ones((mesh.n_vertices, 2))})
    text = path.read_text()
    assert text.startswith("# vtk DataFile Version 3.0")
    assert f"POINTS {mesh.n_vertices} double" in text
    assert f"CELLS {mesh.n_triangles} {4 * mesh.n_triangles}" in text
    assert "SCALARS t double 1" in text and "VECTORS u double" in text
