import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from twolevel_ns.mesh import (MeshError, barycentric_coordinates, build_hierarchy,
                              build_rectangle_mesh, build_structured_mesh, check_conforming,
                              choose_fine_level_for_coupling, read_mesh, refine_uniform,
                              write_mesh)


def test_single_cell():
    m = build_structured_mesh(1)
    assert (m.n_vertices, m.n_triangles) == (4, 2)
    assert m.mesh_size_h == pytest.approx(math.sqrt(2.0), abs=1e-15)


def test_counts_n2():
    m = build_structured_mesh(2)
    assert (m.n_vertices, m.n_triangles) == (9, 8)


@pytest.mark.parametrize("n", [1, 3, 4, 7])
def test_structured_invariants(n):
    m = build_structured_mesh(n)
    assert m.n_vertices == (n + 1) ** 2
    assert m.n_triangles == 2 * n * n
    assert m.mesh_size_h == pytest.approx(math.sqrt(2.0) / n, rel=1e-14)
    assert np.all(m.signed_areas() > 0)
    assert abs(m.signed_areas().sum() - 1.0) < 1e-14
    assert check_conforming(m)
    on_boundary = np.isclose(m.vertices, 0.0).any(1) | np.isclose(m.vertices, 1.0).any(1)
    assert np.array_equal(on_boundary, m.boundary_vertex_flags)


def test_mesh_size_is_longest_edge():
    m = refine_uniform(build_structured_mesh(3))
    p = m.vertices[m.triangles]
    lengths = np.linalg.norm(p - np.roll(p, 1, axis=1), axis=2)
    assert m.mesh_size_h == lengths.max()


@pytest.mark.parametrize("bad", [0, -2, True])
def test_rejects_bad_n(bad):
    with pytest.raises(MeshError):
        build_structured_mesh(bad)


def test_refine_two_triangles():
    m = build_structured_mesh(1)
    f = refine_uniform(m)
    assert f.n_triangles == 8
    assert check_conforming(f)
    assert np.allclose(f.vertices[:m.n_vertices], m.vertices)


def test_children_quarter_area_and_nested():
    m = build_structured_mesh(3)
    f = refine_uniform(m)
    assert np.allclose(f.signed_areas(), m.signed_areas()[f.parent] / 4.0, rtol=1e-14)
    # every child vertex inside its parent's closure
    for k in range(3):
        lam = barycentric_coordinates(m, f.parent, f.vertices[f.triangles[:, k]])
        assert lam.min() >= -1e-12 and lam.max() <= 1 + 1e-12
    assert f.mesh_size_h == pytest.approx(m.mesh_size_h / 2, rel=1e-14)


def test_rectangle_mesh():
    m = build_rectangle_mesh(3, 2, (0.0, 2.0, -1.0, 0.5))
    assert abs(m.signed_areas().sum() - 3.0) < 1e-13
    assert check_conforming(m)
    assert check_conforming(refine_uniform(m))


def test_hierarchy_examples():
    assert len(build_hierarchy(2, 0).levels) == 1
    h = build_hierarchy(2, 2)
    assert h.finest.mesh_size_h == pytest.approx(h.levels[0].mesh_size_h / 4, rel=1e-14)
    assert build_hierarchy(4, 3).finest.n_triangles == 2 * 4 ** 2 * 4 ** 3


def test_hierarchy_parent_maps_total_and_consistent():
    h = build_hierarchy(2, 3)
    for k, pm in enumerate(h.parent_maps):
        assert len(pm) == h.levels[k + 1].n_triangles
        assert pm.min() >= 0 and pm.max() < h.levels[k].n_triangles
        assert np.bincount(pm).tolist() == [4] * h.levels[k].n_triangles
    anc = h.ancestor_map(0, 3)
    fine = h.levels[3]
    cen = fine.vertices[fine.triangles].mean(axis=1)
    lam = barycentric_coordinates(h.levels[0], anc, cen)
    assert lam.min() > 0


def test_ancestry_rejects_unrelated_meshes():
    with pytest.raises(MeshError):
        build_structured_mesh(4).ancestors_in(build_structured_mesh(2))


def test_coupling_rule():
    h4 = build_hierarchy(4, 3)
    assert choose_fine_level_for_coupling(h4.coarse_size, h4) == 2
    h2 = build_hierarchy(2, 2)
    assert choose_fine_level_for_coupling(h2.coarse_size, h2) == 1
    with pytest.raises(MeshError, match="too shallow"):
        choose_fine_level_for_coupling(0.25, build_hierarchy(4, 1))


@given(n=st.integers(1, 6), levels=st.integers(0, 2))
def test_every_level_conforming(n, levels):
    for m in build_hierarchy(n, levels).levels:
        assert check_conforming(m)
        assert abs(m.signed_areas().sum() - 1.0) < 1e-12


def test_conformity_audit_detects_broken_mesh():
    m = build_structured_mesh(2)
    tris = m.triangles.copy()
    tris[0] = tris[0, ::-1]  # flip orientation
    from twolevel_ns.mesh import _from_triangles
    bad = _from_triangles(m.vertices, tris, 0, m.bounds)
    assert not check_conforming(bad)


def test_mesh_roundtrip(tmp_path):
    m = refine_uniform(build_structured_mesh(2))
    p = tmp_path / "m.txt"
    write_mesh(m, p)
    head = p.read_text().splitlines()[0]
    assert head == f"vertices {m.n_vertices} triangles {m.n_triangles}"
    r = read_mesh(p)
    assert np.array_equal(r.vertices, m.vertices)
    assert np.array_equal(r.triangles, m.triangles)
    assert np.array_equal(r.boundary_vertex_flags, m.boundary_vertex_flags)


def test_immutable():
    m = build_structured_mesh(2)
    with pytest.raises(ValueError):
        m.vertices[0, 0] = 5.0
