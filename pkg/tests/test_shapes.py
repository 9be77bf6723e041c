from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jacfield import shapes


def test_grid_counts():
    g = shapes.grid(4, 3)
    assert g.n_vertices == 20 and g.n_triangles == 24
    assert g.total_area == pytest.approx(1.0)


def test_icosphere_and_torus_topology():
    s = shapes.icosphere(2, radius=1.5)
    np.testing.assert_allclose(np.linalg.norm(s.vertices, axis=1), 1.5, rtol=1e-12)
    assert s.euler_characteristic == 2
    assert (s.n_vertices, s.n_triangles) == (162, 320)
    t = shapes.torus(2.0, 0.5, 20, 10)
    assert t.euler_characteristic == 0 and not t.boundary_loops
    assert t.total_area == pytest.approx(4 * np.pi ** 2 * 2.0 * 0.5, rel=0.05)


def test_half_cylinder_is_disk():
    c = shapes.cylinder_patch()
    assert c.euler_characteristic == 1 and len(c.boundary_loops) == 1


def test_loop_subdivision_counts_and_indices():
    m = shapes.icosphere(1)
    s = shapes.loop_subdivide(m)
    assert s.n_triangles == 4 * m.n_triangles
    assert s.n_vertices == m.n_vertices + len(m.edges)
    assert s.euler_characteristic == 2
    # original vertices keep their index and move only slightly
    moved = np.linalg.norm(s.vertices[:m.n_vertices] - m.vertices, axis=1)
    assert moved.max() < 0.2
    with pytest.raises(ValueError):
        shapes.loop_subdivide(shapes.grid(2, 2))


def test_loop_subdivision_regular_vertex_rule():
    """Valence-6 even vertices use beta = 1/16."""
    t = shapes.torus(1.0, 0.4, 12, 6)
    s = shapes.loop_subdivide(t)
    nbrs = {i: set() for i in range(t.n_vertices)}
    for a, b in t.edges:
        nbrs[a].add(b)
        nbrs[b].add(a)
    i = 0
    assert len(nbrs[i]) == 6
    expect = 0.625 * t.vertices[i] + t.vertices[list(nbrs[i])].sum(0) / 16
    np.testing.assert_allclose(s.vertices[i], expect, atol=1e-14)


def test_decimation_halves_and_stays_valid():
    m = shapes.bumpy_blob(2)
    d = shapes.decimate(m, m.n_triangles // 2)
    assert d.n_triangles <= m.n_triangles // 2 + 2
    assert d.euler_characteristic == 2
    # surface stays close to the original
    _, _, pts = shapes.closest_points(m, d.vertices)
    assert np.linalg.norm(pts - d.vertices, axis=1).max() < 0.1 * m.bbox_diagonal


def test_closest_points_on_surface(rng):
    m = shapes.bumpy_blob(1)
    tri = rng.integers(m.n_triangles, size=30)
    bary = rng.dirichlet(np.ones(3), size=30)
    q = np.einsum("nk,nkd->nd", bary, m.vertices[m.triangles[tri]])
    t, b, p = shapes.closest_points(m, q)
    np.testing.assert_allclose(p, q, atol=1e-12)
    np.testing.assert_allclose(b.sum(1), 1.0, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_closest_point_beats_dense_sampling(seed):
    rng = np.random.default_rng(seed)
    m = shapes.icosphere(1)
    q = rng.normal(size=(1, 3)) * 1.5
    _, _, p = shapes.closest_points(m, q)
    d = np.linalg.norm(p - q)
    # brute force over a barycentric lattice of every triangle
    k = 24
    i, j = np.meshgrid(np.arange(k + 1), np.arange(k + 1))
    keep = i + j <= k
    u, v = i[keep] / k, j[keep] / k
    bary = np.column_stack([1 - u - v, u, v])
    samples = np.einsum("sk,tkd->tsd", bary, m.vertices[m.triangles]).reshape(-1, 3)
    brute = np.linalg.norm(samples - q, axis=1).min()
    assert d <= brute + 1e-12


def test_farthest_points_deterministic():
    pts = shapes.bumpy_blob(2).vertices
    a = shapes.farthest_point_indices(pts, 6)
    assert np.array_equal(a, shapes.farthest_point_indices(pts, 6))
    assert len(set(a.tolist())) == 6
