from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jacfield.mesh import Mesh
from jacfield.operators import OperatorCache
from jacfield.poisson import (compute_jacobians, field_to_matrices, matrices_to_field,
                              poisson_adjoint, poisson_residual, poisson_solve)

from conftest import smooth_map, unit_square


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def dense_layer(cache):
    """The solve as an explicit V x 2T matrix, built with dense linear algebra."""
    G = cache.grad.toarray()
    A = np.diag(cache.mass)
    L = G.T @ A @ G
    keep = np.arange(cache.n_vertices) != cache.pin
    S = np.zeros((cache.n_vertices, G.shape[0]))
    S[keep] = np.linalg.inv(L[np.ix_(keep, keep)]) @ (G.T @ A)[keep]
    return S


def test_round_trip_known_map(caches, rng):
    for c in caches.values():
        psi = smooth_map(c.mesh, rng)
        phi = poisson_solve(c, compute_jacobians(c, psi))
        assert rel(phi, psi - psi[c.pin]) < 1e-8


def test_zero_and_scaled_identity(caches):
    c = caches["sphere"]
    assert np.all(poisson_solve(c, np.zeros((2 * c.n_triangles, 3))) == 0)
    v = c.mesh.vertices
    phi = poisson_solve(c, 2 * compute_jacobians(c, v))
    assert rel(phi, 2 * (v - v[c.pin])) < 1e-9


def test_rotation_chain_rule(caches, rng):
    c = caches["torus"]
    Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    J = field_to_matrices(compute_jacobians(c, c.mesh.vertices @ Q.T))
    np.testing.assert_allclose(J, Q @ c.frames, atol=1e-10)


def test_linearity(caches, rng):
    c = caches["half_cylinder"]
    M1, M2 = rng.normal(size=(2, 2 * c.n_triangles, 3))
    a, b = 0.7, -2.3
    lhs = poisson_solve(c, a * M1 + b * M2)
    rhs = a * poisson_solve(c, M1) + b * poisson_solve(c, M2)
    assert rel(lhs, rhs) < 1e-9


def test_batched_matches_single(caches, rng):
    c = caches["blob"]
    M = rng.normal(size=(4, 2 * c.n_triangles, 2))
    batch = poisson_solve(c, M)
    for k in range(4):
        np.testing.assert_allclose(batch[k], poisson_solve(c, M[k]), rtol=1e-12, atol=1e-12)
    g = rng.normal(size=(4, c.n_vertices, 2))
    adj = poisson_adjoint(c, g)
    for k in range(4):
        np.testing.assert_allclose(adj[k], poisson_adjoint(c, g[k]), rtol=1e-12, atol=1e-12)


def test_adjoint_identity(caches, rng):
    for c in caches.values():
        for _ in range(5):
            M = rng.normal(size=(2 * c.n_triangles, 3))
            g = rng.normal(size=(c.n_vertices, 3))
            lhs = np.sum(g * poisson_solve(c, M))
            rhs = np.sum(poisson_adjoint(c, g) * M)
            assert abs(lhs - rhs) <= 1e-9 * max(abs(lhs), abs(rhs))


def test_adjoint_of_zero_and_pinned_row(caches, rng):
    c = caches["grid"]
    assert np.all(poisson_adjoint(c, np.zeros((c.n_vertices, 3))) == 0)
    g = np.zeros((c.n_vertices, 3))
    g[c.pin] = 5.0
    assert np.all(poisson_adjoint(c, g) == 0)


def test_directional_derivative(caches, rng):
    c = caches["sphere"]
    M, dM = rng.normal(size=(2, 2 * c.n_triangles, 3))
    g = rng.normal(size=(c.n_vertices, 3))
    eps = 1e-6
    fd = np.sum(g * (poisson_solve(c, M + eps * dM) - poisson_solve(c, M))) / eps
    an = np.sum(poisson_adjoint(c, g) * dM)
    assert abs(fd - an) <= 1e-5 * abs(an)


def test_adjoint_columns_match_dense_operator():
    c = OperatorCache.from_mesh(unit_square())
    S = dense_layer(c)
    for v in range(c.n_vertices):
        e = np.zeros((c.n_vertices, 1))
        e[v] = 1.0
        np.testing.assert_allclose(poisson_adjoint(c, e)[:, 0], S[v], atol=1e-13)
    M = np.random.default_rng(3).normal(size=(2 * c.n_triangles, 1))
    np.testing.assert_allclose(poisson_solve(c, M)[:, 0], S @ M[:, 0], atol=1e-13)


def test_residual_translation_invariant(caches, rng):
    c = caches["torus"]
    M = rng.normal(size=(2 * c.n_triangles, 3))
    phi = poisson_solve(c, M)
    r0 = poisson_residual(c, phi, M)
    r1 = poisson_residual(c, phi + rng.normal(size=3), M)
    assert r1 == pytest.approx(r0, rel=1e-12)
    # the solve is the minimizer: perturbing any vertex raises the residual
    bumped = phi.copy()
    bumped[5] += 1e-3
    assert poisson_residual(c, bumped, M) > r0


def test_shape_errors(caches):
    c = caches["grid"]
    with pytest.raises(ValueError):
        poisson_solve(c, np.zeros((c.n_triangles, 3)))
    with pytest.raises(ValueError):
        poisson_adjoint(c, np.zeros((c.n_vertices + 1, 3)))
    with pytest.raises(ValueError):
        compute_jacobians(c, np.zeros((3, 3)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([2, 3]))
def test_field_matrix_packing_round_trip(seed, d):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(3, 10, d))
    assert np.array_equal(matrices_to_field(field_to_matrices(f)), f)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_round_trip_random_planar_meshes(seed):
    rng = np.random.default_rng(seed)
    n = 6
    xy = np.stack(np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n)), -1).reshape(-1, 2)
    xy += rng.uniform(-0.04, 0.04, xy.shape)
    tris = []
    for j in range(n - 1):
        for i in range(n - 1):
            a = j * n + i
            tris += [[a, a + 1, a + n + 1], [a, a + n + 1, a + n]]
    m = Mesh(np.column_stack([xy, rng.uniform(-0.05, 0.05, n * n)]), tris)
    c = OperatorCache.from_mesh(m, pin=int(rng.integers(n * n)))
    psi = rng.normal(size=(n * n, 2))
    assert rel(poisson_solve(c, compute_jacobians(c, psi)), psi - psi[c.pin]) < 1e-8
