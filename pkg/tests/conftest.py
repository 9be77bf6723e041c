from __future__ import annotations

import numpy as np
import pytest

from jacfield import shapes
from jacfield.mesh import Mesh
from jacfield.operators import OperatorCache


def unit_square() -> Mesh:
    v = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]]
    return Mesh(v, [[0, 1, 2], [0, 2, 3]])


def jittered_grid(seed: int, n: int = 6) -> Mesh:
    """Planar grid with random interior jitter and a random height field."""
    rng = np.random.default_rng(seed)
    g = shapes.grid(n, n)
    v = g.vertices.copy()
    interior = (v[:, 0] > 0) & (v[:, 0] < 1) & (v[:, 1] > 0) & (v[:, 1] < 1)
    v[interior, :2] += rng.uniform(-0.3, 0.3, (interior.sum(), 2)) / n
    v[:, 2] = 0.2 * np.sin(3 * v[:, 0] + rng.uniform()) * np.cos(2 * v[:, 1])
    return Mesh(v, g.triangles)


def bundled_meshes() -> dict:
    """Five small test surfaces covering closed, open and higher-genus cases."""
    return {
        "grid": jittered_grid(0, 8),
        "sphere": shapes.icosphere(2),
        "torus": shapes.torus(1.0, 0.4, 16, 8),
        "half_cylinder": shapes.cylinder_patch(),
        "blob": shapes.bumpy_blob(2),
    }


@pytest.fixture(scope="session")
def meshes():
    return bundled_meshes()


@pytest.fixture(scope="session")
def caches(meshes):
    return {k: OperatorCache.from_mesh(m) for k, m in meshes.items()}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_map(mesh: Mesh, rng, dim: int = 3) -> np.ndarray:
    """A random smooth nonlinear map of the vertex positions."""
    v = mesh.vertices
    A = rng.normal(size=(3, dim))
    B = rng.normal(size=(3, dim))
    return v @ A + 0.3 * np.sin(v @ B) + rng.normal(size=dim)
