"""Per-mesh differential operators and the pinned Laplacian factorization.

Everything here is computed once per mesh and reused: the tangent frames, the
stacked gradient (2T x V, one 2-row block per triangle in that triangle's
frame), the area weights, ``L = grad^T A grad`` and a sparse LU of ``L`` with
the pin vertex removed.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .mesh import Mesh


def build_frames(mesh: Mesh) -> np.ndarray:
    """Oriented orthonormal tangent frames, shape (T, 3, 2).

    The first column is the normalized first edge ``v1 - v0``, the second is
    ``n x col1``.
    """
    v, t = mesh.vertices, mesh.triangles
    e = v[t[:, 1]] - v[t[:, 0]]
    c1 = e / np.linalg.norm(e, axis=1, keepdims=True)
    c2 = np.cross(mesh.normals, c1)
    return np.stack([c1, c2], axis=2)


def random_frames(mesh: Mesh, rng) -> np.ndarray:
    """Frames rotated in-plane by random angles; used to exercise frame invariance."""
    base = build_frames(mesh)
    theta = rng.uniform(0, 2 * np.pi, mesh.n_triangles)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.stack([np.stack([c, -s], 1), np.stack([s, c], 1)], 1)
    return base @ rot


def build_gradient(mesh: Mesh, frames: np.ndarray) -> sparse.csr_matrix:
    """Gradient operator of shape (2T, V) expressed in ``frames``.

    Rows ``2i, 2i+1`` applied to a (V, d) map give the transposed jacobian
    ``J_i^T`` (2 x d) of triangle ``i``.
    """
    v, t = mesh.vertices, mesh.triangles
    nt = len(t)
    if frames.shape != (nt, 3, 2):
        raise ValueError(f"frames must have shape ({nt}, 3, 2), got {frames.shape}")
    edges = np.stack([v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]]], axis=2)  # (T,3,2)
    local = np.einsum("tad,tae->tde", frames, edges)  # B^T [e1 e2], (T,2,2)
    inv_t = np.linalg.inv(local).transpose(0, 2, 1)  # E^-T
    # J^T = E^-T [phi1 - phi0; phi2 - phi0]
    w1 = inv_t[:, :, 0]
    w2 = inv_t[:, :, 1]
    w0 = -(w1 + w2)
    rows = np.repeat(2 * np.arange(nt)[:, None] + np.arange(2)[None, :], 3, axis=1)
    rows = rows.reshape(nt, 2, 3)
    cols = np.broadcast_to(t[:, None, :], (nt, 2, 3))
    vals = np.stack([w0, w1, w2], axis=2)
    g = sparse.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())),
                          shape=(2 * nt, mesh.n_vertices))
    g.sort_indices()
    return g


def build_laplacian(mesh: Mesh, grad: sparse.csr_matrix):
    """Returns ``(mass, L)``: the 2T area diagonal and ``grad^T A grad``."""
    mass = np.repeat(mesh.areas, 2)
    lap = (grad.T @ sparse.diags(mass) @ grad).tocsr()
    lap = 0.5 * (lap + lap.T)
    lap.sort_indices()
    return mass, lap.tocsr()


def cotangent_laplacian(mesh: Mesh) -> sparse.csr_matrix:
    """Textbook cotangent Laplacian assembled edge by edge from interior angles.

    Independent of :func:`build_gradient`; kept as a cross-check.
    """
    v, t = mesh.vertices, mesh.triangles
    n = mesh.n_vertices
    rows, cols, vals = [], [], []
    for a in range(3):
        i, j, k = t[:, a], t[:, (a + 1) % 3], t[:, (a + 2) % 3]
        u = v[j] - v[i]
        w = v[k] - v[i]
        cos = np.einsum("ij,ij->i", u, w)
        sin = np.linalg.norm(np.cross(u, w), axis=1)
        half_cot = 0.5 * cos / sin  # angle at i weighs edge (j, k)
        rows += [j, k, j, k]
        cols += [k, j, j, k]
        vals += [-half_cot, -half_cot, half_cot, half_cot]
    lap = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                            shape=(n, n))
    return lap.tocsr()


class PinnedFactorization:
    """Sparse LU of ``L`` with row and column ``pin`` deleted.

    ``solve`` returns a full-length solution with ``x[pin] = 0``. SuperLU solves
    are serialized by a lock; results do not depend on the calling thread.
    """

    def __init__(self, lap: sparse.spmatrix, pin: int = 0):
        n = lap.shape[0]
        if not 0 <= pin < n:
            raise ValueError(f"pin vertex {pin} out of range")
        self.n = n
        self.pin = pin
        keep = np.r_[0:pin, pin + 1:n]
        self._keep = keep
        reduced = lap.tocsr()[keep][:, keep].tocsc()
        try:
            self._lu = spla.splu(reduced, permc_spec="COLAMD")
        except RuntimeError as exc:
            raise np.linalg.LinAlgError(
                "pinned Laplacian is singular; is the mesh connected?") from exc
        self._lock = threading.Lock()

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=np.float64)
        if b.shape[0] != self.n:
            raise ValueError(f"right-hand side needs {self.n} rows, got {b.shape[0]}")
        squeeze = b.ndim == 1
        rhs = b[self._keep].reshape(self.n - 1, -1)
        with self._lock:
            sol = self._lu.solve(np.ascontiguousarray(rhs))
        x = np.zeros((self.n, rhs.shape[1]))
        x[self._keep] = sol
        return x[:, 0] if squeeze else x


def factorize_pinned(lap, pin: int = 0) -> PinnedFactorization:
    return PinnedFactorization(lap, pin)


@dataclass(eq=False)
class OperatorCache:
    """Preprocessed operators of one mesh."""

    mesh: Mesh
    frames: np.ndarray
    grad: sparse.csr_matrix
    mass: np.ndarray
    laplacian: sparse.csr_matrix
    pin: int = 0
    factorization: PinnedFactorization = field(default=None, repr=False)
    spectrum: object = field(default=None, repr=False)

    def __post_init__(self):
        if self.factorization is None:
            self.factorization = factorize_pinned(self.laplacian, self.pin)

    @classmethod
    def from_mesh(cls, mesh: Mesh, pin: int = 0, frames: np.ndarray | None = None):
        if frames is None:
            frames = build_frames(mesh)
        grad = build_gradient(mesh, frames)
        mass, lap = build_laplacian(mesh, grad)
        return cls(mesh=mesh, frames=frames, grad=grad, mass=mass, laplacian=lap, pin=pin)

    def with_frames(self, frames: np.ndarray) -> "OperatorCache":
        return OperatorCache.from_mesh(self.mesh, self.pin, frames)

    @property
    def n_vertices(self) -> int:
        return self.mesh.n_vertices

    @property
    def n_triangles(self) -> int:
        return self.mesh.n_triangles

    def solve(self, b):
        return self.factorization.solve(b)


CACHE_FORMAT = "jfcache-1"


def save_cache(path, cache: OperatorCache, extra_meta: dict | None = None) -> None:
    """Write operators (and the spectrum, if computed) to a jfcache-1 file.

    The factorization is not stored; it is recomputed on load.
    """
    from .container import write_container

    sections = {
        "vertices": cache.mesh.vertices,
        "triangles": cache.mesh.triangles.astype("<i8"),
        "frames": cache.frames,
        "grad_indptr": cache.grad.indptr.astype("<i8"),
        "grad_indices": cache.grad.indices.astype("<i8"),
        "grad_data": cache.grad.data,
        "mass": cache.mass,
        "lap_indptr": cache.laplacian.indptr.astype("<i8"),
        "lap_indices": cache.laplacian.indices.astype("<i8"),
        "lap_data": cache.laplacian.data,
    }
    if cache.spectrum is not None:
        sections["eigenvalues"] = cache.spectrum.eigenvalues
        sections["eigenvectors"] = cache.spectrum.eigenvectors
    meta = {"n_vertices": cache.n_vertices, "n_triangles": cache.n_triangles,
            "pin": cache.pin, "mesh_sha256": cache.mesh.content_hash(),
            "has_spectrum": cache.spectrum is not None}
    meta.update(extra_meta or {})
    write_container(path, CACHE_FORMAT, meta, sections)


def load_cache(path) -> OperatorCache:
    from .container import read_container
    from .features import SpectralData

    meta, s = read_container(path, CACHE_FORMAT)
    mesh = Mesh(s["vertices"], s["triangles"], validate=False)
    nt, nv = meta["n_triangles"], meta["n_vertices"]
    grad = sparse.csr_matrix((s["grad_data"], s["grad_indices"], s["grad_indptr"]),
                             shape=(2 * nt, nv))
    lap = sparse.csr_matrix((s["lap_data"], s["lap_indices"], s["lap_indptr"]), shape=(nv, nv))
    spectrum = None
    if "eigenvalues" in s:
        spectrum = SpectralData(s["eigenvalues"], s["eigenvectors"])
    return OperatorCache(mesh=mesh, frames=s["frames"], grad=grad, mass=s["mass"],
                         laplacian=lap, pin=meta["pin"], spectrum=spectrum)
