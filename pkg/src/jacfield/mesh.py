"""Triangle meshes: loading, validation and per-element geometry."""
from __future__ import annotations

import hashlib
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph


class MeshError(ValueError):
    """Raised for meshes that are malformed or not supported.

    ``element`` carries the offending element (a vertex or triangle index, or an
    edge as a vertex pair) when one can be named.
    """

    def __init__(self, message: str, element=None):
        super().__init__(message)
        self.element = element


class ObjParseError(MeshError):
    pass


AREA_EPS_FACTOR = 1e-12


def _triangle_areas(vertices, triangles):
    e1 = vertices[triangles[:, 1]] - vertices[triangles[:, 0]]
    e2 = vertices[triangles[:, 2]] - vertices[triangles[:, 0]]
    cross = np.cross(e1, e2)
    return 0.5 * np.linalg.norm(cross, axis=1), cross


class Mesh:
    """An immutable, validated 2-manifold triangle mesh with a single component.

    Parameters
    ----------
    vertices : (V, 3) array_like
    triangles : (T, 3) array_like of int
        Counterclockwise vertex triples.
    validate : bool
        Skip validation only for meshes already known to be valid.
    """

    def __init__(self, vertices, triangles, validate: bool = True):
        v = np.array(vertices, dtype=np.float64)
        t = np.array(triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must have shape (V, 3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError(f"triangles must have shape (T, 3), got {t.shape}")
        v.setflags(write=False)
        t.setflags(write=False)
        self.vertices = v
        self.triangles = t
        if validate:
            validate_mesh(self)

    def __repr__(self):
        return f"Mesh(V={self.n_vertices}, T={self.n_triangles})"

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def _areas_and_cross(self):
        return _triangle_areas(self.vertices, self.triangles)

    @cached_property
    def areas(self) -> np.ndarray:
        return self._areas_and_cross[0]

    @cached_property
    def normals(self) -> np.ndarray:
        cross = self._areas_and_cross[1]
        return cross / np.linalg.norm(cross, axis=1, keepdims=True)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    @cached_property
    def vertex_masses(self) -> np.ndarray:
        """Barycentric lumped masses, one third of the incident triangle areas."""
        # bincount accumulates in index order, so the result is deterministic
        third = np.repeat(self.areas / 3.0, 3)
        return np.bincount(self.triangles.ravel(), weights=third,
                           minlength=self.n_vertices)

    @cached_property
    def vertex_normals(self) -> np.ndarray:
        acc = np.zeros((self.n_vertices, 3))
        weighted = self.normals * self.areas[:, None]
        for c in range(3):
            np.add.at(acc, self.triangles[:, c], weighted)
        return acc / np.linalg.norm(acc, axis=1, keepdims=True)

    @property
    def total_area(self) -> float:
        return float(self.areas.sum())

    @cached_property
    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted vertex pairs, shape (E, 2)."""
        return unique_edges(self.triangles)

    @cached_property
    def boundary_loops(self) -> list[np.ndarray]:
        return boundary_loops(self.triangles)

    @property
    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edges) + self.n_triangles

    def adjacency(self) -> sparse.csr_matrix:
        e = self.edges
        n = self.n_vertices
        a = sparse.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
        return (a + a.T).tocsr()

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.triangles, dtype="<i8").tobytes())
        return h.hexdigest()

    def with_vertices(self, vertices) -> "Mesh":
        """Same connectivity, new positions (revalidated)."""
        return Mesh(vertices, self.triangles)


def unique_edges(triangles: np.ndarray) -> np.ndarray:
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def boundary_loops(triangles: np.ndarray) -> list[np.ndarray]:
    """Boundary loops, each traversed along the triangles' own winding."""
    directed = np.concatenate(
        [triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    fwd = {(int(a), int(b)) for a, b in directed}
    nxt = {}
    for a, b in fwd:
        if (b, a) not in fwd:
            nxt[a] = b
    loops = []
    seen = set()
    for start in sorted(nxt):
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        cur = nxt[start]
        while cur != start:
            loop.append(cur)
            seen.add(cur)
            cur = nxt[cur]
        loops.append(np.array(loop, dtype=np.int64))
    return loops


def validate_mesh(mesh: Mesh) -> None:
    """Check index range, degeneracy, manifoldness, orientation and connectivity."""
    v, t = mesh.vertices, mesh.triangles
    n = len(v)
    if len(t) == 0:
        raise MeshError("mesh has no triangles")
    if not np.all(np.isfinite(v)):
        raise MeshError("non-finite vertex coordinates")
    bad = np.flatnonzero((t < 0).any(1) | (t >= n).any(1))
    if len(bad):
        raise MeshError(f"triangle {bad[0]} has a vertex index out of range", int(bad[0]))
    repeated = np.flatnonzero((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 2] == t[:, 0]))
    if len(repeated):
        raise MeshError(f"triangle {repeated[0]} repeats a vertex", int(repeated[0]))

    areas, _ = _triangle_areas(v, t)
    diag = np.linalg.norm(v.max(0) - v.min(0))
    eps = AREA_EPS_FACTOR * diag ** 2
    small = np.flatnonzero(areas <= eps)
    if len(small):
        raise MeshError(f"triangle {small[0]} is degenerate (area {areas[small[0]]:.3e})",
                        int(small[0]))

    directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    face_of = np.tile(np.arange(len(t)), 3)
    und = np.sort(directed, axis=1)
    _, inv, counts = np.unique(und, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    over = np.flatnonzero(counts[inv] > 2)
    if len(over):
        a, b = und[over[0]]
        raise MeshError(f"non-manifold edge ({a}, {b}) shared by more than two triangles",
                        (int(a), int(b)))
    _, dcounts = np.unique(directed, axis=0, return_counts=True)
    if np.any(dcounts > 1):
        d_uniq, d_inv, dcounts = np.unique(directed, axis=0, return_inverse=True,
                                           return_counts=True)
        k = np.flatnonzero(dcounts[d_inv.ravel()] > 1)[0]
        a, b = directed[k]
        raise MeshError(f"edge ({a}, {b}) is traversed in the same direction by two "
                        "triangles (inconsistent orientation)", (int(a), int(b)))

    used = np.zeros(n, dtype=bool)
    used[t.ravel()] = True
    if not used.all():
        j = int(np.flatnonzero(~used)[0])
        raise MeshError(f"vertex {j} is not referenced by any triangle", j)

    _check_vertex_manifold(t, und, inv, face_of, n)

    rows = np.repeat(np.arange(len(t)), 3)
    incidence = sparse.csr_matrix((np.ones(3 * len(t)), (rows, t.ravel())),
                                  shape=(len(t), n))
    ncomp, labels = csgraph.connected_components(incidence @ incidence.T, directed=False)
    if ncomp != 1:
        k = int(np.flatnonzero(labels != labels[0])[0])
        raise MeshError(f"mesh has {ncomp} connected components (triangle {k} is not "
                        "connected to triangle 0)", k)


def _check_vertex_manifold(t, und, inv, face_of, n):
    # corners (face, local slot) joined across shared edges; each vertex must
    # end up with a single fan of corners
    nt = len(t)
    corner_id = np.arange(3 * nt).reshape(nt, 3)
    order = np.argsort(inv, kind="stable")
    sorted_inv = inv[order]
    pair_start = np.flatnonzero(np.r_[True, sorted_inv[1:] != sorted_inv[:-1]])
    sizes = np.diff(np.r_[pair_start, len(order)])
    shared = pair_start[sizes == 2]
    h1, h2 = order[shared], order[shared + 1]
    f1, f2 = face_of[h1], face_of[h2]
    src, dst = [], []
    for endpoint in (0, 1):
        vert = und[h1, endpoint]
        c1 = corner_id[f1, np.argmax(t[f1] == vert[:, None], axis=1)]
        c2 = corner_id[f2, np.argmax(t[f2] == vert[:, None], axis=1)]
        src.append(c1)
        dst.append(c2)
    src = np.concatenate(src)
    dst = np.concatenate(dst)
    g = sparse.coo_matrix((np.ones(len(src)), (src, dst)), shape=(3 * nt, 3 * nt))
    _, labels = csgraph.connected_components(g, directed=False)
    corner_vertex = t.ravel()
    pairs = np.unique(np.stack([corner_vertex, labels], axis=1), axis=0)
    fans = np.bincount(pairs[:, 0], minlength=n)
    bad = np.flatnonzero(fans > 1)
    if len(bad):
        raise MeshError(f"vertex {bad[0]} is non-manifold ({fans[bad[0]]} separate fans)",
                        int(bad[0]))


def load_obj(path) -> Mesh:
    """Read a Wavefront OBJ file; polygons are fan-triangulated."""
    path = Path(path)
    verts = []
    faces = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                try:
                    verts.append([float(x) for x in parts[1:4]])
                except ValueError:
                    raise ObjParseError(f"{path}:{lineno}: malformed vertex record") from None
                if len(verts[-1]) != 3:
                    raise ObjParseError(f"{path}:{lineno}: vertex needs 3 coordinates")
            elif tag == "f":
                if len(parts) < 4:
                    raise ObjParseError(f"{path}:{lineno}: face needs at least 3 vertices")
                idx = []
                for p in parts[1:]:
                    try:
                        i = int(p.split("/")[0])
                    except ValueError:
                        raise ObjParseError(f"{path}:{lineno}: malformed face record") from None
                    if i < 0:
                        i = len(verts) + i + 1
                    if i < 1 or i > len(verts):
                        raise ObjParseError(f"{path}:{lineno}: face index {i} out of range")
                    idx.append(i - 1)
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_obj(path, mesh_or_vertices, triangles=None, uv=None) -> None:
    """Write an OBJ with 17 significant digits (exact float64 round trip).

    A 2D map may be passed as ``uv``; it is written both as ``vt`` records and
    as vertex positions with z = 0 when ``mesh_or_vertices`` is (V, 2).
    """
    if isinstance(mesh_or_vertices, Mesh):
        verts, tris = mesh_or_vertices.vertices, mesh_or_vertices.triangles
    else:
        verts, tris = np.asarray(mesh_or_vertices, dtype=np.float64), np.asarray(triangles)
    if verts.shape[1] == 2:
        if uv is None:
            uv = verts
        verts = np.column_stack([verts, np.zeros(len(verts))])
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in verts]
    if uv is not None:
        lines += [f"vt {a:.17g} {b:.17g}" for a, b in np.asarray(uv)]
        lines += [f"f {a}/{a} {b}/{b} {c}/{c}" for a, b, c in np.asarray(tris) + 1]
    else:
        lines += [f"f {a} {b} {c}" for a, b, c in np.asarray(tris) + 1]
    Path(path).write_text("\n".join(lines) + "\n")


def area_weighted_centroid(vertices, triangles) -> np.ndarray:
    areas, _ = _triangle_areas(vertices, triangles)
    cents = vertices[triangles].mean(axis=1)
    return (areas[:, None] * cents).sum(0) / areas.sum()


def normalize_to_unit_sphere(mesh: Mesh):
    """Translate and scale so the farthest vertex from the area-weighted centroid
    lies at distance 1.

    Returns
    -------
    (Mesh, scale, center) with ``new = (old - center) * scale``.
    """
    center = area_weighted_centroid(mesh.vertices, mesh.triangles)
    radius = np.linalg.norm(mesh.vertices - center, axis=1).max()
    if not radius > 0:
        raise MeshError("mesh has zero extent")
    scale = 1.0 / radius
    return Mesh((mesh.vertices - center) * scale, mesh.triangles), scale, center


def center_of_mass(mesh: Mesh, positions) -> np.ndarray:
    """Lumped-mass weighted mean of per-vertex ``positions`` using the source masses."""
    positions = np.asarray(positions)
    if positions.shape[0] != mesh.n_vertices:
        raise ValueError(f"expected {mesh.n_vertices} rows, got {positions.shape[0]}")
    m = mesh.vertex_masses
    return m @ positions / m.sum()
