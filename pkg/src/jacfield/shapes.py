"""Procedural meshes and remeshing helpers used to produce test inputs.

Nothing here is part of the learning pipeline itself; these functions stand
in for external modelling and remeshing tools.
"""
from __future__ import annotations

import heapq

import numpy as np

from .mesh import Mesh


def grid(nx: int = 10, ny: int = 10, size=(1.0, 1.0), origin=(0.0, 0.0)) -> Mesh:
    """Planar (nx x ny)-cell grid in the xy-plane, counterclockwise seen from +z."""
    xs = np.linspace(origin[0], origin[0] + size[0], nx + 1)
    ys = np.linspace(origin[1], origin[1] + size[1], ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    verts = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[1:, :-1].ravel()
    # alternate the diagonal so the grid has no preferred direction
    flip = ((np.arange(ny)[:, None] + np.arange(nx)[None, :]) % 2).ravel().astype(bool)
    t1 = np.where(flip[:, None], np.column_stack([a, b, d]), np.column_stack([a, b, c]))
    t2 = np.where(flip[:, None], np.column_stack([b, c, d]), np.column_stack([a, c, d]))
    return Mesh(verts, np.concatenate([t1, t2]))


def icosphere(subdivisions: int = 2, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> Mesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
                      [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
                      [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=float)
    faces = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                      [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                      [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                      [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    for _ in range(subdivisions):
        verts, faces = _midpoint_subdivide(verts, faces)
        verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    return Mesh(verts * radius + np.asarray(center), faces)


def _midpoint_subdivide(verts, faces):
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    key = np.sort(edges, axis=1)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.ravel()
    mids = 0.5 * (verts[uniq[:, 0]] + verts[uniq[:, 1]])
    nv = len(verts)
    nf = len(faces)
    m01, m12, m20 = (inv[:nf] + nv, inv[nf:2 * nf] + nv, inv[2 * nf:] + nv)
    a, b, c = faces.T
    new_faces = np.concatenate([np.column_stack([a, m01, m20]), np.column_stack([b, m12, m01]),
                                np.column_stack([c, m20, m12]), np.column_stack([m01, m12, m20])])
    return np.concatenate([verts, mids]), new_faces


def torus(major: float = 1.0, minor: float = 0.35, n_major: int = 24, n_minor: int = 12) -> Mesh:
    u = np.arange(n_major) * 2 * np.pi / n_major
    v = np.arange(n_minor) * 2 * np.pi / n_minor
    U, Vv = np.meshgrid(u, v, indexing="ij")
    x = (major + minor * np.cos(Vv)) * np.cos(U)
    y = (major + minor * np.cos(Vv)) * np.sin(U)
    z = minor * np.sin(Vv)
    verts = np.column_stack([x.ravel(), y.ravel(), z.ravel()])
    i, j = np.meshgrid(np.arange(n_major), np.arange(n_minor), indexing="ij")
    i, j = i.ravel(), j.ravel()
    ip, jp = (i + 1) % n_major, (j + 1) % n_minor
    a = i * n_minor + j
    b = ip * n_minor + j
    c = ip * n_minor + jp
    d = i * n_minor + jp
    faces = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    return Mesh(verts, faces)


def cylinder_patch(angle: float = np.pi, radius: float = 1.0, height: float = 1.5,
                   n_around: int = 16, n_up: int = 10) -> Mesh:
    """Open cylindrical strip spanning ``angle`` radians (disk topology)."""
    g = grid(n_around, n_up, size=(angle, height))
    th, h = g.vertices[:, 0], g.vertices[:, 1]
    # outward normal points away from the axis
    verts = np.column_stack([radius * np.sin(th), h, radius * np.cos(th)])
    return Mesh(verts, g.triangles)


def bumpy_blob(subdivisions: int = 3, axes=(1.8, 0.7, 0.55), bump: float = 0.06,
               frequency: int = 7, seed: int = 0) -> Mesh:
    """Elongated ellipsoid carrying small high-frequency ridges.

    The ridges give the surface fine detail that a deformation must carry along.
    """
    base = icosphere(subdivisions)
    p = base.vertices
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * np.pi, 3)
    ridges = (np.sin(frequency * p[:, 0] + phase[0]) * np.sin(frequency * p[:, 1] + phase[1])
              + 0.5 * np.sin(frequency * p[:, 2] + phase[2]))
    q = p * np.asarray(axes)
    n = p / np.asarray(axes)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return Mesh(q + bump * ridges[:, None] * n, base.triangles)


def farthest_point_indices(points, count: int, start: int | None = None) -> np.ndarray:
    """Deterministic farthest-point sampling; starts from the point farthest from the mean."""
    points = np.asarray(points)
    if start is None:
        start = int(np.argmax(np.linalg.norm(points - points.mean(0), axis=1)))
    chosen = [start]
    dist = np.linalg.norm(points - points[start], axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return np.array(chosen, dtype=np.int64)


def loop_subdivide(mesh: Mesh) -> Mesh:
    """One step of Loop subdivision of a closed mesh.

    Original vertices keep their indices (repositioned by the even-vertex rule);
    edge vertices are appended after them.
    """
    if mesh.boundary_loops:
        raise ValueError("loop_subdivide supports closed meshes only")
    v, f = mesh.vertices, mesh.triangles
    nv, nf = len(v), len(f)
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    opposite = np.concatenate([f[:, 2], f[:, 0], f[:, 1]])
    key = np.sort(edges, axis=1)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.ravel()
    opp_sum = np.zeros((len(uniq), 3))
    np.add.at(opp_sum, inv, v[opposite])
    odd = 0.375 * (v[uniq[:, 0]] + v[uniq[:, 1]]) + 0.125 * opp_sum

    nbr_sum = np.zeros((nv, 3))
    np.add.at(nbr_sum, uniq[:, 0], v[uniq[:, 1]])
    np.add.at(nbr_sum, uniq[:, 1], v[uniq[:, 0]])
    valence = np.bincount(uniq.ravel(), minlength=nv).astype(float)
    beta = (0.625 - (0.375 + 0.25 * np.cos(2 * np.pi / valence)) ** 2) / valence
    even = (1 - valence * beta)[:, None] * v + beta[:, None] * nbr_sum

    m01, m12, m20 = inv[:nf] + nv, inv[nf:2 * nf] + nv, inv[2 * nf:] + nv
    a, b, c = f.T
    faces = np.concatenate([np.column_stack([a, m01, m20]), np.column_stack([b, m12, m01]),
                            np.column_stack([c, m20, m12]), np.column_stack([m01, m12, m20])])
    return Mesh(np.concatenate([even, odd]), faces)


def decimate(mesh: Mesh, target_triangles: int, min_normal_dot: float = 0.5) -> Mesh:
    """Shortest-edge collapse to the midpoint until ``target_triangles`` remain.

    Collapses that break the link condition or tilt an adjacent face normal too
    far are skipped. Intended for closed meshes.
    """
    verts = mesh.vertices.copy()
    faces = {i: tuple(t) for i, t in enumerate(mesh.triangles.tolist())}
    vert_faces = [set() for _ in range(len(verts))]
    for i, t in faces.items():
        for x in t:
            vert_faces[x].add(i)
    alive = np.ones(len(verts), dtype=bool)

    def neighbors(x):
        out = set()
        for fi in vert_faces[x]:
            out.update(faces[fi])
        out.discard(x)
        return out

    def normal(p):
        n = np.cross(p[1] - p[0], p[2] - p[0])
        return n / (np.linalg.norm(n) + 1e-300)

    heap = [(float(np.linalg.norm(verts[a] - verts[b])), int(a), int(b)) for a, b in mesh.edges]
    heapq.heapify(heap)
    while len(faces) > target_triangles and heap:
        length, a, b = heapq.heappop(heap)
        if not (alive[a] and alive[b]) or b not in neighbors(a):
            continue
        current = float(np.linalg.norm(verts[a] - verts[b]))
        if abs(current - length) > 1e-12:
            heapq.heappush(heap, (current, a, b))
            continue
        shared = vert_faces[a] & vert_faces[b]
        if len(shared) != 2 or len(neighbors(a) & neighbors(b)) != 2:
            continue
        mid = 0.5 * (verts[a] + verts[b])
        ok = True
        for fi in (vert_faces[a] | vert_faces[b]) - shared:
            t = faces[fi]
            old = verts[list(t)]
            new = np.array([mid if x in (a, b) else verts[x] for x in t])
            n_new = np.cross(new[1] - new[0], new[2] - new[0])
            if np.linalg.norm(n_new) < 1e-12 or normal(old) @ (n_new / np.linalg.norm(n_new)) < min_normal_dot:
                ok = False
                break
        if not ok:
            continue
        for fi in shared:
            for x in faces[fi]:
                vert_faces[x].discard(fi)
            del faces[fi]
        for fi in list(vert_faces[b]):
            faces[fi] = tuple(a if x == b else x for x in faces[fi])
            vert_faces[a].add(fi)
        vert_faces[b] = set()
        alive[b] = False
        verts[a] = mid
        for x in neighbors(a):
            heapq.heappush(heap, (float(np.linalg.norm(verts[a] - verts[x])), a, x))
    remap = -np.ones(len(verts), dtype=np.int64)
    remap[alive] = np.arange(alive.sum())
    tris = np.array([faces[k] for k in sorted(faces)], dtype=np.int64)
    return Mesh(verts[alive], remap[tris])


def closest_points(mesh: Mesh, points, chunk: int = 256):
    """Closest surface point for each query point.

    Returns ``(triangle_index, barycentric (n, 3), point (n, 3))``.
    """
    points = np.asarray(points, dtype=np.float64)
    tri = mesh.vertices[mesh.triangles]
    best_t = np.empty(len(points), dtype=np.int64)
    best_bc = np.empty((len(points), 3))
    for s in range(0, len(points), chunk):
        q = points[s:s + chunk]
        bc = _closest_barycentric(q[:, None, :], tri[None])  # (n, T, 3)
        proj = np.einsum("ntk,tkd->ntd", bc, tri)
        d2 = ((proj - q[:, None, :]) ** 2).sum(-1)
        k = np.argmin(d2, axis=1)
        best_t[s:s + chunk] = k
        best_bc[s:s + chunk] = bc[np.arange(len(q)), k]
    pts = np.einsum("nk,nkd->nd", best_bc, tri[best_t])
    return best_t, best_bc, pts


def _closest_barycentric(p, tri):
    # Ericson, "Real-Time Collision Detection", closest point on triangle
    a, b, c = tri[..., 0, :], tri[..., 1, :], tri[..., 2, :]
    ab, ac, ap = b - a, c - a, p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    shape = np.broadcast(d1, d2).shape
    out = np.zeros(shape + (3,))
    done = np.zeros(shape, dtype=bool)

    def put(mask, u, v, w):
        m = mask & ~done
        out[m] = np.stack([np.broadcast_to(u, shape)[m], np.broadcast_to(v, shape)[m],
                           np.broadcast_to(w, shape)[m]], -1)
        done[m] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        put((d1 <= 0) & (d2 <= 0), 1.0, 0.0, 0.0)
        put((d3 >= 0) & (d4 <= d3), 0.0, 1.0, 0.0)
        put((d6 >= 0) & (d5 <= d6), 0.0, 0.0, 1.0)
        t = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1 - t, t, 0.0)
        t = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1 - t, 0.0, t)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), 0.0, 1 - t, t)
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        put(np.ones(shape, dtype=bool), 1 - v - w, v, w)
    return out
