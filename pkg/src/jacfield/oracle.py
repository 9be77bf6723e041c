"""Ground-truth map generators and the dataset factory.

* :func:`arap_deform` - surface ARAP (spokes-and-rims cells, cotangent
  weights) with hard handle constraints, solved by local/global iteration.
* :func:`tutte_embed` and :func:`arap_parameterize` - a flip-free initial
  embedding of a disk followed by 2D local/global ARAP parameterization.
* :func:`extract_disk_patch` - geodesic-ball patches of a larger surface.
* :func:`generate_dataset` - samples of (mesh, ground-truth map, code).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse import linalg as spla

from . import shapes
from .container import read_container, write_container
from .features import FeatureConfig, centroid_features, mesh_spectrum, wks
from .fields import DistortionReport, distortion_report
from .mesh import Mesh, MeshError, center_of_mass, load_obj, normalize_to_unit_sphere, save_obj
from .operators import OperatorCache, cotangent_laplacian, load_cache, save_cache
from .poisson import compute_jacobians, field_to_matrices, matrices_to_field, poisson_solve


class OracleError(RuntimeError):
    pass


class PatchError(MeshError):
    pass


# --------------------------------------------------------------------- rotations

def nearest_rotations(S: np.ndarray) -> np.ndarray:
    """Rotation ``R`` maximizing ``trace(R S)`` for each (…, d, d) matrix ``S``.

    This is the orthogonal Procrustes solution ``R = V U^T`` with the sign of the
    smallest singular direction flipped when needed so that ``det R = +1``.
    """
    U, _, Vt = np.linalg.svd(S)
    V = np.swapaxes(Vt, -1, -2)
    R = V @ np.swapaxes(U, -1, -2)
    neg = np.linalg.det(R) < 0
    if np.any(neg):
        U = U.copy()
        U[neg, :, -1] *= -1
        R = V @ np.swapaxes(U, -1, -2)
    return R


def closest_rotations(J: np.ndarray) -> np.ndarray:
    """Nearest proper rotation to each square matrix in Frobenius norm."""
    return nearest_rotations(np.swapaxes(J, -1, -2))


def rigid_fit(source, target):
    """Least-squares rotation and translation taking ``source`` points to ``target``."""
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    cs, ct = source.mean(0), target.mean(0)
    S = (source - cs).T @ (target - ct)  # sum s t^T
    R = nearest_rotations(S)
    return R, ct - R @ cs


# ----------------------------------------------------------------------- ARAP 3D

@dataclass
class ArapResult:
    positions: np.ndarray
    energies: list
    rotations: np.ndarray

    @property
    def energy(self) -> float:
        return self.energies[-1]


def _edge_weights(mesh: Mesh):
    """Per-triangle half-cotangent weights of the edge opposite each corner."""
    v, t = mesh.vertices, mesh.triangles
    w = np.empty((len(t), 3))
    for a in range(3):
        u = v[t[:, (a + 1) % 3]] - v[t[:, a]]
        x = v[t[:, (a + 2) % 3]] - v[t[:, a]]
        w[:, a] = 0.5 * np.einsum("ij,ij->i", u, x) / np.linalg.norm(np.cross(u, x), axis=1)
    return w


def _edge_vectors(p, t):
    # edge opposite corner a goes from corner a+1 to corner a+2
    return np.stack([p[t[:, (a + 2) % 3]] - p[t[:, (a + 1) % 3]] for a in range(3)], axis=1)


def arap_energy(mesh: Mesh, positions, rotations, weights=None) -> float:
    """Spokes-and-rims ARAP energy of ``positions`` for fixed per-vertex rotations."""
    if weights is None:
        weights = _edge_weights(mesh)
    t = mesh.triangles
    e = _edge_vectors(mesh.vertices, t)  # (T, 3 edges, 3)
    ed = _edge_vectors(np.asarray(positions), t)
    total = 0.0
    for corner in range(3):
        R = rotations[t[:, corner]]  # (T, 3, 3)
        diff = ed - np.einsum("tij,tej->tei", R, e)
        total += float(np.sum(weights * np.sum(diff ** 2, axis=2)))
    return total


def _fit_cell_rotations(mesh, positions, weights):
    t = mesh.triangles
    e = _edge_vectors(mesh.vertices, t)
    ed = _edge_vectors(positions, t)
    cov_t = np.einsum("te,tei,tej->tij", weights, e, ed)  # sum w e e'^T per triangle
    S = np.zeros((mesh.n_vertices, 3, 3))
    for corner in range(3):
        np.add.at(S, t[:, corner], cov_t)
    return nearest_rotations(S)


def arap_deform(mesh: Mesh, handles, targets, iters: int = 50, tol: float = 1e-8,
                initial_rotations=None) -> ArapResult:
    """Surface ARAP deformation with hard positional constraints on ``handles``.

    Rotations start from the best rigid fit of the handles, so handle motions
    that are rigid are reproduced exactly by the first global step. Iteration
    stops after ``iters`` rounds or when the relative energy decrease drops
    below ``tol``. ``energies[k]`` is the energy after round ``k`` with
    rotations refit to the current positions; it never increases.
    """
    handles = np.asarray(handles, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.float64).reshape(len(handles), 3)
    n = mesh.n_vertices
    if len(handles) < 2 or len(np.unique(handles)) != len(handles):
        raise ValueError("need at least two distinct handle vertices")
    if handles.min() < 0 or handles.max() >= n:
        raise ValueError("handle index out of range")
    if np.ptp(targets, axis=0).max() <= 1e-12 * max(mesh.bbox_diagonal, 1.0):
        raise OracleError("all handle targets coincide")
    if iters < 1:
        raise ValueError("iters must be >= 1")

    weights = _edge_weights(mesh)
    lap = cotangent_laplacian(mesh).tocsr()
    free = np.setdiff1d(np.arange(n), handles)
    try:
        lu = spla.splu(lap[free][:, free].tocsc(), permc_spec="COLAMD")
    except RuntimeError as exc:
        raise OracleError("ARAP system is singular") from exc
    coupling = lap[free][:, handles]
    t = mesh.triangles
    e = _edge_vectors(mesh.vertices, t)

    if initial_rotations is None:
        Q, _ = rigid_fit(mesh.vertices[handles], targets)
        R = np.broadcast_to(Q, (n, 3, 3)).copy()
    else:
        R = np.array(initial_rotations, dtype=float)

    positions = mesh.vertices.copy()
    energies = []
    for _ in range(iters):
        K = R[t[:, 0]] + R[t[:, 1]] + R[t[:, 2]]
        contrib = weights[:, :, None] * np.einsum("tij,tej->tei", K, e)  # (T, 3, 3)
        b = np.zeros((n, 3))
        for a in range(3):
            # edge opposite corner a points from corner a+1 to corner a+2
            np.add.at(b, t[:, (a + 2) % 3], contrib[:, a])
            np.add.at(b, t[:, (a + 1) % 3], -contrib[:, a])
        rhs = b[free] / 3.0 - coupling @ targets
        positions = np.empty((n, 3))
        positions[handles] = targets
        positions[free] = lu.solve(rhs)
        R = _fit_cell_rotations(mesh, positions, weights)
        energies.append(arap_energy(mesh, positions, R, weights))
        if len(energies) > 1:
            prev = energies[-2]
            if prev - energies[-1] <= tol * max(prev, 1e-300):
                break
        if energies[-1] < 1e-24:
            break
    return ArapResult(positions=positions, energies=energies, rotations=R)


# --------------------------------------------------------------- parameterization

def tutte_embed(mesh: Mesh) -> np.ndarray:
    """Uniform-weight Tutte embedding with the boundary on the unit circle."""
    loops = mesh.boundary_loops
    if len(loops) != 1 or mesh.euler_characteristic != 1:
        raise PatchError("Tutte embedding needs a disk (one boundary loop, Euler characteristic 1)")
    loop = loops[0]
    v = mesh.vertices
    seg = np.linalg.norm(v[np.roll(loop, -1)] - v[loop], axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)[:-1]]) / seg.sum()
    angle = 2 * np.pi * s
    uv = np.zeros((mesh.n_vertices, 2))
    uv[loop] = np.column_stack([np.cos(angle), np.sin(angle)])
    interior = np.setdiff1d(np.arange(mesh.n_vertices), loop)
    if len(interior):
        adj = mesh.adjacency()
        deg = np.asarray(adj.sum(axis=1)).ravel()
        lap = (sparse.diags(deg) - adj).tocsr()
        A = lap[interior][:, interior].tocsc()
        rhs = -(lap[interior][:, loop] @ uv[loop])
        uv[interior] = spla.splu(A).solve(np.asarray(rhs))
    return uv


@dataclass
class ParamResult:
    uv: np.ndarray
    energies: list
    report: DistortionReport


def arap_energy_2d(cache: OperatorCache, uv) -> float:
    J = field_to_matrices(compute_jacobians(cache, uv))
    R = closest_rotations(J)
    return float(np.sum(cache.mesh.areas[:, None, None] * (J - R) ** 2))


def arap_parameterize(mesh: Mesh, init=None, iters: int = 100, tol: float = 1e-7,
                      cache: OperatorCache | None = None) -> ParamResult:
    """Local/global 2D ARAP parameterization of a disk patch.

    The local step snaps each triangle's 2x2 jacobian to its nearest rotation;
    the global step is the Poisson solve of those rotations.
    """
    if len(mesh.boundary_loops) != 1 or mesh.euler_characteristic != 1:
        raise PatchError("parameterization needs a disk-topology patch")
    if cache is None:
        cache = OperatorCache.from_mesh(mesh)
    uv = tutte_embed(mesh) if init is None else np.asarray(init, dtype=float)
    J = field_to_matrices(compute_jacobians(cache, uv))
    R = closest_rotations(J)
    energies = [float(np.sum(mesh.areas[:, None, None] * (J - R) ** 2))]
    for _ in range(iters):
        uv = poisson_solve(cache, matrices_to_field(R))
        J = field_to_matrices(compute_jacobians(cache, uv))
        R = closest_rotations(J)
        energies.append(float(np.sum(mesh.areas[:, None, None] * (J - R) ** 2)))
        if energies[-2] - energies[-1] <= tol * max(energies[-2], 1e-300):
            break
    return ParamResult(uv=uv, energies=energies, report=distortion_report(cache, uv, "2d"))


def procrustes_2d(source, target, weights=None):
    """Rotation (no reflection) and translation minimizing ``sum w |R s + t - x|^2``.

    Returns ``(aligned_source, angle, translation)``.
    """
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    w = np.ones(len(source)) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    cs, ct = w @ source, w @ target
    H = (source - cs).T @ ((target - ct) * w[:, None])
    angle = np.arctan2(H[0, 1] - H[1, 0], H[0, 0] + H[1, 1])
    c, s = np.cos(angle), np.sin(angle)
    R = np.array([[c, -s], [s, c]])
    trans = ct - R @ cs
    return source @ R.T + trans, float(angle), trans


# ------------------------------------------------------------------------ patches

def extract_disk_patch(mesh: Mesh, seed_vertex: int, radius: float) -> Mesh:
    """Geodesic ball (shortest edge paths) around ``seed_vertex``, aligned to z = 0.

    The ball's largest edge-connected piece is kept; it must be a disk. The
    patch is rigidly moved so its best-fit plane is z = 0 with the average
    normal along +z.
    """
    v, t = mesh.vertices, mesh.triangles
    e = mesh.edges
    lengths = np.linalg.norm(v[e[:, 0]] - v[e[:, 1]], axis=1)
    n = mesh.n_vertices
    graph = sparse.coo_matrix((lengths, (e[:, 0], e[:, 1])), shape=(n, n)).tocsr()
    dist = csgraph.dijkstra(graph, directed=False, indices=int(seed_vertex), limit=radius)
    inside = np.isfinite(dist)
    keep = np.flatnonzero(inside[t].all(axis=1))
    if len(keep) == 0:
        raise PatchError("patch is empty")
    tris = t[keep]
    # edge-connected components of the kept triangles
    und = np.sort(np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]), axis=1)
    _, inv = np.unique(und, axis=0, return_inverse=True)
    inv = inv.ravel()
    face = np.tile(np.arange(len(tris)), 3)
    inc = sparse.coo_matrix((np.ones(len(inv)), (face, inv))).tocsr()
    ncomp, labels = csgraph.connected_components(inc @ inc.T, directed=False)
    if ncomp > 1:
        biggest = np.argmax(np.bincount(labels))
        tris = tris[labels == biggest]
    used = np.unique(tris)
    remap = -np.ones(n, dtype=np.int64)
    remap[used] = np.arange(len(used))
    try:
        patch = Mesh(v[used], remap[tris])
    except MeshError as exc:
        raise PatchError(f"patch is not a valid manifold: {exc}") from exc
    if patch.euler_characteristic != 1 or len(patch.boundary_loops) != 1:
        raise PatchError("patch is not a disk "
                         f"(Euler characteristic {patch.euler_characteristic}, "
                         f"{len(patch.boundary_loops)} boundary loops)")
    return align_to_plane(patch)


def align_to_plane(patch: Mesh) -> Mesh:
    """Rigid motion putting the mass-weighted best-fit plane at z = 0, normal up."""
    m = patch.vertex_masses
    c = m @ patch.vertices / m.sum()
    x = patch.vertices - c
    cov = (x * m[:, None]).T @ x
    _, vecs = np.linalg.eigh(cov)
    axes = vecs[:, ::-1].T.copy()  # rows: largest variance first, plane normal last
    if np.linalg.det(axes) < 0:
        axes[1] *= -1
    mean_normal = (patch.normals * patch.areas[:, None]).sum(0)
    if axes[2] @ mean_normal < 0:
        axes[1] *= -1
        axes[2] *= -1
    return Mesh(x @ axes.T, patch.triangles)


# ------------------------------------------------------------------------ dataset

BASE_SHAPES = {
    "blob": lambda: shapes.bumpy_blob(3),
    "small_blob": lambda: shapes.bumpy_blob(2),
    "sphere": lambda: shapes.icosphere(4),
    "torus": lambda: shapes.torus(1.0, 0.45, 72, 32),
    "lumpy": lambda: shapes.bumpy_blob(4, axes=(1.0, 0.8, 0.7), bump=0.05, frequency=5, seed=3),
    "capsule": lambda: shapes.bumpy_blob(4, axes=(1.4, 0.6, 0.6), bump=0.02, frequency=4, seed=5),
}


def named_mesh(name: str) -> Mesh:
    """A procedural base shape by name, or an OBJ file path."""
    if name in BASE_SHAPES:
        return BASE_SHAPES[name]()
    return load_obj(name)


@dataclass
class DatasetConfig:
    mode: str = "arap"  # "arap" or "uv"
    seed: int = 0
    n_samples: int = 100
    test_fraction: float = 0.1
    features: dict = field(default_factory=lambda: asdict(FeatureConfig()))
    # arap mode
    mesh: str = "blob"
    n_handles: int = 6
    handle_indices: list | None = None
    max_angle_deg: float = 45.0
    max_shift: float = 0.3  # fraction of the bounding-box diagonal
    arap_iters: int = 30
    arap_tol: float = 1e-6
    # uv mode
    base_shapes: list = field(default_factory=lambda: list(BASE_SHAPES))
    radius_range: tuple = (0.1, 0.4)  # fraction of the base mesh diameter
    min_triangles: int = 100
    max_triangles: int = 800
    param_iters: int = 200
    param_tol: float = 1e-7
    max_attempts: int = 50

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(**self.features)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["radius_range"] = list(self.radius_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "radius_range" in known:
            known["radius_range"] = tuple(known["radius_range"])
        return cls(**known)


@dataclass
class TrainingSample:
    mesh_id: str
    psi: np.ndarray
    code: np.ndarray


@dataclass
class Dataset:
    mode: str
    meshes: dict  # id -> Mesh
    samples: list
    manifest: dict
    caches: dict = field(default_factory=dict)
    feature_config: FeatureConfig = FeatureConfig()

    def cache(self, mesh_id: str) -> OperatorCache:
        if mesh_id not in self.caches:
            self.caches[mesh_id] = OperatorCache.from_mesh(self.meshes[mesh_id])
        return self.caches[mesh_id]

    def split(self, name: str) -> list:
        idx = self.manifest["split"][name]
        return [self.samples[i] for i in idx]

    @property
    def code_size(self) -> int:
        return len(self.samples[0].code)


def _sample_rng(seed: int, index: int):
    return np.random.default_rng([seed, index])


def _random_rotation(rng, max_angle):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0, max_angle)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def handle_targets(rest, rng, max_angle_deg: float, max_shift: float, center=None):
    """Each handle independently rotated about ``center`` and then shifted."""
    rest = np.asarray(rest, dtype=float)
    center = np.zeros(3) if center is None else np.asarray(center)
    out = np.empty_like(rest)
    for h, p in enumerate(rest):
        R = _random_rotation(rng, np.deg2rad(max_angle_deg))
        d = rng.normal(size=3)
        d *= rng.uniform(0, max_shift) / np.linalg.norm(d)
        out[h] = center + R @ (p - center) + d
    return out


def _split(n: int, seed: int, test_fraction: float) -> dict:
    order = np.random.default_rng([seed, 0x5B17]).permutation(n)
    n_test = max(1, int(round(test_fraction * n))) if n > 1 else 0
    return {"train": sorted(order[n_test:].tolist()), "test": sorted(order[:n_test].tolist())}


def uv_code(spec, mesh: Mesh, fconf: FeatureConfig) -> np.ndarray:
    """Patch descriptor: mean and max over centroids of each WKS channel."""
    phi_c = spec.eigenvectors[mesh.triangles].mean(axis=1)
    w = wks(spec, phi_c, fconf.n_wks, fconf.variance_scale)
    return np.concatenate([w.mean(axis=0), w.max(axis=0)])


def generate_dataset(config: DatasetConfig) -> Dataset:
    if config.mode == "arap":
        return _generate_arap(config)
    if config.mode == "uv":
        return _generate_uv(config)
    raise ValueError(f"unknown dataset mode {config.mode!r}")


def _generate_arap(config: DatasetConfig) -> Dataset:
    mesh, _, _ = normalize_to_unit_sphere(named_mesh(config.mesh))
    if config.handle_indices is not None:
        handles = np.asarray(config.handle_indices, dtype=np.int64)
    else:
        handles = shapes.farthest_point_indices(mesh.vertices, config.n_handles)
    center = center_of_mass(mesh, mesh.vertices)
    shift = config.max_shift * mesh.bbox_diagonal
    samples = []
    records = []
    for i in range(config.n_samples):
        rng = _sample_rng(config.seed, i)
        targets = handle_targets(mesh.vertices[handles], rng, config.max_angle_deg, shift, center)
        res = arap_deform(mesh, handles, targets, config.arap_iters, config.arap_tol)
        samples.append(TrainingSample("mesh0", res.positions, targets.ravel()))
        records.append({"index": i, "meshId": "mesh0", "arapIterations": len(res.energies),
                        "arapEnergy": res.energy})
    manifest = {"format": "jfdataset-1", "mode": "arap", "seed": config.seed,
                "config": config.to_dict(), "handles": handles.tolist(),
                "samples": records, "rejections": [],
                "split": _split(len(samples), config.seed, config.test_fraction)}
    return Dataset("arap", {"mesh0": mesh}, samples, manifest,
                   feature_config=config.feature_config())


def _generate_uv(config: DatasetConfig) -> Dataset:
    fconf = config.feature_config()
    bases = {}
    for name in config.base_shapes:
        bases[name] = normalize_to_unit_sphere(named_mesh(name))[0]
    names = list(config.base_shapes)
    meshes, caches, samples, records, rejections = {}, {}, [], [], []
    for i in range(config.n_samples):
        rng = _sample_rng(config.seed, i)
        for attempt in range(config.max_attempts):
            name = names[int(rng.integers(len(names)))]
            base = bases[name]
            seed_vertex = int(rng.integers(base.n_vertices))
            radius = rng.uniform(*config.radius_range) * base.bbox_diagonal
            why = None
            try:
                patch = extract_disk_patch(base, seed_vertex, radius)
            except PatchError as exc:
                why = str(exc)
            if why is None and not config.min_triangles <= patch.n_triangles <= config.max_triangles:
                why = f"patch has {patch.n_triangles} triangles"
            if why is None:
                cache = OperatorCache.from_mesh(patch)
                param = arap_parameterize(patch, iters=config.param_iters,
                                          tol=config.param_tol, cache=cache)
                if param.report.count_flips:
                    why = f"parameterization has {param.report.count_flips} flipped triangles"
            if why is not None:
                rejections.append({"index": i, "attempt": attempt, "base": name,
                                   "seedVertex": seed_vertex, "radius": radius, "reason": why})
                continue
            uv, angle, _ = procrustes_2d(param.uv, patch.vertices[:, :2], patch.vertex_masses)
            spec = mesh_spectrum(cache, fconf)
            code = uv_code(spec, patch, fconf)
            mesh_id = f"patch{i:06d}"
            meshes[mesh_id] = patch
            caches[mesh_id] = cache
            samples.append(TrainingSample(mesh_id, uv, code))
            records.append({"index": i, "meshId": mesh_id, "base": name,
                            "seedVertex": seed_vertex, "radius": radius,
                            "nTriangles": patch.n_triangles, "flips": 0,
                            "countD10": param.report.count_high_distortion,
                            "paramIterations": len(param.energies) - 1})
            break
        else:
            raise OracleError(f"sample {i}: no valid patch after {config.max_attempts} attempts")
    manifest = {"format": "jfdataset-1", "mode": "uv", "seed": config.seed,
                "config": config.to_dict(), "samples": records, "rejections": rejections,
                "allGroundTruthFlipFree": True,
                "split": _split(len(samples), config.seed, config.test_fraction)}
    return Dataset("uv", meshes, samples, manifest, caches=caches, feature_config=fconf)


SAMPLE_FORMAT = "jfsample-1"


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write manifest.json, per-sample files and meshes/ (OBJ + operator cache)."""
    out = Path(out_dir)
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    mesh_records = []
    for mesh_id in sorted(dataset.meshes):
        mesh = dataset.meshes[mesh_id]
        cache = dataset.cache(mesh_id)
        mesh_spectrum(cache, dataset.feature_config)
        obj = out / "meshes" / f"{mesh_id}.obj"
        cfile = out / "meshes" / f"{mesh_id}.jfcache"
        save_obj(obj, mesh)
        save_cache(cfile, cache)
        mesh_records.append({"id": mesh_id, "obj": f"meshes/{mesh_id}.obj",
                             "cache": f"meshes/{mesh_id}.jfcache",
                             "sha256": _sha(obj), "cacheSha256": _sha(cfile)})
    manifest = dict(dataset.manifest)
    manifest["meshes"] = mesh_records
    manifest["features"] = asdict(dataset.feature_config)
    files = []
    for k, s in enumerate(dataset.samples):
        name = f"sample_{k:06d}.bin"
        write_container(out / name, SAMPLE_FORMAT,
                        {"meshId": s.mesh_id, "codeSize": len(s.code), "mode": dataset.mode},
                        {"psi": s.psi.astype("<f8"), "z": np.asarray(s.code, dtype="<f8")})
        files.append({"file": name, "meshId": s.mesh_id, "sha256": _sha(out / name)})
    manifest["sampleFiles"] = files
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    meshes, caches = {}, {}
    for rec in manifest["meshes"]:
        cache = load_cache(root / rec["cache"])
        meshes[rec["id"]] = cache.mesh
        caches[rec["id"]] = cache
    samples = []
    for rec in manifest["sampleFiles"]:
        meta, s = read_container(root / rec["file"], SAMPLE_FORMAT)
        samples.append(TrainingSample(meta["meshId"], s["psi"], s["z"]))
    fconf = FeatureConfig(**manifest["features"])
    return Dataset(manifest["mode"], meshes, samples, manifest, caches=caches,
                   feature_config=fconf)


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
