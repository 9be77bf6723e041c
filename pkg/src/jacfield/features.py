"""Centroid features: position, normal and Wave-Kernel Signature."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.sparse import linalg as spla
from threadpoolctl import threadpool_limits

from .mesh import Mesh
from .operators import OperatorCache

DENSE_EIGEN_LIMIT = 3000


class SpectrumError(np.linalg.LinAlgError):
    pass


@dataclass
class SpectralData:
    eigenvalues: np.ndarray  # (k,), ascending
    eigenvectors: np.ndarray  # (V, k), mass-orthonormal

    @property
    def k(self) -> int:
        return len(self.eigenvalues)


@dataclass(frozen=True)
class FeatureConfig:
    n_wks: int = 50
    n_eigs: int = 64
    variance_scale: float = 7.0

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def width(self) -> int:
        return 6 + self.n_wks


def compute_spectrum(cache: OperatorCache, vertex_mass=None, k: int = 64,
                     tol: float = 1e-8) -> SpectralData:
    """Smallest ``k`` eigenpairs of ``L phi = lam M phi`` with lumped masses ``M``.

    Each eigenvector's largest-magnitude entry is made positive.
    """
    lap = cache.laplacian
    n = lap.shape[0]
    if vertex_mass is None:
        vertex_mass = cache.mesh.vertex_masses
    vertex_mass = np.asarray(vertex_mass, dtype=np.float64)
    if not 0 < k < n:
        raise ValueError(f"need 0 < k < V (k={k}, V={n})")
    # LAPACK reductions depend on the thread count; one thread keeps caches bit-stable
    with threadpool_limits(limits=1):
        if n <= DENSE_EIGEN_LIMIT:
            lam, phi = scipy.linalg.eigh(lap.toarray(), np.diag(vertex_mass),
                                         subset_by_index=[0, k - 1])
        else:
            shift = -1e-8 * abs(lap.diagonal()).max()
            lam, phi = spla.eigsh(lap.tocsc(), k=k, M=sparse.diags(vertex_mass),
                                  sigma=shift, which="LM")
        order = np.argsort(lam)
        lam, phi = lam[order], phi[:, order]
    # mass re-normalization guards against solver scaling conventions
    phi = phi / np.sqrt(np.einsum("vk,v,vk->k", phi, vertex_mass, phi))[None, :]
    idx = np.argmax(np.abs(phi), axis=0)
    signs = np.sign(phi[idx, np.arange(k)])
    phi = phi * signs[None, :]

    mphi = vertex_mass[:, None] * phi
    resid = np.linalg.norm(lap @ phi - lam[None, :] * mphi, axis=0) / np.linalg.norm(mphi, axis=0)
    worst = float(resid.max())
    if worst > tol:
        raise SpectrumError(f"eigen-solve residual {worst:.3e} exceeds {tol:.1e}")
    return SpectralData(eigenvalues=lam, eigenvectors=phi)


def wks(spec: SpectralData, values, n_energies: int = 50,
        variance_scale: float = 7.0) -> np.ndarray:
    """Wave-Kernel Signature at points whose eigenfunction values are ``values`` (n, k).

    Log-energies are spaced uniformly over ``[log lam_2, log lam_k]`` and the
    band width is ``variance_scale`` grid steps. The zero eigenpair is skipped.
    """
    if spec.k < 3:
        raise ValueError("WKS needs at least 3 eigenpairs")
    if n_energies < 2:
        raise ValueError("WKS needs at least 2 energy samples")
    values = np.asarray(values, dtype=np.float64)
    log_lam = np.log(np.maximum(spec.eigenvalues[1:], np.finfo(float).tiny))
    energies = np.linspace(log_lam[0], log_lam[-1], n_energies)
    sigma = variance_scale * (energies[1] - energies[0])
    weights = np.exp(-((energies[:, None] - log_lam[None, :]) ** 2) / (2 * sigma ** 2))
    norm = 1.0 / weights.sum(axis=1)
    return (values[:, 1:] ** 2) @ weights.T * norm[None, :]


def centroid_features(mesh: Mesh, spec: SpectralData | None,
                      config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """(T, 6 + n_wks): centroid, normal, WKS of barycentrically averaged eigenfunctions."""
    parts = [mesh.centroids, mesh.normals]
    if config.n_wks:
        phi_c = spec.eigenvectors[mesh.triangles].mean(axis=1)
        parts.append(wks(spec, phi_c, config.n_wks, config.variance_scale))
    return np.concatenate(parts, axis=1)


def vertex_features(mesh: Mesh, spec: SpectralData | None,
                    config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """(V, 6 + n_wks) counterpart of :func:`centroid_features` at the vertices."""
    parts = [mesh.vertices, mesh.vertex_normals]
    if config.n_wks:
        parts.append(wks(spec, spec.eigenvectors, config.n_wks, config.variance_scale))
    return np.concatenate(parts, axis=1)


def mesh_spectrum(cache: OperatorCache, config: FeatureConfig) -> SpectralData | None:
    """Spectrum sized for ``config`` (k clamped below V), memoized on the cache."""
    if not config.n_wks:
        return None
    k = min(config.n_eigs, cache.n_vertices - 1)
    if cache.spectrum is not None and cache.spectrum.k == k:
        return cache.spectrum
    cache.spectrum = compute_spectrum(cache, k=k)
    return cache.spectrum
