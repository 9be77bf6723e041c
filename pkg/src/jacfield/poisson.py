"""The Poisson layer: candidate jacobians to vertex positions, and its adjoint.

Jacobian fields are stored as (2T, d) stacks. Block ``i`` (rows ``2i, 2i+1``)
holds ``J_i^T`` in the frame of triangle ``i``, so ``grad @ phi`` produces a
field directly. Batches add a leading axis: (B, 2T, d) fields map to
(B, V, d) positions with a single multi-right-hand-side solve.
"""
from __future__ import annotations

import numpy as np

from .operators import OperatorCache


def _as_batch(x, rows, what):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != rows:
        raise ValueError(f"{what} must have {rows} rows, got shape {x.shape}")
    return x, single


def _solve_batch(cache: OperatorCache, rhs):
    b, n, d = rhs.shape
    stacked = rhs.transpose(1, 0, 2).reshape(n, b * d)
    x = cache.solve(stacked)
    return x.reshape(n, b, d).transpose(1, 0, 2)


def poisson_solve(cache: OperatorCache, field) -> np.ndarray:
    """Area-weighted least-squares integration of a jacobian field, ``phi[pin] = 0``."""
    m, single = _as_batch(field, 2 * cache.n_triangles, "field")
    phi = _solve_batch(cache, _rhs(cache, m))
    return phi[0] if single else phi


def _rhs(cache, m):
    weighted = m * cache.mass[None, :, None]
    b, r, d = weighted.shape
    flat = weighted.transpose(1, 0, 2).reshape(r, b * d)
    out = cache.grad.T @ flat
    return out.reshape(cache.n_vertices, b, d).transpose(1, 0, 2)


def poisson_adjoint(cache: OperatorCache, upstream) -> np.ndarray:
    """Gradient of a scalar w.r.t. the field given its gradient w.r.t. the positions.

    The pinned row of ``upstream`` is discarded; the same factorization serves
    because the Laplacian is symmetric.
    """
    g, single = _as_batch(upstream, cache.n_vertices, "upstream")
    x = _solve_batch(cache, g)
    b, n, d = x.shape
    flat = x.transpose(1, 0, 2).reshape(n, b * d)
    out = (cache.grad @ flat) * cache.mass[:, None]
    out = out.reshape(2 * cache.n_triangles, b, d).transpose(1, 0, 2)
    return out[0] if single else out


def compute_jacobians(cache: OperatorCache, positions) -> np.ndarray:
    """Field of a per-vertex map, ``grad @ phi``."""
    p, single = _as_batch(positions, cache.n_vertices, "positions")
    b, n, d = p.shape
    flat = p.transpose(1, 0, 2).reshape(n, b * d)
    out = (cache.grad @ flat).reshape(2 * cache.n_triangles, b, d).transpose(1, 0, 2)
    return out[0] if single else out


def poisson_residual(cache: OperatorCache, positions, field) -> float:
    """``sum_i |t_i| ||phi grad_i^T - M_i||^2``."""
    diff = compute_jacobians(cache, positions) - np.asarray(field)
    return float(np.sum(cache.mass[:, None] * diff ** 2))


def field_to_matrices(field) -> np.ndarray:
    """(…, 2T, d) stack to per-triangle (…, T, d, 2) jacobian matrices."""
    f = np.asarray(field)
    lead = f.shape[:-2]
    t2, d = f.shape[-2:]
    blocks = f.reshape(*lead, t2 // 2, 2, d)
    return np.swapaxes(blocks, -1, -2)


def matrices_to_field(mats) -> np.ndarray:
    """Inverse of :func:`field_to_matrices`."""
    m = np.asarray(mats)
    lead = m.shape[:-3]
    t, d, _ = m.shape[-3:]
    return np.swapaxes(m, -1, -2).reshape(*lead, 2 * t, d)
