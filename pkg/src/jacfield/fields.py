"""Restriction of ambient 3x3 predictions to tangent spaces, and map diagnostics."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .operators import OperatorCache
from .poisson import compute_jacobians, field_to_matrices, matrices_to_field

DISTORTION_THRESHOLD = 10.0
SINGULAR_EPS = 1e-12


def restrict(P, frames) -> np.ndarray:
    """``R_i = P_i B_i``: (…, T, 3, 3) ambient matrices to (…, T, 3, 2)."""
    P = np.asarray(P)
    frames = np.asarray(frames)
    if P.shape[-3:-2] != frames.shape[:1] or P.shape[-2:] != (3, 3):
        raise ValueError(f"cannot restrict {P.shape} with frames {frames.shape}")
    return P @ frames


def restrict_adjoint(grad_R, frames) -> np.ndarray:
    """Pull a gradient w.r.t. ``R_i`` back to ``P_i``: ``dP_i = dR_i B_i^T``."""
    return np.asarray(grad_R) @ np.swapaxes(frames, -1, -2)


def restricted_field(P, frames, dim: int = 3) -> np.ndarray:
    """Restrict and pack into a (…, 2T, dim) field; ``dim=2`` drops the z row."""
    R = restrict(P, frames)[..., :dim, :]
    return matrices_to_field(R)


def restricted_field_adjoint(grad_field, frames, dim: int = 3) -> np.ndarray:
    """Adjoint of :func:`restricted_field`, returning (…, T, 3, 3)."""
    gR = field_to_matrices(grad_field)
    if dim < 3:
        pad = np.zeros(gR.shape[:-2] + (3 - dim, 2), dtype=gR.dtype)
        gR = np.concatenate([gR, pad], axis=-2)
    return restrict_adjoint(gR, frames)


@dataclass
class DistortionReport:
    sigma: np.ndarray  # (T, 2), descending per row
    distortion: np.ndarray  # (T,)
    flips: np.ndarray | None  # (T,) bool; None in 3D mode

    @property
    def count_high_distortion(self) -> int:
        return int(np.count_nonzero(self.distortion > DISTORTION_THRESHOLD))

    @property
    def count_flips(self) -> int | None:
        return None if self.flips is None else int(np.count_nonzero(self.flips))

    def summary(self) -> dict:
        return {
            "countD10": self.count_high_distortion,
            "flips": self.count_flips,
            "meanD": float(np.mean(np.minimum(self.distortion, np.finfo(float).max))),
            "medianD": float(np.median(self.distortion)),
        }


def distortion_report(cache: OperatorCache, positions, mode: str = "3d") -> DistortionReport:
    """Singular values, ``max(s1, 1/s2)`` and (2D only) orientation flips of a map."""
    positions = np.asarray(positions, dtype=np.float64)
    mode = mode.lower()
    if mode not in ("2d", "3d"):
        raise ValueError("mode must be '2d' or '3d'")
    dim = 2 if mode == "2d" else 3
    if positions.shape != (cache.n_vertices, dim):
        raise ValueError(f"expected positions of shape ({cache.n_vertices}, {dim})")
    J = field_to_matrices(compute_jacobians(cache, positions))  # (T, dim, 2)
    return jacobian_report(J, mode)


def jacobian_report(J, mode: str = "3d") -> DistortionReport:
    sigma = np.linalg.svd(J, compute_uv=False)
    with np.errstate(divide="ignore"):
        inv_small = np.where(sigma[:, 1] < SINGULAR_EPS, np.inf, 1.0 / sigma[:, 1])
    dist = np.maximum(sigma[:, 0], inv_small)
    flips = None
    if mode.lower() == "2d":
        flips = np.linalg.det(J) < 0
    return DistortionReport(sigma=sigma, distortion=dist, flips=flips)


def aggregate_reports(reports: list[DistortionReport]) -> dict:
    """Per-mesh statistics in the layout of a UV quality table."""
    d10 = np.array([r.count_high_distortion for r in reports], dtype=float)
    out = {"avgD10": float(d10.mean()), "medD10": float(np.median(d10)),
           "numMeshes": len(reports)}
    if reports and reports[0].flips is not None:
        flips = np.array([r.count_flips for r in reports], dtype=float)
        out["avgFlips"] = float(flips.mean())
        out["medFlips"] = float(np.median(flips))
        out["pctMeshesWithFlips"] = float(100.0 * np.mean(flips > 0))
    else:
        out["avgFlips"] = None
        out["medFlips"] = None
        out["pctMeshesWithFlips"] = None
    return out


def reports_to_json(reports: list[DistortionReport]) -> str:
    return json.dumps(aggregate_reports(reports), indent=2, sort_keys=True)
