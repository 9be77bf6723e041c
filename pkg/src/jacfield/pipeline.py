"""Inference, losses, training and evaluation for jacobian-field models.

Three models share the MLP shell and the training code:

* ``field`` - per-triangle 3x3 prediction from ``(z, centroid feature)``,
  restricted to tangent planes and integrated by the Poisson layer.
* ``displacement`` - per-vertex offsets from ``(z, vertex feature)``.
* ``global`` - one MLP on ``z`` alone emitting the whole jacobian stack of a
  single fixed mesh.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .features import FeatureConfig, centroid_features, mesh_spectrum, vertex_features
from .fields import aggregate_reports, distortion_report, restricted_field, restricted_field_adjoint
from .mesh import Mesh
from .neural import Adam, MlpParams, init_mlp, load_checkpoint, mlp_backward, mlp_output, save_checkpoint
from .operators import OperatorCache
from .poisson import compute_jacobians, field_to_matrices, poisson_adjoint, poisson_solve

MODEL_KINDS = ("field", "displacement", "global")
VERTEX_WEIGHT = 10.0


class DatasetError(ValueError):
    pass


# ----------------------------------------------------------------------- losses

@dataclass
class LossBreakdown:
    lVertex: float
    lJacobian: float
    lTotal: float

    def to_dict(self) -> dict:
        return asdict(self)


def _centered(mass, x):
    return x - np.einsum("v,bvd->bd", mass, x)[:, None, :] / mass.sum()


def batch_loss(cache: OperatorCache, phi, psi, field_=None, gt_field=None):
    """Per-sample losses and their gradients for a batch.

    ``phi``, ``psi`` are (B, V, d); ``field_``/``gt_field`` are (B, 2T, d) or
    None when there is no jacobian term. Returns
    ``(lVertex (B,), lJacobian (B,), dphi, dfield)`` where the gradients are of
    ``lTotal`` per sample.
    """
    mass_v = cache.mesh.vertex_masses
    r = _centered(mass_v, phi) - _centered(mass_v, psi)
    l_v = np.einsum("v,bvd,bvd->b", mass_v, r, r)
    # r is mass-centered, so the centering contributes nothing to the gradient
    dphi = VERTEX_WEIGHT * 2.0 * mass_v[None, :, None] * r
    if field_ is None:
        return l_v, np.zeros_like(l_v), dphi, None
    diff = field_ - gt_field
    l_j = np.einsum("r,brd,brd->b", cache.mass, diff, diff)
    dfield = 2.0 * cache.mass[None, :, None] * diff
    return l_v, l_j, dphi, dfield


def loss(cache: OperatorCache, mesh: Mesh, phi, R, psi) -> LossBreakdown:
    """Vertex and jacobian losses of one prediction.

    ``R`` is the predicted field (2T, d) before integration, or None.
    """
    phi = np.asarray(phi, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    if phi.shape != psi.shape or phi.shape[0] != mesh.n_vertices:
        raise ValueError(f"map shapes disagree: {phi.shape} vs {psi.shape}")
    gt = None
    if R is not None:
        R = np.asarray(R, dtype=np.float64)
        gt = compute_jacobians(cache, psi)
        if R.shape != gt.shape:
            raise ValueError(f"field shape {R.shape} does not match {gt.shape}")
        R = R[None]
        gt = gt[None]
    l_v, l_j, _, _ = batch_loss(cache, phi[None], psi[None], R, gt)
    return _breakdown(float(l_v[0]), float(l_j[0]))


def _breakdown(l_v, l_j) -> LossBreakdown:
    return LossBreakdown(lVertex=l_v, lJacobian=l_j, lTotal=VERTEX_WEIGHT * l_v + l_j)


# ----------------------------------------------------------------------- models

@dataclass
class MeshContext:
    cache: OperatorCache
    features: np.ndarray | None  # float32, per triangle or per vertex


@dataclass
class Prediction:
    phi: np.ndarray  # (B, V, d)
    field: np.ndarray | None  # (B, 2T, d)
    tape: dict


class Model:
    """A trainable map predictor; ``kind`` selects one of :data:`MODEL_KINDS`."""

    def __init__(self, kind: str, params: MlpParams, dim: int = 3,
                 feature_config: FeatureConfig = FeatureConfig(),
                 code_mean=None, code_std=None, n_triangles: int | None = None,
                 feature_mean=None, feature_std=None):
        if kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {kind!r}")
        if dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        self.kind = kind
        self.params = params
        self.dim = dim
        self.feature_config = feature_config
        nz = params.n_code
        self.code_mean = np.zeros(nz) if code_mean is None else np.asarray(code_mean, float)
        self.code_std = np.ones(nz) if code_std is None else np.asarray(code_std, float)
        self.n_triangles = n_triangles
        self.feature_mean = None if feature_mean is None else np.asarray(feature_mean, float)
        self.feature_std = None if feature_std is None else np.asarray(feature_std, float)

    @property
    def n_code(self) -> int:
        return self.params.n_code

    @classmethod
    def create(cls, kind: str, n_code: int, rng, dim: int = 3,
               feature_config: FeatureConfig = FeatureConfig(), cache: OperatorCache | None = None,
               hidden: int = 128, n_layers: int = 5, groups: int = 4,
               last_layer_scale: float = 1e-2, code_mean=None, code_std=None) -> "Model":
        n_tri = None
        if kind == "field":
            in_dim, out_dim = n_code + feature_config.width, 9
            offset = np.eye(3).ravel()
        elif kind == "displacement":
            in_dim, out_dim = n_code + feature_config.width, dim
            offset = np.zeros(dim)
        elif kind == "global":
            if cache is None:
                raise ValueError("the global-tensor model is tied to one mesh; pass its cache")
            n_tri = cache.n_triangles
            in_dim, out_dim = n_code, 2 * n_tri * dim
            eye = np.broadcast_to(np.eye(3), (n_tri, 3, 3))
            offset = restricted_field(eye, cache.frames, dim).ravel()
        else:
            raise ValueError(f"unknown model kind {kind!r}")
        params = init_mlp(in_dim, out_dim, rng, hidden, n_layers, groups, n_code, offset,
                          last_layer_scale)
        return cls(kind, params, dim, feature_config, code_mean, code_std, n_tri)

    # -- per-mesh data
    def context(self, cache: OperatorCache) -> MeshContext:
        if self.kind == "global":
            if cache.n_triangles != self.n_triangles:
                raise DatasetError("the global-tensor model only applies to the mesh it was "
                                   "trained on")
            return MeshContext(cache, None)
        spec = mesh_spectrum(cache, self.feature_config)
        if self.kind == "field":
            feats = centroid_features(cache.mesh, spec, self.feature_config)
        else:
            feats = vertex_features(cache.mesh, spec, self.feature_config)
        if self.feature_mean is not None:
            feats = (feats - self.feature_mean) / self.feature_std
        return MeshContext(cache, feats.astype(self.params.dtype))

    def raw_features(self, cache: OperatorCache):
        """Unnormalized point features and their area weights."""
        spec = mesh_spectrum(cache, self.feature_config)
        if self.kind == "field":
            return centroid_features(cache.mesh, spec, self.feature_config), cache.mesh.areas
        return vertex_features(cache.mesh, spec, self.feature_config), cache.mesh.vertex_masses

    def fit_feature_normalization(self, caches) -> None:
        """Area-weighted per-channel mean and standard deviation over ``caches``."""
        if self.kind == "global":
            return
        feats, weights = zip(*(self.raw_features(c) for c in caches))
        f = np.concatenate(feats)
        w = np.concatenate(weights)
        w = w / w.sum()
        mean = w @ f
        std = np.sqrt(w @ (f - mean) ** 2)
        self.feature_mean = mean
        self.feature_std = np.where(std > 1e-8, std, 1.0)

    def normalize_code(self, Z) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        if Z.shape[1] != self.n_code:
            raise ValueError(f"code must have length {self.n_code}, got {Z.shape[1]}")
        return (Z - self.code_mean) / self.code_std

    # -- forward / backward
    def forward(self, ctx: MeshContext, Z) -> Prediction:
        cache = ctx.cache
        zn = self.normalize_code(Z)
        b = len(zn)
        out, tape = mlp_output(self.params, zn, ctx.features)
        if self.kind == "field":
            P = out.reshape(b, cache.n_triangles, 3, 3)
            fld = restricted_field(P, cache.frames, self.dim)
            return Prediction(poisson_solve(cache, fld), fld, tape)
        if self.kind == "global":
            fld = out.reshape(b, 2 * cache.n_triangles, self.dim)
            return Prediction(poisson_solve(cache, fld), fld, tape)
        phi = cache.mesh.vertices[None, :, :self.dim] + out
        return Prediction(phi, None, tape)

    def backward(self, ctx: MeshContext, pred: Prediction, dphi, dfield=None) -> list:
        """Parameter gradients given loss gradients w.r.t. ``phi`` and the field."""
        cache = ctx.cache
        b = len(dphi)
        if self.kind == "displacement":
            d_out = dphi
        else:
            g = poisson_adjoint(cache, dphi)
            if dfield is not None:
                g = g + dfield
            if self.kind == "field":
                d_out = restricted_field_adjoint(g, cache.frames, self.dim).reshape(
                    b, cache.n_triangles, 9)
            else:
                d_out = g.reshape(b, -1)
        grads, _ = mlp_backward(self.params, pred.tape, d_out)
        return grads

    def infer(self, cache: OperatorCache, z):
        """``(phi, field)`` for one code; ``field`` is None for the displacement model."""
        pred = self.forward(self.context(cache), np.atleast_2d(z))
        return pred.phi[0], None if pred.field is None else pred.field[0]

    # -- persistence
    def meta(self) -> dict:
        return {"model": self.kind, "dim": self.dim, "mode": f"{self.dim}d",
                "features": asdict(self.feature_config),
                "featureWidth": self.feature_config.width,
                "codeMean": self.code_mean.tolist(), "codeStd": self.code_std.tolist(),
                "nTriangles": self.n_triangles,
                "featureMean": None if self.feature_mean is None else self.feature_mean.tolist(),
                "featureStd": None if self.feature_std is None else self.feature_std.tolist()}

    def save(self, path, extra: dict | None = None) -> None:
        meta = self.meta()
        meta.update(extra or {})
        save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "Model":
        params, meta = load_checkpoint(path)
        return cls(meta["model"], params, meta["dim"], FeatureConfig(**meta["features"]),
                   meta["codeMean"], meta["codeStd"], meta.get("nTriangles"),
                   meta.get("featureMean"), meta.get("featureStd"))


def infer(params: MlpParams, cache: OperatorCache, features, z, dim: int = 3):
    """Field-model inference from raw parts: ``P = f(z, c)``, restrict, integrate.

    Returns ``(phi, field)``.
    """
    out, _ = mlp_output(params, np.atleast_2d(z), np.asarray(features, dtype=params.dtype))
    P = out.reshape(cache.n_triangles, 3, 3)
    fld = restricted_field(P, cache.frames, dim)
    return poisson_solve(cache, fld), fld


# --------------------------------------------------------------------- training

@dataclass
class TrainConfig:
    model: str = "field"
    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-3
    lr_final: float = 1e-4
    patience: int = 10
    smoothing: int = 5
    plateau_tol: float = 0.01
    seed: int = 0
    hidden: int = 128
    n_layers: int = 5
    groups: int = 4
    last_layer_scale: float = 1e-2
    normalize_code: bool = True
    normalize_features: bool = True
    overfit: int = 0  # >0: train on this many samples only, one step per epoch
    max_steps: int | None = None
    target_ratio: float | None = None  # stop once lTotal <= ratio * first lTotal

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class TrainResult:
    model: Model
    history: list
    steps: int
    initial_loss: float = field(default=None)

    @property
    def final_loss(self) -> float:
        return self.history[-1]["lTotal"]


def plateaued(losses, patience: int, smoothing: int, tol: float) -> bool:
    """True when the moving average improved by less than ``tol`` over ``patience`` epochs."""
    if len(losses) < patience + smoothing:
        return False
    now = float(np.mean(losses[-smoothing:]))
    then = float(np.mean(losses[-smoothing - patience:-patience]))
    if then <= 0:
        return True
    return (then - now) / then < tol


def _batches(indices, batch_size, rng):
    order = rng.permutation(indices)
    return [order[s:s + batch_size] for s in range(0, len(order), batch_size)]


def batch_gradients(model: Model, dataset, indices, contexts=None, gt_cache=None):
    """Mean loss and mean gradient over ``indices``, grouped by mesh.

    Returns ``(grads, lVertex, lJacobian)`` with the losses summed (not averaged)
    over the samples.
    """
    contexts = {} if contexts is None else contexts
    gt_cache = {} if gt_cache is None else gt_cache
    n = len(indices)
    groups: dict = {}
    for i in indices:
        groups.setdefault(dataset.samples[i].mesh_id, []).append(int(i))
    total = None
    sum_v = sum_j = 0.0
    for mesh_id, idx in groups.items():
        if mesh_id not in contexts:
            contexts[mesh_id] = model.context(dataset.cache(mesh_id))
        ctx = contexts[mesh_id]
        cache = ctx.cache
        Z = np.stack([dataset.samples[i].code for i in idx])
        psi = np.stack([dataset.samples[i].psi for i in idx])
        if psi.shape[1:] != (cache.n_vertices, model.dim):
            raise DatasetError(f"sample {idx[0]}: map shape {psi.shape[1:]} does not fit "
                               f"mesh {mesh_id} in {model.dim}D")
        pred = model.forward(ctx, Z)
        gt = None
        if pred.field is not None:
            gt = np.stack([_gt_field(gt_cache, cache, dataset, i) for i in idx])
        l_v, l_j, dphi, dfield = batch_loss(cache, pred.phi, psi, pred.field, gt)
        grads = model.backward(ctx, pred, dphi / n, None if dfield is None else dfield / n)
        if total is None:
            total = grads
        else:
            total = [a + g for a, g in zip(total, grads)]
        sum_v += float(l_v.sum())
        sum_j += float(l_j.sum())
    return total, sum_v, sum_j


def _gt_field(store, cache, dataset, i):
    if i not in store:
        store[i] = compute_jacobians(cache, dataset.samples[i].psi)
    return store[i]


def code_statistics(dataset, indices):
    Z = np.stack([dataset.samples[i].code for i in indices])
    if len(Z) < 2:
        return np.zeros(Z.shape[1]), np.ones(Z.shape[1])
    std = Z.std(axis=0)
    return Z.mean(axis=0), np.where(std > 1e-8, std, 1.0)


def new_model(dataset, config: TrainConfig, train_idx) -> Model:
    rng = np.random.default_rng([config.seed, 1])
    dim = dataset.samples[0].psi.shape[1]
    mean = std = None
    if config.normalize_code:
        mean, std = code_statistics(dataset, train_idx)
    cache = None
    if config.model == "global":
        ids = {dataset.samples[i].mesh_id for i in range(len(dataset.samples))}
        if len(ids) != 1:
            raise DatasetError("the global-tensor model needs a single-mesh dataset "
                               f"(found {len(ids)} meshes)")
        cache = dataset.cache(ids.pop())
    model = Model.create(config.model, dataset.code_size, rng, dim, dataset.feature_config,
                         cache, config.hidden, config.n_layers, config.groups,
                         config.last_layer_scale, mean, std)
    if config.normalize_features:
        ids = sorted({dataset.samples[i].mesh_id for i in train_idx})
        model.fit_feature_normalization([dataset.cache(k) for k in ids])
    return model


def train(dataset, config: TrainConfig, log_path=None, checkpoint_path=None,
          model: Model | None = None, progress=None, loss_log_path=None) -> TrainResult:
    """Adam on mesh-grouped mini-batches with one learning-rate drop at a plateau.

    One JSON line per epoch is written to ``log_path`` when given. ``loss_log_path``
    receives the same records without the wall-clock field, so two runs with
    the same seed produce identical files.
    """
    train_idx = np.asarray(dataset.manifest["split"]["train"], dtype=np.int64)
    if config.overfit:
        train_idx = train_idx[:config.overfit]
    if len(train_idx) == 0:
        raise DatasetError("training split is empty")
    if model is None:
        model = new_model(dataset, config, train_idx)
    arrays = model.params.arrays()
    opt = Adam(arrays, lr=config.lr)
    batch_size = len(train_idx) if config.overfit else config.batch_size
    contexts, gt_store = {}, {}
    history, losses = [], []
    log = open(log_path, "w") if log_path is not None else None
    loss_log = open(loss_log_path, "w") if loss_log_path is not None else None
    start = time.perf_counter()
    steps = 0
    initial = None
    try:
        for epoch in range(config.epochs):
            rng = np.random.default_rng([config.seed, 2, epoch])
            sum_v = sum_j = 0.0
            for batch in _batches(train_idx, batch_size, rng):
                grads, lv, lj = batch_gradients(model, dataset, batch, contexts, gt_store)
                sum_v += lv
                sum_j += lj
                opt.step(arrays, grads)
                steps += 1
                if config.max_steps is not None and steps >= config.max_steps:
                    break
            n = len(train_idx)
            rec = {"epoch": epoch, "lr": opt.lr, "lVertex": sum_v / n, "lJacobian": sum_j / n,
                   "lTotal": VERTEX_WEIGHT * sum_v / n + sum_j / n,
                   "wallSeconds": round(time.perf_counter() - start, 3)}
            history.append(rec)
            losses.append(rec["lTotal"])
            if initial is None:
                initial = rec["lTotal"]
            if log is not None:
                log.write(json.dumps(rec) + "\n")
                log.flush()
            if loss_log is not None:
                timeless = {k: v for k, v in rec.items() if k != "wallSeconds"}
                loss_log.write(json.dumps(timeless) + "\n")
                loss_log.flush()
            if progress is not None:
                progress(rec)
            if opt.lr > config.lr_final and plateaued(losses, config.patience, config.smoothing,
                                                      config.plateau_tol):
                opt.lr = config.lr_final
            if config.max_steps is not None and steps >= config.max_steps:
                break
            if config.target_ratio is not None and rec["lTotal"] <= config.target_ratio * initial:
                break
    finally:
        if log is not None:
            log.close()
        if loss_log is not None:
            loss_log.close()
    if checkpoint_path is not None:
        model.save(checkpoint_path, {"seed": config.seed, "training": config.to_dict(),
                                     "steps": steps, "datasetMode": dataset.mode})
    return TrainResult(model, history, steps, initial)


# ------------------------------------------------------------------- evaluation

@dataclass
class EvalMetrics:
    L2V: float
    L2J: float
    L2N: float
    perSample: list
    distortion: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _face_normals(positions, triangles):
    p = positions
    if p.shape[1] == 2:
        p = np.column_stack([p, np.zeros(len(p))])
    n = np.cross(p[triangles[:, 1]] - p[triangles[:, 0]], p[triangles[:, 2]] - p[triangles[:, 0]])
    return n


def sample_metrics(cache: OperatorCache, phi, psi) -> dict:
    """Errors of one predicted map against ground truth.

    Both maps are centered at their lumped-mass centroid and scaled by the factor
    that puts the ground truth inside the unit sphere. ``L2V`` is the mean
    squared vertex distance (x100), ``L2J`` the mean squared Frobenius jacobian
    error (x10), ``L2N`` the mean face-normal angle in degrees.
    """
    mass = cache.mesh.vertex_masses
    phi = np.asarray(phi, dtype=np.float64)[None]
    psi = np.asarray(psi, dtype=np.float64)[None]
    p = _centered(mass, phi)[0]
    g = _centered(mass, psi)[0]
    scale = 1.0 / np.linalg.norm(g, axis=1).max()
    p, g = p * scale, g * scale
    d2 = np.sum((p - g) ** 2, axis=1)
    jp = field_to_matrices(compute_jacobians(cache, p))
    jg = field_to_matrices(compute_jacobians(cache, g))
    j2 = np.sum((jp - jg) ** 2, axis=(1, 2))
    t = cache.mesh.triangles
    npred, ngt = _face_normals(p, t), _face_normals(g, t)
    ang = np.degrees(np.arctan2(np.linalg.norm(np.cross(npred, ngt), axis=1),
                                np.einsum("ij,ij->i", npred, ngt)))
    return {"L2V": 100.0 * float(d2.mean()), "L2J": 10.0 * float(j2.mean()),
            "L2N": float(ang.mean()), "meanVertexDistance": float(np.sqrt(d2).mean())}


def evaluate(model: Model, dataset, split: str = "test") -> EvalMetrics:
    """Mean metrics over a split; UV models also get distortion statistics."""
    idx = dataset.manifest["split"][split]
    if not idx:
        raise DatasetError(f"split {split!r} is empty")
    contexts = {}
    per, reports = [], []
    for i in idx:
        s = dataset.samples[i]
        if s.mesh_id not in contexts:
            contexts[s.mesh_id] = model.context(dataset.cache(s.mesh_id))
        ctx = contexts[s.mesh_id]
        phi = model.forward(ctx, s.code[None]).phi[0]
        m = sample_metrics(ctx.cache, phi, s.psi)
        m["index"] = int(i)
        m["meshId"] = s.mesh_id
        if model.dim == 2:
            rep = distortion_report(ctx.cache, phi, "2d")
            reports.append(rep)
            m.update(rep.summary())
        per.append(m)
    agg = {k: float(np.mean([p[k] for p in per])) for k in ("L2V", "L2J", "L2N")}
    dist = aggregate_reports(reports) if reports else None
    return EvalMetrics(agg["L2V"], agg["L2J"], agg["L2N"], per, dist)


# -------------------------------------------------------------- remeshing check

def transfer(values, mesh: Mesh, correspondence) -> np.ndarray:
    """Per-vertex ``values`` of ``mesh`` read at corresponding points.

    ``correspondence`` is either vertex indices or a ``(triangles, barycentric)``
    pair as returned by :func:`jacfield.shapes.closest_points`.
    """
    values = np.asarray(values)
    if isinstance(correspondence, tuple):
        tri, bary = correspondence[:2]
        return np.einsum("nk,nkd->nd", bary, values[mesh.triangles[tri]])
    return values[np.asarray(correspondence)]


def remesh_deviation(phi_ref, rest_ref, phi_other, other_mesh: Mesh, correspondence) -> dict:
    """Disagreement of two predictions of the same map on different triangulations.

    Maps are compared up to translation. The deviation is the mean distance at
    corresponding points; it is reported relative to the mean displacement of
    the reference prediction from its rest pose.
    """
    a = np.asarray(phi_ref)
    b = transfer(phi_other, other_mesh, correspondence)
    diff = b - a
    deviation = float(np.linalg.norm(diff - diff.mean(0), axis=1).mean())
    disp = a - np.asarray(rest_ref)
    magnitude = float(np.linalg.norm(disp - disp.mean(0), axis=1).mean())
    return {"meanDeviation": deviation, "meanDeformation": magnitude,
            "relative": deviation / magnitude if magnitude > 0 else float("inf")}
