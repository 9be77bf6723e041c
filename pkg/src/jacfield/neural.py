"""Per-point MLP with group norm, hand-derived backward pass, and Adam.

The network maps ``concat(z, c)`` to an output vector. Inputs are passed in
factored form: a per-sample code ``z`` of shape (B, nz) and per-point features
``c`` of shape (N, nc) shared by every sample, giving outputs (B, N, out). The
first layer is split accordingly so the feature half of the product is only
computed once per batch. With ``c=None`` the network sees ``z`` alone.

Hidden layers are ``linear -> group norm -> ReLU``; the last layer is linear.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container

GN_EPS = 1e-5
CHECKPOINT_FORMAT = "jfckpt-1"


@dataclass
class MlpParams:
    weights: list  # (in, out) per layer
    biases: list
    gn_scale: list  # hidden layers only
    gn_offset: list
    groups: int = 4
    n_code: int = 0  # leading input columns that come from z
    output_offset: np.ndarray = field(default=None)  # added to raw output, not trained

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def arrays(self) -> list:
        """Trainable arrays in their fixed declared order."""
        out = []
        for layer in range(self.n_layers):
            out += [self.weights[layer], self.biases[layer]]
            if layer < self.n_layers - 1:
                out += [self.gn_scale[layer], self.gn_offset[layer]]
        return out

    def names(self) -> list[str]:
        out = []
        for layer in range(self.n_layers):
            out += [f"w{layer}", f"b{layer}"]
            if layer < self.n_layers - 1:
                out += [f"gn_scale{layer}", f"gn_offset{layer}"]
        return out

    def count(self) -> int:
        return int(sum(a.size for a in self.arrays()))

    def astype(self, dtype) -> "MlpParams":
        conv = lambda xs: [np.array(x, dtype=dtype) for x in xs]
        off = None if self.output_offset is None else np.array(self.output_offset)
        return MlpParams(conv(self.weights), conv(self.biases), conv(self.gn_scale),
                         conv(self.gn_offset), self.groups, self.n_code, off)

    def copy(self) -> "MlpParams":
        return self.astype(self.dtype)

    @classmethod
    def from_arrays(cls, arrays, template: "MlpParams") -> "MlpParams":
        arrays = list(arrays)
        w, b, s, o = [], [], [], []
        it = iter(arrays)
        for layer in range(template.n_layers):
            w.append(next(it))
            b.append(next(it))
            if layer < template.n_layers - 1:
                s.append(next(it))
                o.append(next(it))
        return cls(w, b, s, o, template.groups, template.n_code, template.output_offset)


def init_mlp(in_dim: int, out_dim: int, rng, hidden: int = 128, n_layers: int = 5,
             groups: int = 4, n_code: int = 0, output_offset=None,
             last_layer_scale: float = 1e-2, dtype=np.float32) -> MlpParams:
    """He-uniform weights, zero biases, unit group-norm scale, zero offset.

    The last layer is shrunk by ``last_layer_scale`` so the untrained network
    stays close to its output offset.
    """
    if hidden % groups:
        raise ValueError(f"group count {groups} does not divide width {hidden}")
    dims = [in_dim] + [hidden] * (n_layers - 1) + [out_dim]
    weights, biases, scales, offsets = [], [], [], []
    for layer in range(n_layers):
        fan_in = dims[layer]
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, dims[layer + 1]))
        if layer == n_layers - 1:
            w *= last_layer_scale
        weights.append(w.astype(dtype))
        biases.append(np.zeros(dims[layer + 1], dtype=dtype))
        if layer < n_layers - 1:
            scales.append(np.ones(dims[layer + 1], dtype=dtype))
            offsets.append(np.zeros(dims[layer + 1], dtype=dtype))
    if output_offset is None:
        output_offset = np.zeros(out_dim)
    return MlpParams(weights, biases, scales, offsets, groups, n_code,
                     np.asarray(output_offset, dtype=np.float64))


def zero_mlp(in_dim: int, out_dim: int, hidden: int = 128, n_layers: int = 5,
             groups: int = 4, n_code: int = 0, output_offset=None,
             dtype=np.float32) -> MlpParams:
    """All weights, biases and group-norm parameters zero; outputs the offset."""
    p = init_mlp(in_dim, out_dim, np.random.default_rng(0), hidden, n_layers, groups,
                 n_code, output_offset, dtype=dtype)
    return MlpParams.from_arrays([np.zeros_like(a) for a in p.arrays()], p)


def group_norm(x, groups: int, scale, offset, eps: float = GN_EPS):
    """Per-sample, per-group standardization followed by an affine map.

    ``x`` has channels on its last axis.
    """
    x = np.asarray(x)
    c = x.shape[-1]
    if c % groups:
        raise ValueError(f"{groups} groups do not divide {c} channels")
    xg = x.reshape(*x.shape[:-1], groups, c // groups)
    mu = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv_std).reshape(x.shape)
    return xhat * scale + offset, (xhat, inv_std)


def group_norm_backward(dy, cache, groups: int, scale):
    xhat, inv_std = cache
    c = dy.shape[-1]
    m = c // groups
    dscale = (dy * xhat).reshape(-1, c).sum(axis=0)
    doffset = dy.reshape(-1, c).sum(axis=0)
    dxhat = (dy * scale).reshape(*dy.shape[:-1], groups, m)
    xh = xhat.reshape(dxhat.shape)
    dx = inv_std * (dxhat - dxhat.mean(-1, keepdims=True)
                    - xh * (dxhat * xh).mean(-1, keepdims=True))
    return dx.reshape(dy.shape), dscale, doffset


def mlp_apply(params: MlpParams, z, c=None):
    """Raw network output (B, N, out), or (B, out) without ``c``, plus a tape.

    The output offset is not included; see :func:`mlp_output`.
    """
    dt = params.dtype
    z = np.asarray(z, dtype=dt)
    w0 = params.weights[0]
    nz = params.n_code
    if z.ndim != 2 or z.shape[1] != nz:
        raise ValueError(f"code must have shape (B, {nz}), got {z.shape}")
    if c is None:
        if w0.shape[0] != nz:
            raise ValueError("network expects per-point features")
        a = z @ w0 + params.biases[0]
    else:
        c = np.asarray(c, dtype=dt)
        if c.ndim != 2 or c.shape[1] + nz != w0.shape[0]:
            raise ValueError(f"features must have {w0.shape[0] - nz} columns, got {c.shape}")
        a = (z @ w0[:nz])[:, None, :] + (c @ w0[nz:])[None, :, :] + params.biases[0]
    tape = {"z": z, "c": c, "pre": [], "gn": [], "act": []}
    h = a
    for layer in range(params.n_layers):
        if layer > 0:
            h = h @ params.weights[layer] + params.biases[layer]
        if layer == params.n_layers - 1:
            break
        y, gcache = group_norm(h, params.groups, params.gn_scale[layer], params.gn_offset[layer])
        tape["gn"].append(gcache)
        tape["pre"].append(y)
        h = np.maximum(y, 0)
        tape["act"].append(h)
    return h, tape


def mlp_output(params: MlpParams, z, c=None):
    raw, tape = mlp_apply(params, z, c)
    return raw.astype(np.float64) + params.output_offset, tape


def mlp_backward(params: MlpParams, tape, d_out):
    """Reverse pass. Returns ``(grads, dz)`` with grads aligned to ``params.arrays()``.

    Gradients are summed over every sample and point.
    """
    dt = params.dtype
    d = np.asarray(d_out, dtype=dt)
    n = params.n_layers
    gw = [None] * n
    gb = [None] * n
    gs = [None] * (n - 1)
    go = [None] * (n - 1)
    for layer in range(n - 1, -1, -1):
        if layer > 0:
            inp = tape["act"][layer - 1]
            gw[layer] = inp.reshape(-1, inp.shape[-1]).T @ d.reshape(-1, d.shape[-1])
            gb[layer] = d.reshape(-1, d.shape[-1]).sum(axis=0)
            d = d @ params.weights[layer].T
            # through ReLU and group norm of the previous hidden layer
            d = d * (tape["pre"][layer - 1] > 0)
            d, gs[layer - 1], go[layer - 1] = group_norm_backward(
                d, tape["gn"][layer - 1], params.groups, params.gn_scale[layer - 1])
        else:
            w0 = params.weights[0]
            nz = params.n_code
            z, c = tape["z"], tape["c"]
            gb[0] = d.reshape(-1, d.shape[-1]).sum(axis=0)
            if c is None:
                gw[0] = z.T @ d
                dz = d @ w0.T
            else:
                d_per_sample = d.sum(axis=1)  # (B, H)
                d_per_point = d.sum(axis=0)  # (N, H)
                gw[0] = np.concatenate([z.T @ d_per_sample, c.T @ d_per_point], axis=0)
                dz = d_per_sample @ w0[:nz].T
    grads = []
    for layer in range(n):
        grads += [gw[layer].astype(dt), gb[layer].astype(dt)]
        if layer < n - 1:
            grads += [gs[layer].astype(dt), go[layer].astype(dt)]
    return grads, dz


def mlp_forward(params: MlpParams, z, c) -> np.ndarray:
    """A single 3x3 prediction ``reshape(f(z, c), 3, 3) + offset`` for one point."""
    out, _ = mlp_output(params, np.atleast_2d(z), np.atleast_2d(c))
    return out.reshape(3, 3)


class Adam:
    """Adam with bias correction over a fixed list of arrays, updated in place."""

    def __init__(self, arrays, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(a, dtype=np.float64) for a in arrays]
        self.v = [np.zeros_like(a, dtype=np.float64) for a in arrays]

    def step(self, arrays, grads) -> None:
        if len(arrays) != len(self.m):
            raise ValueError("parameter list changed shape")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            if a.shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} does not match {a.shape}")
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * np.square(g, dtype=np.float64)
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            a -= update.astype(a.dtype)


def save_checkpoint(path, params: MlpParams, meta: dict) -> None:
    shapes = [list(a.shape) for a in params.arrays()]
    header = dict(meta)
    header.update({"layer_shapes": shapes, "names": params.names(), "groups": params.groups,
                   "n_code": params.n_code, "n_layers": params.n_layers})
    sections = {name: a.astype("<f4") for name, a in zip(params.names(), params.arrays())}
    sections["output_offset"] = np.asarray(params.output_offset, dtype="<f8")
    write_container(path, CHECKPOINT_FORMAT, header, sections)


def load_checkpoint(path):
    """Returns ``(params, meta)``."""
    meta, sections = read_container(path, CHECKPOINT_FORMAT)
    n = meta["n_layers"]
    w = [sections[f"w{i}"] for i in range(n)]
    b = [sections[f"b{i}"] for i in range(n)]
    s = [sections[f"gn_scale{i}"] for i in range(n - 1)]
    o = [sections[f"gn_offset{i}"] for i in range(n - 1)]
    params = MlpParams(w, b, s, o, meta["groups"], meta["n_code"], sections["output_offset"])
    return params, meta
