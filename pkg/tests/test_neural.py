from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jacfield.container import ContainerError
from jacfield.neural import (GN_EPS, Adam, MlpParams, group_norm, init_mlp, load_checkpoint,
                             mlp_apply, mlp_backward, mlp_forward, mlp_output, save_checkpoint,
                             zero_mlp)


def small_net(seed=0, nz=3, nc=4, out=9, hidden=8, layers=3, groups=2, dtype=np.float32):
    rng = np.random.default_rng(seed)
    p = init_mlp(nz + nc, out, rng, hidden=hidden, n_layers=layers, groups=groups, n_code=nz,
                 last_layer_scale=1.0, dtype=dtype)
    # nontrivial biases and norm parameters so every path is exercised
    arrays = [a + rng.normal(scale=0.3, size=a.shape).astype(dtype) for a in p.arrays()]
    return MlpParams.from_arrays(arrays, p)


def straight_line(params, z, c):
    """Per-point evaluation written out explicitly, in float64."""
    x = np.concatenate([z, c]).astype(np.float64)
    n = params.n_layers
    for layer in range(n):
        x = x @ params.weights[layer].astype(np.float64) + params.biases[layer]
        if layer == n - 1:
            break
        g = params.groups
        size = len(x) // g
        y = np.empty_like(x)
        for k in range(g):
            part = x[k * size:(k + 1) * size]
            y[k * size:(k + 1) * size] = (part - part.mean()) / np.sqrt(part.var() + GN_EPS)
        x = np.maximum(y * params.gn_scale[layer] + params.gn_offset[layer], 0.0)
    return x + params.output_offset


def test_zero_params_output_identity(rng):
    p = zero_mlp(5 + 8, 9, n_code=5, output_offset=np.eye(3).ravel())
    for _ in range(3):
        out = mlp_forward(p, rng.normal(size=5), rng.normal(size=8))
        np.testing.assert_array_equal(out, np.eye(3))


def test_batched_equals_single(rng):
    p = small_net()
    z = rng.normal(size=(3, 3))
    c = rng.normal(size=(20, 4))
    batch, _ = mlp_output(p, z, c)
    for b in range(3):
        for i in range(20):
            single, _ = mlp_output(p, z[b:b + 1], c[i:i + 1])
            # a few float32 ulps: BLAS picks different kernels for different shapes
            np.testing.assert_allclose(single[0, 0], batch[b, i], rtol=1e-6, atol=1e-6)


def test_straight_line_oracle(rng):
    p64 = small_net(dtype=np.float64)
    p32 = small_net(dtype=np.float32)
    z = rng.normal(size=(2, 3))
    c = rng.normal(size=(6, 4))
    out64, _ = mlp_output(p64, z, c)
    out32, _ = mlp_output(p32, z, c)
    for b in range(2):
        for i in range(6):
            ref = straight_line(p64, z[b], c[i])
            np.testing.assert_allclose(out64[b, i], ref, atol=1e-12)
            ref32 = straight_line(p32, z[b].astype(np.float32), c[i].astype(np.float32))
            np.testing.assert_allclose(out32[b, i], ref32, atol=1e-6 * max(1, np.abs(ref32).max()))


def test_code_only_network(rng):
    p = init_mlp(4, 6, rng, hidden=8, n_layers=3, groups=2, n_code=4)
    out, _ = mlp_apply(p, rng.normal(size=(5, 4)))
    assert out.shape == (5, 6)
    with pytest.raises(ValueError):
        mlp_apply(p, rng.normal(size=(5, 4)), rng.normal(size=(3, 2)))
    with pytest.raises(ValueError):
        mlp_apply(p, rng.normal(size=(5, 3)))


def loss_and_grads(params, z, c, U):
    raw, tape = mlp_apply(params, z, c)
    grads, dz = mlp_backward(params, tape, U)
    return float(np.sum(U * raw.astype(np.float64))), grads, dz


def test_finite_difference_gradients(rng):
    p = small_net(seed=4)
    z = rng.normal(size=(2, 3)).astype(np.float32)
    c = rng.normal(size=(5, 4)).astype(np.float32)
    U = rng.normal(size=(2, 5, 9))
    _, grads, dz = loss_and_grads(p, z, c, U)
    h = 1e-4
    # perturb in float64 copies so the step is not lost to float32 rounding of the parameter
    p64 = p.astype(np.float64)
    errors = []
    for k, arr in enumerate(p64.arrays()):
        for idx in list(np.ndindex(arr.shape))[::max(1, arr.size // 6)]:
            old = arr[idx]
            arr[idx] = old + h
            lp, _, _ = loss_and_grads(p64, z, c, U)
            arr[idx] = old - h
            lm, _, _ = loss_and_grads(p64, z, c, U)
            arr[idx] = old
            fd = (lp - lm) / (2 * h)
            errors.append(abs(fd - grads[k][idx]) / max(abs(fd), 1e-2))
    assert max(errors) < 2e-3
    for j in range(3):
        zp, zm = z.astype(np.float64), z.astype(np.float64)
        zp[0, j] += h
        zm = zm.copy()
        zm[0, j] -= h
        fd = (loss_and_grads(p64, zp, c, U)[0] - loss_and_grads(p64, zm, c, U)[0]) / (2 * h)
        assert abs(fd - dz[0, j]) <= 2e-3 * max(abs(fd), 1e-2)


def test_zero_upstream_zero_gradients(rng):
    p = small_net()
    _, tape = mlp_apply(p, rng.normal(size=(2, 3)), rng.normal(size=(4, 4)))
    grads, dz = mlp_backward(p, tape, np.zeros((2, 4, 9)))
    assert all(np.all(g == 0) for g in grads) and np.all(dz == 0)


def test_code_gradient_vanishes_when_code_disconnected(rng):
    p = small_net()
    p.weights[0][:3] = 0
    _, tape = mlp_apply(p, rng.normal(size=(2, 3)), rng.normal(size=(4, 4)))
    _, dz = mlp_backward(p, tape, rng.normal(size=(2, 4, 9)))
    assert np.all(dz == 0)


def test_group_norm_hand_example():
    x = np.array([1.0, 3.0, 2.0, 2.0])
    y, _ = group_norm(x, 2, np.array([1.0, 2.0, 3.0, 4.0]), np.array([0.0, 0.0, 1.0, 1.0]))
    s = 1 / np.sqrt(1 + GN_EPS)
    np.testing.assert_allclose(y, [-s, 2 * s, 1.0, 1.0], rtol=1e-15)


def test_group_norm_properties(rng):
    x = rng.normal(loc=3, scale=5, size=64)
    y, _ = group_norm(x, 1, np.ones(64), np.zeros(64))
    assert abs(y.mean()) < 1e-12
    assert y.var() == pytest.approx(1.0, rel=1e-5)
    const, _ = group_norm(np.full(8, 2.5), 2, np.full(8, 3.0), np.arange(8.0))
    np.testing.assert_array_equal(const, np.arange(8.0))
    with pytest.raises(ValueError):
        group_norm(np.ones(6), 4, 1.0, 0.0)


def test_adam_first_step_closed_form():
    a = np.array([1.0])
    opt = Adam([a], lr=0.01)
    opt.step([a], [np.array([1.0])])
    assert a[0] == pytest.approx(1.0 - 0.01 / (1 + 1e-8), rel=1e-14)


def test_adam_zero_gradient_and_symmetry():
    a = np.array([2.0, -1.0, 5.0])
    b = np.array([0.5, 0.5])
    opt = Adam([a, b], lr=0.1)
    opt.step([a, b], [np.zeros(3), np.zeros(2)])
    np.testing.assert_array_equal(a, [2.0, -1.0, 5.0])
    assert opt.step_count == 1
    opt.step([a, b], [np.zeros(3), np.array([0.3, 0.3])])
    assert b[0] == b[1] and b[0] < 0.5
    with pytest.raises(ValueError):
        opt.step([a, b], [np.zeros(2), np.zeros(2)])


def test_init_is_near_offset(rng):
    offset = np.eye(3).ravel()
    p = init_mlp(20, 9, rng, n_code=4, output_offset=offset)
    assert p.dtype == np.float32
    out, _ = mlp_output(p, rng.normal(size=(1, 4)), rng.normal(size=(50, 16)))
    assert np.abs(out - offset).max() < 0.5
    with pytest.raises(ValueError):
        init_mlp(4, 9, rng, hidden=10, groups=4)


def test_checkpoint_round_trip(tmp_path):
    p = small_net()
    save_checkpoint(tmp_path / "a.jfckpt", p, {"mode": "3d", "seed": 1})
    back, meta = load_checkpoint(tmp_path / "a.jfckpt")
    assert meta["mode"] == "3d" and meta["groups"] == 2 and meta["n_code"] == 3
    for x, y in zip(back.arrays(), p.arrays()):
        np.testing.assert_array_equal(x, y)
    raw = bytearray((tmp_path / "a.jfckpt").read_bytes())
    raw[-3] ^= 0xFF
    (tmp_path / "b.jfckpt").write_bytes(bytes(raw))
    with pytest.raises(ContainerError):
        load_checkpoint(tmp_path / "b.jfckpt")


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 2, 4]))
def test_group_norm_gradient_is_orthogonal(seed, groups):
    """Standardization is shift invariant: gradients w.r.t. the input sum to 0 per group."""
    from jacfield.neural import group_norm_backward
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 8))
    scale = rng.normal(size=8)
    _, cache = group_norm(x, groups, scale, np.zeros(8))
    dx, _, _ = group_norm_backward(rng.normal(size=(3, 8)), cache, groups, scale)
    sums = dx.reshape(3, groups, -1).sum(-1)
    assert np.abs(sums).max() < 1e-10
