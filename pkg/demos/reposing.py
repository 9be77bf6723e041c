"""Walk through the re-posing workflow on a small procedural mesh.

Run with ``python demos/reposing.py``; takes about a minute on one core.
"""
from __future__ import annotations

import numpy as np

from jacfield import (DatasetConfig, OperatorCache, TrainConfig, compute_jacobians, evaluate,
                      generate_dataset, poisson_solve, train)
from jacfield.shapes import bumpy_blob

# 1. Jacobians of a map integrate back to the map, up to translation.
mesh = bumpy_blob(2)
cache = OperatorCache.from_mesh(mesh)
v = mesh.vertices
psi = np.column_stack([v[:, 0] + 0.2 * np.sin(3 * v[:, 1]), v[:, 1], v[:, 2] * 1.5])
phi = poisson_solve(cache, compute_jacobians(cache, psi))
err = np.linalg.norm(phi - (psi - psi[cache.pin])) / np.linalg.norm(psi)
print(f"round trip relative error: {err:.2e}")

# 2. Ground truth from surface ARAP with six moved handles.
ds = generate_dataset(DatasetConfig(mode="arap", mesh="small_blob", n_samples=60, seed=0,
                                    arap_iters=15, test_fraction=0.2))
print(f"{len(ds.split('train'))} train / {len(ds.split('test'))} test samples, "
      f"code size {ds.code_size}")

# 3. Train the jacobian-field model and the displacement baseline on the same budget.
for kind in ("field", "displacement"):
    result = train(ds, TrainConfig(model=kind, epochs=15, seed=0))
    m = evaluate(result.model, ds, "test")
    print(f"{kind:>12}: L2V {m.L2V:.3f}  L2J {m.L2J:.3f}  L2N {m.L2N:.1f} deg")
