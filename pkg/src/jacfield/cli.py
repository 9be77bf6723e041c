"""``jacfield`` command line: preprocess, generate, train, infer, eval, verify.

Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 I/O failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .container import ContainerError, read_header
from .features import FeatureConfig, SpectrumError, mesh_spectrum
from .fields import restricted_field
from .mesh import MeshError, load_obj, save_obj
from .operators import OperatorCache, cotangent_laplacian, load_cache, random_frames, save_cache
from .oracle import DatasetConfig, OracleError, generate_dataset, load_dataset, save_dataset
from .pipeline import DatasetError, Model, TrainConfig, evaluate, train
from .poisson import compute_jacobians, poisson_adjoint, poisson_solve

CONFIG_SCHEMA = "jacfield-config-1"
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("jacfield")


class CheckFailed(ArithmeticError):
    pass


# ----------------------------------------------------------------------- config

def load_config(path) -> dict:
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    if not isinstance(cfg, dict):
        raise ValueError("config file must hold a JSON object")
    schema = cfg.get("schema", CONFIG_SCHEMA)
    if schema != CONFIG_SCHEMA:
        raise ValueError(f"unsupported config schema {schema!r}")
    return cfg


def _override(section: dict, **flags) -> dict:
    out = dict(section)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _seed(args, cfg) -> int:
    if args.seed is not None:
        return args.seed
    if "seed" in cfg:
        return int(cfg["seed"])
    raise ValueError("a seed is required (--seed or \"seed\" in the config)")


# --------------------------------------------------------------------- commands

def cmd_preprocess(args) -> int:
    cfg = load_config(args.config)
    fconf = FeatureConfig(**cfg.get("features", {}))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    for path in args.meshes:
        name = Path(path).stem
        target = out / f"{name}.jfcache"
        try:
            mesh = load_obj(path)
        except MeshError as exc:
            where = "" if exc.element is None else f" (element {exc.element})"
            print(f"{path}: invalid mesh: {exc}{where}")
            failures += 1
            continue
        digest = mesh.content_hash()
        if target.exists():
            try:
                meta = read_header(target)["meta"]
            except ContainerError:
                meta = {}
            if meta.get("mesh_sha256") == digest and meta.get("features") == asdict(fconf):
                print(f"{name}: skipped (up to date)")
                continue
        cache = OperatorCache.from_mesh(mesh)
        mesh_spectrum(cache, fconf)
        save_cache(target, cache, {"features": asdict(fconf), "source": Path(path).name})
        print(f"{name}: wrote {target} (V={mesh.n_vertices}, T={mesh.n_triangles})")
    return EXIT_VALIDATION if failures else EXIT_OK


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    section = _override(cfg.get("dataset", {}), mode=args.mode, n_samples=args.n_samples,
                        mesh=args.mesh)
    section["seed"] = _seed(args, cfg)
    if "features" in cfg:
        section.setdefault("features", cfg["features"])
    dconf = DatasetConfig.from_dict(section)
    print(f"generating {dconf.n_samples} {dconf.mode} samples (seed {dconf.seed})")
    ds = generate_dataset(dconf)
    ds.manifest["schema"] = CONFIG_SCHEMA
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.samples)} samples to {args.out} "
          f"({len(ds.manifest['rejections'])} rejected candidates)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    section = _override(cfg.get("train", {}), model=args.model, epochs=args.epochs,
                        batch_size=args.batch_size, overfit=args.overfit,
                        max_steps=args.max_steps)
    section["seed"] = _seed(args, cfg)
    if section.get("overfit"):
        # one optimizer step per epoch: give the plateau rule a comparable window in steps
        section.setdefault("epochs", 2000)
        section.setdefault("patience", 500)
        section.setdefault("smoothing", 50)
    tconf = TrainConfig.from_dict(section)
    ds = load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.jfckpt"

    def progress(rec):
        if rec["epoch"] % max(1, args.log_every) == 0:
            print(f"epoch {rec['epoch']:5d}  lr {rec['lr']:.0e}  lTotal {rec['lTotal']:.6e}")

    res = train(ds, tconf, log_path=out / "train_log.jsonl", checkpoint_path=ckpt,
                progress=progress, loss_log_path=out / "loss_log.jsonl")
    print(f"{res.steps} steps; lTotal {res.initial_loss:.6e} -> {res.final_loss:.6e}; "
          f"checkpoint {ckpt}")
    return EXIT_OK


def _read_code(path) -> np.ndarray:
    text = Path(path).read_text().strip()
    if text.startswith("["):
        return np.asarray(json.loads(text), dtype=np.float64).ravel()
    return np.loadtxt(path, dtype=np.float64).ravel()


def cmd_infer(args) -> int:
    model = Model.load(args.checkpoint)
    if str(args.mesh).endswith(".jfcache"):
        cache = load_cache(args.mesh)
    else:
        cache = OperatorCache.from_mesh(load_obj(args.mesh))
    code = _read_code(args.code)
    if len(code) != model.n_code:
        raise ValueError(f"code has {len(code)} entries; the checkpoint expects {model.n_code}")
    phi, _ = model.infer(cache, code)
    if model.dim == 2:
        save_obj(args.out, cache.mesh.vertices, cache.mesh.triangles, uv=phi)
    else:
        save_obj(args.out, phi, cache.mesh.triangles)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = Model.load(args.checkpoint)
    ds = load_dataset(args.dataset)
    metrics = evaluate(model, ds, args.split)
    report = metrics.to_dict()
    report["split"] = args.split
    report["checkpoint"] = Path(args.checkpoint).name
    Path(args.report).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    print(f"{args.split}: L2V {metrics.L2V:.4f}  L2J {metrics.L2J:.4f}  L2N {metrics.L2N:.3f}")
    if metrics.distortion:
        print("distortion: " + json.dumps(metrics.distortion, sort_keys=True))
    return EXIT_OK


def verify_mesh(cache: OperatorCache, seed: int = 0) -> list[dict]:
    """Numerical self-checks of the operators on one mesh."""
    rng = np.random.default_rng(seed)
    mesh = cache.mesh
    v = mesh.vertices
    checks = []

    def record(name, residual, tol):
        checks.append({"check": name, "residual": float(residual), "tolerance": tol,
                       "passed": bool(residual < tol)})

    lap = cache.laplacian
    cot = cotangent_laplacian(mesh)
    record("cotangent cross-check", abs(lap - cot).max() / abs(cot).max(), 1e-9)

    phi = np.column_stack([np.sin(v[:, 0] + v[:, 1]), v[:, 1] * v[:, 2], np.cos(2 * v[:, 2])])
    back = poisson_solve(cache, compute_jacobians(cache, phi))
    ref = phi - phi[cache.pin]
    record("Poisson round trip", np.linalg.norm(back - ref) / np.linalg.norm(ref), 1e-8)

    g = rng.normal(size=(mesh.n_vertices, 3))
    g[cache.pin] = 0.0
    m = rng.normal(size=(2 * mesh.n_triangles, 3))
    lhs = np.sum(g * poisson_solve(cache, m))
    rhs = np.sum(poisson_adjoint(cache, g) * m)
    record("adjoint identity", abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300), 1e-9)

    P = rng.normal(size=(mesh.n_triangles, 3, 3))
    a = poisson_solve(cache, restricted_field(P, cache.frames))
    other = cache.with_frames(random_frames(mesh, rng))
    b = poisson_solve(other, restricted_field(P, other.frames))
    record("frame invariance", np.linalg.norm(a - b) / np.linalg.norm(a), 1e-8)

    if mesh.n_vertices <= 2000:
        # dense least squares with the pin column removed
        w = np.sqrt(cache.mass)[:, None]
        G = (cache.grad.toarray() * w)
        keep = np.r_[0:cache.pin, cache.pin + 1:mesh.n_vertices]
        sol, *_ = np.linalg.lstsq(G[:, keep], w * m, rcond=None)
        dense = np.zeros((mesh.n_vertices, 3))
        dense[keep] = sol
        sparse_sol = poisson_solve(cache, m)
        record("dense oracle", np.linalg.norm(dense - sparse_sol) / np.linalg.norm(dense), 1e-8)
    return checks


def cmd_verify(args) -> int:
    if args.cache is not None:
        cache = load_cache(args.cache)  # raises on checksum mismatch
        print(f"PASS  cache checksum ({args.cache})")
    else:
        cache = OperatorCache.from_mesh(load_obj(args.mesh))
    checks = verify_mesh(cache, args.seed or 0)
    for c in checks:
        status = "PASS" if c["passed"] else "FAIL"
        print(f"{status}  {c['check']:<24s} residual {c['residual']:.3e} (tol {c['tolerance']:.0e})")
    if not all(c["passed"] for c in checks):
        raise CheckFailed("one or more checks failed")
    return EXIT_OK


# ----------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jacfield", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS/solver threads")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("preprocess", help="build operator caches for OBJ meshes")
    s.add_argument("meshes", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("generate", help="generate a ground-truth dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=["arap", "uv"])
    s.add_argument("--n-samples", type=int)
    s.add_argument("--mesh", help="base mesh (procedural name or OBJ) for arap mode")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("train", help="train a model on a dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--model", choices=["field", "displacement", "global"])
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--overfit", type=int, help="memorize this many samples (smoke test)")
    s.add_argument("--max-steps", type=int)
    s.add_argument("--log-every", type=int, default=10)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="apply a checkpoint to a mesh and code")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--mesh", required=True, help="OBJ file or operator cache")
    s.add_argument("--code", required=True, help="code vector (JSON list or whitespace text)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--split", default="test", choices=["train", "test"])
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("verify", help="run numerical self-checks on a mesh")
    s.add_argument("mesh", nargs="?")
    s.add_argument("--cache", help="verify a stored cache instead of an OBJ")
    s.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    if args.command == "verify" and args.mesh is None and args.cache is None:
        parser.error("verify needs a mesh or --cache")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except ContainerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    # LinAlgError derives from ValueError, so numeric failures are caught first
    except (CheckFailed, OracleError, SpectrumError, np.linalg.LinAlgError,
            FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MeshError, DatasetError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
