from __future__ import annotations

import json
import subprocess
import sys

import numpy as np
import pytest

from jacfield import shapes
from jacfield.cli import EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_VALIDATION, main, verify_mesh
from jacfield.mesh import load_obj, save_obj
from jacfield.operators import OperatorCache, load_cache

from conftest import unit_square

FEATURES = {"n_wks": 8, "n_eigs": 16, "variance_scale": 7.0}


def write_config(path, **sections):
    cfg = {"schema": "jacfield-config-1", "features": FEATURES}
    cfg.update(sections)
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "cfg.json", seed=1,
                       dataset={"mode": "arap", "mesh": "small_blob", "n_samples": 10,
                                "arap_iters": 8, "test_fraction": 0.2},
                       train={"model": "field", "hidden": 16, "n_layers": 3, "epochs": 2,
                              "batch_size": 4})
    assert main(["generate", "--config", cfg, "--out", str(root / "ds")]) == EXIT_OK
    assert main(["train", "--config", cfg, "--dataset", str(root / "ds"),
                 "--out", str(root / "run")]) == EXIT_OK
    return root, cfg


def test_preprocess_and_idempotence(tmp_path, capsys):
    obj = tmp_path / "blob.obj"
    save_obj(obj, shapes.bumpy_blob(1))
    cfg = write_config(tmp_path / "c.json")
    args = ["preprocess", str(obj), "--out", str(tmp_path / "out"), "--config", cfg]
    assert main(args) == EXIT_OK
    cache = load_cache(tmp_path / "out" / "blob.jfcache")
    ref = OperatorCache.from_mesh(load_obj(obj))
    assert abs(cache.laplacian - ref.laplacian).max() <= 1e-12
    capsys.readouterr()
    assert main(args) == EXIT_OK
    assert "blob: skipped (up to date)" in capsys.readouterr().out


def test_preprocess_names_bad_edge(tmp_path, capsys):
    bad = tmp_path / "bad.obj"
    bad.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nv 0 -1 0\n"
                   "f 1 2 3\nf 2 1 4\nf 1 2 5\n")
    assert main(["preprocess", str(bad), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION
    assert "(0, 1)" in capsys.readouterr().out


def test_generate_is_deterministic(workspace, tmp_path):
    root, cfg = workspace
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "again")]) == EXIT_OK
    assert (root / "ds" / "manifest.json").read_bytes() == \
        (tmp_path / "again" / "manifest.json").read_bytes()
    manifest = json.loads((root / "ds" / "manifest.json").read_text())
    assert len(manifest["sampleFiles"]) == 10


def test_generate_records_rejections(tmp_path):
    cfg = write_config(tmp_path / "uv.json", seed=3,
                       dataset={"mode": "uv", "n_samples": 2, "base_shapes": ["sphere"],
                                "radius_range": [0.08, 0.6], "max_attempts": 200})
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "uv")]) == EXIT_OK
    manifest = json.loads((tmp_path / "uv" / "manifest.json").read_text())
    assert manifest["rejections"]
    assert manifest["allGroundTruthFlipFree"]


def test_seed_required(tmp_path):
    cfg = tmp_path / "noseed.json"
    cfg.write_text(json.dumps({"dataset": {"n_samples": 1}}))
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "x")]) == \
        EXIT_VALIDATION


def test_train_outputs(workspace):
    root, _ = workspace
    lines = (root / "run" / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 2
    assert (root / "run" / "checkpoint.jfckpt").exists()


def test_infer_and_eval(workspace, tmp_path):
    root, _ = workspace
    ckpt = str(root / "run" / "checkpoint.jfckpt")
    manifest = json.loads((root / "ds" / "manifest.json").read_text())
    mesh_obj = str(root / "ds" / manifest["meshes"][0]["obj"])
    code = tmp_path / "code.json"
    code.write_text(json.dumps(np.zeros(18).tolist()))
    out = tmp_path / "pred.obj"
    assert main(["infer", "--checkpoint", ckpt, "--mesh", mesh_obj, "--code", str(code),
                 "--out", str(out)]) == EXIT_OK
    assert load_obj(out).n_vertices == load_obj(mesh_obj).n_vertices
    code.write_text("1 2 3")
    assert main(["infer", "--checkpoint", ckpt, "--mesh", mesh_obj, "--code", str(code),
                 "--out", str(out)]) == EXIT_VALIDATION
    report = tmp_path / "report.json"
    assert main(["eval", "--checkpoint", ckpt, "--dataset", str(root / "ds"),
                 "--report", str(report)]) == EXIT_OK
    data = json.loads(report.read_text())
    assert {"L2V", "L2J", "L2N", "perSample"} <= set(data)
    assert len(data["perSample"]) == 2


def test_verify_mesh_and_cache(tmp_path, capsys):
    obj = tmp_path / "t.obj"
    save_obj(obj, shapes.torus(1.0, 0.4, 12, 6))
    assert main(["verify", str(obj)]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.count("PASS") == 5
    assert main(["preprocess", str(obj), "--out", str(tmp_path / "c")]) == EXIT_OK
    cfile = tmp_path / "c" / "t.jfcache"
    assert main(["verify", "--cache", str(cfile)]) == EXIT_OK
    raw = bytearray(cfile.read_bytes())
    raw[-10] ^= 0x55
    cfile.write_bytes(bytes(raw))
    assert main(["verify", "--cache", str(cfile)]) == EXIT_IO


def test_verify_square_matches_dense_oracle():
    checks = {c["check"]: c for c in verify_mesh(OperatorCache.from_mesh(unit_square()))}
    assert all(c["passed"] for c in checks.values())
    assert checks["dense oracle"]["residual"] < 1e-13


def test_missing_files_and_numeric_failures(tmp_path, monkeypatch):
    from jacfield import cli

    assert main(["verify", str(tmp_path / "nope.obj")]) == EXIT_IO
    obj = tmp_path / "s.obj"
    save_obj(obj, shapes.icosphere(1))
    failing = [{"check": "forced", "residual": 1.0, "tolerance": 0.0, "passed": False}]
    monkeypatch.setattr(cli, "verify_mesh", lambda cache, seed=0: failing)
    assert main(["verify", str(obj)]) == EXIT_NUMERIC


def test_console_script_entry_point(tmp_path):
    obj = tmp_path / "g.obj"
    save_obj(obj, shapes.grid(3, 3))
    proc = subprocess.run([sys.executable, "-m", "jacfield.cli", "--threads", "1", "verify",
                           str(obj)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "dense oracle" in proc.stdout
