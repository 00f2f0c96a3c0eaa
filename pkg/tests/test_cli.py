import csv
import hashlib
import json

import numpy as np
import pytest
import tomli_w

from superct import cli, io
from superct.config import ExperimentConfig


def _tiny(tmp_path, **sections):
    d = ExperimentConfig().to_dict()
    d.update(out_dir=str(tmp_path / "run"))
    d["geometry"].update(n_views=24, n_detectors=24, detector_pitch=11.04, image_rows=16,
                         image_cols=16, pixel_size=11.04 * 2)
    d["phantoms"].update(n_train=3, n_val=1, n_test=2)
    d["patch"].update(side=4, stride=2)
    d["learning"].update(n_slices=2, iterations=2, n_clusters=2)
    d["ep"]["outer_iters"] = 5
    d["ultra"]["outer_iters"] = 2
    d["ultra_layer"].update(outer_iters=1, inner_iters=2)
    d["serial"].update(outer_iters=1, inner_iters=2)
    d["network"].update(depth=2, channels=2)
    d["training"].update(epochs=1, standalone_epochs=1)
    d["super"].update(n_layers=2)
    for k, v in sections.items():
        d[k].update(v)
    p = tmp_path / "cfg.toml"
    p.write_bytes(tomli_w.dumps(d).encode())
    return p


def _digest_tree(root):
    h = hashlib.sha256()
    for f in sorted(root.rglob("*")):
        if f.is_file() and f.name != "config.toml":
            h.update(str(f.relative_to(root)).encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def test_default_config_parses(tmp_path, capsys):
    assert cli.main(["default-config", "--out", str(tmp_path / "d.toml")]) == 0
    text = (tmp_path / "d.toml").read_text()
    assert "[geometry]" in text and "[super]" in text
    cli.main(["default-config"])
    assert capsys.readouterr().out == text


def test_noiseless_fbp_pipeline(tmp_path, capsys):
    cfg = _tiny(tmp_path, phantoms={"family": "shepp-logan"},
                noise={"noiseless_counts": True, "gaussian_variance": 0.0},
                geometry={"n_views": 180, "n_detectors": 384, "detector_pitch": 1.38,
                          "image_rows": 64, "image_cols": 64, "pixel_size": 5.52})
    assert cli.main(["simulate", "--config", str(cfg)]) == 0
    assert cli.main(["reconstruct", "--config", str(cfg), "--method", "fbp"]) == 0
    m = json.loads((tmp_path / "run" / "manifest.json").read_text())
    rmse = m["steps"]["reconstruct/fbp"]["mean_rmse"]
    # dynamic range of the phantom is 0..0.02 mm^-1, i.e. 1000 HU
    assert rmse < 0.05 * 1000


def test_evaluate_identical_dirs_is_zero(tmp_path, capsys):
    d = tmp_path / "imgs"
    d.mkdir()
    for i in range(3):
        io.write_f32(d / f"{i:03d}.f32", np.random.default_rng(i).random((8, 8)) * 0.03)
    cfg = _tiny(tmp_path)
    assert cli.main(["evaluate", "--config", str(cfg), "--pred", str(d), "--ref", str(d)]) == 0
    out = capsys.readouterr().out
    assert "0.00" in out and "1.0000" in out


def test_config_error_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text("[geometry]\nn_views = -3\n")
    assert cli.main(["simulate", "--config", str(p)]) == 2
    assert "geometry.n_views" in capsys.readouterr().err
    assert cli.main(["simulate", "--config", str(tmp_path / "missing.toml")]) == 2


def test_missing_prerequisite_exit_code(tmp_path, capsys):
    cfg = _tiny(tmp_path)
    assert cli.main(["reconstruct", "--config", str(cfg), "--method", "pwls-ultra"]) == 1
    assert "simulate" in capsys.readouterr().err


def test_threads_env_fallback(tmp_path, monkeypatch, capsys):
    cfg = _tiny(tmp_path)
    monkeypatch.setenv("SUPERCT_THREADS", "nope")
    assert cli.main(["simulate", "--config", str(cfg)]) == 2
    monkeypatch.setenv("SUPERCT_THREADS", "2")
    assert cli.main(["simulate", "--config", str(cfg)]) == 0
    text = (tmp_path / "run" / "config.toml").read_text()
    assert "threads = 2" in text


def test_full_pipeline_idempotent_and_thread_independent(tmp_path, capsys):
    cfg = _tiny(tmp_path)
    runs = []
    for name, threads in (("a", "1"), ("b", "1"), ("c", "3")):
        out = tmp_path / name
        assert cli.main(["run-all", "--config", str(cfg), "--out", str(out), "--threads", threads]) == 0
        runs.append(out)
    assert _digest_tree(runs[0]) == _digest_tree(runs[1])
    # output directory and thread count never change the artifacts
    assert _digest_tree(runs[0]) == _digest_tree(runs[2])
    rows = list(csv.reader(open(runs[0] / "sweep.csv")))
    assert rows[0] == ["lambda", "layer1", "layer2"]
    assert len(rows) == 1 + 5
    metrics = (runs[0] / "metrics.csv").read_text()
    for m in ("fbp", "pwls-ep", "pwls-ultra", "denoiser", "serial-super", "parallel-super"):
        assert m in metrics
    # each step can be rerun on its own with identical output
    before = (runs[0] / "recon" / "parallel-super" / "000.f32").read_bytes()
    assert cli.main(["reconstruct", "--config", str(cfg), "--out", str(runs[0]),
                     "--method", "parallel-super"]) == 0
    assert (runs[0] / "recon" / "parallel-super" / "000.f32").read_bytes() == before
