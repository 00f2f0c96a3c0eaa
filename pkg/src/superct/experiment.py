"""Experiment pipeline on an output directory.

Layout under ``out``::

    config.toml                 effective configuration
    manifest.json               config hash, seeds, versions, per-step results
    data/<split>/NNN_{truth,sino,weights}.f32
    transforms.ultr
    models/denoiser.sdnz, models/parallel-super/, models/serial-super/
    recon/<method>/NNN.f32      test-set reconstructions
    sweep.csv, metrics.csv

Every step reads its inputs from disk, so steps can run as separate
commands; all randomness derives from ``cfg.seed``.
"""
from __future__ import annotations

import csv
import json
import logging
import platform
from importlib import metadata
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from . import config as config_mod
from . import denoiser as dn
from . import io
from .metrics import MetricReport, summary_table, write_reports_csv
from .simulate import make_phantom, random_body_spec, shepp_logan_spec, simulate_sinogram, to_hu
from .solvers import HU_SCALE, pwls_ep, pwls_ultra
from .patch import extract_patches
from .supermodel import (Sample, _map, reconstruct_parallel_super, reconstruct_serial_super,
                         sweep_lambda, train_parallel_super, train_serial_super)
from .tomo import fbp
from .ultra import learn_transforms as learn

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
RECON_METHODS = ("fbp", "pwls-ep", "pwls-ultra", "denoiser", "serial-super", "parallel-super")
TRAIN_METHODS = ("denoiser", "serial-super", "parallel-super")


class PipelineError(RuntimeError):
    pass


# ---------------------------------------------------------------- manifest

def _versions():
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"superct": own, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if np.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    return v


def read_manifest(out) -> dict:
    p = Path(out) / "manifest.json"
    return json.loads(p.read_text()) if p.exists() else {}


def _update_manifest(cfg, out, key, entry):
    m = read_manifest(out)
    m["config_sha256"] = cfg.digest()
    m["seed"] = cfg.seed
    m["versions"] = _versions()
    m.setdefault("steps", {})[key] = _jsonable(entry)
    Path(out, "manifest.json").write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")


def _prepare(cfg, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.dump(cfg, out / "config.toml")
    return out


# ---------------------------------------------------------------- data

def split_sizes(cfg):
    p = cfg.phantoms
    return {"train": p.n_train, "val": p.n_val, "test": p.n_test}


def _phantom(cfg, seed):
    g = cfg.geometry
    size = (g.image_rows, g.image_cols)
    if cfg.phantoms.family == "shepp-logan":
        return make_phantom(shepp_logan_spec(size, g.pixel_size))
    return make_phantom(random_body_spec(seed, size, g.pixel_size))


def simulate(cfg, out):
    """Phantoms, noisy sinograms and weights for every split."""
    out = _prepare(cfg, out)
    geom = cfg.geometry.build()
    seeds = {}
    for split, n in split_sizes(cfg).items():
        d = out / "data" / split
        d.mkdir(parents=True, exist_ok=True)
        jobs = [(i, cfg.seed_for(f"phantom-{split}", i), cfg.seed_for(f"noise-{split}", i))
                for i in range(n)]

        def one(job, d=d):
            i, ps, ns = job
            x = _phantom(cfg, ps)
            y, w = simulate_sinogram(x, geom, cfg.noise.build(ns))
            io.write_f32(d / f"{i:03d}_truth.f32", x, geom.pixel_size)
            io.write_f32(d / f"{i:03d}_sino.f32", y)
            io.write_f32(d / f"{i:03d}_weights.f32", w)

        _map(one, jobs, cfg.threads)
        seeds[split] = [{"phantom": ps, "noise": ns} for _, ps, ns in jobs]
    _update_manifest(cfg, out, "simulate", {"seeds": seeds, "sizes": split_sizes(cfg)})
    return out


def load_split(out, split):
    """List of ``(truth, y, w)`` read back from disk."""
    d = Path(out) / "data" / split
    if not d.is_dir():
        raise PipelineError(f"{d} missing; run `simulate` first")
    items = []
    for tp in sorted(d.glob("*_truth.f32")):
        stem = tp.name[: -len("_truth.f32")]
        items.append((io.read_f32(tp)[0], io.read_f32(d / f"{stem}_sino.f32")[0],
                      io.read_f32(d / f"{stem}_weights.f32")[0]))
    return items


def fbp_init(cfg, y):
    return np.maximum(fbp(y, cfg.geometry.build()), 0.0)


def ep_init(cfg, y, w):
    """PWLS-EP started from FBP: the initial image of every iterative method."""
    return pwls_ep(y, w, cfg.geometry.build(), cfg.ep.build(), x_init=fbp_init(cfg, y)).x


def _samples(cfg, items):
    inits = _map(lambda it: ep_init(cfg, it[1], it[2]), items, cfg.threads)
    return [Sample(y, w, x0, x) for (x, y, w), x0 in zip(items, inits)]


# ---------------------------------------------------------------- transforms

def learn_transforms(cfg, out):
    out = _prepare(cfg, out)
    le = cfg.learning
    train = load_split(out, "train")[: le.n_slices]
    pc = cfg.patch.build()
    patches = np.concatenate([extract_patches(x * HU_SCALE, pc) for x, _, _ in train], axis=1)
    patches = patches[:, :: le.subsample]
    seed = cfg.seed_for("transforms")
    tu, trace = learn(patches, le.n_clusters, le.gamma, le.iterations, le.lambda0, seed=seed)
    io.write_transforms(out / "transforms.ultr", tu)
    _update_manifest(cfg, out, "learn-transforms",
                     {"seed": seed, "n_patches": patches.shape[1], "objective": list(trace)})
    return tu


def _transforms(out):
    p = Path(out) / "transforms.ultr"
    if not p.exists():
        raise PipelineError(f"{p} missing; run `learn-transforms` first")
    return io.read_transforms(p)


# ---------------------------------------------------------------- training

def _train_cfg(cfg, purpose):
    return cfg.training.build(cfg.seed_for(purpose))


def train(cfg, out, method):
    if method not in TRAIN_METHODS:
        raise PipelineError(f"unknown training method {method!r}")
    out = _prepare(cfg, out)
    geom = cfg.geometry.build()
    items = load_split(out, "train")
    models = out / "models"
    models.mkdir(exist_ok=True)
    if method == "denoiser":
        tc = replace(_train_cfg(cfg, "denoiser"), epochs=cfg.training.standalone_epochs)
        spec = cfg.network.build()
        data = [(dn.to_net(fbp_init(cfg, y)), dn.to_net(x)) for x, y, _ in items]
        res = dn.train(dn.init_params(spec, tc.init_variance, tc.seed), data, tc)
        io.write_model(models / "denoiser.sdnz", res.params)
        _update_manifest(cfg, out, "train/denoiser", {"seed": tc.seed, "losses": res.losses})
        return res.params
    tu = _transforms(out)
    train_s = _samples(cfg, items)
    val_s = _samples(cfg, load_split(out, "val"))
    pc = cfg.patch.build()
    tc = _train_cfg(cfg, method)
    if method == "serial-super":
        model, trace, _ = train_serial_super(train_s, geom, tu, pc, cfg.super.n_layers,
                                             cfg.serial.build(), cfg.network.build(), tc,
                                             val_s, cfg.threads)
    else:
        lam = read_manifest(out).get("steps", {}).get("sweep-lambda", {}).get("best", cfg.super.lam)
        model, trace, _ = train_parallel_super(train_s, geom, tu, pc, lam, cfg.super.n_layers,
                                               cfg.ultra_layer.build(), cfg.network.build(), tc,
                                               val_s, cfg.threads)
    io.save_super_model(models / method, model)
    _update_manifest(cfg, out, f"train/{method}",
                     {"seed": tc.seed, "lambda": model.lam, "layers": trace.rows})
    return model


def sweep(cfg, out):
    """Lambda sweep; stores the per-layer validation RMSE and the best model."""
    out = _prepare(cfg, out)
    geom = cfg.geometry.build()
    tu = _transforms(out)
    train_s = _samples(cfg, load_split(out, "train"))
    val_s = _samples(cfg, load_split(out, "val"))
    tc = _train_cfg(cfg, "parallel-super")
    res = sweep_lambda(cfg.super.lambdas, train_s, val_s, geom, tu, cfg.patch.build(),
                       cfg.super.n_layers, cfg.ultra_layer.build(), cfg.network.build(), tc,
                       cfg.threads)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda"] + [f"layer{i}" for i in range(1, cfg.super.n_layers + 1)])
        for lam in res.lambdas:
            w.writerow([repr(lam)] + [repr(float(v)) for v in res.val_rmse[lam]])
    (out / "models").mkdir(exist_ok=True)
    io.save_super_model(out / "models" / "parallel-super", res.models[res.best])
    _update_manifest(cfg, out, "sweep-lambda",
                     {"seed": tc.seed, "best": res.best,
                      "val_rmse": {repr(k): v for k, v in res.val_rmse.items()}})
    return res


# ---------------------------------------------------------------- reconstruction

def reconstruct(cfg, out, method, split="test"):
    if method not in RECON_METHODS:
        raise PipelineError(f"unknown reconstruction method {method!r}")
    out = _prepare(cfg, out)
    geom = cfg.geometry.build()
    items = load_split(out, split)
    if method == "fbp":
        fn = lambda it: fbp_init(cfg, it[1])  # noqa: E731
    elif method == "pwls-ep":
        fn = lambda it: ep_init(cfg, it[1], it[2])  # noqa: E731
    elif method == "pwls-ultra":
        tu, pc, st = _transforms(out), cfg.patch.build(), cfg.ultra.build()
        fn = lambda it: pwls_ultra(it[1], it[2], geom, tu, pc, st,  # noqa: E731
                                   x_init=ep_init(cfg, it[1], it[2])).x
    elif method == "denoiser":
        p = out / "models" / "denoiser.sdnz"
        if not p.exists():
            raise PipelineError(f"{p} missing; run `train --method denoiser` first")
        params = io.read_model(p)
        fn = lambda it: dn.apply(params, fbp_init(cfg, it[1]), nonneg=True)  # noqa: E731
    else:
        p = out / "models" / method
        if not (p / "manifest.json").exists():
            raise PipelineError(f"{p} missing; run `train --method {method}` first")
        model = io.load_super_model(p)
        run = reconstruct_serial_super if method == "serial-super" else reconstruct_parallel_super
        fn = lambda it: run(model, geom, it[1], it[2], ep_init(cfg, it[1], it[2]))[0]  # noqa: E731
    images = _map(fn, items, cfg.threads)
    d = out / "recon" / method
    d.mkdir(parents=True, exist_ok=True)
    for i, x in enumerate(images):
        io.write_f32(d / f"{i:03d}.f32", x, geom.pixel_size)
    rep = MetricReport(method)
    for x, (truth, _, _) in zip(images, items):
        rep.add(to_hu(x), to_hu(truth))
    _update_manifest(cfg, out, f"reconstruct/{method}",
                     {"split": split, "rmse": rep.rmse, "ssim": rep.ssim,
                      "mean_rmse": rep.mean_rmse, "mean_ssim": rep.mean_ssim})
    return images, rep


# ---------------------------------------------------------------- evaluation

def _read_dir(d):
    files = sorted(Path(d).glob("*.f32"))
    if not files:
        raise PipelineError(f"no .f32 images in {d}")
    return [(f.name, io.read_f32(f)[0]) for f in files]


def evaluate_dirs(pred_dir, ref_dir, method="prediction") -> MetricReport:
    """Compare every image in ``pred_dir`` with the same-named image in ``ref_dir``."""
    refs = dict(_read_dir(ref_dir))
    rep = MetricReport(method)
    for name, x in _read_dir(pred_dir):
        if name not in refs:
            raise PipelineError(f"{name} has no reference in {ref_dir}")
        rep.add(to_hu(x), to_hu(refs[name]))
    return rep


def evaluate(cfg, out, methods=None):
    """Metric table over the stored test reconstructions."""
    out = Path(out)
    truth = [x for x, _, _ in load_split(out, "test")]
    if methods is None:
        methods = [m for m in RECON_METHODS if (out / "recon" / m).is_dir()]
    reports = []
    for m in methods:
        imgs = _read_dir(out / "recon" / m)
        if len(imgs) != len(truth):
            raise PipelineError(f"recon/{m} has {len(imgs)} images, expected {len(truth)}")
        rep = MetricReport(m)
        for (_, x), t in zip(imgs, truth):
            rep.add(to_hu(x), to_hu(t))
        reports.append(rep)
    write_reports_csv(out / "metrics.csv", reports)
    _update_manifest(cfg, out, "evaluate",
                     {r.method: {"mean_rmse": r.mean_rmse, "mean_ssim": r.mean_ssim}
                      for r in reports})
    return reports


def run_all(cfg, out):
    """Whole comparison: data, transforms, every method, lambda sweep, metrics."""
    simulate(cfg, out)
    learn_transforms(cfg, out)
    for m in ("fbp", "pwls-ep", "pwls-ultra"):
        reconstruct(cfg, out, m)
    train(cfg, out, "denoiser")
    reconstruct(cfg, out, "denoiser")
    sweep(cfg, out)
    reconstruct(cfg, out, "parallel-super")
    train(cfg, out, "serial-super")
    reconstruct(cfg, out, "serial-super")
    reports = evaluate(cfg, out)
    log.info("\n%s", summary_table(reports))
    return reports
