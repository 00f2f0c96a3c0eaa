"""Parallel and Serial SUPER: layered supervised + model-based reconstruction.

A Parallel SUPER layer runs the PWLS-ULTRA solver warm-started at the
previous layer output and, side by side, a per-layer trained denoiser on
that same output; the two results are mixed with a fixed weight ``lam``.
Serial SUPER instead feeds the denoiser output into the solver as the
anchor of a quadratic proximity term.
"""
from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import denoiser as dn
from .metrics import rmse_hu
from .patch import PatchConfig
from .simulate import to_hu
from .solvers import (SERIAL_DEFAULTS, ULTRA_LAYER_DEFAULTS, SolverSettings, pwls_ultra,
                      pwls_ultra_prox)
from .tomo import Geometry
from .ultra import TransformUnion

log = logging.getLogger(__name__)

PARALLEL = "parallel"
SERIAL = "serial"
DEFAULT_LAMBDAS = (0.1, 0.3, 0.5, 0.7, 0.9)


class LayerError(RuntimeError):
    def __init__(self, layer, cause):
        super().__init__(f"layer {layer}: {cause}")
        self.layer = layer


@dataclass
class Sample:
    """One scan: data ``y``, weights ``w``, initial image and (optional) truth."""
    y: np.ndarray
    w: np.ndarray
    x_init: np.ndarray
    truth: np.ndarray | None = None


@dataclass
class SuperModel:
    kind: str
    lam: float
    layers: list  # NetworkParams per layer (None when the network branch is skipped)
    settings: SolverSettings
    transforms: TransformUnion
    patch: PatchConfig

    @property
    def n_layers(self) -> int:
        return len(self.layers)


@dataclass
class LayerTrace:
    rows: list = field(default_factory=list)

    def column(self, key) -> list:
        return [r[key] for r in self.rows]


def combine(net_out, mbir_out, lam: float) -> np.ndarray:
    """Pixelwise ``lam * net_out + (1 - lam) * mbir_out``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if lam == 1.0:
        return np.array(net_out, dtype=np.float64)
    if lam == 0.0:
        return np.array(mbir_out, dtype=np.float64)
    return lam * np.asarray(net_out) + (1.0 - lam) * np.asarray(mbir_out)


def _map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _digest(*parts) -> str:
    h = hashlib.sha1()
    for p in parts:
        if isinstance(p, np.ndarray):
            h.update(np.ascontiguousarray(p).tobytes())
        else:
            h.update(repr(p).encode())
    return h.hexdigest()


def _mean_rmse(images, samples):
    vals = [rmse_hu(to_hu(x), to_hu(s.truth)) for x, s in zip(images, samples) if s.truth is not None]
    return float(np.mean(vals)) if vals else float("nan")


@dataclass
class _Context:
    geom: Geometry
    tu: TransformUnion
    patch: PatchConfig
    settings: SolverSettings
    net_spec: dn.NetworkSpec
    train_cfg: dn.TrainConfig
    threads: int = 1
    cache: dict | None = None

    def cached(self, key, fn):
        if self.cache is None:
            return fn()
        if key not in self.cache:
            self.cache[key] = fn()
        return self.cache[key]


def _ultra_step(ctx: _Context, samples, inputs, layer, anchors=None):
    def solve(i):
        s = samples[i]
        if anchors is None:
            return pwls_ultra(s.y, s.w, ctx.geom, ctx.tu, ctx.patch, ctx.settings,
                              x_init=inputs[i], layer=layer)
        return pwls_ultra_prox(s.y, s.w, ctx.geom, ctx.tu, ctx.patch, ctx.settings,
                               x_init=inputs[i], anchor=anchors[i], layer=layer)

    results = _map(solve, list(range(len(samples))), ctx.threads)
    return [r.x for r in results], float(np.mean([r.objectives[-1] for r in results]))


def _train_layer(ctx: _Context, samples, inputs, layer):
    cfg = replace(ctx.train_cfg, seed=ctx.train_cfg.seed + 1009 * layer)
    data = [(dn.to_net(x), dn.to_net(s.truth)) for x, s in zip(inputs, samples)]
    init = dn.init_params(ctx.net_spec, cfg.init_variance, seed=cfg.seed)
    res = dn.train(init, data, cfg)
    per_epoch = -(-len(data) // cfg.batch_size)
    return res.params, float(np.mean(res.losses[-per_epoch:]))


def _parallel_layer(ctx, lam, samples, inputs, layer, params=None):
    """One layer on ``samples``; trains the network when ``params`` is None."""
    sup_loss = float("nan")
    objective = float("nan")
    if lam > 0.0 and params is None:
        if any(s.truth is None for s in samples):
            raise ValueError("training samples need ground truth")
        key = _digest("net", layer, ctx.net_spec, ctx.train_cfg, np.stack(inputs),
                      np.stack([s.truth for s in samples]))
        params, sup_loss = ctx.cached(key, lambda: _train_layer(ctx, samples, inputs, layer))
    if lam < 1.0:
        key = _digest("ultra", layer, ctx.settings, ctx.patch, ctx.tu.transforms, np.stack(inputs),
                      np.stack([s.y for s in samples]))
        mbir, objective = ctx.cached(key, lambda: _ultra_step(ctx, samples, inputs, layer))
    else:
        mbir = [None] * len(samples)
    net = [dn.apply(params, x, nonneg=True) for x in inputs] if lam > 0.0 else [None] * len(samples)
    out = [combine(a, b, lam) for a, b in zip(net, mbir)]
    return out, params, sup_loss, objective


def train_parallel_super(train_samples, geom: Geometry, tu: TransformUnion, patch: PatchConfig,
                         lam: float, n_layers: int,
                         settings: SolverSettings = ULTRA_LAYER_DEFAULTS,
                         net_spec: dn.NetworkSpec = dn.NetworkSpec(),
                         train_cfg: dn.TrainConfig = dn.TrainConfig(),
                         val_samples=(), threads: int = 1, cache: dict | None = None):
    """Greedy layer-by-layer training.

    For each layer: solve PWLS-ULTRA from every current image, train a fresh
    denoiser mapping current images to the references, then mix both outputs.
    Validation samples are pushed through each finished layer to record the
    per-layer validation RMSE.  ``cache`` lets callers share identical
    layer computations between runs (used by the lambda sweep).
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    ctx = _Context(geom, tu, patch, settings, net_spec, train_cfg, threads, cache)
    xs = [np.asarray(s.x_init, dtype=np.float64) for s in train_samples]
    vs = [np.asarray(s.x_init, dtype=np.float64) for s in val_samples]
    layers = []
    trace = LayerTrace()
    for layer in range(1, n_layers + 1):
        try:
            xs, params, sup_loss, objective = _parallel_layer(ctx, lam, train_samples, xs, layer)
            if vs:
                vs = _parallel_layer(ctx, lam, list(val_samples), vs, layer, params)[0]
        except Exception as exc:  # noqa: BLE001 - re-raised with the layer index
            raise LayerError(layer, exc) from exc
        layers.append(params)
        trace.rows.append(dict(layer=layer, train_rmse=_mean_rmse(xs, train_samples),
                               val_rmse=_mean_rmse(vs, val_samples) if vs else float("nan"),
                               sup_loss=sup_loss, unsup_objective=objective))
        log.info("parallel lam=%.2f layer %d: %s", lam, layer, trace.rows[-1])
    model = SuperModel(PARALLEL, float(lam), layers, settings, tu, patch)
    return model, trace, xs


def reconstruct_parallel_super(model: SuperModel, geom: Geometry, y, w, x_init,
                               truth=None, n_layers: int | None = None):
    """Apply a trained Parallel SUPER model to one scan.

    Returns the final image and the list of per-layer images.
    """
    n = model.n_layers if n_layers is None else n_layers
    ctx = _Context(geom, model.transforms, model.patch, model.settings, None, None)
    sample = Sample(y, w, x_init, truth)
    x = np.asarray(x_init, dtype=np.float64)
    history = []
    for layer in range(1, n + 1):
        params = model.layers[layer - 1]
        if model.lam > 0 and params is None:
            raise ValueError(f"layer {layer} has no trained network")
        try:
            x = _parallel_layer(ctx, model.lam, [sample], [x], layer, params)[0][0]
        except Exception as exc:  # noqa: BLE001
            raise LayerError(layer, exc) from exc
        history.append(x)
    return x, history


@dataclass
class SweepResult:
    lambdas: list
    val_rmse: dict  # lam -> per-layer validation RMSE
    best: float
    models: dict
    traces: dict


def sweep_lambda(candidates, train_samples, val_samples, geom: Geometry, tu: TransformUnion,
                 patch: PatchConfig, n_layers: int,
                 settings: SolverSettings = ULTRA_LAYER_DEFAULTS,
                 net_spec: dn.NetworkSpec = dn.NetworkSpec(),
                 train_cfg: dn.TrainConfig = dn.TrainConfig(), threads: int = 1) -> SweepResult:
    """Train one model per candidate and pick the best final-layer validation RMSE.

    Ties go to the smaller lambda.
    """
    cands = sorted(float(c) for c in candidates)
    if not cands:
        raise ValueError("empty lambda candidate set")
    if any(not 0.0 <= c <= 1.0 for c in cands):
        raise ValueError("lambda candidates must lie in [0, 1]")
    cache = {}
    val, models, traces = {}, {}, {}
    for lam in cands:
        model, trace, _ = train_parallel_super(train_samples, geom, tu, patch, lam, n_layers,
                                               settings, net_spec, train_cfg, val_samples,
                                               threads, cache)
        models[lam], traces[lam] = model, trace
        val[lam] = trace.column("val_rmse")
    best = min(cands, key=lambda c: (val[c][-1], c))
    return SweepResult(cands, val, best, models, traces)


# ---------------------------------------------------------------- serial

def _serial_layer(ctx, samples, inputs, layer, params=None):
    sup_loss = float("nan")
    if params is None:
        key = _digest("net", layer, ctx.net_spec, ctx.train_cfg, np.stack(inputs),
                      np.stack([s.truth for s in samples]))
        params, sup_loss = ctx.cached(key, lambda: _train_layer(ctx, samples, inputs, layer))
    anchors = [dn.apply(params, x, nonneg=True) for x in inputs]
    out, objective = _ultra_step(ctx, samples, inputs, layer, anchors)
    return out, params, sup_loss, objective


def train_serial_super(train_samples, geom: Geometry, tu: TransformUnion, patch: PatchConfig,
                       n_layers: int, settings: SolverSettings = SERIAL_DEFAULTS,
                       net_spec: dn.NetworkSpec = dn.NetworkSpec(),
                       train_cfg: dn.TrainConfig = dn.TrainConfig(),
                       val_samples=(), threads: int = 1, cache: dict | None = None):
    """Layerwise: train a denoiser, then solve PWLS-ULTRA anchored at its output."""
    ctx = _Context(geom, tu, patch, settings, net_spec, train_cfg, threads, cache)
    xs = [np.asarray(s.x_init, dtype=np.float64) for s in train_samples]
    vs = [np.asarray(s.x_init, dtype=np.float64) for s in val_samples]
    layers = []
    trace = LayerTrace()
    for layer in range(1, n_layers + 1):
        try:
            xs, params, sup_loss, objective = _serial_layer(ctx, train_samples, xs, layer)
            if vs:
                vs = _serial_layer(ctx, list(val_samples), vs, layer, params)[0]
        except Exception as exc:  # noqa: BLE001
            raise LayerError(layer, exc) from exc
        layers.append(params)
        trace.rows.append(dict(layer=layer, train_rmse=_mean_rmse(xs, train_samples),
                               val_rmse=_mean_rmse(vs, val_samples) if vs else float("nan"),
                               sup_loss=sup_loss, unsup_objective=objective))
        log.info("serial layer %d: %s", layer, trace.rows[-1])
    return SuperModel(SERIAL, float("nan"), layers, settings, tu, patch), trace, xs


def reconstruct_serial_super(model: SuperModel, geom: Geometry, y, w, x_init, truth=None):
    ctx = _Context(geom, model.transforms, model.patch, model.settings, None, None)
    sample = Sample(y, w, x_init, truth)
    x = np.asarray(x_init, dtype=np.float64)
    history = []
    for layer, params in enumerate(model.layers, start=1):
        try:
            x = _serial_layer(ctx, [sample], [x], layer, params)[0][0]
        except Exception as exc:  # noqa: BLE001
            raise LayerError(layer, exc) from exc
        history.append(x)
    return x, history


def reconstruct(model: SuperModel, geom: Geometry, y, w, x_init, truth=None):
    if model.kind == SERIAL:
        return reconstruct_serial_super(model, geom, y, w, x_init, truth)
    return reconstruct_parallel_super(model, geom, y, w, x_init, truth)
