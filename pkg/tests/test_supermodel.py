from dataclasses import replace

import numpy as np
import pytest

from superct import denoiser as dn
from superct.patch import PatchConfig
from superct.simulate import NoiseModel, make_phantom, random_body_spec, simulate_sinogram
from superct.solvers import SERIAL_DEFAULTS, ULTRA_LAYER_DEFAULTS, pwls_ultra, pwls_ultra_prox
from superct.supermodel import (LayerError, Sample, combine, reconstruct, reconstruct_parallel_super,
                                reconstruct_serial_super, sweep_lambda, train_parallel_super,
                                train_serial_super)
from superct.tomo import Geometry, fbp
from superct.ultra import TransformUnion, initial_transforms

GEOM = Geometry(n_views=32, n_detectors=32, detector_pitch=11.04, image_size=(24, 24), pixel_size=11.04)
PATCH = PatchConfig(4, 2)
TU = TransformUnion(initial_transforms(4, 2, seed=0), 20.0)
SPEC = dn.NetworkSpec(depth=2, channels=3)
TCFG = dn.TrainConfig(epochs=1, seed=4)
ST = ULTRA_LAYER_DEFAULTS.replace(outer_iters=2, inner_iters=2)


def _sample(seed):
    x = make_phantom(random_body_spec(seed, GEOM.image_size, GEOM.pixel_size))
    y, w = simulate_sinogram(x, GEOM, NoiseModel(seed=seed + 100))
    return Sample(y, w, np.maximum(fbp(y, GEOM), 0.0), x)


@pytest.fixture(scope="module")
def samples():
    return [_sample(s) for s in range(5)]


def test_combine():
    a, b = np.ones((2, 2)), np.zeros((2, 2))
    np.testing.assert_array_equal(combine(a, b, 0.25), np.full((2, 2), 0.25))
    assert combine(a, b, 1.0) is not a and np.array_equal(combine(a, b, 1.0), a)
    assert np.array_equal(combine(None, b, 0.0), b)
    with pytest.raises(ValueError):
        combine(a, b, 1.5)


def test_lambda_zero_is_ultra_chain(samples):
    train = samples[:3]
    model, _, xs = train_parallel_super(train, GEOM, TU, PATCH, 0.0, 3, ST, SPEC, TCFG)
    assert all(p is None for p in model.layers)
    for s, got in zip(train, xs):
        x = s.x_init
        for layer in range(1, 4):
            x = pwls_ultra(s.y, s.w, GEOM, TU, PATCH, ST, x_init=x, layer=layer).x
        assert np.array_equal(got, x)
    s = samples[4]
    x = s.x_init
    for layer in range(1, 4):
        x = pwls_ultra(s.y, s.w, GEOM, TU, PATCH, ST, x_init=x, layer=layer).x
    assert np.array_equal(reconstruct_parallel_super(model, GEOM, s.y, s.w, s.x_init)[0], x)


def test_lambda_one_is_denoiser_chain(samples):
    train = samples[:3]
    model, _, xs = train_parallel_super(train, GEOM, TU, PATCH, 1.0, 2, ST, SPEC, TCFG)
    inputs = [s.x_init for s in train]
    for layer in range(1, 3):
        cfg = replace(TCFG, seed=TCFG.seed + 1009 * layer)
        data = [(dn.to_net(x), dn.to_net(s.truth)) for x, s in zip(inputs, train)]
        params = dn.train(dn.init_params(SPEC, cfg.init_variance, seed=cfg.seed), data, cfg).params
        assert np.array_equal(params.flat(), model.layers[layer - 1].flat())
        inputs = [dn.apply(params, x, nonneg=True) for x in inputs]
    for a, b in zip(xs, inputs):
        assert np.array_equal(a, b)
    s = samples[4]
    x = s.x_init
    for p in model.layers:
        x = dn.apply(p, x, nonneg=True)
    assert np.array_equal(reconstruct_parallel_super(model, GEOM, s.y, s.w, s.x_init)[0], x)


def test_parallel_reconstruct_replays_training(samples):
    model, trace, xs = train_parallel_super(samples[:3], GEOM, TU, PATCH, 0.5, 2, ST, SPEC, TCFG,
                                            val_samples=samples[3:])
    for s, x in zip(samples[:3], xs):
        assert np.array_equal(reconstruct(model, GEOM, s.y, s.w, s.x_init)[0], x)
    assert trace.column("layer") == [1, 2]
    assert all(np.isfinite(trace.column("val_rmse")))
    _, hist = reconstruct_parallel_super(model, GEOM, samples[3].y, samples[3].w, samples[3].x_init)
    assert len(hist) == 2 and min(h.min() for h in hist) >= 0


def test_serial_super_layer_is_prox_solve(samples):
    st = SERIAL_DEFAULTS.replace(outer_iters=2, inner_iters=2)
    model, _, xs = train_serial_super(samples[:3], GEOM, TU, PATCH, 1, st, SPEC, TCFG)
    s = samples[0]
    anchor = dn.apply(model.layers[0], s.x_init, nonneg=True)
    expect = pwls_ultra_prox(s.y, s.w, GEOM, TU, PATCH, st, x_init=s.x_init, anchor=anchor, layer=1).x
    assert np.array_equal(xs[0], expect)
    assert np.array_equal(reconstruct_serial_super(model, GEOM, s.y, s.w, s.x_init)[0], expect)
    assert np.array_equal(reconstruct(model, GEOM, s.y, s.w, s.x_init)[0], expect)


def test_sweep_selects_minimum_and_reuses_cache(samples):
    res = sweep_lambda([0.9, 0.1, 0.5], samples[:3], samples[3:], GEOM, TU, PATCH, 2, ST, SPEC, TCFG)
    assert res.lambdas == [0.1, 0.5, 0.9]
    finals = {lam: v[-1] for lam, v in res.val_rmse.items()}
    assert finals[res.best] == min(finals.values())
    # the first layer of every candidate trains the same network
    nets = [res.models[lam].layers[0].flat() for lam in res.lambdas]
    assert all(np.array_equal(nets[0], n) for n in nets)
    with pytest.raises(ValueError):
        sweep_lambda([], samples[:3], samples[3:], GEOM, TU, PATCH, 1, ST, SPEC, TCFG)
    with pytest.raises(ValueError):
        sweep_lambda([1.2], samples[:3], samples[3:], GEOM, TU, PATCH, 1, ST, SPEC, TCFG)


def test_layer_errors_carry_index(samples):
    bad = [Sample(s.y, s.w, s.x_init, None) for s in samples[:2]]
    with pytest.raises(LayerError) as err:
        train_parallel_super(bad, GEOM, TU, PATCH, 0.5, 2, ST, SPEC, TCFG)
    assert err.value.layer == 1
    with pytest.raises(ValueError):
        train_parallel_super(samples[:2], GEOM, TU, PATCH, 1.5, 1, ST, SPEC, TCFG)
