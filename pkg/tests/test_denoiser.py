import numpy as np
import pytest

from superct import denoiser as dn


def test_layer_shapes():
    spec = dn.NetworkSpec(depth=3, channels=4, kernel_side=3)
    assert spec.layer_shapes() == [(4, 1, 3, 3), (4, 4, 3, 3), (1, 4, 3, 3)]
    with pytest.raises(ValueError):
        dn.NetworkSpec(kernel_side=2)
    with pytest.raises(ValueError):
        dn.NetworkSpec(depth=1)


def test_zero_network_is_identity():
    spec = dn.NetworkSpec(depth=3, channels=4)
    img = np.random.default_rng(0).standard_normal((9, 9))
    np.testing.assert_array_equal(dn.forward(dn.zero_params(spec), img), img)
    # a zeroed last kernel makes the untrained residual net the identity too
    np.testing.assert_array_equal(dn.forward(dn.init_params(spec), img), img)
    assert not np.array_equal(dn.forward(dn.init_params(spec, zero_last=False), img), img)


def test_depth2_pointwise_network_is_affine_by_hand():
    spec = dn.NetworkSpec(depth=2, channels=1, kernel_side=1, residual=False)
    p = dn.NetworkParams(spec, [np.full((1, 1, 1, 1), 2.0), np.full((1, 1, 1, 1), 3.0)],
                         [np.array([0.5]), np.array([-1.0])])
    img = np.abs(np.random.default_rng(1).standard_normal((4, 5)))
    np.testing.assert_allclose(dn.forward(p, img), 3.0 * (2.0 * img + 0.5) - 1.0)


def test_convolution_matches_direct_sum():
    spec = dn.NetworkSpec(depth=2, channels=1, kernel_side=3, residual=False)
    rng = np.random.default_rng(2)
    k0 = rng.standard_normal((1, 1, 3, 3))
    k1 = np.zeros((1, 1, 3, 3))
    k1[0, 0, 1, 1] = 1.0  # identity
    p = dn.NetworkParams(spec, [k0, k1], [np.zeros(1), np.zeros(1)])
    img = rng.standard_normal((6, 7))
    pad = np.pad(img, 1)
    direct = np.zeros_like(img)
    for r in range(6):
        for c in range(7):
            direct[r, c] = np.sum(pad[r : r + 3, c : c + 3] * k0[0, 0])
    np.testing.assert_allclose(dn.forward(p, img), np.maximum(direct, 0))


def test_gradient_matches_finite_differences():
    spec = dn.NetworkSpec(depth=4, channels=8)
    params = dn.init_params(spec, variance=0.05, seed=3, zero_last=False)
    rng = np.random.default_rng(4)
    batch = [(rng.standard_normal((10, 10)), rng.standard_normal((10, 10))) for _ in range(2)]
    _, grad = dn.loss_and_gradient(params, batch)
    arrays, garrays = params.arrays(), grad.arrays()
    h = 1e-6
    for _ in range(30):
        a = rng.integers(len(arrays))
        idx = tuple(rng.integers(s) for s in arrays[a].shape)
        old = arrays[a][idx]
        arrays[a][idx] = old + h
        lp = dn.loss_and_gradient(params, batch)[0]
        arrays[a][idx] = old - h
        lm = dn.loss_and_gradient(params, batch)[0]
        arrays[a][idx] = old
        fd = (lp - lm) / (2 * h)
        assert abs(fd - garrays[a][idx]) <= 1e-4 * max(abs(fd), 1e-3)


def test_loss_and_gradient_errors():
    spec = dn.NetworkSpec(depth=2, channels=2)
    with pytest.raises(ValueError):
        dn.loss_and_gradient(dn.zero_params(spec), [])
    bad = [(np.full((4, 4), np.nan), np.zeros((4, 4)))]
    with pytest.raises(dn.TrainingError, match="sample 0"):
        dn.loss_and_gradient(dn.zero_params(spec), bad)


def test_learning_rate_schedule():
    cfg = dn.TrainConfig()
    assert dn.learning_rate(0, 10, cfg) == pytest.approx(1e-3)
    assert dn.learning_rate(9, 10, cfg) == pytest.approx(1e-4)
    lrs = [dn.learning_rate(s, 10, cfg) for s in range(10)]
    assert np.allclose(np.diff(np.log(lrs)), np.log(0.1) / 9)


def test_train_config_validation():
    with pytest.raises(ValueError):
        dn.TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        dn.TrainConfig(lr_start=1e-4, lr_end=1e-3)
    with pytest.raises(ValueError):
        dn.TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        dn.TrainConfig(grad_scale=0)


def test_zero_learning_rate_keeps_params():
    spec = dn.NetworkSpec(depth=3, channels=4)
    p0 = dn.init_params(spec, seed=1)
    data = [(np.ones((6, 6)), np.zeros((6, 6)))]
    res = dn.train(p0, data, dn.TrainConfig(lr_start=0.0, lr_end=0.0))
    np.testing.assert_array_equal(res.params.flat(), p0.flat())


def test_training_reduces_loss_and_is_deterministic():
    rng = np.random.default_rng(5)
    clean = [rng.random((12, 12)) for _ in range(6)]
    data = [(c + 0.1 * rng.standard_normal(c.shape), c) for c in clean]
    spec = dn.NetworkSpec(depth=3, channels=4)
    cfg = dn.TrainConfig(epochs=20, lr_start=1e-2, lr_end=1e-3, momentum=0.9, seed=2, grad_scale=1.0)
    a = dn.train(dn.init_params(spec, seed=2), data, cfg)
    b = dn.train(dn.init_params(spec, seed=2), data, cfg)
    assert np.array_equal(a.params.flat(), b.params.flat())
    loss0 = dn.loss_and_gradient(dn.init_params(spec, seed=2), data)[0]
    assert dn.loss_and_gradient(a.params, data)[0] < loss0
    assert len(a.losses) == 20 * 6


def test_divergence_is_reported():
    data = [(np.full((6, 6), 5.0), np.zeros((6, 6)))]
    spec = dn.NetworkSpec(depth=3, channels=4)
    with pytest.raises(dn.TrainingError) as err:
        dn.train(dn.init_params(spec, seed=0, zero_last=False), data,
                 dn.TrainConfig(epochs=50, lr_start=10.0, lr_end=10.0, grad_scale=1.0))
    assert err.value.trace


def test_scaling_round_trip():
    x = np.random.default_rng(0).random((5, 5)) * 0.05
    np.testing.assert_allclose(dn.from_net(dn.to_net(x)), x, atol=1e-17)
    assert dn.to_net(0.02) == 0.0 and dn.to_net(0.0) == -1.0
    spec = dn.NetworkSpec(depth=2, channels=1)
    np.testing.assert_allclose(dn.apply(dn.zero_params(spec), x), x, atol=1e-17)
    assert dn.apply(dn.zero_params(spec), -x, nonneg=True).min() == 0.0
