import numpy as np
import pytest

from superct.patch import PatchConfig, aggregate_patches, extract_patches, patch_weight


def test_patch_count_and_order():
    img = np.arange(25.0).reshape(5, 5)
    cfg = PatchConfig(side=2, stride=1)
    p = extract_patches(img, cfg)
    assert p.shape == (4, 16)
    np.testing.assert_array_equal(p[:, 0], [0, 1, 5, 6])
    np.testing.assert_array_equal(p[:, 1], [1, 2, 6, 7])
    np.testing.assert_array_equal(p[:, 4], [5, 6, 10, 11])


def test_strided_grid():
    cfg = PatchConfig(side=3, stride=2)
    assert cfg.grid((8, 7)) == (3, 3)
    img = np.random.default_rng(0).random((8, 7))
    p = extract_patches(img, cfg)
    np.testing.assert_array_equal(p[:, 4], img[2:5, 2:5].ravel())


@pytest.mark.parametrize("side,stride,size", [(8, 1, (16, 16)), (3, 2, (9, 10)), (4, 4, (8, 12))])
def test_aggregate_is_adjoint(side, stride, size):
    cfg = PatchConfig(side, stride)
    rng = np.random.default_rng(side)
    x = rng.standard_normal(size)
    q = rng.standard_normal((cfg.length, cfg.count(size)))
    assert np.vdot(extract_patches(x, cfg), q) == pytest.approx(np.vdot(x, aggregate_patches(q, cfg, size)))


def test_patch_weight_interior_and_corner():
    cfg = PatchConfig(8, 1)
    w = patch_weight(cfg, (20, 20))
    assert w[0, 0] == 1 and w[10, 10] == 64


def test_errors():
    with pytest.raises(ValueError):
        PatchConfig(side=4, stride=5)
    with pytest.raises(ValueError):
        extract_patches(np.zeros((4, 4)), PatchConfig(8))
    with pytest.raises(ValueError):
        aggregate_patches(np.zeros((3, 3)), PatchConfig(2), (4, 4))
