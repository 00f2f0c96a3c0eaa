import numpy as np
import pytest

from superct import denoiser as dn
from superct import io
from superct.patch import PatchConfig
from superct.solvers import ULTRA_LAYER_DEFAULTS
from superct.supermodel import SuperModel
from superct.ultra import TransformUnion, initial_transforms


def test_f32_round_trip(tmp_path):
    x = np.random.default_rng(0).random((5, 7))
    io.write_f32(tmp_path / "a.f32", x, 0.69)
    raw = (tmp_path / "a.f32").read_bytes()
    assert raw.startswith(b"F32 v1 5 7 0.69\n")
    assert len(raw) == len(b"F32 v1 5 7 0.69\n") + 35 * 4
    y, pix = io.read_f32(tmp_path / "a.f32")
    assert pix == 0.69
    np.testing.assert_array_equal(y, x.astype(np.float32))


def test_f32_rejects_bad_files(tmp_path):
    (tmp_path / "b.f32").write_bytes(b"F64 v1 1 1 1\n\0\0\0\0")
    with pytest.raises(io.FormatError):
        io.read_f32(tmp_path / "b.f32")
    (tmp_path / "c.f32").write_bytes(b"F32 v1 2 2 1\n\0\0\0\0")
    with pytest.raises(io.FormatError):
        io.read_f32(tmp_path / "c.f32")
    with pytest.raises(ValueError):
        io.write_f32(tmp_path / "d.f32", np.zeros(3))


def test_transform_round_trip(tmp_path):
    tu = TransformUnion(initial_transforms(3, 2, seed=1), 17.5)
    io.write_transforms(tmp_path / "t.ultr", tu)
    back = io.read_transforms(tmp_path / "t.ultr")
    assert back.gamma == 17.5
    np.testing.assert_array_equal(back.transforms, tu.transforms)
    raw = bytearray((tmp_path / "t.ultr").read_bytes())
    raw[:4] = b"XXXX"
    (tmp_path / "bad.ultr").write_bytes(bytes(raw))
    with pytest.raises(io.FormatError):
        io.read_transforms(tmp_path / "bad.ultr")


def test_model_round_trip(tmp_path):
    p = dn.init_params(dn.NetworkSpec(depth=3, channels=4, residual=False), seed=2, zero_last=False)
    io.write_model(tmp_path / "m.sdnz", p)
    q = io.read_model(tmp_path / "m.sdnz")
    assert q.spec == p.spec
    np.testing.assert_array_equal(q.flat(), p.flat())
    (tmp_path / "m2.sdnz").write_bytes((tmp_path / "m.sdnz").read_bytes() + b"\0")
    with pytest.raises(io.FormatError):
        io.read_model(tmp_path / "m2.sdnz")


def test_super_model_directory(tmp_path):
    spec = dn.NetworkSpec(depth=2, channels=2)
    tu = TransformUnion(initial_transforms(2, 2), 20.0)
    for lam, layers in [(0.3, [dn.init_params(spec, seed=i) for i in range(2)]), (0.0, [None, None]),
                        (float("nan"), [dn.zero_params(spec)])]:
        m = SuperModel("parallel", lam, layers, ULTRA_LAYER_DEFAULTS, tu, PatchConfig(2, 1))
        d = tmp_path / f"m{len(layers)}{lam}"
        io.save_super_model(d, m)
        back = io.load_super_model(d)
        assert back.n_layers == m.n_layers and back.settings == m.settings and back.patch == m.patch
        assert back.lam == lam or (np.isnan(lam) and np.isnan(back.lam))
        for a, b in zip(m.layers, back.layers):
            assert (a is None and b is None) or np.array_equal(a.flat(), b.flat())
