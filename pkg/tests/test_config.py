import pytest

from superct import config
from superct.config import ConfigError, ExperimentConfig


def test_default_round_trip(tmp_path):
    cfg = ExperimentConfig()
    assert config.loads(cfg.to_toml()) == cfg
    config.dump(cfg, tmp_path / "c.toml")
    assert config.load(tmp_path / "c.toml") == cfg
    assert config.loads(config.load(tmp_path / "c.toml").to_toml()).to_toml() == cfg.to_toml()


def test_partial_file_uses_defaults():
    cfg = config.loads('seed = 9\n[phantoms]\nn_train = 12\n[super]\nlambdas = [0.2, 0.4]\n')
    assert cfg.seed == 9 and cfg.phantoms.n_train == 12 and cfg.super.lambdas == (0.2, 0.4)
    assert cfg.geometry == ExperimentConfig().geometry


def test_builders():
    cfg = ExperimentConfig()
    g = cfg.geometry.build()
    assert g.image_size == (64, 64) and g.n_views == 96
    assert cfg.noise.build(4).seed == 4 and cfg.noise.build(4).incident_photons == 1e4
    assert cfg.training.build(1).grad_scale == cfg.training.grad_scale
    assert cfg.ep.build().beta == 2**15


@pytest.mark.parametrize("text,where", [
    ("[geometry]\nn_views = 0\n", "geometry.n_views"),
    ("[geometry]\nbogus = 1\n", "geometry.bogus"),
    ("[noise]\nincident_photons = 'many'\n", "noise.incident_photons"),
    ("[training]\nmomentum = 1.0\n", "training.momentum"),
    ("[super]\nlambdas = [0.5, 1.5]\n", "super.lambdas"),
    ("[phantoms]\nfamily = 'cats'\n", "phantoms.family"),
    ("[patch]\nside = 100\n", "patch.side"),
    ("seed = -1\n", "seed"),
    ("[ultra]\nouter_iters = 1.5\n", "ultra.outer_iters"),
])
def test_field_level_errors(text, where):
    with pytest.raises(ConfigError, match=where.replace(".", r"\.")):
        config.loads(text)


def test_bad_toml_and_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="invalid TOML"):
        config.loads("[[[")
    with pytest.raises(ConfigError, match="not found"):
        config.load(tmp_path / "nope.toml")


def test_seeds_are_independent_and_stable():
    a = ExperimentConfig(seed=1)
    assert a.seed_for("noise", 0) == ExperimentConfig(seed=1).seed_for("noise", 0)
    assert len({a.seed_for("noise", i) for i in range(50)}) == 50
    assert a.seed_for("noise", 0) != a.seed_for("phantom", 0)
    assert a.seed_for("noise", 0) != ExperimentConfig(seed=2).seed_for("noise", 0)


def test_digest_ignores_execution_settings():
    a = ExperimentConfig()
    assert a.digest() == a.replace(out_dir="elsewhere", threads=4).digest()
    assert a.digest() != a.replace(seed=1).digest()
