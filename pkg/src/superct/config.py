"""Experiment configuration: TOML text <-> nested dataclasses.

Every section maps to one dataclass.  Unknown keys and out-of-range values
raise :class:`ConfigError` naming the offending ``section.field``.
"""
from __future__ import annotations

import hashlib
import sys
from dataclasses import MISSING, asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

from . import denoiser as dn
from .patch import PatchConfig
from .simulate import NoiseModel
from .solvers import (EP_DEFAULTS, SERIAL_DEFAULTS, ULTRA_LAYER_DEFAULTS,
                      ULTRA_STANDALONE_DEFAULTS, SolverSettings)
from .supermodel import DEFAULT_LAMBDAS
from .tomo import Geometry


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GeometryConfig:
    beam: str = "parallel"
    n_views: int = 96
    n_detectors: int = 96
    detector_pitch: float = 5.52
    image_rows: int = 64
    image_cols: int = 64
    pixel_size: float = 5.52
    # 0 selects the default for the beam type
    angular_range: float = 0.0
    source_to_center: float = 0.0
    source_to_detector: float = 0.0

    def build(self) -> Geometry:
        opt = lambda v: None if v == 0 else v  # noqa: E731
        return Geometry(self.beam, self.n_views, self.n_detectors, self.detector_pitch,
                        (self.image_rows, self.image_cols), self.pixel_size,
                        opt(self.angular_range), opt(self.source_to_center),
                        opt(self.source_to_detector))


@dataclass(frozen=True)
class NoiseConfig:
    incident_photons: float = 1e4
    gaussian_variance: float = 25.0
    clamp: float = 1e-5
    poisson_switch: float = 50.0
    noiseless_counts: bool = False

    def build(self, seed: int) -> NoiseModel:
        return NoiseModel(self.incident_photons, self.gaussian_variance, self.clamp, seed,
                          self.noiseless_counts, self.poisson_switch)


@dataclass(frozen=True)
class PhantomConfig:
    family: str = "random-body"  # or "shepp-logan"
    n_train: int = 40
    n_val: int = 5
    n_test: int = 5


@dataclass(frozen=True)
class PatchSection:
    side: int = 8
    stride: int = 1

    def build(self) -> PatchConfig:
        return PatchConfig(self.side, self.stride)


@dataclass(frozen=True)
class LearningConfig:
    n_clusters: int = 5
    gamma: float = 20.0
    iterations: int = 20
    lambda0: float = 0.01
    # training slices used and column subsampling of their patches
    n_slices: int = 12
    subsample: int = 3


@dataclass(frozen=True)
class SolverSection:
    beta: float
    gamma: float = 20.0
    outer_iters: int = 5
    inner_iters: int = 5
    ep_delta: float = 20.0
    mu: float = 0.0
    grid_scaled: bool = True

    @classmethod
    def of(cls, s: SolverSettings) -> "SolverSection":
        return cls(s.beta, s.gamma, s.outer_iters, s.inner_iters, s.ep_delta, s.mu, s.grid_scaled)

    def build(self) -> SolverSettings:
        return SolverSettings(self.beta, self.gamma, self.outer_iters, self.inner_iters,
                              self.ep_delta, self.mu, True, self.grid_scaled)


@dataclass(frozen=True)
class NetworkConfig:
    depth: int = 5
    channels: int = 16
    kernel_side: int = 3
    residual: bool = True

    def build(self) -> dn.NetworkSpec:
        return dn.NetworkSpec(self.depth, self.channels, self.kernel_side, self.residual)


@dataclass(frozen=True)
class TrainingConfig:
    # 40 slices x 20 epochs keeps each layer near the full-scale step count
    epochs: int = 20
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    momentum: float = 0.99
    batch_size: int = 1
    init_variance: float = 0.005
    grad_scale: float = 0.25
    # the standalone denoiser trains longer than a SUPER layer
    standalone_epochs: int = 100

    def build(self, seed: int) -> dn.TrainConfig:
        return dn.TrainConfig(self.epochs, self.lr_start, self.lr_end, self.momentum,
                              self.batch_size, self.init_variance, seed, self.grad_scale)


@dataclass(frozen=True)
class SuperConfig:
    lambdas: tuple = DEFAULT_LAMBDAS
    n_layers: int = 3
    # used by `train --method parallel-super` when no sweep result exists
    lam: float = 0.5


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "desk"
    out_dir: str = "runs/desk"
    seed: int = 0
    threads: int = 1
    geometry: GeometryConfig = GeometryConfig()
    noise: NoiseConfig = NoiseConfig()
    phantoms: PhantomConfig = PhantomConfig()
    patch: PatchSection = PatchSection()
    learning: LearningConfig = LearningConfig()
    ep: SolverSection = SolverSection.of(EP_DEFAULTS)
    ultra: SolverSection = SolverSection.of(ULTRA_STANDALONE_DEFAULTS)
    ultra_layer: SolverSection = SolverSection.of(ULTRA_LAYER_DEFAULTS)
    serial: SolverSection = SolverSection.of(SERIAL_DEFAULTS)
    network: NetworkConfig = NetworkConfig()
    training: TrainingConfig = TrainingConfig()
    super: SuperConfig = SuperConfig()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["super"]["lambdas"] = list(self.super.lambdas)
        return d

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def digest(self) -> str:
        """Hash of every setting that can change results (not out_dir or threads)."""
        d = self.to_dict()
        del d["out_dir"], d["threads"]
        return hashlib.sha256(tomli_w.dumps(d).encode()).hexdigest()

    def replace(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    def seed_for(self, purpose: str, index: int = 0) -> int:
        """Independent 32-bit seed per purpose and sample index."""
        tag = int.from_bytes(hashlib.sha256(purpose.encode()).digest()[:4], "little")
        return int(np.random.SeedSequence([self.seed, tag, index]).generate_state(1)[0])


def _check(path, ok, msg):
    if not ok:
        raise ConfigError(f"{path}: {msg}")


def _coerce(path, ftype, value):
    """Type-check one scalar against its dataclass annotation string."""
    if ftype == "bool":
        _check(path, isinstance(value, bool), f"expected a boolean, got {value!r}")
    elif ftype == "int":
        _check(path, isinstance(value, int) and not isinstance(value, bool),
               f"expected an integer, got {value!r}")
    elif ftype == "float":
        _check(path, isinstance(value, (int, float)) and not isinstance(value, bool),
               f"expected a number, got {value!r}")
        value = float(value)
    elif ftype == "str":
        _check(path, isinstance(value, str), f"expected a string, got {value!r}")
    elif ftype == "tuple":
        _check(path, isinstance(value, (list, tuple)), f"expected a list, got {value!r}")
        for v in value:
            _check(path, isinstance(v, (int, float)) and not isinstance(v, bool),
                   f"expected numbers, got {v!r}")
        value = tuple(float(v) for v in value)
    return value


def _build(cls, data, path, base=None):
    """Instance of ``cls`` from ``data``; missing keys come from ``base`` or the class defaults."""
    _check(path or "<root>", isinstance(data, dict), "expected a table")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        _check(f"{path}.{key}" if path else key, key in known, "unknown key")
    kw = {}
    for name, f in known.items():
        sub = f"{path}.{name}" if path else name
        default = getattr(base, name) if base is not None else f.default
        if name not in data:
            _check(sub, default is not MISSING, "missing required key")
            kw[name] = default
        elif hasattr(default, "__dataclass_fields__"):
            kw[name] = _build(type(default), data[name], sub, default)
        else:
            kw[name] = _coerce(sub, f.type, data[name])
    return cls(**kw)


def _validate(cfg: ExperimentConfig):
    g = cfg.geometry
    _check("geometry.beam", g.beam in ("parallel", "fan-arc"), f"unknown beam {g.beam!r}")
    for k in ("n_views", "n_detectors", "image_rows", "image_cols"):
        _check(f"geometry.{k}", getattr(g, k) >= 1, "must be >= 1")
    for k in ("detector_pitch", "pixel_size"):
        _check(f"geometry.{k}", getattr(g, k) > 0, "must be > 0")
    try:
        g.build()
    except ValueError as exc:
        raise ConfigError(f"geometry: {exc}") from exc
    n = cfg.noise
    _check("noise.incident_photons", n.incident_photons > 0, "must be > 0")
    _check("noise.gaussian_variance", n.gaussian_variance >= 0, "must be >= 0")
    _check("noise.clamp", 0 < n.clamp <= 1, "must lie in (0, 1]")
    _check("noise.poisson_switch", n.poisson_switch >= 0, "must be >= 0")
    p = cfg.phantoms
    _check("phantoms.family", p.family in ("random-body", "shepp-logan"),
           f"unknown family {p.family!r}")
    _check("phantoms.n_train", p.n_train >= 1, "must be >= 1")
    _check("phantoms.n_val", p.n_val >= 0, "must be >= 0")
    _check("phantoms.n_test", p.n_test >= 1, "must be >= 1")
    _check("patch.side", cfg.patch.side >= 1, "must be >= 1")
    _check("patch.stride", cfg.patch.stride >= 1, "must be >= 1")
    _check("patch.side", cfg.patch.side <= min(g.image_rows, g.image_cols),
           "larger than the image")
    le = cfg.learning
    _check("learning.n_clusters", le.n_clusters >= 1, "must be >= 1")
    _check("learning.gamma", le.gamma > 0, "must be > 0")
    _check("learning.iterations", le.iterations >= 0, "must be >= 0")
    _check("learning.lambda0", le.lambda0 > 0, "must be > 0")
    _check("learning.n_slices", 1 <= le.n_slices <= p.n_train, "must lie in [1, phantoms.n_train]")
    _check("learning.subsample", le.subsample >= 1, "must be >= 1")
    for sec in ("ep", "ultra", "ultra_layer", "serial"):
        s = getattr(cfg, sec)
        _check(f"{sec}.beta", s.beta >= 0, "must be >= 0")
        _check(f"{sec}.gamma", s.gamma > 0, "must be > 0")
        _check(f"{sec}.outer_iters", s.outer_iters >= 0, "must be >= 0")
        _check(f"{sec}.inner_iters", s.inner_iters >= 1, "must be >= 1")
        _check(f"{sec}.ep_delta", s.ep_delta > 0, "must be > 0")
        _check(f"{sec}.mu", s.mu >= 0, "must be >= 0")
    nw = cfg.network
    _check("network.depth", nw.depth >= 2, "must be >= 2")
    _check("network.channels", nw.channels >= 1, "must be >= 1")
    _check("network.kernel_side", nw.kernel_side >= 1 and nw.kernel_side % 2 == 1,
           "must be a positive odd integer")
    t = cfg.training
    _check("training.epochs", t.epochs >= 1, "must be >= 1")
    _check("training.standalone_epochs", t.standalone_epochs >= 1, "must be >= 1")
    _check("training.batch_size", t.batch_size >= 1, "must be >= 1")
    _check("training.lr_end", 0 < t.lr_end <= t.lr_start, "need 0 < lr_end <= lr_start")
    _check("training.momentum", 0 <= t.momentum < 1, "must lie in [0, 1)")
    _check("training.init_variance", t.init_variance >= 0, "must be >= 0")
    _check("training.grad_scale", t.grad_scale > 0, "must be > 0")
    su = cfg.super
    _check("super.lambdas", len(su.lambdas) >= 1, "must not be empty")
    _check("super.lambdas", all(0 <= v <= 1 for v in su.lambdas), "values must lie in [0, 1]")
    _check("super.n_layers", su.n_layers >= 1, "must be >= 1")
    _check("super.lam", 0 <= su.lam <= 1, "must lie in [0, 1]")
    _check("seed", 0 <= cfg.seed < 2**64, "must be an unsigned 64-bit integer")
    _check("threads", cfg.threads >= 1, "must be >= 1")


def from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "")
    _validate(cfg)
    return cfg


def loads(text: str) -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    return from_dict(data)


def load(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return loads(p.read_text())


def dump(cfg: ExperimentConfig, path):
    Path(path).write_text(cfg.to_toml())
