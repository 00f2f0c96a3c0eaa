"""Synthetic phantoms, low-dose sinogram simulation and HU conversion."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tomo import Geometry, forward_project

MU_WATER = 0.02  # mm^-1
MAX_ATTENUATION = 0.1


def to_hu(img):
    return 1000.0 * (np.asarray(img, dtype=np.float64) - MU_WATER) / MU_WATER


def from_hu(hu):
    return np.asarray(hu, dtype=np.float64) * (MU_WATER / 1000.0) + MU_WATER


@dataclass(frozen=True)
class NoiseModel:
    incident_photons: float = 1e4
    gaussian_variance: float = 25.0
    clamp: float = 1e-5
    seed: int = 0
    # debug switch: use the Poisson mean instead of a draw
    noiseless_counts: bool = False
    # exact inverse-transform sampling below this mean, normal approximation above
    poisson_switch: float = 50.0

    def __post_init__(self):
        if self.incident_photons <= 0:
            raise ValueError("incident_photons must be > 0")
        if self.gaussian_variance < 0:
            raise ValueError("gaussian_variance must be >= 0")
        if not 0 < self.clamp <= 1:
            raise ValueError("clamp must lie in (0, 1]")
        if self.poisson_switch < 0:
            raise ValueError("poisson_switch must be >= 0")


def statistical_weights(y: np.ndarray, nm: NoiseModel) -> np.ndarray:
    """Estimated inverse variance of post-log data, ``yb^2 / (yb + sigma^2)``."""
    counts = nm.incident_photons * np.exp(-np.asarray(y, dtype=np.float64))
    return counts**2 / (counts + nm.gaussian_variance)


def poisson_counts(mean, u, z, switch: float = 50.0) -> np.ndarray:
    """Poisson draws from per-ray uniforms ``u`` and standard normals ``z``.

    Rays with mean below ``switch`` invert the CDF of ``u`` exactly; the rest
    use ``round(m + sqrt(m) z)`` clipped at zero.  Each ray depends only on its
    own ``(u, z)`` so the result is independent of evaluation order.
    """
    mean = np.asarray(mean, dtype=np.float64)
    out = np.maximum(np.rint(mean + np.sqrt(mean) * z), 0.0)
    small = mean < switch
    if np.any(small):
        m, us = mean[small], u[small]
        p = np.exp(-m)
        cdf = p.copy()
        k = np.zeros_like(m)
        active = us > cdf
        n = 0
        while np.any(active):
            n += 1
            p = p * m / n
            k[active] += 1.0
            cdf = cdf + p
            # guard against cdf stalling below u through rounding
            active &= (us > cdf) & (p > 0)
        out[small] = k
    return out


def simulate_sinogram(x_star, geom: Geometry, nm: NoiseModel):
    """Poisson + Gaussian transmission data and its statistical weights.

    ``y_i = -log(max(Poisson(I0 exp(-[A x]_i)) + N(0, s2), eps) / I0)``.
    Returns ``(y, w)``, both shaped like the sinogram.
    """
    x_star = np.asarray(x_star, dtype=np.float64)
    if np.any(x_star < 0):
        raise ValueError("x_star must be nonnegative")
    line = forward_project(x_star, geom)
    mean = nm.incident_photons * np.exp(-line)
    # one counter-based stream; ray i always consumes the i-th value of each block
    rng = np.random.Generator(np.random.Philox(key=nm.seed))
    u = rng.random(mean.shape)
    z = rng.standard_normal(mean.shape)
    g = rng.standard_normal(mean.shape)
    counts = mean if nm.noiseless_counts else poisson_counts(mean, u, z, nm.poisson_switch)
    if nm.gaussian_variance > 0:
        counts = counts + np.sqrt(nm.gaussian_variance) * g
    y = -np.log(np.maximum(counts, nm.clamp) / nm.incident_photons)
    return y, statistical_weights(y, nm)


# ---------------------------------------------------------------- phantoms

@dataclass(frozen=True)
class Ellipse:
    """Centre/axes in mm, angle in degrees, additive attenuation in mm^-1."""
    cx: float
    cy: float
    a: float
    b: float
    angle: float
    value: float


@dataclass(frozen=True)
class Rect:
    x0: float
    y0: float
    x1: float
    y1: float
    value: float


@dataclass(frozen=True)
class PhantomSpec:
    image_size: tuple[int, int] = (64, 64)
    pixel_size: float = 5.52
    ellipses: tuple[Ellipse, ...] = ()
    rects: tuple[Rect, ...] = field(default=())


def _centres(image_size, pixel_size):
    ny, nx = image_size
    xs = (np.arange(nx) - nx / 2 + 0.5) * pixel_size
    ys = (ny / 2 - np.arange(ny) - 0.5) * pixel_size
    return np.meshgrid(xs, ys)


def make_phantom(spec: PhantomSpec) -> np.ndarray:
    """Rasterize by pixel-centre membership, summing covering shapes."""
    xx, yy = _centres(spec.image_size, spec.pixel_size)
    img = np.zeros(spec.image_size)
    for e in spec.ellipses:
        t = np.deg2rad(e.angle)
        dx, dy = xx - e.cx, yy - e.cy
        u = dx * np.cos(t) + dy * np.sin(t)
        v = -dx * np.sin(t) + dy * np.cos(t)
        img[(u / e.a) ** 2 + (v / e.b) ** 2 <= 1.0] += e.value
    for r in spec.rects:
        img[(xx >= r.x0) & (xx <= r.x1) & (yy >= r.y0) & (yy <= r.y1)] += r.value
    if img.min() < -1e-12 or img.max() > MAX_ATTENUATION:
        raise ValueError("phantom attenuation outside [0, 0.1] mm^-1")
    return np.maximum(img, 0.0)


def shepp_logan_spec(image_size=(64, 64), pixel_size=5.52, scale=MU_WATER) -> PhantomSpec:
    """Modified (Toft) Shepp-Logan, intensities scaled so the skull is ``scale``."""
    half = 0.5 * min(image_size) * pixel_size
    table = [
        (0.0, 0.0, 0.69, 0.92, 0.0, 1.0),
        (0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8),
        (0.22, 0.0, 0.11, 0.31, -18.0, -0.2),
        (-0.22, 0.0, 0.16, 0.41, 18.0, -0.2),
        (0.0, 0.35, 0.21, 0.25, 0.0, 0.1),
        (0.0, 0.1, 0.046, 0.046, 0.0, 0.1),
        (0.0, -0.1, 0.046, 0.046, 0.0, 0.1),
        (-0.08, -0.605, 0.046, 0.023, 0.0, 0.1),
        (0.0, -0.605, 0.023, 0.023, 0.0, 0.1),
        (0.06, -0.605, 0.023, 0.046, 0.0, 0.1),
    ]
    ellipses = tuple(
        Ellipse(cx * half, cy * half, a * half, b * half, ang, v * scale)
        for cx, cy, a, b, ang, v in table
    )
    return PhantomSpec(tuple(image_size), pixel_size, ellipses)


def random_body_spec(seed: int, image_size=(64, 64), pixel_size=5.52) -> PhantomSpec:
    """Randomized torso-like slice: soft-tissue body, organs, lungs, bones.

    Rare draws whose overlapping inserts leave [0, 0.1] mm^-1 are redrawn.
    """
    for attempt in range(100):
        rng = np.random.default_rng(seed if attempt == 0 else [seed, attempt])
        spec = _random_body(rng, image_size, pixel_size)
        try:
            make_phantom(spec)
        except ValueError:
            continue
        return spec
    raise RuntimeError(f"no valid phantom for seed {seed}")


def _random_body(rng, image_size, pixel_size) -> PhantomSpec:
    half = 0.5 * min(image_size) * pixel_size
    ba = half * rng.uniform(0.80, 0.92)
    bb = half * rng.uniform(0.56, 0.70)
    bcx, bcy = rng.uniform(-0.03, 0.03, size=2) * half
    ell = [Ellipse(bcx, bcy, ba, bb, rng.uniform(-6, 6), 1.02 * MU_WATER)]

    def inside(scale_a, scale_b):
        r = np.sqrt(rng.uniform(0, 1))
        t = rng.uniform(0, 2 * np.pi)
        return bcx + r * scale_a * ba * np.cos(t), bcy + r * scale_b * bb * np.sin(t)

    if rng.uniform() < 0.6:
        for side in (-1, 1):
            a, b = rng.uniform(0.18, 0.26) * ba, rng.uniform(0.35, 0.5) * bb
            ell.append(Ellipse(bcx + side * 0.45 * ba, bcy + 0.1 * bb, a, b,
                               rng.uniform(-15, 15), -0.75 * MU_WATER))
    for _ in range(rng.integers(3, 7)):
        cx, cy = inside(0.55, 0.5)
        a = rng.uniform(0.06, 0.2) * ba
        b = a * rng.uniform(0.5, 1.0)
        contrast = rng.choice([-1, 1]) * rng.uniform(30, 150) / 1000 * MU_WATER
        ell.append(Ellipse(cx, cy, a, b, rng.uniform(0, 180), contrast))
    for _ in range(rng.integers(1, 4)):
        cx, cy = inside(0.7, 0.7)
        a = rng.uniform(0.03, 0.07) * ba
        ell.append(Ellipse(cx, cy, a, a * rng.uniform(0.6, 1.0), rng.uniform(0, 180),
                           rng.uniform(0.4, 0.9) * MU_WATER))
    rects = ()
    if rng.uniform() < 0.5:
        cx, cy = inside(0.4, 0.4)
        w, h = rng.uniform(0.05, 0.12, size=2) * ba
        rects = (Rect(cx - w, cy - h, cx + w, cy + h,
                      rng.choice([-1, 1]) * rng.uniform(40, 100) / 1000 * MU_WATER),)
    return PhantomSpec(tuple(image_size), pixel_size, tuple(ell), rects)
