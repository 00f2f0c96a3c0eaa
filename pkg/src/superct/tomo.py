"""2D tomographic geometry, Siddon ray-tracing projector and FBP.

Images are ``(ny, nx)`` arrays of attenuation in mm^-1 with row 0 at the top
(largest y).  Sinograms are ``(n_views, n_detectors)`` arrays of post-log line
integrals.  The projector traces every ray once per geometry and keeps the
intersection lengths in a CSR matrix, so ``back_project`` is the exact
transpose of ``forward_project``.
"""
from __future__ import annotations

import functools
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

PARALLEL = "parallel"
FAN_ARC = "fan-arc"

# Full-size clinical fan-beam constants (mm) and the grid they were quoted for.
REF_PIXEL_MM = 0.69
REF_IMAGE_SIDE = 512
REF_N_DETECTORS = 736
REF_DETECTOR_PITCH = 1.2858
REF_SOURCE_TO_DETECTOR = 1085.6
REF_SOURCE_TO_CENTER = 595.0


class GeometryError(ValueError):
    """Invalid or unsupported scan geometry."""


@dataclass(frozen=True)
class Geometry:
    beam: str = PARALLEL
    n_views: int = 96
    n_detectors: int = 96
    detector_pitch: float = 5.52
    image_size: tuple[int, int] = (64, 64)
    pixel_size: float = 5.52
    angular_range: float | None = None
    source_to_center: float | None = None
    source_to_detector: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(n) for n in self.image_size))
        if self.angular_range is None:
            full = np.pi if self.beam == PARALLEL else 2 * np.pi
            object.__setattr__(self, "angular_range", float(full))
        if self.beam not in (PARALLEL, FAN_ARC):
            raise GeometryError(f"unknown beam type {self.beam!r}")
        if self.n_views < 1 or self.n_detectors < 1:
            raise GeometryError("n_views and n_detectors must be >= 1")
        if min(self.image_size) < 1 or len(self.image_size) != 2:
            raise GeometryError(f"bad image_size {self.image_size}")
        if self.detector_pitch <= 0 or self.pixel_size <= 0 or self.angular_range <= 0:
            raise GeometryError("lengths and angular_range must be > 0")
        if self.beam == FAN_ARC:
            dsc, dsd = self.source_to_center, self.source_to_detector
            if dsc is None or dsd is None or dsc <= 0 or dsd <= 0:
                raise GeometryError("fan-arc geometry needs positive source distances")
            if not dsc < dsd:
                raise GeometryError("source_to_center must be < source_to_detector")
            if dsc <= self.fov_radius:
                raise GeometryError("source lies inside the image support")

    @classmethod
    def fan_reference(cls, image_side: int = 64, n_views: int = 96,
                       pixel_size: float | None = None) -> "Geometry":
        """Fan-arc geometry with the clinical reference constants rescaled to a small grid.

        The field of view stays at 512 x 0.69 mm unless ``pixel_size`` is
        given.  Distances scale with the field of view, the detector count
        with the grid side.
        """
        if pixel_size is None:
            pixel_size = REF_IMAGE_SIDE * REF_PIXEL_MM / image_side
        scale = image_side * pixel_size / (REF_IMAGE_SIDE * REF_PIXEL_MM)
        n_det = int(np.ceil(REF_N_DETECTORS * image_side / REF_IMAGE_SIDE))
        # same fan angle spread over fewer, wider detector cells
        pitch = REF_N_DETECTORS * REF_DETECTOR_PITCH * scale / n_det
        return cls(
            beam=FAN_ARC,
            n_views=n_views,
            n_detectors=n_det,
            detector_pitch=pitch,
            image_size=(image_side, image_side),
            pixel_size=pixel_size,
            source_to_center=REF_SOURCE_TO_CENTER * scale,
            source_to_detector=REF_SOURCE_TO_DETECTOR * scale,
        )

    @property
    def sino_shape(self) -> tuple[int, int]:
        return (self.n_views, self.n_detectors)

    @property
    def n_pixels(self) -> int:
        return self.image_size[0] * self.image_size[1]

    @property
    def fov_radius(self) -> float:
        ny, nx = self.image_size
        return 0.5 * self.pixel_size * float(np.hypot(nx, ny))

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.n_views) * (self.angular_range / self.n_views)

    @property
    def detector_positions(self) -> np.ndarray:
        """Detector centres: mm for parallel beam, fan angle (rad) for fan-arc."""
        offs = np.arange(self.n_detectors) - (self.n_detectors - 1) / 2
        if self.beam == PARALLEL:
            return offs * self.detector_pitch
        return offs * (self.detector_pitch / self.source_to_detector)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return {k: v for k, v in d.items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "Geometry":
        return cls(**d)


def _ray_endpoints(geom: Geometry) -> tuple[np.ndarray, np.ndarray]:
    """Start/end points of every ray, view-major, shape (n_rays, 2)."""
    beta = geom.angles[:, None]
    pos = geom.detector_positions[None, :]
    reach = 2.0 * geom.fov_radius + geom.pixel_size
    if geom.beam == PARALLEL:
        ex, ey = np.cos(beta), np.sin(beta)
        ux, uy = -np.sin(beta), np.cos(beta)
        cx, cy = pos * ex, pos * ey
        p0 = np.stack([cx - reach * ux, cy - reach * uy], axis=-1)
        p1 = np.stack([cx + reach * ux, cy + reach * uy], axis=-1)
    else:
        dsc = geom.source_to_center
        sx, sy = dsc * np.cos(beta), dsc * np.sin(beta)
        cx, cy = -np.cos(beta), -np.sin(beta)
        ca, sa = np.cos(pos), np.sin(pos)
        ux, uy = cx * ca - cy * sa, cx * sa + cy * ca
        length = dsc + reach
        sx, sy = np.broadcast_to(sx, ux.shape), np.broadcast_to(sy, ux.shape)
        p0 = np.stack([sx, sy], axis=-1)
        p1 = np.stack([sx + length * ux, sy + length * uy], axis=-1)
    return p0.reshape(-1, 2), p1.reshape(-1, 2)


def _plane_alphas(start, delta, planes):
    """Parametric crossings of rays with a family of grid planes.

    Returns (alphas, a_enter, a_exit); rays parallel to the planes get NaN
    crossings and an all-or-nothing [enter, exit] interval.
    """
    moving = np.abs(delta) > 1e-12
    safe = np.where(moving, delta, 1.0)
    alphas = (planes[None, :] - start[:, None]) / safe[:, None]
    alphas[~moving] = np.nan
    a_lo = np.minimum(alphas[:, 0], alphas[:, -1])
    a_hi = np.maximum(alphas[:, 0], alphas[:, -1])
    inside = (start >= planes[0]) & (start < planes[-1])
    a_lo = np.where(moving, a_lo, np.where(inside, -np.inf, np.inf))
    a_hi = np.where(moving, a_hi, np.where(inside, np.inf, -np.inf))
    return alphas, a_lo, a_hi


def siddon_matrix(geom: Geometry) -> sp.csr_matrix:
    """Exact intersection-length system matrix, shape (n_rays, n_pixels)."""
    ny, nx = geom.image_size
    dx = geom.pixel_size
    x_planes = (np.arange(nx + 1) - nx / 2) * dx
    y_planes = (np.arange(ny + 1) - ny / 2) * dx
    p0, p1 = _ray_endpoints(geom)
    d = p1 - p0
    seg_len = np.hypot(d[:, 0], d[:, 1])

    ax, ax_lo, ax_hi = _plane_alphas(p0[:, 0], d[:, 0], x_planes)
    ay, ay_lo, ay_hi = _plane_alphas(p0[:, 1], d[:, 1], y_planes)
    a_min = np.maximum.reduce([np.zeros_like(ax_lo), ax_lo, ay_lo])
    a_max = np.minimum.reduce([np.ones_like(ax_hi), ax_hi, ay_hi])
    hit = a_max > a_min

    alphas = np.concatenate([a_min[:, None], a_max[:, None], ax, ay], axis=1)
    inner = (alphas > a_min[:, None]) & (alphas < a_max[:, None])
    inner[:, :2] = True
    alphas = np.where(inner & hit[:, None], alphas, np.nan)
    alphas.sort(axis=1)

    lengths = np.diff(alphas, axis=1) * seg_len[:, None]
    mid = 0.5 * (alphas[:, 1:] + alphas[:, :-1])
    px = p0[:, 0:1] + mid * d[:, 0:1]
    py = p0[:, 1:2] + mid * d[:, 1:2]
    with np.errstate(invalid="ignore"):
        col = np.floor((px - x_planes[0]) / dx)
        row = ny - 1 - np.floor((py - y_planes[0]) / dx)
        ok = np.isfinite(lengths) & (lengths > 0) & (col >= 0) & (col < nx) & (row >= 0) & (row < ny)

    ray_idx = np.broadcast_to(np.arange(len(p0))[:, None], ok.shape)[ok]
    pix_idx = row[ok].astype(np.int64) * nx + col[ok].astype(np.int64)
    mat = sp.coo_matrix((lengths[ok], (ray_idx, pix_idx)), shape=(len(p0), ny * nx))
    return mat.tocsr()


@functools.lru_cache(maxsize=8)
def _operators(geom: Geometry) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    a = siddon_matrix(geom)
    return a, a.T.tocsr()


def system_matrix(geom: Geometry) -> sp.csr_matrix:
    return _operators(geom)[0]


def _check(arr, shape, what):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != tuple(shape):
        raise ValueError(f"{what} shape {arr.shape} does not match geometry {tuple(shape)}")
    return arr


def forward_project(image: np.ndarray, geom: Geometry) -> np.ndarray:
    x = _check(image, geom.image_size, "image")
    a, _ = _operators(geom)
    return (a @ x.ravel()).reshape(geom.sino_shape)


def back_project(sino: np.ndarray, geom: Geometry) -> np.ndarray:
    s = _check(sino, geom.sino_shape, "sinogram")
    _, at = _operators(geom)
    return (at @ s.ravel()).reshape(geom.image_size)


def sqs_diagonal(geom: Geometry, weights: np.ndarray) -> np.ndarray:
    """Separable majorizer diagonal ``A^T W A 1`` of the weighted data term."""
    w = _check(weights, geom.sino_shape, "weights")
    if np.any(w < 0):
        raise ValueError("statistical weights must be nonnegative")
    ones = np.ones(geom.image_size)
    return back_project(w * forward_project(ones, geom), geom)


# ---------------------------------------------------------------- FBP

def _filter_response(n: int, kernel_fn) -> tuple[np.ndarray, int]:
    """Hann-apodized frequency response of a spatial ramp-type kernel."""
    pad = int(2 ** np.ceil(np.log2(2 * n)))
    k = np.arange(pad)
    k = np.where(k < pad // 2, k, k - pad)
    h = kernel_fn(k)
    freq = np.fft.fftfreq(pad)
    hann = 0.5 * (1.0 + np.cos(2 * np.pi * freq))
    return np.real(np.fft.fft(h)) * hann, pad


def _apply_filter(proj: np.ndarray, response: np.ndarray, pad: int) -> np.ndarray:
    n = proj.shape[1]
    spec = np.fft.fft(proj, n=pad, axis=1) * response[None, :]
    return np.real(np.fft.ifft(spec, axis=1))[:, :n]


def _pixel_centres(geom: Geometry):
    ny, nx = geom.image_size
    dx = geom.pixel_size
    xs = (np.arange(nx) - nx / 2 + 0.5) * dx
    ys = (ny / 2 - np.arange(ny) - 0.5) * dx
    return np.meshgrid(xs, ys)


def fbp(sino: np.ndarray, geom: Geometry) -> np.ndarray:
    """Filtered back-projection with a Hann-apodized ramp filter.

    Parallel beam uses the classic ramp kernel; fan-arc uses the equiangular
    kernel with cosine pre-weighting and 1/L^2 backprojection weights and
    requires a full 2*pi scan.
    """
    s = _check(sino, geom.sino_shape, "sinogram")
    if geom.n_views < 2:
        raise GeometryError("fbp needs at least 2 views")
    xx, yy = _pixel_centres(geom)
    pos = geom.detector_positions
    d_beta = geom.angular_range / geom.n_views
    out = np.zeros(geom.image_size)

    if geom.beam == PARALLEL:
        tau = geom.detector_pitch

        def ramp(k):
            h = np.zeros(k.shape)
            h[k == 0] = 1.0 / (4 * tau**2)
            odd = (k % 2) == 1
            h[odd] = -1.0 / (np.pi**2 * k[odd].astype(float) ** 2 * tau**2)
            return h

        resp, pad = _filter_response(geom.n_detectors, ramp)
        q = _apply_filter(s, resp, pad) * tau
        for beta, row in zip(geom.angles, q):
            t = xx * np.cos(beta) + yy * np.sin(beta)
            out += np.interp(t, pos, row, left=0.0, right=0.0)
        return out * d_beta * (np.pi / geom.angular_range)

    if not np.isclose(geom.angular_range, 2 * np.pi):
        raise GeometryError("fan-arc fbp requires a full 2*pi scan")
    dsc = geom.source_to_center
    da = geom.detector_pitch / geom.source_to_detector

    def fan_ramp(k):
        h = np.zeros(k.shape)
        h[k == 0] = 1.0 / (8 * da**2)
        odd = (k % 2) == 1
        h[odd] = -1.0 / (2 * np.pi**2 * np.sin(k[odd] * da) ** 2)
        return h

    resp, pad = _filter_response(geom.n_detectors, fan_ramp)
    q = _apply_filter(s * dsc * np.cos(pos)[None, :], resp, pad) * da
    for beta, row in zip(geom.angles, q):
        sx, sy = dsc * np.cos(beta), dsc * np.sin(beta)
        cx, cy = -np.cos(beta), -np.sin(beta)
        rx, ry = xx - sx, yy - sy
        gam = np.arctan2(cx * ry - cy * rx, cx * rx + cy * ry)
        out += np.interp(gam, pos, row, left=0.0, right=0.0) / (rx**2 + ry**2)
    return out * d_beta
