"""On-disk formats: raw float images, transform unions, denoiser models."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .denoiser import HU_NORMALIZATION, NetworkParams, NetworkSpec
from .patch import PatchConfig
from .solvers import SolverSettings
from .ultra import TransformUnion

TRANSFORM_MAGIC = b"ULTR"
MODEL_MAGIC = b"SDNZ"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- F32 arrays

def write_f32(path, arr, pixel_mm: float = 0.0):
    """``F32 v1 <rows> <cols> <pixel_mm>`` header line, then little-endian float32."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError("only 2D arrays are supported")
    rows, cols = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"F32 v1 {rows} {cols} {pixel_mm!r}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_f32(path):
    """Returns ``(array as float64, pixel_mm)``."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if len(header) != 5 or header[0] != "F32" or header[1] != "v1":
            raise FormatError(f"{path}: not an F32 v1 file")
        rows, cols, pixel = int(header[2]), int(header[3]), float(header[4])
        raw = fh.read()
    if len(raw) != rows * cols * 4:
        raise FormatError(f"{path}: expected {rows * cols} values")
    return np.frombuffer(raw, dtype="<f4").reshape(rows, cols).astype(np.float64), pixel


# ---------------------------------------------------------------- transforms

def write_transforms(path, tu: TransformUnion):
    k, l, _ = tu.transforms.shape
    with open(path, "wb") as fh:
        fh.write(TRANSFORM_MAGIC)
        fh.write(struct.pack("<IIId", FORMAT_VERSION, k, l, float(tu.gamma)))
        fh.write(np.ascontiguousarray(tu.transforms, dtype="<f8").tobytes())


def read_transforms(path) -> TransformUnion:
    raw = Path(path).read_bytes()
    if raw[:4] != TRANSFORM_MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, k, l, gamma = struct.unpack_from("<IIId", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 4 + struct.calcsize("<IIId")
    mats = np.frombuffer(raw, dtype="<f8", count=k * l * l, offset=off)
    return TransformUnion(mats.reshape(k, l, l).copy(), gamma)


# ---------------------------------------------------------------- denoiser

_MODEL_HEADER = "<IIIIId"


def write_model(path, params: NetworkParams):
    s = params.spec
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack(_MODEL_HEADER, FORMAT_VERSION, s.depth, s.channels, s.kernel_side,
                             int(s.residual), HU_NORMALIZATION))
        for arr in params.arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_model(path) -> NetworkParams:
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, depth, channels, k, residual, norm = struct.unpack_from(_MODEL_HEADER, raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if norm != HU_NORMALIZATION:
        raise FormatError(f"{path}: normalization {norm} differs from {HU_NORMALIZATION}")
    spec = NetworkSpec(depth, channels, k, bool(residual))
    off = 4 + struct.calcsize(_MODEL_HEADER)
    kernels, biases = [], []
    for shape in spec.layer_shapes():
        n = int(np.prod(shape))
        kernels.append(np.frombuffer(raw, "<f8", n, off).reshape(shape).copy())
        off += 8 * n
        biases.append(np.frombuffer(raw, "<f8", shape[0], off).copy())
        off += 8 * shape[0]
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes")
    return NetworkParams(spec, kernels, biases)


# ---------------------------------------------------------------- SUPER model dir

def save_super_model(directory, model):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_transforms(d / "transforms.ultr", model.transforms)
    layer_files = []
    for i, params in enumerate(model.layers, start=1):
        if params is None:
            layer_files.append(None)
            continue
        name = f"layer{i:02d}.sdnz"
        write_model(d / name, params)
        layer_files.append(name)
    manifest = {
        "kind": model.kind,
        "lambda": None if np.isnan(model.lam) else model.lam,
        "n_layers": model.n_layers,
        "settings": model.settings.to_dict(),
        "patch": {"side": model.patch.side, "stride": model.patch.stride},
        "transforms": "transforms.ultr",
        "layers": layer_files,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_super_model(directory):
    from .supermodel import SuperModel

    d = Path(directory)
    m = json.loads((d / "manifest.json").read_text())
    layers = [None if f is None else read_model(d / f) for f in m["layers"]]
    if len(layers) != m["n_layers"]:
        raise FormatError(f"{d}: manifest lists {len(layers)} layers, expected {m['n_layers']}")
    lam = float("nan") if m["lambda"] is None else float(m["lambda"])
    return SuperModel(m["kind"], lam, layers, SolverSettings(**m["settings"]),
                      read_transforms(d / m["transforms"]), PatchConfig(**m["patch"]))
