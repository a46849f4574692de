"""Torus simulator and image/field serialization (raw + header, PGM, NIfTI-1 subset)."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import InvalidParameterError, ParseError

LABEL_BACKGROUND, LABEL_ANNULUS, LABEL_INTERIOR = 0, 1, 2


@dataclass(frozen=True)
class TorusSpec:
    inner_mean: float = 4.0
    inner_std: float = 2.0
    outer_mean: float = 12.0
    outer_std: float = 4.0
    size: int = 64
    count: int = 2560
    seed: int = 0
    blur: float = 1.0
    max_redraws: int = 100

    def __post_init__(self):
        if self.size < 16:
            raise InvalidParameterError(f"size must be >= 16, got {self.size}")
        if self.count < 2:
            raise InvalidParameterError(f"count must be >= 2, got {self.count}")
        if self.inner_std < 0 or self.outer_std < 0:
            raise InvalidParameterError("standard deviations must be non-negative")


@dataclass
class TorusSample:
    image: np.ndarray      # float32 (size, size), values in [0, 1]
    labels: np.ndarray     # int32, 0 background / 1 annulus / 2 interior
    inner_axes: tuple[float, float]
    outer_axes: tuple[float, float]


def draw_axes(spec: TorusSpec, index: int):
    """Semi-axes (pixels) for image ``index``; its own RNG stream keeps the
    dataset independent of generation order."""
    rng = np.random.default_rng([spec.seed, index])
    limit = spec.size / 2 - 2
    for _ in range(spec.max_redraws):
        a_in, b_in = rng.normal(spec.inner_mean, spec.inner_std, size=2)
        a_out, b_out = rng.normal(spec.outer_mean, spec.outer_std, size=2)
        if 1 <= a_in < a_out <= limit and 1 <= b_in < b_out <= limit:
            return (float(a_in), float(b_in)), (float(a_out), float(b_out))
    raise InvalidParameterError(
        f"image {index}: no admissible ellipse axes after {spec.max_redraws} redraws "
        f"(need 1 <= inner < outer <= {limit})")


def render_torus(size: int, inner_axes, outer_axes, blur: float = 1.0) -> TorusSample:
    c = (size - 1) / 2.0
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)

    def inside(axes):
        return ((x - c) / axes[0]) ** 2 + ((y - c) / axes[1]) ** 2 <= 1.0

    hole = inside(inner_axes)
    annulus = inside(outer_axes) & ~hole
    labels = np.where(annulus, LABEL_ANNULUS, np.where(hole, LABEL_INTERIOR, LABEL_BACKGROUND)).astype(np.int32)
    image = annulus.astype(np.float64)
    if blur > 0:
        image = gaussian_filter(image, blur, mode="constant")
    return TorusSample(np.clip(image, 0.0, 1.0).astype(np.float32), labels,
                       tuple(inner_axes), tuple(outer_axes))


def simulate_torus(spec: TorusSpec) -> list[TorusSample]:
    out = []
    for i in range(spec.count):
        inner, outer = draw_axes(spec, i)
        out.append(render_torus(spec.size, inner, outer, spec.blur))
    return out


def torus_stack(spec: TorusSpec) -> np.ndarray:
    """All images of a spec as one ``(count, size, size)`` float32 array."""
    return np.stack([s.image for s in simulate_torus(spec)])


# --------------------------------------------------------------------------
# raw + header
# --------------------------------------------------------------------------

RAW_DTYPES = {"float32": "<f4", "float64": "<f8", "int32": "<i4"}


def _header_path(path: Path) -> Path:
    return path.with_name(path.name + ".hdr")


def save_raw(array, path) -> None:
    """Write ``path`` (little-endian payload) and ``path.hdr`` (text header).

    Header lines: ``dims <d>``, ``extents <n1> ... <nd>``, ``channels <c>``,
    ``dtype <float32|float64|int32>``. Floating arrays are stored as float32
    unless they are already float64; integer arrays as int32.
    """
    path = Path(path)
    arr = np.asarray(array)
    if arr.dtype == np.float64:
        dtype = "float64"
    elif np.issubdtype(arr.dtype, np.integer):
        dtype = "int32"
    else:
        dtype = "float32"
    # vector fields carry a trailing channel axis of length == number of spatial axes
    is_field = arr.ndim in (3, 4) and arr.shape[-1] == arr.ndim - 1
    extents = arr.shape[:-1] if is_field else arr.shape
    channels = arr.shape[-1] if is_field else 1
    header = (f"dims {len(extents)}\n"
              f"extents {' '.join(str(n) for n in extents)}\n"
              f"channels {channels}\n"
              f"dtype {dtype}\n")
    _header_path(path).write_text(header)
    path.write_bytes(np.ascontiguousarray(arr, dtype=RAW_DTYPES[dtype]).tobytes())


def load_raw(path) -> np.ndarray:
    path = Path(path)
    hdr = _header_path(path)
    if not hdr.exists():
        raise ParseError(f"{path}: missing header {hdr}")
    fields = {}
    for line in hdr.read_text().splitlines():
        if line.strip():
            key, _, value = line.partition(" ")
            fields[key] = value.strip()
    try:
        dims = int(fields["dims"])
        extents = tuple(int(n) for n in fields["extents"].split())
        channels = int(fields.get("channels", "1"))
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{hdr}: malformed header field ({exc})") from None
    if len(extents) != dims:
        raise ParseError(f"{hdr}: 'extents' lists {len(extents)} axes but 'dims' is {dims}")
    dtype = fields.get("dtype", "")
    if dtype not in RAW_DTYPES:
        raise ParseError(f"{hdr}: unsupported 'dtype' {dtype!r}")
    shape = extents + ((channels,) if channels > 1 else ())
    payload = path.read_bytes()
    expected = int(np.prod(shape)) * np.dtype(RAW_DTYPES[dtype]).itemsize
    if len(payload) != expected:
        raise ParseError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    arr = np.frombuffer(payload, dtype=RAW_DTYPES[dtype]).reshape(shape)
    native = {"float32": np.float32, "float64": np.float64, "int32": np.int32}[dtype]
    return arr.astype(native)


# --------------------------------------------------------------------------
# PGM export
# --------------------------------------------------------------------------

def to_uint8(image) -> np.ndarray:
    """Max-normalize to 0..255; an all-zero (or all non-positive) image maps to 0."""
    img = np.asarray(image, dtype=np.float64)
    peak = img.max()
    if peak <= 0:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.clip(np.rint(np.clip(img, 0, None) / peak * 255.0), 0, 255).astype(np.uint8)


def export_pgm(image, path) -> None:
    """Binary (P5) 8-bit PGM of a 2D image."""
    img = to_uint8(image)
    if img.ndim != 2:
        raise ValueError(f"PGM export needs a 2D image, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise ParseError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval > 255:
        raise ParseError(f"{path}: 16-bit PGM not supported")
    pixels = data[len(data) - w * h:]
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


# --------------------------------------------------------------------------
# NIfTI-1 (read-only subset)
# --------------------------------------------------------------------------

NIFTI_DTYPES = {4: "i2", 16: "f4"}


def load_nifti_subset(path) -> np.ndarray:
    """Read an uncompressed single-file NIfTI-1 volume (float32 or int16).

    Only ``dim`` and the voxel payload are interpreted; the result is float32
    indexed ``[x, y, z]`` (NIfTI stores x fastest).
    """
    data = Path(path).read_bytes()
    if len(data) < 348:
        raise ParseError(f"{path}: file shorter than a NIfTI-1 header")
    for endian in "<>":
        (sizeof_hdr,) = struct.unpack(endian + "i", data[:4])
        if sizeof_hdr == 348:
            break
    else:
        raise ParseError(f"{path}: field 'sizeof_hdr' is not 348")
    magic = data[344:348]
    if magic != b"n+1\x00":
        raise ParseError(f"{path}: field 'magic' is {magic!r}, expected single-file 'n+1'")
    dim = struct.unpack(endian + "8h", data[40:56])
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise ParseError(f"{path}: field 'dim[0]' = {ndim} out of range")
    shape = tuple(int(n) for n in dim[1:1 + ndim])
    if any(n < 1 for n in shape):
        raise ParseError(f"{path}: field 'dim' has non-positive extents {shape}")
    (datatype,) = struct.unpack(endian + "h", data[70:72])
    if datatype not in NIFTI_DTYPES:
        raise ParseError(f"{path}: unsupported field 'datatype' = {datatype} (need 4=int16 or 16=float32)")
    (vox_offset,) = struct.unpack(endian + "f", data[108:112])
    offset = int(vox_offset)
    if offset < 348:
        raise ParseError(f"{path}: field 'vox_offset' = {vox_offset} inside the header")
    dt = np.dtype(endian + NIFTI_DTYPES[datatype])
    count = int(np.prod(shape))
    if offset + count * dt.itemsize > len(data):
        raise ParseError(f"{path}: voxel payload truncated (need {count} voxels)")
    vox = np.frombuffer(data, dtype=dt, count=count, offset=offset)
    return vox.reshape(shape, order="F").astype(np.float32)
