"""Volume container, intensity normalization, and the VNVOL1 file format.

A Volume is a 3D scalar field indexed [x, y, z] with voxel spacing in
millimeters and an intensity-unit tag. Raw volumes carry nonnegative
activity values; normalized volumes live in [-1, 1] and remember the
clip level used so the mapping can be inverted exactly.

File format VNVOL1 (all little-endian):
    magic           8 bytes  b"VNVOL1\\0\\0"
    dims            3 x u32
    spacing         3 x f64  millimeters
    norm constant   f64      0.0 for raw volumes
    units tag       u8       0 = activity, 1 = normalized
    payload         nx*ny*nz x f32, x-fastest row-major order
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    ParameterError,
    ShapeError,
    VolumeBadMagic,
    VolumeFormatError,
    VolumePayloadError,
)

MAGIC = b"VNVOL1\0\0"
UNITS_ACTIVITY = "activity"
UNITS_NORMALIZED = "normalized"
_UNIT_TAGS = {UNITS_ACTIVITY: 0, UNITS_NORMALIZED: 1}
_TAG_UNITS = {v: k for k, v in _UNIT_TAGS.items()}

_HEADER = struct.Struct("<3I3ddB")


@dataclass
class Volume:
    """A 3D scalar field with spacing and intensity-unit metadata."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    units: str = UNITS_ACTIVITY
    norm_constant: float = 0.0

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ShapeError(f"volume data must be 3D with positive dims, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ParameterError("volume contains non-finite values")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ParameterError(f"spacing must be 3 positive values, got {self.spacing}")
        if self.units not in _UNIT_TAGS:
            raise ParameterError(f"unknown units tag {self.units!r}")
        if self.units == UNITS_NORMALIZED and not self.norm_constant > 0:
            raise ParameterError("normalized volume requires a positive norm constant")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def copy_with(self, **changes) -> "Volume":
        if "data" not in changes:
            changes["data"] = self.data.copy()
        return replace(self, **changes)


def normalize(v: Volume, vmax: float) -> Volume:
    """Affine map [0, vmax] -> [-1, 1], clipping outside the range.

    The clip level is stored on the result so denormalize can invert the
    mapping exactly for values that were inside [0, vmax].
    """
    if not (np.isfinite(vmax) and vmax > 0):
        raise ParameterError(f"vmax must be positive and finite, got {vmax}")
    scaled = np.clip(v.data, 0.0, vmax) * (2.0 / vmax) - 1.0
    return Volume(scaled.astype(np.float32), v.spacing, UNITS_NORMALIZED, float(vmax))


def denormalize(v: Volume, vmax: float | None = None) -> Volume:
    """Exact inverse of normalize on [-1, 1]; vmax defaults to the stored constant."""
    if vmax is None:
        vmax = v.norm_constant
    if not (np.isfinite(vmax) and vmax > 0):
        raise ParameterError(f"vmax must be positive and finite, got {vmax}")
    data = (v.data + 1.0) * (vmax / 2.0)
    return Volume(data.astype(np.float32), v.spacing, UNITS_ACTIVITY, 0.0)


def save_volume(v: Volume, path) -> None:
    header = _HEADER.pack(
        *v.dims,
        *v.spacing,
        float(v.norm_constant),
        _UNIT_TAGS[v.units],
    )
    # x-fastest order == Fortran ravel for [x, y, z] indexing
    payload = np.ascontiguousarray(v.data.ravel(order="F"), dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header)
        fh.write(payload)


def load_volume(path) -> Volume:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise VolumeBadMagic(f"{path}: bad magic bytes")
    off = len(MAGIC)
    if len(blob) < off + _HEADER.size:
        raise VolumePayloadError(f"{path}: truncated header")
    nx, ny, nz, sx, sy, sz, norm_c, tag = _HEADER.unpack_from(blob, off)
    off += _HEADER.size
    if tag not in _TAG_UNITS:
        raise VolumeFormatError(f"{path}: unknown units tag {tag}")
    expected = nx * ny * nz * 4
    if len(blob) - off != expected:
        raise VolumePayloadError(
            f"{path}: payload length {len(blob) - off} does not match dims "
            f"({nx},{ny},{nz}) -> {expected} bytes"
        )
    flat = np.frombuffer(blob, dtype="<f4", count=nx * ny * nz, offset=off)
    data = flat.reshape((nx, ny, nz), order="F").astype(np.float32)
    return Volume(data, (sx, sy, sz), _TAG_UNITS[tag], norm_c)
