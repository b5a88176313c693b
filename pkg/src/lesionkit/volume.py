"""Core volumetric containers, LSV1/LSM1 file IO, integral volumes, gradients.

Arrays are indexed ``data[x, y, z]`` with shape ``(nx, ny, nz)``; coordinates
are passed around as ``(x, y, z)`` tuples.  On disk the payload is x-fastest
(then y, then z), which is Fortran order for this index convention.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ValidationError

VOLUME_MAGIC = b"LSV1"
MASK_MAGIC = b"LSM1"

# Mirrors the common 512-grid abdominal CT acquisition this pipeline targets.
DEFAULT_SPACING = (0.894, 0.894, 2.5)

_HEADER = struct.Struct("<4s3I3f")


def _f32(values) -> tuple[float, float, float]:
    # Spacing is stored as float32 on disk; quantize at construction so the
    # IO round trip is the identity.
    return tuple(float(np.float32(v)) for v in values)


def _check_grid(data: np.ndarray, spacing, dtype, what: str) -> None:
    if not isinstance(data, np.ndarray) or data.ndim != 3:
        raise ValidationError(f"{what} data must be a 3D array")
    if data.dtype != dtype:
        raise ValidationError(f"{what} data must be {dtype}, got {data.dtype}")
    if min(data.shape) < 1:
        raise ValidationError(f"{what} dims must all be >= 1, got {data.shape}")
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValidationError(f"spacing components must be > 0, got {spacing}")


@dataclass(frozen=True)
class Volume3:
    """3D grid of signed 16-bit HU values with physical voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = DEFAULT_SPACING

    def __post_init__(self):
        _check_grid(self.data, self.spacing, np.int16, "volume")
        object.__setattr__(self, "spacing", _f32(self.spacing))
        self.data.setflags(write=False)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def slice_at(self, z: int) -> np.ndarray:
        """Axial slice as a 2D array indexed [x, y]."""
        return self.data[:, :, z]

    @classmethod
    def from_array(cls, arr, spacing=DEFAULT_SPACING) -> "Volume3":
        """Build from any numeric array, rounding and clipping to int16."""
        a = np.rint(np.asarray(arr, dtype=np.float64))
        a = np.clip(a, np.iinfo(np.int16).min, np.iinfo(np.int16).max)
        return cls(a.astype(np.int16), spacing)


@dataclass(frozen=True)
class Mask3:
    """Label grid paired with a Volume3: 0 background, k >= 1 lesion instance k."""

    data: np.ndarray
    spacing: tuple[float, float, float] = DEFAULT_SPACING

    def __post_init__(self):
        _check_grid(self.data, self.spacing, np.uint8, "mask")
        object.__setattr__(self, "spacing", _f32(self.spacing))
        self.data.setflags(write=False)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def labels(self) -> list[int]:
        """Nonzero labels present, ascending."""
        return [int(v) for v in np.unique(self.data) if v != 0]


@dataclass(frozen=True)
class BoxRegion:
    """Axis-aligned voxel box, inclusive on both corners."""

    min: tuple[int, int, int]
    max: tuple[int, int, int]

    def __post_init__(self):
        lo = tuple(int(v) for v in self.min)
        hi = tuple(int(v) for v in self.max)
        if any(a > b for a, b in zip(lo, hi)):
            raise ValidationError(f"box min {lo} exceeds max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(b - a + 1 for a, b in zip(self.min, self.max))

    @property
    def center(self) -> tuple[float, float, float]:
        return tuple((a + b) / 2.0 for a, b in zip(self.min, self.max))

    def volume(self) -> int:
        nx, ny, nz = self.shape
        return nx * ny * nz

    def contains(self, p) -> bool:
        return all(a <= int(c) <= b for a, b, c in zip(self.min, self.max, p))

    def within(self, dims) -> bool:
        return all(0 <= a and b < d for a, b, d in zip(self.min, self.max, dims))

    def clipped(self, dims) -> "BoxRegion":
        lo = tuple(min(max(a, 0), d - 1) for a, d in zip(self.min, dims))
        hi = tuple(min(max(b, 0), d - 1) for b, d in zip(self.max, dims))
        return BoxRegion(lo, hi)


@dataclass(frozen=True)
class IntegralVolume:
    """3D summed-area table: sums[i,j,k] = sum of voxels[a,b,c] for a<i, b<j, c<k."""

    sums: np.ndarray = field(repr=False)
    dims: tuple[int, int, int]

    def __post_init__(self):
        if self.sums.dtype != np.int64:
            raise ValidationError("integral sums must be int64")
        expect = tuple(d + 1 for d in self.dims)
        if self.sums.shape != expect:
            raise ValidationError(
                f"integral shape {self.sums.shape} does not match dims+1 {expect}"
            )
        self.sums.setflags(write=False)


def build_integral(v: Volume3) -> IntegralVolume:
    """Cumulative-sum table with a zero-padded leading hyperplane per axis."""
    nx, ny, nz = v.dims
    sums = np.zeros((nx + 1, ny + 1, nz + 1), dtype=np.int64)
    sums[1:, 1:, 1:] = v.data
    np.cumsum(sums, axis=0, out=sums)
    np.cumsum(sums, axis=1, out=sums)
    np.cumsum(sums, axis=2, out=sums)
    return IntegralVolume(sums, v.dims)


def box_sum(iv: IntegralVolume, b: BoxRegion) -> int:
    """Sum of voxels over an inclusive box via 8-corner inclusion-exclusion."""
    if not b.within(iv.dims):
        raise ValidationError(f"box {b.min}..{b.max} outside dims {iv.dims}")
    s = iv.sums
    x0, y0, z0 = b.min
    x1, y1, z1 = (c + 1 for c in b.max)
    return int(
        s[x1, y1, z1]
        - s[x0, y1, z1] - s[x1, y0, z1] - s[x1, y1, z0]
        + s[x0, y0, z1] + s[x0, y1, z0] + s[x1, y0, z0]
        - s[x0, y0, z0]
    )


def box_sum_batch(iv: IntegralVolume, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Vectorized box_sum for N boxes given as (N,3) inclusive corner arrays.

    Corners must already be clipped to the volume; rows where any lo > hi
    denote empty boxes and yield 0.
    """
    s = iv.sums
    h = hi + 1
    x0, y0, z0 = lo[:, 0], lo[:, 1], lo[:, 2]
    x1, y1, z1 = h[:, 0], h[:, 1], h[:, 2]
    total = (
        s[x1, y1, z1]
        - s[x0, y1, z1] - s[x1, y0, z1] - s[x1, y1, z0]
        + s[x0, y0, z1] + s[x0, y1, z0] + s[x1, y0, z0]
        - s[x0, y0, z0]
    )
    empty = (lo > hi).any(axis=1)
    if empty.any():
        total = np.where(empty, 0, total)
    return total


def gradient_at(v: Volume3, p) -> tuple[float, float, float]:
    """Intensity gradient in HU per voxel: central differences in the
    interior, one-sided at volume faces."""
    x, y, z = (int(c) for c in p)
    nx, ny, nz = v.dims
    if not (0 <= x < nx and 0 <= y < ny and 0 <= z < nz):
        raise ValidationError(f"point {(x, y, z)} outside dims {v.dims}")
    d = v.data.astype(np.float64)

    def axis_diff(idx, n, take):
        if n == 1:
            return 0.0
        if idx == 0:
            return take(1) - take(0)
        if idx == n - 1:
            return take(n - 1) - take(n - 2)
        return (take(idx + 1) - take(idx - 1)) / 2.0

    gx = axis_diff(x, nx, lambda i: d[i, y, z])
    gy = axis_diff(y, ny, lambda j: d[x, j, z])
    gz = axis_diff(z, nz, lambda k: d[x, y, k])
    return (float(gx), float(gy), float(gz))


def _read_header(raw: bytes, path, magic: bytes):
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than header")
    got_magic, nx, ny, nz, sx, sy, sz = _HEADER.unpack_from(raw)
    if got_magic != magic:
        raise FormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if min(nx, ny, nz) < 1:
        raise ValidationError(f"{path}: zero dimension in header ({nx},{ny},{nz})")
    return (nx, ny, nz), (sx, sy, sz)


def _read_grid(path, magic: bytes, dtype):
    with open(path, "rb") as f:
        raw = f.read()
    dims, spacing = _read_header(raw, path, magic)
    count = dims[0] * dims[1] * dims[2]
    need = count * np.dtype(dtype).itemsize
    payload = raw[_HEADER.size:]
    if len(payload) != need:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, header implies {need}"
        )
    data = np.frombuffer(payload, dtype=np.dtype(dtype).newbyteorder("<"))
    data = data.astype(dtype).reshape(dims, order="F")
    return data, spacing


def _write_grid(path, magic: bytes, data: np.ndarray, spacing) -> None:
    nx, ny, nz = data.shape
    header = _HEADER.pack(magic, nx, ny, nz, *(float(s) for s in spacing))
    payload = data.astype(data.dtype.newbyteorder("<")).tobytes(order="F")
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(payload)
    except OSError as e:
        raise OSError(f"writing {path}: {e}") from e


def read_volume(path) -> Volume3:
    data, spacing = _read_grid(path, VOLUME_MAGIC, np.int16)
    return Volume3(data, spacing)


def write_volume(v: Volume3, path) -> None:
    _write_grid(path, VOLUME_MAGIC, v.data, v.spacing)


def read_mask(path) -> Mask3:
    data, spacing = _read_grid(path, MASK_MAGIC, np.uint8)
    return Mask3(data, spacing)


def write_mask(m: Mask3, path) -> None:
    _write_grid(path, MASK_MAGIC, m.data, m.spacing)
