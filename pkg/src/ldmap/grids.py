"""Dense voxel grids, coordinate channels, and the VOL1 on-disk format.

Grids are the carrier for everything volumetric in this package: binary
lesion masks, ground-truth substrate masks, statistic maps and inferred
substrate maps. They are deliberately dense (desk-scale extents, <= 64
voxels per axis) and immutable after construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

BINARY = "binary"
REAL = "real"

_MAGIC = b"VOL1"
_DTYPE_CODES = {BINARY: 0, REAL: 1}
_CODE_DTYPES = {0: BINARY, 1: REAL}


class VolumeFormatError(ValueError):
    """A byte stream is not a well-formed VOL1 volume."""


@dataclass(frozen=True)
class VolumeGrid:
    """Scalar field over a voxel grid, row-major with the last axis fastest.

    ``kind`` is either ``"binary"`` (uint8 payload restricted to {0, 1}) or
    ``"real"`` (finite float32). The backing array is marked read-only;
    copy before mutating.
    """

    dims: tuple[int, ...]
    kind: str
    data: np.ndarray

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.dims)
        if not 2 <= len(dims) <= 3:
            raise ValueError(f"grids have 2 or 3 axes, got {len(dims)}")
        if any(d < 1 for d in dims):
            raise ValueError(f"every axis extent must be >= 1, got {dims}")
        if self.kind == BINARY:
            arr = np.ascontiguousarray(self.data, dtype=np.uint8)
            if not np.isin(arr, (0, 1)).all():
                raise ValueError("binary grid contains values outside {0, 1}")
        elif self.kind == REAL:
            arr = np.ascontiguousarray(self.data, dtype=np.float32)
            if not np.isfinite(arr).all():
                raise ValueError("real grid contains non-finite values")
        else:
            raise ValueError(f"unknown grid kind {self.kind!r}")
        if arr.shape != dims:
            if arr.size != int(np.prod(dims)):
                raise ValueError(
                    f"payload size {arr.size} does not match dims {dims}"
                )
            arr = arr.reshape(dims)
        arr.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "data", arr)

    @classmethod
    def binary(cls, data: np.ndarray) -> "VolumeGrid":
        data = np.asarray(data)
        return cls(dims=data.shape, kind=BINARY, data=data)

    @classmethod
    def real(cls, data: np.ndarray) -> "VolumeGrid":
        data = np.asarray(data)
        return cls(dims=data.shape, kind=REAL, data=data)

    @classmethod
    def zeros(cls, dims, kind: str = BINARY) -> "VolumeGrid":
        dtype = np.uint8 if kind == BINARY else np.float32
        return cls(dims=tuple(dims), kind=kind, data=np.zeros(tuple(dims), dtype=dtype))

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VolumeGrid):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.kind == other.kind
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True)
class CoordinateField:
    """One channel per axis, affine in the voxel index with range [-1, 1].

    Channel ``a`` at index ``i`` along axis ``a`` holds ``2*i/(dims[a]-1) - 1``,
    constant along every other axis.
    """

    dims: tuple[int, ...]
    channels: np.ndarray  # shape (len(dims), *dims), float32

    def __post_init__(self) -> None:
        self.channels.flags.writeable = False


def make_coordinate_field(dims) -> CoordinateField:
    """Build the coordinate channels appended to convolutional inputs.

    Every axis needs at least two voxels so the affine map to [-1, 1] is
    well defined; raises ValueError otherwise.
    """
    dims = tuple(int(d) for d in dims)
    if any(d < 2 for d in dims):
        raise ValueError(f"degenerate axis: all dims must be >= 2, got {dims}")
    channels = np.empty((len(dims),) + dims, dtype=np.float32)
    for axis, n in enumerate(dims):
        ramp = (2.0 * np.arange(n) / (n - 1) - 1.0).astype(np.float32)
        shape = [1] * len(dims)
        shape[axis] = n
        channels[axis] = np.broadcast_to(ramp.reshape(shape), dims)
    return CoordinateField(dims=dims, channels=channels)


def write_volume(grid: VolumeGrid, sink: BinaryIO) -> int:
    """Serialize ``grid`` to ``sink`` in VOL1 format; returns bytes written.

    Layout: 'VOL1', u8 ndim, ndim x u32-LE dims, u8 dtype code
    (0=binary/u8, 1=real/f32-LE), then the row-major payload.
    """
    header = _MAGIC + struct.pack("<B", grid.ndim)
    header += struct.pack(f"<{grid.ndim}I", *grid.dims)
    header += struct.pack("<B", _DTYPE_CODES[grid.kind])
    if grid.kind == BINARY:
        payload = grid.data.astype(np.uint8).tobytes(order="C")
    else:
        payload = grid.data.astype("<f4").tobytes(order="C")
    sink.write(header)
    sink.write(payload)
    return len(header) + len(payload)


def read_volume(source: BinaryIO) -> VolumeGrid:
    """Parse one VOL1 volume from ``source``; inverse of :func:`write_volume`."""
    magic = source.read(4)
    if magic != _MAGIC:
        raise VolumeFormatError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    raw = source.read(1)
    if len(raw) != 1:
        raise VolumeFormatError("truncated header: missing ndim")
    ndim = raw[0]
    if not 2 <= ndim <= 3:
        raise VolumeFormatError(f"unsupported ndim {ndim}")
    raw = source.read(4 * ndim)
    if len(raw) != 4 * ndim:
        raise VolumeFormatError("truncated header: missing dims")
    dims = struct.unpack(f"<{ndim}I", raw)
    raw = source.read(1)
    if len(raw) != 1:
        raise VolumeFormatError("truncated header: missing dtype byte")
    code = raw[0]
    if code not in _CODE_DTYPES:
        raise VolumeFormatError(f"dtype byte must be 0 or 1, got {code}")
    kind = _CODE_DTYPES[code]
    count = int(np.prod(dims))
    itemsize = 1 if kind == BINARY else 4
    payload = source.read(count * itemsize)
    if len(payload) != count * itemsize:
        raise VolumeFormatError(
            f"truncated payload: expected {count * itemsize} bytes, got {len(payload)}"
        )
    if kind == BINARY:
        data = np.frombuffer(payload, dtype=np.uint8)
        if not np.isin(data, (0, 1)).all():
            raise VolumeFormatError("binary payload contains bytes outside {0, 1}")
    else:
        data = np.frombuffer(payload, dtype="<f4").astype(np.float32)
        if not np.isfinite(data).all():
            raise VolumeFormatError("real payload contains non-finite values")
    return VolumeGrid(dims=dims, kind=kind, data=data.reshape(dims).copy())


def save_volume(grid: VolumeGrid, path) -> int:
    with open(path, "wb") as fh:
        return write_volume(grid, fh)


def load_volume(path) -> VolumeGrid:
    with open(path, "rb") as fh:
        return read_volume(fh)
