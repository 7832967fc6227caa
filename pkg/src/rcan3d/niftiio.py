"""Minimal single-file NIfTI-1 reader/writer.

Supports uncompressed .nii with magic "n+1\\0", little-endian, datatypes
uint8 (2), int16 (4) and float32 (16). Grids are exposed in (D, H, W)
order: dim[1] is the fastest-varying axis on disk, so the raw stream is
reshaped as (dim[3], dim[2], dim[1]). Spacing follows the same (D, H, W)
order, taken from pixdim[3..1].
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import BadMagic, IoError, TruncatedFile, UnsupportedDatatype

HEADER_SIZE = 348
MAGIC = b"n+1\x00"

_DTYPES = {2: np.dtype("<u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}
_CODES = {np.dtype(np.uint8): 2, np.dtype(np.int16): 4, np.dtype(np.float32): 16}


def read_nifti(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read one volume; returns (grid in (D, H, W), spacing in mm)."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if len(blob) < HEADER_SIZE:
        raise TruncatedFile(f"{path}: {len(blob)} bytes is shorter than the header")
    if blob[344:348] != MAGIC:
        raise BadMagic(f"{path}: magic {blob[344:348]!r} is not {MAGIC!r}")

    dim = struct.unpack_from("<8h", blob, 40)
    datatype = struct.unpack_from("<h", blob, 70)[0]
    pixdim = struct.unpack_from("<8f", blob, 76)
    vox_offset = int(struct.unpack_from("<f", blob, 108)[0])
    scl_slope, scl_inter = struct.unpack_from("<2f", blob, 112)

    if datatype not in _DTYPES:
        raise UnsupportedDatatype(f"{path}: datatype code {datatype}")
    if dim[0] != 3:
        raise UnsupportedDatatype(f"{path}: only 3-D volumes supported, dim[0]={dim[0]}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if min(nx, ny, nz) < 1:
        raise TruncatedFile(f"{path}: degenerate dims {dim[:4]}")

    dtype = _DTYPES[datatype]
    count = nx * ny * nz
    need = vox_offset + count * dtype.itemsize
    if len(blob) < need:
        raise TruncatedFile(f"{path}: need {need} bytes, file has {len(blob)}")
    flat = np.frombuffer(blob, dtype=dtype, count=count, offset=vox_offset)
    grid = flat.reshape(nz, ny, nx).copy()

    if datatype == 16 and scl_slope != 0.0 and not (scl_slope == 1.0 and scl_inter == 0.0):
        grid = grid * np.float32(scl_slope) + np.float32(scl_inter)

    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    return grid, spacing


def write_nifti(grid: np.ndarray, spacing, path) -> None:
    """Write a 3-D grid as single-file NIfTI-1; inverse of read_nifti."""
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise IoError(f"grid must be 3-D, got shape {grid.shape}")
    if grid.size == 0:
        raise IoError("refusing to write a zero-extent grid")
    if grid.dtype not in _CODES:
        raise UnsupportedDatatype(f"cannot encode dtype {grid.dtype}")
    if not np.issubdtype(grid.dtype, np.integer) and not np.all(np.isfinite(grid)):
        raise IoError("grid contains non-finite values")

    d, h, w = grid.shape
    sd, sh, sw = (float(s) for s in spacing)
    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, w, h, d, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, _CODES[grid.dtype])
    struct.pack_into("<h", header, 72, grid.dtype.itemsize * 8)
    struct.pack_into("<8f", header, 76, 1.0, sw, sh, sd, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", header, 108, float(HEADER_SIZE + 4))
    # scl_slope 0 means "no scaling": keeps round trips bitwise.
    struct.pack_into("<2f", header, 112, 0.0, 0.0)
    header[344:348] = MAGIC

    payload = np.ascontiguousarray(grid, dtype=grid.dtype.newbyteorder("<"))
    try:
        with open(path, "wb") as fh:
            fh.write(bytes(header))
            fh.write(b"\x00\x00\x00\x00")  # empty extension block
            fh.write(payload.tobytes())
    except OSError as exc:
        raise IoError(str(exc)) from exc
