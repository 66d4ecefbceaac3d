"""Minimal NIfTI-1 reader/writer for .nii / .nii.gz volumes.

Covers exactly what BraTS-style data needs: single-file NIfTI-1 ("n+1"
magic), float32 or uint8 payloads, rank 3 (D, H, W) or rank 4 with the
channel axis stored as the 4th NIfTI dimension. Voxel data is kept in the
package-wide C-order (channel-first) layout; on disk NIfTI is Fortran
ordered with x fastest, so axes are transposed on the way in and out.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError

HEADER_SIZE = 348
VOX_OFFSET = 352  # header + 4-byte extension flag

# NIfTI datatype codes we support.
DT_UINT8 = 2
DT_FLOAT32 = 16

_DTYPE_BY_CODE = {DT_UINT8: np.uint8, DT_FLOAT32: np.float32}
_CODE_BY_DTYPE = {np.dtype(np.uint8): DT_UINT8, np.dtype(np.float32): DT_FLOAT32}


def _open(path, mode):
    path = str(path)
    if path.endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def read_nifti(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read a NIfTI-1 file.

    Returns ``(data, spacing)`` where data is (D, H, W) for rank-3 files and
    channel-first (C, D, H, W) for rank-4 files, with (D, H, W) = NIfTI
    (x, y, z).
    """
    try:
        with _open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise ValidationError(f"unreadable file {path}: {exc}") from exc
    if len(raw) < VOX_OFFSET:
        raise ValidationError(f"{path}: truncated NIfTI header")

    (sizeof_hdr,) = struct.unpack("<i", raw[:4])
    if sizeof_hdr == HEADER_SIZE:
        bo = "<"
    elif struct.unpack(">i", raw[:4])[0] == HEADER_SIZE:
        bo = ">"
    else:
        raise ValidationError(f"{path}: not a NIfTI-1 file (bad sizeof_hdr)")

    magic = raw[344:348]
    if magic[:3] not in (b"n+1", b"ni1"):
        raise ValidationError(f"{path}: bad NIfTI magic {magic!r}")

    dim = struct.unpack(bo + "8h", raw[40:56])
    datatype, bitpix = struct.unpack(bo + "2h", raw[70:74])
    pixdim = struct.unpack(bo + "8f", raw[76:108])
    (vox_offset,) = struct.unpack(bo + "f", raw[108:112])
    scl_slope, scl_inter = struct.unpack(bo + "2f", raw[112:120])

    rank = dim[0]
    if rank not in (3, 4):
        raise ValidationError(f"{path}: unsupported NIfTI rank {rank}")
    if datatype not in _DTYPE_BY_CODE:
        raise ValidationError(f"{path}: unsupported NIfTI datatype {datatype}")
    shape_f = dim[1 : 1 + rank]  # (nx, ny, nz[, nc]) Fortran order
    dtype = np.dtype(_DTYPE_BY_CODE[datatype]).newbyteorder(bo)

    offset = int(vox_offset) if vox_offset else VOX_OFFSET
    count = int(np.prod(shape_f))
    payload = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    if payload.size != count:
        raise ValidationError(f"{path}: truncated NIfTI payload")
    data = payload.reshape(shape_f, order="F")
    if rank == 4:
        data = np.transpose(data, (3, 0, 1, 2))  # (c, x, y, z)
    data = np.ascontiguousarray(data, dtype=_DTYPE_BY_CODE[datatype])

    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        data = data.astype(np.float32) * scl_slope + scl_inter

    spacing = tuple(float(p) if p > 0 else 1.0 for p in pixdim[1:4])
    return data, spacing


def write_nifti(path, data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write ``data`` ((D, H, W) or channel-first (C, D, H, W)) as NIfTI-1."""
    data = np.asarray(data)
    if data.dtype not in _CODE_BY_DTYPE:
        raise ValidationError(f"unsupported dtype for NIfTI output: {data.dtype}")
    if data.ndim == 4:
        disk = np.transpose(data, (1, 2, 3, 0))  # (x, y, z, c)
    elif data.ndim == 3:
        disk = data
    else:
        raise ValidationError(f"unsupported rank {data.ndim} for NIfTI output")

    dim = [disk.ndim] + list(disk.shape) + [1] * (7 - disk.ndim)
    pixdim = [1.0] + [float(s) for s in spacing] + [1.0, 0.0, 0.0, 0.0]
    datatype = _CODE_BY_DTYPE[data.dtype]
    bitpix = data.dtype.itemsize * 8

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<2h", hdr, 70, datatype, bitpix)
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    hdr[123] = 2  # xyzt_units: millimetres
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform_code=0, sform_code=1
    struct.pack_into("<4f", hdr, 280, spacing[0], 0.0, 0.0, 0.0)  # srow_x
    struct.pack_into("<4f", hdr, 296, 0.0, spacing[1], 0.0, 0.0)  # srow_y
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, spacing[2], 0.0)  # srow_z
    hdr[344:348] = b"n+1\x00"

    payload = np.asfortranarray(disk)
    if payload.dtype.byteorder == ">":
        payload = payload.astype(payload.dtype.newbyteorder("<"))

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with _open(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(b"\x00\x00\x00\x00")  # no extensions
        f.write(payload.tobytes(order="F"))
