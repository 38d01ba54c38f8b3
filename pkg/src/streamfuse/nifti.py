"""Minimal NIfTI-1 single-file (.nii / .nii.gz) reader and writer.

Supports the subset needed by the pipeline: 3D scalar volumes (plus 4D with a
singleton trailing dimension), the common integer/float datatypes, scl_slope /
scl_inter rescaling, and both byte orders on read. Writing always emits
little-endian float32 "n+1" single-file images with an sform affine.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352  # header + 4 extension-flag bytes

# NIfTI datatype code -> numpy dtype
_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}


class NiftiError(IOError):
    """Raised for unreadable, truncated or unsupported NIfTI files."""


def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def read_nifti(path):
    """Read a NIfTI-1 file.

    Returns (data, affine, spacing): data as float64 ndarray in (i, j, k)
    index order, the 4x4 voxel-to-world affine (sform if set, else a pixdim
    diagonal), and per-axis spacing in mm.
    """
    try:
        with _open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise NiftiError(f"cannot read {path}: {exc}") from exc
    if len(raw) < VOX_OFFSET:
        raise NiftiError(f"{path}: truncated header ({len(raw)} bytes)")

    sizeof_hdr = struct.unpack_from("<i", raw, 0)[0]
    if sizeof_hdr == 348:
        bo = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == 348:
        bo = ">"
    else:
        raise NiftiError(f"{path}: not a NIfTI-1 file (sizeof_hdr != 348)")

    magic = raw[344:348]
    if magic[:3] not in (b"n+1", b"ni1"):
        raise NiftiError(f"{path}: bad magic {magic!r}")

    dim = struct.unpack_from(bo + "8h", raw, 40)
    ndim = dim[0]
    if ndim < 3 or ndim > 4:
        raise NiftiError(f"{path}: unsupported dimensionality {ndim}")
    shape = tuple(int(d) for d in dim[1 : 1 + ndim])
    if ndim == 4 and shape[3] != 1:
        raise NiftiError(f"{path}: 4D volume with non-singleton 4th dim {shape[3]}")
    if any(s < 1 for s in shape):
        raise NiftiError(f"{path}: invalid shape {shape}")

    datatype = struct.unpack_from(bo + "h", raw, 70)[0]
    if datatype not in _DTYPES:
        raise NiftiError(f"{path}: unsupported datatype code {datatype}")
    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(bo)

    pixdim = struct.unpack_from(bo + "8f", raw, 76)
    vox_offset = int(struct.unpack_from(bo + "f", raw, 108)[0])
    scl_slope = struct.unpack_from(bo + "f", raw, 112)[0]
    scl_inter = struct.unpack_from(bo + "f", raw, 116)[0]

    count = int(np.prod(shape))
    need = vox_offset + count * dtype.itemsize
    if len(raw) < need:
        raise NiftiError(f"{path}: truncated data ({len(raw)} < {need} bytes)")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    data = data.reshape(shape, order="F").astype(np.float64)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data * slope + scl_inter
    if ndim == 4:
        data = data[..., 0]

    sform_code = struct.unpack_from(bo + "h", raw, 254)[0]
    if sform_code > 0:
        rows = struct.unpack_from(bo + "12f", raw, 280)
        affine = np.vstack([np.array(rows).reshape(3, 4), [0, 0, 0, 1]])
    else:
        affine = np.diag([pixdim[1], pixdim[2], pixdim[3], 1.0])
    spacing = tuple(float(abs(p)) for p in pixdim[1:4])
    return data, affine.astype(np.float64), spacing


def write_nifti(path, data, spacing=(1.0, 1.0, 1.0), affine=None):
    """Write a 3D array as a little-endian float32 single-file NIfTI-1 image."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise NiftiError(f"expected 3D data, got shape {data.shape}")
    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, 348)
    struct.pack_into("<8h", header, 40, 3, data.shape[0], data.shape[1], data.shape[2], 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, 16)  # float32
    struct.pack_into("<h", header, 72, 32)  # bitpix
    struct.pack_into("<8f", header, 76, 1.0, spacing[0], spacing[1], spacing[2], 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", header, 108, float(VOX_OFFSET))
    struct.pack_into("<f", header, 112, 1.0)  # scl_slope
    struct.pack_into("<f", header, 116, 0.0)  # scl_inter
    if affine is None:
        affine = np.diag([spacing[0], spacing[1], spacing[2], 1.0])
    affine = np.asarray(affine, dtype=np.float64)
    struct.pack_into("<h", header, 252, 1)  # qform_code (quaternion left identity)
    struct.pack_into("<h", header, 254, 1)  # sform_code
    struct.pack_into("<12f", header, 280, *affine[:3, :4].ravel())
    header[344:348] = b"n+1\x00"
    payload = bytes(header) + b"\x00" * (VOX_OFFSET - HEADER_SIZE)
    payload += np.asfortranarray(data, dtype="<f4").tobytes(order="F")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with _open(path, "wb") as fh:
        fh.write(payload)
