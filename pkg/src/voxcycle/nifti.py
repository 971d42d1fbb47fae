"""Minimal NIfTI-1 codec.

Reads and writes single-file volumes (.nii / .nii.gz) with 3 spatial
dimensions, which is all the pipeline consumes and emits. Affines are
written through the sform fields; on read, sform is preferred, then
qform, then a pixdim-scaled identity fallback.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import NiftiFormatError

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"

_DTYPE_FROM_CODE = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
    1024: np.int64,
}
_CODE_FROM_DTYPE = {np.dtype(v): k for k, v in _DTYPE_FROM_CODE.items()}


def _open_for_read(path: Path):
    raw = path.open("rb")
    head = raw.read(2)
    raw.seek(0)
    if head == b"\x1f\x8b":
        return gzip.open(raw)
    return raw


def _quaternion_affine(b, c, d, qx, qy, qz, pixdim):
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a2) if a2 > 0 else 0.0
    r = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    scales = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    affine = np.eye(4)
    affine[:3, :3] = r @ np.diag(scales)
    affine[:3, 3] = (qx, qy, qz)
    return affine


def read_nifti(path) -> tuple[np.ndarray, np.ndarray, tuple[float, float, float]]:
    """Read a 3D NIfTI-1 file.

    Returns (data, affine, spacing) where data keeps the on-disk dtype
    (unless scl_slope/scl_inter force a float rescale), affine is the
    4x4 voxel-to-world matrix and spacing is pixdim[1:4].
    """
    path = Path(path)
    if not path.exists():
        raise NiftiFormatError(f"no such file: {path}")
    with _open_for_read(path) as f:
        hdr = f.read(HEADER_SIZE)
        if len(hdr) < HEADER_SIZE:
            raise NiftiFormatError(f"{path}: truncated header ({len(hdr)} bytes)")
        for endian in ("<", ">"):
            if struct.unpack_from(endian + "i", hdr, 0)[0] == HEADER_SIZE:
                break
        else:
            raise NiftiFormatError(f"{path}: bad sizeof_hdr, not a NIfTI-1 file")
        magic = struct.unpack_from("4s", hdr, 344)[0]
        if magic not in (MAGIC_SINGLE, MAGIC_PAIR):
            raise NiftiFormatError(f"{path}: bad magic {magic!r}")
        if magic == MAGIC_PAIR:
            raise NiftiFormatError(f"{path}: two-file (.hdr/.img) NIfTI is not supported")

        dim = struct.unpack_from(endian + "8h", hdr, 40)
        ndim = dim[0]
        if ndim < 1 or ndim > 7:
            raise NiftiFormatError(f"{path}: invalid dim[0]={ndim}")
        shape = tuple(int(n) for n in dim[1 : 1 + ndim])
        # trailing singleton dimensions are tolerated, anything else is not 3D
        if len(shape) > 3 and all(n <= 1 for n in shape[3:]):
            shape = shape[:3]
        if len(shape) != 3 or any(n < 1 for n in shape):
            raise NiftiFormatError(
                f"{path}: expected 3 spatial dimensions, got dims {shape}"
            )

        datatype, bitpix = struct.unpack_from(endian + "2h", hdr, 70)
        if datatype not in _DTYPE_FROM_CODE:
            raise NiftiFormatError(f"{path}: unsupported datatype code {datatype}")
        dtype = np.dtype(_DTYPE_FROM_CODE[datatype])
        if dtype.itemsize * 8 != bitpix:
            raise NiftiFormatError(f"{path}: bitpix {bitpix} does not match datatype")

        pixdim = struct.unpack_from(endian + "8f", hdr, 76)
        vox_offset = struct.unpack_from(endian + "f", hdr, 108)[0]
        scl_slope, scl_inter = struct.unpack_from(endian + "2f", hdr, 112)
        qform_code, sform_code = struct.unpack_from(endian + "2h", hdr, 252)
        quatern = struct.unpack_from(endian + "6f", hdr, 256)
        srow = np.array(struct.unpack_from(endian + "12f", hdr, 280)).reshape(3, 4)

        if sform_code > 0:
            affine = np.eye(4)
            affine[:3, :] = srow
        elif qform_code > 0:
            affine = _quaternion_affine(*quatern, pixdim)
        else:
            affine = np.diag([pixdim[1] or 1.0, pixdim[2] or 1.0, pixdim[3] or 1.0, 1.0])

        count = int(np.prod(shape))
        skip = int(vox_offset) - HEADER_SIZE
        if skip > 0:
            f.read(skip)
        buf = f.read(count * dtype.itemsize)
        if len(buf) < count * dtype.itemsize:
            raise NiftiFormatError(f"{path}: truncated data section")
        read_dtype = dtype.newbyteorder(endian)
        data = np.frombuffer(buf, dtype=read_dtype, count=count)
        data = data.astype(dtype, copy=False).reshape(shape, order="F").copy()

    if (scl_slope not in (0.0, 1.0)) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data.astype(np.float32) * slope + scl_inter

    spacing = tuple(float(abs(p)) if p else 1.0 for p in pixdim[1:4])
    return data, affine.astype(np.float64), spacing


def write_nifti(path, data: np.ndarray, affine: np.ndarray, spacing=None) -> None:
    """Write a 3D array with its affine as a single-file NIfTI-1 volume.

    Gzip compression is chosen by the .gz suffix. The array dtype is kept
    on disk, so round-trips are bit-exact for every supported dtype.
    """
    path = Path(path)
    data = np.asarray(data)
    if data.ndim != 3:
        raise NiftiFormatError(f"can only write 3D volumes, got shape {data.shape}")
    if data.dtype not in _CODE_FROM_DTYPE:
        raise NiftiFormatError(f"unsupported dtype {data.dtype}")
    affine = np.asarray(affine, dtype=np.float64)
    if affine.shape != (4, 4):
        raise NiftiFormatError(f"affine must be 4x4, got {affine.shape}")
    if spacing is None:
        spacing = tuple(float(np.linalg.norm(affine[:3, j])) for j in range(3))

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, _CODE_FROM_DTYPE[data.dtype], data.dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, HEADER_SIZE + 4)  # vox_offset
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<b", hdr, 123, 10)  # xyzt_units: mm | sec
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform_code=0, sform_code=1
    struct.pack_into("<3f", hdr, 268, *affine[:3, 3])
    struct.pack_into("<12f", hdr, 280, *affine[:3, :].ravel())
    struct.pack_into("4s", hdr, 344, MAGIC_SINGLE)

    payload = bytes(hdr) + b"\x00\x00\x00\x00" + data.tobytes(order="F")
    if path.suffix == ".gz":
        # mtime=0 keeps identical volumes byte-identical on disk
        with open(path, "wb") as raw, gzip.GzipFile(
                fileobj=raw, mode="wb", mtime=0) as f:
            f.write(payload)
    else:
        with open(path, "wb") as f:
            f.write(payload)
