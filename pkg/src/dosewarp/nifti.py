"""Single-file NIfTI-1 reader/writer for the volume kinds this package uses.

Supported subset: magic ``n+1``, datatypes uint8 (labels), int16 and
float32 (scalar volumes), plus displacement fields stored as dim[0]=5,
dim[5]=3, intent code 1007 ("vector"), components (ux, uy, uz) in mm.
Geometry must be axis-aligned: when an sform is present its spatial 3x3
block must be a positive diagonal, and a qform may only carry the identity
rotation; anything else is rejected loudly rather than silently resampled.
Both byte orders are read (detected from sizeof_hdr); files are always
written little-endian with an sform.  Writes are atomic
(write-temp-then-rename).  Note the header carries float32 spacing/origin,
so geometries survive a round trip exactly only when their values are
float32-representable.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .field import DisplacementField
from .grid import GridGeometry, LabelVolume, ScalarVolume

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"
INTENT_VECTOR = 1007
DT_UINT8, DT_INT16, DT_FLOAT32 = 2, 4, 16
_DTYPES = {DT_UINT8: "u1", DT_INT16: "i2", DT_FLOAT32: "f4"}


class NiftiError(ValueError):
    """File rejected; ``code`` identifies the failure class."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


def _unpack(fmt: str, buf: bytes, offset: int):
    return struct.unpack_from(fmt, buf, offset)


def _read_geometry(buf: bytes, bo: str) -> GridGeometry:
    dim = _unpack(bo + "8h", buf, 40)
    pixdim = _unpack(bo + "8f", buf, 76)
    qform_code, sform_code = _unpack(bo + "2h", buf, 252)
    dims = tuple(int(d) for d in dim[1:4])
    if any(d < 2 for d in dims):
        raise NiftiError("bad-dim", f"spatial dims must be >= 2, got {dims}")
    if sform_code > 0:
        srow = np.array(_unpack(bo + "12f", buf, 280), float).reshape(3, 4)
        spatial = srow[:, :3]
        if np.any(spatial[~np.eye(3, dtype=bool)] != 0.0):
            raise NiftiError("oblique", "sform has off-diagonal spatial terms")
        diag = np.diag(spatial)
        if np.any(diag <= 0):
            raise NiftiError("oblique", "sform diagonal must be positive")
        return GridGeometry(dims, tuple(diag), tuple(srow[:, 3]))
    spacing = pixdim[1:4]
    if any(s <= 0 for s in spacing):
        raise NiftiError("bad-dim", f"pixdim spacing must be > 0, got {spacing}")
    if qform_code > 0:
        b, c, d = _unpack(bo + "3f", buf, 256)
        if b != 0.0 or c != 0.0 or d != 0.0:
            raise NiftiError("oblique", "qform carries a rotation")
        if pixdim[0] == -1.0:
            raise NiftiError("oblique", "qform qfac flips the z axis")
        origin = _unpack(bo + "3f", buf, 268)
        return GridGeometry(dims, tuple(spacing), tuple(origin))
    return GridGeometry(dims, tuple(spacing))


def read_nifti(path: str):
    """Read a supported NIfTI-1 file.

    Returns a LabelVolume for uint8, a DisplacementField for 5D vector
    files, and a ScalarVolume otherwise; scl_slope/scl_inter are applied to
    scalar data.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise NiftiError("truncated", f"{path}: file shorter than the header")
    (sizeof_hdr_le,) = _unpack("<i", raw, 0)
    if sizeof_hdr_le == HEADER_SIZE:
        bo = "<"
    else:
        (sizeof_hdr_be,) = _unpack(">i", raw, 0)
        if sizeof_hdr_be != HEADER_SIZE:
            raise NiftiError("bad-magic", f"{path}: not a NIfTI-1 file")
        bo = ">"
    magic = raw[344:348]
    if magic == MAGIC_PAIR:
        raise NiftiError("unsupported-format",
                         f"{path}: two-file (.hdr/.img) form not supported")
    if magic != MAGIC_SINGLE:
        raise NiftiError("bad-magic", f"{path}: bad magic {magic!r}")

    dim = _unpack(bo + "8h", raw, 40)
    (intent_code,) = _unpack(bo + "h", raw, 68)
    (datatype,) = _unpack(bo + "h", raw, 70)
    if datatype not in _DTYPES:
        raise NiftiError("unsupported-datatype", f"{path}: datatype {datatype}")
    if dim[0] not in (3, 5):
        raise NiftiError("bad-dim", f"{path}: dim[0] must be 3 or 5, got {dim[0]}")
    is_field = dim[0] == 5
    if is_field:
        if dim[4] != 1 or dim[5] != 3 or intent_code != INTENT_VECTOR:
            raise NiftiError(
                "bad-dim", f"{path}: 5D file is not a displacement field "
                f"(dim4={dim[4]}, dim5={dim[5]}, intent={intent_code})")
        if datatype == DT_UINT8:
            raise NiftiError("unsupported-datatype",
                             f"{path}: uint8 displacement field")
    geometry = _read_geometry(raw, bo)
    (vox_offset,) = _unpack(bo + "f", raw, 108)
    slope, inter = _unpack(bo + "2f", raw, 112)
    offset = int(vox_offset)
    if offset < HEADER_SIZE:
        raise NiftiError("bad-dim", f"{path}: vox_offset {vox_offset} < 348")

    count = geometry.n_voxels * (3 if is_field else 1)
    dtype = np.dtype(bo + _DTYPES[datatype])
    if len(raw) < offset + count * dtype.itemsize:
        raise NiftiError("truncated", f"{path}: data shorter than header promises")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)

    scaled = slope not in (0.0, 1.0) or inter != 0.0
    if datatype == DT_UINT8:
        if scaled:
            raise NiftiError("bad-scaling",
                             f"{path}: scl_slope/inter on a label volume")
        return LabelVolume(geometry, data.astype(np.int64))
    values = data.astype(np.float64)
    if scaled:
        values = values * float(slope) + float(inter)
    if is_field:
        vectors = values.reshape(geometry.dims + (1, 3), order="F")[:, :, :, 0, :]
        return DisplacementField(geometry, vectors)
    return ScalarVolume(geometry, values)


def _build_header(geometry: GridGeometry, datatype: int, bitpix: int,
                  is_field: bool) -> bytearray:
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    if is_field:
        dim = (5, *geometry.dims, 1, 3, 1, 1)
    else:
        dim = (3, *geometry.dims, 1, 1, 1, 1)
    struct.pack_into("<8h", hdr, 40, *dim)
    if is_field:
        struct.pack_into("<h", hdr, 68, INTENT_VECTOR)
        struct.pack_into("<16s", hdr, 328, b"vector")
    struct.pack_into("<2h", hdr, 70, datatype, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *geometry.spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, float(HEADER_SIZE + 4))  # vox_offset
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)               # slope, inter
    struct.pack_into("<80s", hdr, 148, b"dosewarp")
    struct.pack_into("<2h", hdr, 252, 0, 1)                   # qform, sform
    sx, sy, sz = geometry.spacing
    ox, oy, oz = geometry.origin
    struct.pack_into("<4f", hdr, 280, sx, 0.0, 0.0, ox)
    struct.pack_into("<4f", hdr, 296, 0.0, sy, 0.0, oy)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sz, oz)
    struct.pack_into("<4s", hdr, 344, MAGIC_SINGLE)
    return hdr


def _atomic_write(path: str, payload: bytes):
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_nifti(obj, path: str):
    """Write a ScalarVolume (float32), LabelVolume (uint8) or
    DisplacementField (float32 vector file); round-trips through read_nifti."""
    if isinstance(obj, LabelVolume):
        if obj.data.min() < 0 or obj.data.max() > 255:
            raise NiftiError("label-range",
                             f"{path}: labels exceed uint8 range")
        hdr = _build_header(obj.geometry, DT_UINT8, 8, False)
        payload = obj.data.astype("<u1").ravel(order="F").tobytes()
    elif isinstance(obj, DisplacementField):
        hdr = _build_header(obj.geometry, DT_FLOAT32, 32, True)
        arr = obj.vectors[:, :, :, None, :]  # (nx, ny, nz, 1, 3)
        payload = arr.astype("<f4").ravel(order="F").tobytes()
    elif isinstance(obj, ScalarVolume):
        hdr = _build_header(obj.geometry, DT_FLOAT32, 32, False)
        payload = obj.data.astype("<f4").ravel(order="F").tobytes()
    else:
        raise ValueError(f"cannot write object of type {type(obj).__name__}")
    _atomic_write(path, bytes(hdr) + b"\x00\x00\x00\x00" + payload)
