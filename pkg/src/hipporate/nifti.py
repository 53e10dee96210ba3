"""Binary NIfTI-1 reading and writing.

Only what the pipeline needs: 3D volumes, the five common datatypes, both
endiannesses on read, optional gzip. Files written here are always
single-file ``n+1`` little-endian float32 with the data block at offset 352.

The MNI bookkeeping assumes the 121x145x121 grid at 1.5 mm with world
corner (-90, -126, -72); affines that are a pure translation on that grid
are converted to an integer voxel origin, anything else falls back to a
flagged (0, 0, 0) origin.
"""

from __future__ import annotations

import gzip
import io
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    NonFiniteVoxel,
    TruncatedStream,
    UnsupportedDatatype,
    UnsupportedDimension,
)
from .volumes import MNI_CORNER_MM, MNI_VOXEL_MM, Volume3D

HEADER_SIZE = 348
DATA_OFFSET = 352

# numpy field spec of the 348-byte header (offsets per the NIfTI-1 standard)
_HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]

_DTYPE_CODES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
}
_FLOAT32_CODE = 16


def _header_dtype(byteorder: str) -> np.dtype:
    return np.dtype([(f[0], byteorder + f[1]) + tuple(f[2:]) for f in _HEADER_FIELDS])


def _maybe_gunzip(data: bytes) -> bytes:
    if data[:2] == b"\x1f\x8b":
        return gzip.decompress(data)
    return data


def read_nifti(data: bytes) -> Volume3D:
    """Parse a NIfTI-1 byte stream (optionally gzipped) into a Volume3D.

    Voxels come back as float32 with scl_slope/scl_inter applied. Raises
    TruncatedStream, BadMagic, UnsupportedDatatype, UnsupportedDimension or
    NonFiniteVoxel; messages name the offending header field or voxel.
    """
    data = _maybe_gunzip(bytes(data))
    if len(data) < HEADER_SIZE:
        raise TruncatedStream(
            f"stream has {len(data)} bytes, a NIfTI-1 header needs {HEADER_SIZE}"
        )
    magic = data[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise BadMagic(f"magic field is {magic!r}, expected 'n+1\\0' or 'ni1\\0'")

    byteorder = "<"
    hdr = np.frombuffer(data[:HEADER_SIZE], dtype=_header_dtype("<"), count=1)[0]
    if int(hdr["sizeof_hdr"]) != HEADER_SIZE:
        hdr = np.frombuffer(data[:HEADER_SIZE], dtype=_header_dtype(">"), count=1)[0]
        byteorder = ">"
        if int(hdr["sizeof_hdr"]) != HEADER_SIZE:
            raise BadMagic(
                "sizeof_hdr field is not 348 under either byte order"
            )

    dim = hdr["dim"]
    ndim = int(dim[0])
    if ndim < 3 or not (1 <= ndim <= 7):
        raise UnsupportedDimension(f"dim[0] is {ndim}, need a 3D volume")
    if ndim > 3 and any(int(dim[i]) not in (0, 1) for i in range(4, ndim + 1)):
        raise UnsupportedDimension(
            f"dim field declares {ndim} non-trivial axes, only 3D is supported"
        )
    shape = tuple(int(dim[i]) for i in (1, 2, 3))
    if any(s < 1 for s in shape):
        raise UnsupportedDimension(f"dim field has non-positive extent {shape}")

    code = int(hdr["datatype"])
    if code not in _DTYPE_CODES:
        raise UnsupportedDatatype(f"datatype field code {code} is not supported")
    voxel_dtype = np.dtype(_DTYPE_CODES[code]).newbyteorder(byteorder)

    offset = int(round(float(hdr["vox_offset"])))
    if offset < HEADER_SIZE:
        offset = HEADER_SIZE if magic == b"ni1\x00" else DATA_OFFSET
    nvox = shape[0] * shape[1] * shape[2]
    nbytes = nvox * voxel_dtype.itemsize
    if len(data) < offset + nbytes:
        raise TruncatedStream(
            f"data block needs {nbytes} bytes at offset {offset}, "
            f"stream has {len(data)}"
        )
    raw = np.frombuffer(data, dtype=voxel_dtype, count=nvox, offset=offset)
    values = raw.astype(np.float32).reshape(shape, order="F")  # x fastest-varying

    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if slope != 0.0 and np.isfinite(slope) and not (slope == 1.0 and inter == 0.0):
        values = values * np.float32(slope) + np.float32(inter if np.isfinite(inter) else 0.0)

    bad = ~np.isfinite(values)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NonFiniteVoxel(f"voxel {idx} is non-finite after scaling")

    origin, fallback = _origin_from_header(hdr)
    return Volume3D(data=values, origin_mni=origin, origin_fallback=fallback)


def _origin_from_header(hdr) -> tuple[tuple[int, int, int], bool]:
    """Integer MNI voxel origin if the affine is a pure translation on the
    1.5 mm grid; otherwise (0,0,0) with the fallback flag set."""
    linear = None
    translation = None
    if int(hdr["sform_code"]) > 0:
        rows = np.stack([hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]]).astype(np.float64)
        linear = rows[:, :3]
        translation = rows[:, 3]
    elif int(hdr["qform_code"]) > 0:
        b, c, d = (float(hdr[k]) for k in ("quatern_b", "quatern_c", "quatern_d"))
        if abs(b) > 1e-6 or abs(c) > 1e-6 or abs(d) > 1e-6:
            return (0, 0, 0), True
        qfac = float(hdr["pixdim"][0]) or 1.0
        pix = np.asarray(hdr["pixdim"][1:4], dtype=np.float64)
        linear = np.diag(pix * np.array([1.0, 1.0, qfac]))
        translation = np.array(
            [float(hdr[k]) for k in ("qoffset_x", "qoffset_y", "qoffset_z")]
        )
    if linear is None:
        return (0, 0, 0), True
    if not np.allclose(linear, np.eye(3) * MNI_VOXEL_MM, atol=1e-3):
        return (0, 0, 0), True
    voxels = (translation - np.asarray(MNI_CORNER_MM)) / MNI_VOXEL_MM
    rounded = np.round(voxels)
    if not np.allclose(voxels, rounded, atol=1e-3):
        return (0, 0, 0), True
    return tuple(int(i) for i in rounded), False


def write_nifti(v: Volume3D) -> bytes:
    """Serialize a volume as an uncompressed little-endian float32 NIfTI-1
    stream (magic n+1, data at offset 352). Round-trips shape, origin and
    voxel data bit-exactly through read_nifti."""
    hdr = np.zeros((), dtype=_header_dtype("<"))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    dim = np.ones(8, dtype=np.int16)
    dim[0] = 3
    dim[1:4] = v.shape
    hdr["dim"] = dim
    hdr["datatype"] = _FLOAT32_CODE
    hdr["bitpix"] = 32
    pixdim = np.zeros(8, dtype=np.float32)
    pixdim[0] = 1.0
    pixdim[1:4] = MNI_VOXEL_MM
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = DATA_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # millimetres
    hdr["descrip"] = b"hipporate"
    hdr["sform_code"] = 4  # MNI152 space
    hdr["qform_code"] = 0
    origin_mm = np.asarray(MNI_CORNER_MM) + MNI_VOXEL_MM * np.asarray(v.origin_mni)
    hdr["srow_x"] = [MNI_VOXEL_MM, 0.0, 0.0, origin_mm[0]]
    hdr["srow_y"] = [0.0, MNI_VOXEL_MM, 0.0, origin_mm[1]]
    hdr["srow_z"] = [0.0, 0.0, MNI_VOXEL_MM, origin_mm[2]]
    hdr["magic"] = b"n+1\x00"

    out = io.BytesIO()
    out.write(hdr.tobytes())
    out.write(b"\x00" * (DATA_OFFSET - HEADER_SIZE))  # empty extender
    out.write(np.ascontiguousarray(v.data, dtype=np.float32).tobytes(order="F"))
    return out.getvalue()


def load_volume(path: str | Path) -> Volume3D:
    return read_nifti(Path(path).read_bytes())


def save_volume(v: Volume3D, path: str | Path) -> None:
    """Write a volume; a .gz suffix selects gzip with a pinned mtime so the
    output is byte-identical across runs."""
    path = Path(path)
    payload = write_nifti(v)
    if path.suffix == ".gz":
        buf = io.BytesIO()
        with gzip.GzipFile(fileobj=buf, mode="wb", mtime=0) as fh:
            fh.write(payload)
        path.write_bytes(buf.getvalue())
    else:
        path.write_bytes(payload)
