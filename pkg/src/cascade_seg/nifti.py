"""Minimal NIfTI-1 (single ``.nii`` file) and raw+JSON sidecar I/O.

Supported NIfTI subset: little-endian, magic ``n+1``, 3D (or 4D with one
frame), datatypes uint8 / int16 / float32, no compression and no orientation
beyond per-axis spacing. ``vox_offset`` is honored and ``scl_slope`` /
``scl_inter`` are applied on read when the slope is non-zero.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .volume import LabelMap, Volume

HEADER_SIZE = 348
DEFAULT_VOX_OFFSET = 352
NIFTI_MAGIC = b"n+1\x00"

DATATYPES = {2: np.dtype("<u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}
DATATYPE_CODES = {v: k for k, v in DATATYPES.items()}

HEADER_DTYPE = np.dtype(
    [
        ("sizeof_hdr", "<i4"),
        ("data_type", "S10"),
        ("db_name", "S18"),
        ("extents", "<i4"),
        ("session_error", "<i2"),
        ("regular", "S1"),
        ("dim_info", "u1"),
        ("dim", "<i2", (8,)),
        ("intent_p1", "<f4"),
        ("intent_p2", "<f4"),
        ("intent_p3", "<f4"),
        ("intent_code", "<i2"),
        ("datatype", "<i2"),
        ("bitpix", "<i2"),
        ("slice_start", "<i2"),
        ("pixdim", "<f4", (8,)),
        ("vox_offset", "<f4"),
        ("scl_slope", "<f4"),
        ("scl_inter", "<f4"),
        ("slice_end", "<i2"),
        ("slice_code", "u1"),
        ("xyzt_units", "u1"),
        ("cal_max", "<f4"),
        ("cal_min", "<f4"),
        ("slice_duration", "<f4"),
        ("toffset", "<f4"),
        ("glmax", "<i4"),
        ("glmin", "<i4"),
        ("descrip", "S80"),
        ("aux_file", "S24"),
        ("qform_code", "<i2"),
        ("sform_code", "<i2"),
        ("quatern_b", "<f4"),
        ("quatern_c", "<f4"),
        ("quatern_d", "<f4"),
        ("qoffset_x", "<f4"),
        ("qoffset_y", "<f4"),
        ("qoffset_z", "<f4"),
        ("srow_x", "<f4", (4,)),
        ("srow_y", "<f4", (4,)),
        ("srow_z", "<f4", (4,)),
        ("intent_name", "S16"),
        ("magic", "S4"),
    ]
)
assert HEADER_DTYPE.itemsize == HEADER_SIZE


class FormatError(ValueError):
    """A file violates the supported format; ``field`` names the header field at fault."""

    def __init__(self, field: str, message: str, path: str | Path | None = None):
        where = f"{path}: " if path is not None else ""
        super().__init__(f"{where}{field}: {message}")
        self.field = field
        self.path = path


def make_header(extents, spacing, dtype, vox_offset: int = DEFAULT_VOX_OFFSET) -> np.ndarray:
    dtype = np.dtype(dtype).newbyteorder("<")
    if dtype not in DATATYPE_CODES:
        raise FormatError("datatype", f"unsupported dtype {dtype}")
    hdr = np.zeros((), dtype=HEADER_DTYPE)
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    dim = np.ones(8, dtype=np.int16)
    dim[0] = 3
    dim[1:4] = extents
    hdr["dim"] = dim
    hdr["datatype"] = DATATYPE_CODES[dtype]
    hdr["bitpix"] = dtype.itemsize * 8
    pixdim = np.ones(8, dtype=np.float32)
    pixdim[1:4] = spacing
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = vox_offset
    hdr["scl_slope"] = 1.0
    hdr["xyzt_units"] = 2  # mm
    hdr["magic"] = NIFTI_MAGIC
    return hdr


def parse_header(raw: bytes, path=None) -> np.ndarray:
    if len(raw) < HEADER_SIZE:
        raise FormatError("sizeof_hdr", f"file has {len(raw)} bytes, header needs {HEADER_SIZE}", path)
    hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=HEADER_DTYPE)[0]
    if int(hdr["sizeof_hdr"]) != HEADER_SIZE:
        raise FormatError("sizeof_hdr", f"expected 348 (little-endian), got {int(hdr['sizeof_hdr'])}", path)
    if raw[344:348] != NIFTI_MAGIC:
        raise FormatError("magic", f"expected {NIFTI_MAGIC!r}, got {raw[344:348]!r}", path)
    dim = hdr["dim"]
    ndim = int(dim[0])
    if ndim not in (2, 3, 4) or (ndim == 4 and int(dim[4]) != 1):
        raise FormatError("dim", f"only 2D/3D images (or 4D with one frame) are supported, dim={dim.tolist()}", path)
    if any(int(d) < 1 for d in dim[1 : ndim + 1]):
        raise FormatError("dim", f"non-positive extent in dim={dim.tolist()}", path)
    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise FormatError("datatype", f"unsupported datatype code {code} (supported: 2, 4, 16)", path)
    if int(hdr["bitpix"]) != DATATYPES[code].itemsize * 8:
        raise FormatError("bitpix", f"bitpix {int(hdr['bitpix'])} inconsistent with datatype {code}", path)
    pixdim = hdr["pixdim"]
    nspace = min(ndim, 3)
    if not np.all(np.isfinite(pixdim[1 : nspace + 1]) & (pixdim[1 : nspace + 1] > 0)):
        raise FormatError("pixdim", f"spacing must be positive, got {pixdim[1:4].tolist()}", path)
    vox_offset = float(hdr["vox_offset"])
    if not np.isfinite(vox_offset) or vox_offset < HEADER_SIZE or vox_offset != int(vox_offset):
        raise FormatError("vox_offset", f"invalid data offset {vox_offset}", path)
    return hdr


def read_nifti(path: str | Path, labels: bool | None = None) -> Volume:
    """Read a ``.nii`` file.

    ``labels=None`` returns a :class:`LabelMap` for uint8 data with values in
    0..4 and a :class:`Volume` otherwise.
    """
    path = Path(path)
    raw = path.read_bytes()
    hdr = parse_header(raw, path)
    dim = hdr["dim"]
    ndim = int(dim[0])
    extents = [int(d) for d in dim[1 : min(ndim, 3) + 1]] + [1] * (3 - min(ndim, 3))
    spacing = [float(s) for s in hdr["pixdim"][1 : min(ndim, 3) + 1]] + [1.0] * (3 - min(ndim, 3))
    dtype = DATATYPES[int(hdr["datatype"])]
    offset = int(hdr["vox_offset"])
    nbytes = int(np.prod(extents)) * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise FormatError("vox_offset", f"data section truncated: need {nbytes} bytes at {offset}, file has {len(raw)}", path)
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(extents)), offset=offset)
    data = data.reshape(extents, order="F").astype(dtype.newbyteorder("="))
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope != 0 and np.isfinite(slope) and not (slope == 1.0 and inter == 0.0):
        data = data.astype(np.float32) * np.float32(slope) + np.float32(inter)
    # shortest decimal that round-trips the stored float32, so 1.667 reads back as 1.667
    spacing = tuple(float(str(np.float32(s))) for s in spacing)
    case_id = path.name.removesuffix(".nii")
    if labels is None:
        labels = data.dtype == np.uint8 and (data.size == 0 or data.max() <= 4)
    if labels:
        try:
            return LabelMap(data, spacing, case_id)
        except ValueError as exc:
            raise FormatError("datatype", f"not a label map: {exc}", path) from None
    return Volume(data, spacing, case_id)


def write_nifti(v: Volume, path: str | Path) -> None:
    """Write ``v`` as uint8 (label maps), int16 or float32 (everything else)."""
    if isinstance(v, LabelMap):
        data = v.voxels.astype("<u1")
    elif v.voxels.dtype in (np.uint8, np.int16):
        data = v.voxels.astype(v.voxels.dtype.newbyteorder("<"))
    else:
        data = v.voxels.astype("<f4")
    hdr = make_header(v.extents, v.spacing, data.dtype)
    payload = hdr.tobytes() + b"\x00" * (DEFAULT_VOX_OFFSET - HEADER_SIZE) + data.tobytes(order="F")
    Path(path).write_bytes(payload)


# --------------------------------------------------------------------------
# raw + JSON sidecar
# --------------------------------------------------------------------------


def sidecar_schema() -> dict:
    return json.loads(resources.files(__package__).joinpath("sidecar.schema.json").read_text())


def write_sidecar(array: np.ndarray, path: str | Path, spacing, case_id: str = "", channels: list[str] | None = None) -> None:
    """Write ``<path>.raw`` (C order, little-endian) and ``<path>.json``.

    ``array`` is ``[nx, ny, nz]`` or, with ``channels``, ``[n_channels, nx, ny, nz]``.
    """
    path = Path(path)
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder("<")
    meta = {
        "case_id": case_id,
        "extents": list(array.shape[-3:]),
        "spacing_mm": [float(s) for s in spacing],
        "dtype": dtype.str,
    }
    if channels is not None:
        if array.ndim != 4 or array.shape[0] != len(channels):
            raise FormatError("channels", f"{len(channels)} channel names for array of shape {array.shape}")
        meta["channels"] = list(channels)
    elif array.ndim != 3:
        raise FormatError("extents", f"expected a 3D array without channel names, got shape {array.shape}")
    jsonschema.validate(meta, sidecar_schema())
    path.with_suffix(".raw").write_bytes(np.ascontiguousarray(array, dtype=dtype).tobytes())
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")


def read_sidecar(path: str | Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    try:
        meta = json.loads(path.with_suffix(".json").read_text())
    except json.JSONDecodeError as exc:
        raise FormatError("json", str(exc), path) from None
    try:
        jsonschema.validate(meta, sidecar_schema())
    except jsonschema.ValidationError as exc:
        field = ".".join(str(p) for p in exc.absolute_path) or "sidecar"
        raise FormatError(field, exc.message, path) from None
    dtype = np.dtype(meta["dtype"])
    shape = tuple(meta["extents"])
    if "channels" in meta:
        shape = (len(meta["channels"]),) + shape
    raw = path.with_suffix(".raw").read_bytes()
    if len(raw) != int(np.prod(shape)) * dtype.itemsize:
        raise FormatError("extents", f"raw file has {len(raw)} bytes, expected {int(np.prod(shape)) * dtype.itemsize}", path)
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("=")), meta
