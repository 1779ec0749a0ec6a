"""Volume files (NIfTI-1 single-file and raw ``.mlvr``) and report files.

Raw ``.mlvr`` layout, all little-endian, 33-byte header then payload::

    offset  size  field
    0       4     magic b"MLVR"
    4       2     version (u16) = 1
    6       1     dtype code (u8): 0 uint16 labels, 1 float32 scalars,
                  2 float32 class-major logits
    7       2     num_classes (u16), 1 unless dtype code is 2
    9       12    dims H, W, D (3 x u32)
    21      12    spacing (3 x f32, mm)
    33      ...   voxels in x-fastest order

NIfTI support covers the fields needed here: dim, datatype, bitpix, pixdim,
vox_offset and scl_slope/scl_inter. The qform/sform block is kept as opaque
bytes and written back unchanged.
"""

from __future__ import annotations

import csv
import gzip
import io
import json
import struct
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from mlvfuse.volume import LabelVolume, LogitVolume, ScalarVolume, VolumeGeometry

Volume = Union[LabelVolume, ScalarVolume, LogitVolume]

RAW_MAGIC = b"MLVR"
RAW_VERSION = 1
RAW_HEADER = struct.Struct("<4sHBH3I3f")
RAW_DTYPES = {0: ("label", np.dtype("<u2")), 1: ("scalar", np.dtype("<f4")), 2: ("logit", np.dtype("<f4"))}
RAW_CODES = {kind: code for code, (kind, _) in RAW_DTYPES.items()}

NIFTI_HEADER_SIZE = 348
NIFTI_VOX_OFFSET = 352
NIFTI_DTYPES = {
    2: np.dtype("u1"),
    4: np.dtype("i2"),
    8: np.dtype("i4"),
    16: np.dtype("f4"),
    64: np.dtype("f8"),
    256: np.dtype("i1"),
    512: np.dtype("u2"),
    768: np.dtype("u4"),
}
NIFTI_LABEL_CODE = 512
NIFTI_FLOAT_CODE = 16
# qform_code .. srow_z: carried through untouched
ORIENT_START, ORIENT_END = 252, 328

KINDS = ("label", "scalar", "logit")


class VolumeFormatError(ValueError):
    """Unreadable volume file. ``offset`` is the byte position at fault."""

    def __init__(self, path, message: str, offset: int | None = None):
        self.path = str(path)
        self.offset = offset
        where = f" at byte {offset}" if offset is not None else ""
        super().__init__(f"{path}: {message}{where}")


class HeaderError(VolumeFormatError):
    pass


class KindMismatchError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


def volume_kind(volume: Volume) -> str:
    if isinstance(volume, LabelVolume):
        return "label"
    if isinstance(volume, LogitVolume):
        return "logit"
    if isinstance(volume, ScalarVolume):
        return "scalar"
    raise TypeError(f"not a volume: {type(volume).__name__}")


def _format_of(path: Path) -> str:
    name = path.name.lower()
    if name.endswith(".mlvr"):
        return "raw"
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return "nifti"
    raise ValueError(f"{path}: unknown volume extension (expected .mlvr, .nii or .nii.gz)")


def _read_bytes(path: Path) -> bytes:
    if path.name.lower().endswith(".gz"):
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def _write_bytes(path: Path, blob: bytes) -> None:
    try:
        with open(path, "wb") as f:
            if path.name.lower().endswith(".gz"):
                # mtime=0 and no embedded name keep outputs byte-identical across runs
                with gzip.GzipFile(filename="", mode="wb", fileobj=f, mtime=0) as gz:
                    gz.write(blob)
            else:
                f.write(blob)
    except OSError as e:
        raise OSError(f"cannot write volume to {path}: {e.strerror or e}") from e


def _build(kind: str, geometry: VolumeGeometry, values: np.ndarray, num_classes: int) -> Volume:
    if kind == "label":
        return LabelVolume.from_flat(geometry, values)
    if kind == "scalar":
        return ScalarVolume.from_flat(geometry, values)
    return LogitVolume.from_flat(geometry, num_classes, values)


# --- raw -------------------------------------------------------------------


def encode_raw(volume: Volume) -> bytes:
    kind = volume_kind(volume)
    code = RAW_CODES[kind]
    dtype = RAW_DTYPES[code][1]
    n_cls = volume.num_classes if kind == "logit" else 1
    g = volume.geometry
    header = RAW_HEADER.pack(RAW_MAGIC, RAW_VERSION, code, n_cls, *g.dims, *g.spacing)
    return header + volume.flat().astype(dtype).tobytes()


def decode_raw(blob: bytes, expected_kind: str, path="<bytes>") -> Volume:
    if len(blob) < RAW_HEADER.size:
        raise TruncatedPayloadError(
            path, f"header needs {RAW_HEADER.size} bytes, file has {len(blob)}", len(blob)
        )
    magic, version, code, n_cls, h, w, d, sx, sy, sz = RAW_HEADER.unpack_from(blob, 0)
    if magic != RAW_MAGIC:
        raise HeaderError(path, f"bad magic {magic!r}, expected {RAW_MAGIC!r}", 0)
    if version != RAW_VERSION:
        raise HeaderError(path, f"unsupported version {version}", 4)
    if code not in RAW_DTYPES:
        raise HeaderError(path, f"unknown dtype code {code}", 6)
    kind, dtype = RAW_DTYPES[code]
    if kind != expected_kind:
        raise KindMismatchError(path, f"file holds a {kind} volume, expected {expected_kind}", 6)
    if kind == "logit" and n_cls < 2:
        raise HeaderError(path, f"logit volume with num_classes={n_cls}", 7)
    if kind != "logit" and n_cls != 1:
        raise HeaderError(path, f"num_classes must be 1 for {kind} volumes, got {n_cls}", 7)
    try:
        geometry = VolumeGeometry((h, w, d), (sx, sy, sz))
    except ValueError as e:
        raise HeaderError(path, f"invalid geometry: {e}", 9) from None
    expected = dtype.itemsize * n_cls * geometry.num_voxels
    got = len(blob) - RAW_HEADER.size
    if got != expected:
        cls = TruncatedPayloadError if got < expected else HeaderError
        raise cls(
            path,
            f"payload is {got} bytes, header implies {expected}",
            RAW_HEADER.size + min(got, expected),
        )
    values = np.frombuffer(blob, dtype=dtype, offset=RAW_HEADER.size)
    return _build(kind, geometry, values.astype(dtype.newbyteorder("="), copy=True), n_cls)


# --- NIfTI-1 ---------------------------------------------------------------


def encode_nifti(volume: Volume) -> bytes:
    kind = volume_kind(volume)
    g = volume.geometry
    n_cls = volume.num_classes if kind == "logit" else 1
    code = NIFTI_LABEL_CODE if kind == "label" else NIFTI_FLOAT_CODE
    dtype = NIFTI_DTYPES[code].newbyteorder("<")

    hdr = bytearray(NIFTI_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)
    ndim = 4 if kind == "logit" else 3
    struct.pack_into("<8h", hdr, 40, ndim, *g.dims, n_cls, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, code, dtype.itemsize * 8)
    qfac = 1.0
    if g.orientation is not None:
        qfac = struct.unpack_from("<f", g.orientation, 0)[0]
    struct.pack_into("<8f", hdr, 76, qfac, *g.spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<fff", hdr, 108, float(NIFTI_VOX_OFFSET), 1.0, 0.0)
    hdr[123] = 2  # xyzt_units: mm
    if g.orientation is not None:
        hdr[ORIENT_START:ORIENT_END] = g.orientation[4:]
    else:
        # scaled identity sform, no qform
        struct.pack_into("<hh", hdr, 252, 0, 2)
        sx, sy, sz = g.spacing
        struct.pack_into("<12f", hdr, 280, sx, 0, 0, 0, 0, sy, 0, 0, 0, 0, sz, 0)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr) + b"\x00" * 4 + volume.flat().astype(dtype).tobytes()


def _nifti_endian(blob: bytes, path) -> str:
    if len(blob) < NIFTI_HEADER_SIZE:
        raise TruncatedPayloadError(
            path, f"NIfTI header needs {NIFTI_HEADER_SIZE} bytes, file has {len(blob)}", len(blob)
        )
    for endian in "<>":
        if struct.unpack_from(endian + "i", blob, 0)[0] == NIFTI_HEADER_SIZE:
            return endian
    raise HeaderError(path, "sizeof_hdr is not 348 in either byte order", 0)


def decode_nifti(blob: bytes, expected_kind: str, path="<bytes>") -> Volume:
    e = _nifti_endian(blob, path)
    magic = bytes(blob[344:348])
    if magic == b"ni1\x00":
        raise HeaderError(path, "two-file NIfTI (.hdr/.img) is not supported", 344)
    if magic != b"n+1\x00":
        raise HeaderError(path, f"bad NIfTI magic {magic!r}", 344)
    dim = struct.unpack_from(e + "8h", blob, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise HeaderError(path, f"dim[0]={ndim} out of range", 40)
    extents = [dim[i] if i <= ndim else 1 for i in range(1, 8)]
    if any(x < 1 for x in extents):
        raise HeaderError(path, f"non-positive extent in dim {dim}", 42)
    if any(x != 1 for x in extents[4:]):
        raise HeaderError(path, f"dimensions above 4 are not supported: {dim}", 50)
    h, w, d, n_cls = extents[:4]

    code, bitpix = struct.unpack_from(e + "hh", blob, 70)
    if code not in NIFTI_DTYPES:
        raise HeaderError(path, f"unsupported NIfTI datatype {code}", 70)
    dtype = NIFTI_DTYPES[code].newbyteorder(e)
    if bitpix != dtype.itemsize * 8:
        raise HeaderError(path, f"bitpix {bitpix} disagrees with datatype {code}", 72)

    is_int = dtype.kind in "iu"
    if expected_kind == "label" and not is_int:
        raise KindMismatchError(path, f"datatype {code} is floating point, expected integer labels", 70)
    if expected_kind != "label" and is_int:
        raise KindMismatchError(path, f"datatype {code} is integer, expected float {expected_kind} data", 70)
    if expected_kind == "logit":
        if n_cls < 2:
            raise KindMismatchError(path, "logit volume needs a 4th dimension with >= 2 classes", 48)
    elif n_cls != 1:
        raise KindMismatchError(path, f"{expected_kind} volume must be 3-D, dim[4]={n_cls}", 48)

    pixdim = struct.unpack_from(e + "8f", blob, 76)
    try:
        geometry = VolumeGeometry(
            (h, w, d),
            tuple(abs(p) for p in pixdim[1:4]),
            orientation=struct.pack("<f", pixdim[0]) + _orientation_le(blob, e),
        )
    except ValueError as err:
        raise HeaderError(path, f"invalid geometry: {err}", 80) from None

    vox_offset, slope, inter = struct.unpack_from(e + "fff", blob, 108)
    offset = int(vox_offset)
    if offset != vox_offset or offset < NIFTI_HEADER_SIZE:
        raise HeaderError(path, f"invalid vox_offset {vox_offset}", 108)
    count = n_cls * geometry.num_voxels
    need = offset + count * dtype.itemsize
    if len(blob) < need:
        raise TruncatedPayloadError(
            path, f"payload needs {need - offset} bytes from offset {offset}, file has {len(blob) - offset}", len(blob)
        )
    values = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).astype(dtype.newbyteorder("="))

    # scl_slope == 0 means "no scaling" per the NIfTI-1 standard
    if np.isfinite(slope) and slope != 0 and (slope != 1 or inter != 0):
        scaled = values.astype(np.float64) * slope + inter
        if expected_kind == "label":
            if not np.all(scaled == np.round(scaled)) or scaled.min(initial=0) < 0:
                raise KindMismatchError(path, "scaled label values are not non-negative integers", 112)
            values = scaled.astype(np.int64)
        else:
            values = scaled
    if expected_kind == "label" and values.size and values.min() < 0:
        i = int(np.flatnonzero(values < 0)[0])
        raise VolumeFormatError(path, f"negative label at voxel {i}", offset + i * dtype.itemsize)
    return _build(expected_kind, geometry, values, n_cls)


def _orientation_le(blob: bytes, e: str) -> bytes:
    """qform/sform block re-encoded little-endian (2 shorts, 6 + 12 floats)."""
    codes = struct.unpack_from(e + "hh", blob, 252)
    floats = struct.unpack_from(e + "18f", blob, 256)
    return struct.pack("<hh18f", *codes, *floats)


# --- public API ------------------------------------------------------------


def read_volume(path, expected_kind: str = "label") -> Volume:
    """Read a label, scalar or logit volume from ``.nii``, ``.nii.gz`` or ``.mlvr``."""
    if expected_kind not in KINDS:
        raise ValueError(f"expected_kind must be one of {KINDS}, got {expected_kind!r}")
    path = Path(path)
    fmt = _format_of(path)
    try:
        blob = _read_bytes(path)
    except (OSError, EOFError, gzip.BadGzipFile) as e:
        raise VolumeFormatError(path, f"cannot read file: {e}") from e
    if fmt == "raw":
        return decode_raw(blob, expected_kind, path)
    return decode_nifti(blob, expected_kind, path)


def write_volume(volume: Volume, path) -> None:
    path = Path(path)
    fmt = _format_of(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"cannot write {path}: parent directory does not exist")
    if min(volume.geometry.dims) < 1:
        raise ValueError("refusing to write a volume with empty dims")
    blob = encode_raw(volume) if fmt == "raw" else encode_nifti(volume)
    _write_bytes(path, blob)


# --- reports ---------------------------------------------------------------


def write_json(obj, path) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def csv_text(rows: Sequence[Mapping], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: row.get(c, "") for c in columns})
    return buf.getvalue()


def write_csv(rows: Iterable[Mapping], path, columns: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(csv_text(list(rows), columns))


def read_csv_column(path, column: str | None = None) -> list[float]:
    """Read one numeric column; defaults to ``v_mm3`` or else the first column."""
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if not reader.fieldnames:
            raise ValueError(f"{path}: empty CSV")
        if column is None:
            column = "v_mm3" if "v_mm3" in reader.fieldnames else reader.fieldnames[0]
        if column not in reader.fieldnames:
            raise ValueError(f"{path}: no column {column!r} (have {reader.fieldnames})")
        out = []
        for lineno, row in enumerate(reader, start=2):
            cell = (row[column] or "").strip()
            if not cell:
                continue
            try:
                out.append(float(cell))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: {cell!r} is not a number") from None
        return out
