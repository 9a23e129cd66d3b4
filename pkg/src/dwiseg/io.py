"""Minimal NIfTI-1 reader/writer and FSL-style bvals/bvecs files.

Supports single-file ``.nii`` (magic ``n+1``), header/image pairs (``ni1``),
gzip compression, either byte order and the datatypes uint8, int16, int32,
float32 and float64. NIfTI-2 is not supported.

The affine is taken from the sform when ``sform_code > 0``, otherwise from the
qform when ``qform_code > 0``, otherwise ``diag(pixdim)``. Label volumes are
written as int32 with intent code NIFTI_INTENT_LABEL and their label table
is stored as a JSON comment extension.
"""

from __future__ import annotations

import gzip
import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, UnsupportedError, ValidationError
from .volume import GradientTable, LabelVolume, Volume, normalized_table

HEADER_SIZE = 348
INTENT_LABEL = 1002
ECODE_COMMENT = 6
_LABEL_KEY = "dwiseg_label_table"

# field name, struct code
_FIELDS = [
    ("sizeof_hdr", "i"), ("data_type", "10s"), ("db_name", "18s"), ("extents", "i"),
    ("session_error", "h"), ("regular", "c"), ("dim_info", "B"), ("dim", "8h"),
    ("intent_p1", "f"), ("intent_p2", "f"), ("intent_p3", "f"), ("intent_code", "h"),
    ("datatype", "h"), ("bitpix", "h"), ("slice_start", "h"), ("pixdim", "8f"),
    ("vox_offset", "f"), ("scl_slope", "f"), ("scl_inter", "f"), ("slice_end", "h"),
    ("slice_code", "B"), ("xyzt_units", "B"), ("cal_max", "f"), ("cal_min", "f"),
    ("slice_duration", "f"), ("toffset", "f"), ("glmax", "i"), ("glmin", "i"),
    ("descrip", "80s"), ("aux_file", "24s"), ("qform_code", "h"), ("sform_code", "h"),
    ("quatern", "3f"), ("qoffset", "3f"), ("srow_x", "4f"), ("srow_y", "4f"),
    ("srow_z", "4f"), ("intent_name", "16s"), ("magic", "4s"),
]
_FMT = "".join(code for _, code in _FIELDS)
assert struct.calcsize("<" + _FMT) == HEADER_SIZE

DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
_CODES = {v: k for k, v in DATATYPES.items()}


def _unpack_header(raw: bytes, endian: str) -> dict:
    values = struct.unpack(endian + _FMT, raw[:HEADER_SIZE])
    hdr, pos = {}, 0
    for name, code in _FIELDS:
        count = int(code[:-1]) if code[:-1].isdigit() and code[-1] not in "sc" else 1
        if count > 1:
            hdr[name] = values[pos:pos + count]
            pos += count
        else:
            hdr[name] = values[pos]
            pos += 1
    return hdr


def _pack_header(hdr: dict, endian: str) -> bytes:
    flat = []
    for name, code in _FIELDS:
        value = hdr[name]
        if isinstance(value, (tuple, list, np.ndarray)):
            flat.extend(value)
        else:
            flat.append(value)
    return struct.pack(endian + _FMT, *flat)


def _detect_endian(raw: bytes) -> str:
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"file too short for a NIfTI-1 header ({len(raw)} bytes)")
    if struct.unpack("<i", raw[:4])[0] == HEADER_SIZE:
        return "<"
    if struct.unpack(">i", raw[:4])[0] == HEADER_SIZE:
        return ">"
    raise FormatError("sizeof_hdr is not 348 in either byte order")


def quaternion_to_affine(quatern, qoffset, pixdim) -> np.ndarray:
    b, c, d = (float(x) for x in quatern)
    a2 = 1.0 - (b * b + c * c + d * d)
    if a2 < 1e-7:
        norm = np.sqrt(b * b + c * c + d * d)
        a, b, c, d = 0.0, b / norm, c / norm, d / norm
    else:
        a = np.sqrt(a2)
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    zooms = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac], dtype=np.float64)
    zooms[zooms == 0] = 1.0
    affine = np.eye(4)
    affine[:3, :3] = rot * zooms
    affine[:3, 3] = qoffset
    return affine


def affine_to_quaternion(affine):
    """Best rigid quaternion for ``affine``: returns (b, c, d), offset, zooms, qfac."""
    m = np.asarray(affine, dtype=np.float64)[:3, :3]
    zooms = np.linalg.norm(m, axis=0)
    r = m / zooms
    # nearest orthogonal matrix
    u, _, vt = np.linalg.svd(r)
    r = u @ vt
    qfac = 1.0
    if np.linalg.det(r) < 0:
        qfac = -1.0
        r[:, 2] = -r[:, 2]
    trace = r[0, 0] + r[1, 1] + r[2, 2] + 1.0
    if trace > 0.5:
        a = 0.5 * np.sqrt(trace)
        b = 0.25 * (r[2, 1] - r[1, 2]) / a
        c = 0.25 * (r[0, 2] - r[2, 0]) / a
        d = 0.25 * (r[1, 0] - r[0, 1]) / a
    else:
        xd = 1.0 + r[0, 0] - (r[1, 1] + r[2, 2])
        yd = 1.0 + r[1, 1] - (r[0, 0] + r[2, 2])
        zd = 1.0 + r[2, 2] - (r[0, 0] + r[1, 1])
        if xd > 1.0:
            b = 0.5 * np.sqrt(xd)
            c = 0.25 * (r[0, 1] + r[1, 0]) / b
            d = 0.25 * (r[0, 2] + r[2, 0]) / b
            a = 0.25 * (r[2, 1] - r[1, 2]) / b
        elif yd > 1.0:
            c = 0.5 * np.sqrt(yd)
            b = 0.25 * (r[0, 1] + r[1, 0]) / c
            d = 0.25 * (r[1, 2] + r[2, 1]) / c
            a = 0.25 * (r[0, 2] - r[2, 0]) / c
        else:
            d = 0.5 * np.sqrt(zd)
            b = 0.25 * (r[0, 2] + r[2, 0]) / d
            c = 0.25 * (r[1, 2] + r[2, 1]) / d
            a = 0.25 * (r[1, 0] - r[0, 1]) / d
        if a < 0:
            b, c, d = -b, -c, -d
    return (b, c, d), np.asarray(affine, dtype=np.float64)[:3, 3], zooms, qfac


def _open_read(path: Path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_extensions(raw: bytes, endian: str, vox_offset: int) -> list[tuple[int, bytes]]:
    exts = []
    if len(raw) < HEADER_SIZE + 4 or raw[HEADER_SIZE] == 0:
        return exts
    pos = HEADER_SIZE + 4
    end = vox_offset if vox_offset > HEADER_SIZE else len(raw)
    while pos + 8 <= end:
        esize, ecode = struct.unpack(endian + "ii", raw[pos:pos + 8])
        if esize < 8 or pos + esize > len(raw):
            break
        exts.append((ecode, raw[pos + 8:pos + esize]))
        pos += esize
    return exts


def read_nifti(path, as_labels: bool | None = None):
    """Read a NIfTI-1 file into a :class:`Volume` or :class:`LabelVolume`.

    ``as_labels=None`` returns a LabelVolume only when the header's intent code
    is NIFTI_INTENT_LABEL; pass True/False to force either type.
    """
    path = Path(path)
    try:
        raw = _open_read(path)
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    endian = _detect_endian(raw)
    hdr = _unpack_header(raw, endian)
    magic = hdr["magic"]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise FormatError(f"{path}: bad magic {magic!r}")
    code = hdr["datatype"]
    if code not in DATATYPES:
        raise UnsupportedError(f"{path}: unsupported NIfTI datatype code {code}")
    dim = hdr["dim"]
    ndim = dim[0]
    if ndim < 1 or ndim > 7:
        raise FormatError(f"{path}: invalid dim[0]={ndim}")
    shape = [max(int(d), 1) for d in dim[1:ndim + 1]]
    while len(shape) < 3:
        shape.append(1)
    spatial, extra = shape[:3], shape[3:]
    nchan = int(np.prod(extra)) if extra else 1
    dtype = DATATYPES[code].newbyteorder(endian)
    count = int(np.prod(spatial)) * nchan
    vox_offset = int(hdr["vox_offset"])
    if magic == b"n+1\x00":
        payload = raw[vox_offset:]
    else:
        img = path.with_name(path.name.replace(".hdr", ".img"))
        payload = _open_read(img)[vox_offset:]
    if len(payload) < count * dtype.itemsize:
        raise FormatError(f"{path}: truncated image data")
    data = np.frombuffer(payload, dtype=dtype, count=count)
    out_shape = tuple(spatial) + ((nchan,) if nchan > 1 else ())
    data = data.reshape(out_shape, order="F")

    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    scaled = np.isfinite(slope) and slope != 0 and not (slope == 1 and inter == 0)

    pixdim = hdr["pixdim"]
    if hdr["sform_code"] > 0:
        affine = np.eye(4)
        affine[0], affine[1], affine[2] = hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]
    elif hdr["qform_code"] > 0:
        affine = quaternion_to_affine(hdr["quatern"], hdr["qoffset"], pixdim)
    else:
        zooms = [p if p > 0 else 1.0 for p in pixdim[1:4]]
        affine = np.diag(list(zooms) + [1.0])

    if as_labels is None:
        as_labels = hdr["intent_code"] == INTENT_LABEL
    if as_labels:
        values = data.astype(np.float64) * slope + inter if scaled else data
        table = {}
        for ecode, body in _parse_extensions(raw, endian, vox_offset):
            if ecode != ECODE_COMMENT:
                continue
            try:
                payload_json = json.loads(body.rstrip(b"\x00").decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError):
                continue
            if isinstance(payload_json, dict) and _LABEL_KEY in payload_json:
                table = {int(k): v for k, v in payload_json[_LABEL_KEY].items()}
        if values.ndim != 3:
            raise FormatError(f"{path}: label volumes must be 3D")
        if table:
            present = {int(v) for v in np.unique(values)}
            for v in present - set(table):
                table[v] = f"label_{v}"
        return LabelVolume(np.asarray(values), affine, table)
    if scaled:
        data = data.astype(np.float64) * slope + inter
    return Volume(np.asarray(data, dtype=np.float32), affine)


def _label_extension(table: dict) -> tuple[bytes, int]:
    body = json.dumps({_LABEL_KEY: {str(k): v for k, v in table.items()}}).encode("utf-8")
    esize = 8 + len(body)
    esize += (-esize) % 16
    return body.ljust(esize - 8, b"\x00"), esize


def write_nifti(v, path, dtype=None, byteorder: str = "<") -> None:
    """Write a Volume or LabelVolume as NIfTI-1 (gzip if ``path`` ends in .gz).

    Integer datatypes round the data and must hold it without overflow.
    """
    path = Path(path)
    is_label = isinstance(v, LabelVolume)
    data = v.labels if is_label else v.data
    if dtype is None:
        dtype = np.int32 if is_label else np.float32
    dtype = np.dtype(dtype)
    if dtype not in _CODES:
        raise UnsupportedError(f"cannot write datatype {dtype}")
    if np.issubdtype(dtype, np.integer):
        info = np.iinfo(dtype)
        rounded = np.rint(data)
        if rounded.size and (rounded.min() < info.min or rounded.max() > info.max):
            raise ValidationError(f"data range does not fit {dtype}")
        out = rounded.astype(dtype)
    else:
        out = data.astype(dtype)

    dims = list(data.shape)
    ndim = len(dims)
    dim = [ndim] + dims + [1] * (7 - ndim)
    (qb, qc, qd), qoffset, zooms, qfac = affine_to_quaternion(v.affine)
    pixdim = [qfac, *zooms, 1.0, 0.0, 0.0, 0.0]

    ext = b""
    if is_label:
        body, esize = _label_extension(v.label_table)
        ext = struct.pack(byteorder + "ii", esize, ECODE_COMMENT) + body
    vox_offset = HEADER_SIZE + 4 + len(ext)
    vox_offset += (-vox_offset) % 16

    affine = np.asarray(v.affine, dtype=np.float64)
    hdr = {
        "sizeof_hdr": HEADER_SIZE, "data_type": b"", "db_name": b"", "extents": 0,
        "session_error": 0, "regular": b"r", "dim_info": 0, "dim": dim,
        "intent_p1": 0.0, "intent_p2": 0.0, "intent_p3": 0.0,
        "intent_code": INTENT_LABEL if is_label else 0,
        "datatype": _CODES[dtype], "bitpix": dtype.itemsize * 8, "slice_start": 0,
        "pixdim": pixdim, "vox_offset": float(vox_offset), "scl_slope": 1.0,
        "scl_inter": 0.0, "slice_end": 0, "slice_code": 0, "xyzt_units": 2 | 8,
        "cal_max": 0.0, "cal_min": 0.0, "slice_duration": 0.0, "toffset": 0.0,
        "glmax": 0, "glmin": 0, "descrip": b"dwiseg", "aux_file": b"",
        "qform_code": 1, "sform_code": 1, "quatern": (qb, qc, qd), "qoffset": tuple(qoffset),
        "srow_x": tuple(affine[0]), "srow_y": tuple(affine[1]), "srow_z": tuple(affine[2]),
        "intent_name": b"labels" if is_label else b"", "magic": b"n+1\x00",
    }
    buf = io.BytesIO()
    buf.write(_pack_header(hdr, byteorder))
    buf.write(bytes([1 if ext else 0, 0, 0, 0]))
    buf.write(ext)
    buf.write(b"\x00" * (vox_offset - buf.tell()))
    buf.write(out.astype(dtype.newbyteorder(byteorder)).tobytes(order="F"))
    payload = buf.getvalue()
    try:
        if path.name.endswith(".gz"):
            with open(path, "wb") as fh, gzip.GzipFile(fileobj=fh, mode="wb", mtime=0,
                                                        filename="") as gz:
                gz.write(payload)
        else:
            path.write_bytes(payload)
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc


def _read_rows(path) -> list[list[float]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            try:
                rows.append([float(tok) for tok in line.split()])
            except ValueError as exc:
                raise FormatError(f"{path}: {exc}") from exc
    return rows


def read_gradient_table(bvals_path, bvecs_path) -> GradientTable:
    """Read FSL-convention bvals (one row) and bvecs (three rows) files."""
    brows = _read_rows(bvals_path)
    if len(brows) != 1:
        raise FormatError(f"{bvals_path}: expected one row of b-values, got {len(brows)}")
    grows = _read_rows(bvecs_path)
    if len(grows) != 3:
        raise FormatError(f"{bvecs_path}: expected three rows, got {len(grows)}")
    n = len(brows[0])
    if any(len(r) != n for r in grows):
        raise FormatError(f"row-length mismatch: {n} b-values vs bvecs rows "
                          f"{[len(r) for r in grows]}")
    bvals = np.array(brows[0])
    if np.any(bvals < 0):
        raise ValidationError(f"{bvals_path}: negative b-value")
    return normalized_table(bvals, np.array(grows).T)


def write_gradient_table(table: GradientTable, bvals_path, bvecs_path) -> None:
    Path(bvals_path).write_text(" ".join(f"{b:g}" for b in table.bvals) + "\n")
    rows = [" ".join(f"{x:.8f}" for x in table.bvecs[:, i]) for i in range(3)]
    Path(bvecs_path).write_text("\n".join(rows) + "\n")
