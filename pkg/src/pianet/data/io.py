"""Volume and annotation file formats.

MetaImage: an ASCII ``.mhd`` header plus a little-endian ``.raw`` payload in
x-fastest order. Supported element types are MET_SHORT (HU), MET_UCHAR
(normalized intensity or masks) and MET_DOUBLE.

Flat binary (``.vol``): magic ``PIANETVL``, u32 version, u8 element code,
three u32 extents (z, y, x), three f64 spacings and three f64 origins in
(z, y, x) order, a u8 normalized flag, then the payload.

Annotation CSV columns: scan_id, x_mm, y_mm, z_mm, diameter_mm, agreement,
relevant. A header row is required.
"""

import csv
import io
import struct
from pathlib import Path

import numpy as np

from ..errors import DataError, PianetIOError
from .volume import Nodule, ScanAnnotation, Volume

ELEMENT_TYPES = {"MET_SHORT": "<i2", "MET_UCHAR": "u1", "MET_DOUBLE": "<f8"}
_ELEMENT_CODES = {"MET_SHORT": 1, "MET_UCHAR": 2, "MET_DOUBLE": 3}
ANNOTATION_COLUMNS = ["scan_id", "x_mm", "y_mm", "z_mm", "diameter_mm", "agreement", "relevant"]
VOL_MAGIC = b"PIANETVL"
VOL_VERSION = 1


def _read_bytes(path):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise PianetIOError(f"cannot read {path}: {exc.strerror or exc}") from exc


def _write_bytes(path, payload):
    try:
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise PianetIOError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _element_type_for(data, element_type):
    if element_type is not None:
        if element_type not in ELEMENT_TYPES:
            raise DataError(f"unsupported element type {element_type!r}")
        return element_type
    if data.dtype == np.int16:
        return "MET_SHORT"
    if data.dtype in (np.uint8, np.bool_):
        return "MET_UCHAR"
    return "MET_DOUBLE"


def _encode(data, element_type):
    dtype = np.dtype(ELEMENT_TYPES[element_type])
    arr = np.asarray(data)
    if dtype.kind in "iu":
        info = np.iinfo(dtype)
        if arr.dtype.kind == "f":
            arr = np.rint(arr)
        if arr.size and (arr.min() < info.min or arr.max() > info.max):
            raise DataError(f"values outside the {element_type} range [{info.min}, {info.max}]")
    return np.ascontiguousarray(arr.astype(dtype)).tobytes()


def parse_mhd_header(text, path="<header>"):
    header = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'Key = Value', got {line.strip()!r}")
        key, value = line.split("=", 1)
        header[key.strip()] = value.strip()
    return header


def _floats(header, key, default, path):
    if key not in header:
        return default
    try:
        vals = [float(v) for v in header[key].split()]
    except ValueError:
        raise DataError(f"{path}: {key} must be numeric, got {header[key]!r}") from None
    if len(vals) != 3:
        raise DataError(f"{path}: {key} needs 3 values, got {len(vals)}")
    return vals


def read_mhd(path):
    """Read a 3-D MetaImage volume. Offset is taken as the world origin."""
    path = Path(path)
    header = parse_mhd_header(_read_bytes(path).decode("ascii", errors="replace"), path)
    for key in ("NDims", "DimSize", "ElementType", "ElementDataFile"):
        if key not in header:
            raise DataError(f"{path}: missing header key {key}")
    if header["NDims"] != "3":
        raise DataError(f"{path}: only NDims = 3 is supported, got {header['NDims']}")
    if header.get("CompressedData", "False").lower() == "true":
        raise DataError(f"{path}: compressed payloads are not supported")
    msb = header.get("BinaryDataByteOrderMSB", header.get("ElementByteOrderMSB", "False"))
    if msb.lower() == "true":
        raise DataError(f"{path}: big-endian payloads are not supported")
    etype = header["ElementType"]
    if etype not in ELEMENT_TYPES:
        raise DataError(f"{path}: unknown element type {etype!r}; supported: {', '.join(ELEMENT_TYPES)}")
    try:
        dims = [int(v) for v in header["DimSize"].split()]
    except ValueError:
        raise DataError(f"{path}: DimSize must be integers, got {header['DimSize']!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise DataError(f"{path}: DimSize needs 3 positive extents, got {header['DimSize']!r}")
    spacing = _floats(header, "ElementSpacing", [1.0, 1.0, 1.0], path)
    offset = _floats(header, "Offset", _floats(header, "Origin", [0.0, 0.0, 0.0], path), path)
    raw_path = path.parent / header["ElementDataFile"]
    payload = _read_bytes(raw_path)
    dtype = np.dtype(ELEMENT_TYPES[etype])
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise DataError(f"{raw_path}: payload has {len(payload)} bytes, expected {expected} "
                        f"for DimSize {dims} of {etype}")
    data = np.frombuffer(payload, dtype=dtype).reshape(dims[::-1]).copy()
    return Volume(data, spacing[::-1], offset[::-1], normalized=(etype == "MET_UCHAR"))


def write_mhd(path, volume, element_type=None, data=None):
    """Write ``volume`` (or ``data`` with the volume's geometry) as .mhd + .raw."""
    path = Path(path)
    arr = volume.data if data is None else np.asarray(data)
    etype = _element_type_for(arr, element_type)
    raw_name = path.with_suffix(".raw").name
    z, y, x = arr.shape
    sz, sy, sx = volume.spacing
    oz, oy, ox = volume.origin
    header = "\n".join([
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        f"Offset = {ox!r} {oy!r} {oz!r}",
        f"ElementSpacing = {sx!r} {sy!r} {sz!r}",
        f"DimSize = {x} {y} {z}",
        f"ElementType = {etype}",
        f"ElementDataFile = {raw_name}",
    ]) + "\n"
    _write_bytes(path.parent / raw_name, _encode(arr, etype))
    _write_bytes(path, header.encode("ascii"))
    return path


def write_volume_bin(path, volume, element_type=None):
    etype = _element_type_for(volume.data, element_type)
    head = VOL_MAGIC + struct.pack("<IB3I3d3dB", VOL_VERSION, _ELEMENT_CODES[etype], *volume.shape,
                                   *volume.spacing, *volume.origin, int(volume.normalized))
    _write_bytes(path, head + _encode(volume.data, etype))
    return Path(path)


def read_volume_bin(path):
    blob = _read_bytes(path)
    fmt = "<IB3I3d3dB"
    n_head = len(VOL_MAGIC) + struct.calcsize(fmt)
    if len(blob) < n_head or blob[:len(VOL_MAGIC)] != VOL_MAGIC:
        raise DataError(f"{path}: not a flat volume file (bad magic or short header at byte 0)")
    version, code, *rest = struct.unpack_from(fmt, blob, len(VOL_MAGIC))
    if version != VOL_VERSION:
        raise DataError(f"{path}: unsupported version {version}, expected {VOL_VERSION}")
    names = {v: k for k, v in _ELEMENT_CODES.items()}
    if code not in names:
        raise DataError(f"{path}: unknown element code {code} at byte {len(VOL_MAGIC) + 4}")
    dims, spacing, origin, normalized = rest[:3], rest[3:6], rest[6:9], rest[9]
    dtype = np.dtype(ELEMENT_TYPES[names[code]])
    expected = int(np.prod(dims)) * dtype.itemsize
    payload = blob[n_head:]
    if len(payload) != expected:
        raise DataError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    return Volume(data, spacing, origin, normalized=bool(normalized))


def read_volume(path):
    suffix = Path(path).suffix.lower()
    if suffix == ".mhd":
        return read_mhd(path)
    if suffix == ".vol":
        return read_volume_bin(path)
    raise DataError(f"{path}: unknown volume extension {suffix!r} (expected .mhd or .vol)")


def _parse_bool(text, where):
    t = text.strip().lower()
    if t in ("1", "true", "yes"):
        return True
    if t in ("0", "false", "no"):
        return False
    raise DataError(f"{where}: relevant must be 0/1/true/false, got {text!r}")


def parse_annotations(text, source="<csv>"):
    """Parse annotation CSV text into ``{scan_id: ScanAnnotation}`` (file order kept)."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [c.strip() for c in rows[0]] != ANNOTATION_COLUMNS:
        got = rows[0] if rows else []
        raise DataError(f"{source}:1: header must be {','.join(ANNOTATION_COLUMNS)}, got {','.join(got)!r}")
    out = {}
    for lineno, row in enumerate(rows[1:], 2):
        if not row or all(not c.strip() for c in row):
            continue
        where = f"{source}:{lineno}"
        if len(row) != len(ANNOTATION_COLUMNS):
            raise DataError(f"{where}: expected {len(ANNOTATION_COLUMNS)} fields, got {len(row)}")
        scan_id = row[0].strip()
        try:
            x, y, z, d = (float(v) for v in row[1:5])
            agreement = int(row[5])
        except ValueError:
            raise DataError(f"{where}: non-numeric coordinate, diameter or agreement field") from None
        if not np.all(np.isfinite([x, y, z, d])):
            raise DataError(f"{where}: non-finite value")
        if not 0 <= agreement <= 4:
            raise DataError(f"{where}: agreement must be in 0..4, got {agreement}")
        if d <= 0:
            raise DataError(f"{where}: diameter must be > 0, got {d}")
        nod = Nodule(x, y, z, d, agreement, _parse_bool(row[6], where))
        out.setdefault(scan_id, ScanAnnotation(scan_id)).nodules.append(nod)
    return out


def read_annotations(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise PianetIOError(f"cannot read {path}: {exc.strerror or exc}") from exc
    return parse_annotations(text, str(path))


def format_annotations(annotations):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ANNOTATION_COLUMNS)
    for ann in annotations:
        for n in ann.nodules:
            w.writerow([ann.scan_id, repr(float(n.x)), repr(float(n.y)), repr(float(n.z)),
                        repr(float(n.diameter)), int(n.agreement), int(bool(n.relevant))])
    return buf.getvalue()


def write_annotations(path, annotations):
    _write_bytes(path, format_annotations(annotations).encode("utf-8"))
    return Path(path)
