"""Labeled point-cloud PLY files.

Schema: vertex properties ``x y z`` (float32), optional ``nx ny nz``
(float32), and ``label`` (uint16).  Both ASCII and binary little-endian
files are read; the writer emits either on request.  A missing ``label``
property reads as all zeros so plain xyz files from other tools still load.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np

from .errors import ValidationError
from .geometry import LabeledPointCloud

_TYPES = {
    "float": "<f4", "float32": "<f4",
    "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1",
    "char": "i1", "int8": "i1",
    "ushort": "<u2", "uint16": "<u2",
    "short": "<i2", "int16": "<i2",
    "uint": "<u4", "uint32": "<u4",
    "int": "<i4", "int32": "<i4",
}


def write_atomic(path, data: bytes) -> None:
    """Write bytes via temp file + rename so partial files never appear."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_ply(path, cloud: LabeledPointCloud, binary: bool = True) -> None:
    if np.any(cloud.labels > 0xFFFF):
        raise ValidationError("labels exceed uint16 range of the PLY schema")
    has_normals = cloud.normals is not None
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if has_normals:
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    fields += [("label", "<u2")]

    rec = np.zeros(len(cloud), dtype=fields)
    rec["x"], rec["y"], rec["z"] = cloud.points.T.astype(np.float32)
    if has_normals:
        rec["nx"], rec["ny"], rec["nz"] = cloud.normals.T.astype(np.float32)
    rec["label"] = cloud.labels.astype(np.uint16)

    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {len(cloud)}"]
    for name, _ in fields:
        kind = "ushort" if name == "label" else "float"
        header.append(f"property {kind} {name}")
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")

    if binary:
        write_atomic(path, head + rec.tobytes())
    else:
        lines = []
        for row in rec:
            cols = ["%.9g" % row[n] for n, _ in fields[:-1]]
            cols.append(str(int(row["label"])))
            lines.append(" ".join(cols))
        write_atomic(path, head + ("\n".join(lines) + ("\n" if lines else "")).encode("ascii"))


def _parse_header(blob: bytes):
    end = blob.find(b"end_header")
    if end < 0:
        raise ValidationError("not a PLY file: missing end_header")
    end = blob.index(b"\n", end) + 1
    lines = blob[:end].decode("ascii", errors="replace").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValidationError("not a PLY file: missing magic")
    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    for ln in lines[1:]:
        parts = ln.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            if parts[1] == "vertex":
                if count is not None:
                    raise ValidationError("duplicate vertex element")
                count = int(parts[2])
                in_vertex = True
            else:
                if count is None:
                    raise ValidationError(
                        "unsupported PLY layout: vertex element must come first")
                in_vertex = False
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise ValidationError("list properties on vertices are not supported")
            if parts[1] not in _TYPES:
                raise ValidationError(f"unsupported PLY property type {parts[1]!r}")
            props.append((parts[2], _TYPES[parts[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise ValidationError(f"unsupported PLY format {fmt!r}")
    if count is None:
        raise ValidationError("PLY file has no vertex element")
    return fmt, count, props, end


def read_ply(path) -> LabeledPointCloud:
    with open(path, "rb") as fh:
        blob = fh.read()
    fmt, count, props, body_start = _parse_header(blob)
    names = [n for n, _ in props]
    for needed in ("x", "y", "z"):
        if needed not in names:
            raise ValidationError(f"PLY vertex element lacks property {needed!r}")

    dtype = np.dtype([(n, t) for n, t in props])
    if fmt == "binary_little_endian":
        body = blob[body_start:body_start + dtype.itemsize * count]
        if len(body) < dtype.itemsize * count:
            raise ValidationError("PLY file truncated")
        rec = np.frombuffer(body, dtype=dtype, count=count)
    else:
        text = blob[body_start:].decode("ascii")
        rows = text.split()
        if len(rows) < count * len(props):
            raise ValidationError("PLY file truncated")
        flat = np.array(rows[:count * len(props)], dtype=float).reshape(count, len(props))
        rec = np.zeros(count, dtype=dtype)
        for i, (n, _) in enumerate(props):
            rec[n] = flat[:, i]

    points = np.column_stack([rec["x"], rec["y"], rec["z"]]).astype(float)
    normals = None
    if all(n in names for n in ("nx", "ny", "nz")):
        normals = np.column_stack([rec["nx"], rec["ny"], rec["nz"]]).astype(float)
        # float32 storage denormalizes slightly; restore unit length
        norm = np.linalg.norm(normals, axis=1, keepdims=True)
        bad = norm[:, 0] < 1e-12
        if np.any(bad):
            raise ValidationError("PLY normals contain zero vectors")
        normals = normals / norm
    labels = rec["label"].astype(np.int64) if "label" in names else np.zeros(count, dtype=np.int64)
    return LabeledPointCloud(points, labels, normals)
