"""Wavefront OBJ and GFTENSOR array files.

GFTENSOR layout: 8-byte magic ``GFTENSOR``, 4-byte little-endian header
length, JSON header ``{"dtype": ..., "shape": [...], "order": "row-major"}``,
then the little-endian payload.
"""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from garmentforge.mesh import Mesh, MeshValidationError

MAGIC = b"GFTENSOR"

_DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i32": np.dtype("<i4"),
    "i64": np.dtype("<i8"),
    "u8": np.dtype("u1"),
}
_NAMES = {v.str: k for k, v in _DTYPES.items()}


class ObjParseError(ValueError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


class TensorFormatError(ValueError):
    pass


def load_obj(path):
    """Read positions and faces; normals, UVs and other records are skipped.

    Polygons are fan-triangulated. Face indices may be negative (relative).
    """
    vertices = []
    faces = []
    with open(path, "r") as fh:
        for line_no, line in enumerate(fh, start=1):
            toks = line.split("#", 1)[0].split()
            if not toks:
                continue
            if toks[0] == "v":
                if len(toks) < 4:
                    raise ObjParseError(path, line_no, "vertex record needs 3 coordinates")
                try:
                    vertices.append([float(t) for t in toks[1:4]])
                except ValueError as exc:
                    raise ObjParseError(path, line_no, f"bad vertex coordinate: {exc}") from None
            elif toks[0] == "f":
                if len(toks) < 4:
                    raise ObjParseError(path, line_no, "face record needs at least 3 vertices")
                try:
                    idx = [int(t.split("/")[0]) for t in toks[1:]]
                except ValueError:
                    raise ObjParseError(path, line_no, "bad face index") from None
                if 0 in idx:
                    raise ObjParseError(path, line_no, "face index 0 is invalid (OBJ is 1-based)")
                count = len(vertices)
                idx = [i - 1 if i > 0 else count + i for i in idx]
                for i in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[i], idx[i + 1]))
    if not vertices:
        raise ObjParseError(path, 0, "no vertex records")
    v = np.array(vertices, dtype=np.float64)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if f.size and (f.min() < 0 or f.max() >= len(v)):
        raise MeshValidationError(f"{path}: face index out of range for {len(v)} vertices")
    return Mesh(v, f)


def format_obj(mesh):
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    return "\n".join(lines) + "\n"


def save_obj(path, mesh):
    Path(path).write_text(format_obj(mesh))


def save_tensor(path, array, dtype="f32"):
    if dtype not in _DTYPES:
        raise TensorFormatError(f"unsupported dtype {dtype!r}")
    arr = np.ascontiguousarray(np.asarray(array), dtype=_DTYPES[dtype])
    header = json.dumps({"dtype": dtype, "shape": list(arr.shape), "order": "row-major"}, separators=(",", ":"))
    hb = header.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        fh.write(arr.tobytes(order="C"))


def load_tensor(path):
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise TensorFormatError(f"{path}: missing GFTENSOR magic")
    (hlen,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorFormatError(f"{path}: bad header: {exc}") from None
    if header.get("order", "row-major") != "row-major":
        raise TensorFormatError(f"{path}: only row-major payloads are supported")
    dt = _DTYPES.get(header.get("dtype"))
    if dt is None:
        raise TensorFormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    shape = tuple(int(s) for s in header["shape"])
    payload = data[12 + hlen:]
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(payload) != expected:
        raise TensorFormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dt).reshape(shape).copy()


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
