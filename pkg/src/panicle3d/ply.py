"""Minimal PLY reader/writer for labeled point clouds.

Written files are always ``binary_little_endian`` with the vertex layout
``x y z`` (float32), ``red green blue`` (uchar), ``instance_id`` (int32) and
``confidence`` (float32). The reader also accepts ASCII and big-endian files
with any subset of these properties.
"""

from pathlib import Path

import numpy as np

from .geometry import PointCloud

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}

VERTEX_DTYPE = np.dtype(
    [
        ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
        ("red", "u1"), ("green", "u1"), ("blue", "u1"),
        ("instance_id", "<i4"), ("confidence", "<f4"),
    ]
)


class PlyError(ValueError):
    pass


def write_ply(path, cloud: PointCloud):
    data = np.empty(len(cloud), dtype=VERTEX_DTYPE)
    data["x"], data["y"], data["z"] = cloud.positions.T.astype(np.float32)
    data["red"], data["green"], data["blue"] = cloud.colors.T
    data["instance_id"] = cloud.instance_label
    data["confidence"] = cloud.confidence
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(cloud)}"]
    for name in VERTEX_DTYPE.names:
        kind = {"<f4": "float", "|u1": "uchar", "<i4": "int"}[VERTEX_DTYPE[name].str]
        header.append(f"property {kind} {name}")
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def _parse_header(fh):
    first = fh.readline().strip()
    if first != b"ply":
        raise PlyError("not a PLY file (missing magic)")
    fmt = None
    elements = []
    while True:
        line = fh.readline()
        if not line:
            raise PlyError("unterminated PLY header")
        tokens = line.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "end_header":
            break
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append([tokens[1], int(tokens[2]), []])
        elif tokens[0] == "property":
            if not elements:
                raise PlyError("property before element")
            if tokens[1] == "list":
                raise PlyError("list properties are not supported")
            if tokens[1] not in _PLY_TYPES:
                raise PlyError(f"unknown property type {tokens[1]!r}")
            elements[-1][2].append((tokens[2], _PLY_TYPES[tokens[1]]))
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise PlyError(f"unsupported PLY format {fmt!r}")
    return fmt, elements


def read_ply(path) -> PointCloud:
    path = Path(path)
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        vertex = None
        for name, count, props in elements:
            if fmt == "ascii":
                dtype = np.dtype([(p, t) for p, t in props])
                rows = [fh.readline().split() for _ in range(count)]
                block = np.array([tuple(r) for r in rows], dtype=dtype) if count else np.empty(0, dtype)
            else:
                order = "<" if fmt == "binary_little_endian" else ">"
                dtype = np.dtype([(p, order + t) for p, t in props])
                raw = fh.read(dtype.itemsize * count)
                if len(raw) != dtype.itemsize * count:
                    raise PlyError(f"{path}: truncated {name} data")
                block = np.frombuffer(raw, dtype=dtype)
            if name == "vertex":
                vertex = block
                break
    if vertex is None:
        raise PlyError(f"{path}: no vertex element")
    names = vertex.dtype.names
    for axis in "xyz":
        if axis not in names:
            raise PlyError(f"{path}: vertex property {axis!r} missing")
    positions = np.column_stack([vertex["x"], vertex["y"], vertex["z"]]).astype(np.float64)
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.column_stack([vertex["red"], vertex["green"], vertex["blue"]]).astype(np.uint8)
    labels = vertex["instance_id"].astype(np.int32) if "instance_id" in names else None
    conf = vertex["confidence"].astype(np.float32) if "confidence" in names else None
    return PointCloud(positions, colors, labels, conf)
