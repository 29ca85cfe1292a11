"""Reading and writing OBJ, OFF, PLY and STL triangle meshes.

Readers accept bytes, text, paths or binary file objects. Writers produce
bytes. Binary PLY and binary STL are read-only; PLY and STL are written as
ASCII. Polygons with more than three corners are fan-triangulated on load.
"""
from __future__ import annotations

import io
import os
import struct
from pathlib import Path

import numpy as np

from .mesh import Mesh, MeshError

FORMATS = ("obj", "off", "ply", "stl")


class MeshFormatError(MeshError):
    """Malformed or unsupported mesh file."""


def _read_bytes(source) -> bytes:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    if isinstance(source, (str, os.PathLike)):
        return Path(source).read_bytes()
    data = source.read()
    return data.encode() if isinstance(data, str) else data


def format_from_path(path) -> str:
    ext = Path(path).suffix.lower().lstrip(".")
    if ext not in FORMATS:
        raise MeshFormatError(f"cannot infer mesh format from extension {ext!r}")
    return ext


def _fan(polys):
    tris = []
    for p in polys:
        if len(p) < 3:
            raise MeshFormatError(f"polygon with {len(p)} corners")
        for k in range(1, len(p) - 1):
            tris.append((p[0], p[k], p[k + 1]))
    return tris


def _build(vertices, faces) -> Mesh:
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(f) and (f.min() < 0 or f.max() >= len(v)):
        raise MeshFormatError("face index out of range")
    return Mesh(v, f)


def _float(tok):
    try:
        return float(tok)
    except ValueError:
        raise MeshFormatError(f"bad number {tok!r}") from None


def _int(tok):
    try:
        return int(tok)
    except ValueError:
        raise MeshFormatError(f"bad index {tok!r}") from None


# --- OBJ -------------------------------------------------------------------

def _load_obj(data: bytes) -> Mesh:
    verts, polys = [], []
    for lineno, raw in enumerate(data.decode("utf-8", "replace").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise MeshFormatError(f"line {lineno}: vertex needs three coordinates")
            verts.append([_float(t) for t in parts[1:4]])
        elif tag == "f":
            idx = []
            for tok in parts[1:]:
                i = _int(tok.split("/")[0])
                # OBJ is 1-based; negative indices count back from the end
                i = i - 1 if i > 0 else len(verts) + i
                if i < 0 or i >= len(verts):
                    raise MeshFormatError(f"line {lineno}: face index out of range")
                idx.append(i)
            polys.append(idx)
    return _build(verts, _fan(polys))


def _fmt(precision):
    if precision is None:
        return repr
    spec = f"{{:.{int(precision)}g}}"
    return lambda x: spec.format(x)


def _save_obj(mesh: Mesh, precision) -> bytes:
    fmt = _fmt(precision)
    out = io.StringIO()
    for x, y, z in mesh.vertices.tolist():
        out.write(f"v {fmt(x)} {fmt(y)} {fmt(z)}\n")
    for a, b, c in (mesh.faces + 1).tolist():
        out.write(f"f {a} {b} {c}\n")
    return out.getvalue().encode()


# --- OFF -------------------------------------------------------------------

def _load_off(data: bytes) -> Mesh:
    lines = []
    for raw in data.decode("utf-8", "replace").splitlines():
        parts = raw.split("#", 1)[0].split()
        if parts:
            lines.append(parts)
    if not lines or not lines[0][0].endswith("OFF"):
        raise MeshFormatError("missing OFF header")
    head = lines[0][1:] or (lines[1] if len(lines) > 1 else [])
    body = lines[1:] if lines[0][1:] else lines[2:]
    if len(head) < 2:
        raise MeshFormatError("missing OFF element counts")
    nv, nf = _int(head[0]), _int(head[1])
    if len(body) < nv + nf:
        raise MeshFormatError("truncated OFF body")
    verts = []
    for parts in body[:nv]:
        if len(parts) < 3:
            raise MeshFormatError("OFF vertex needs three coordinates")
        verts.append([_float(t) for t in parts[:3]])
    polys = []
    for parts in body[nv:nv + nf]:
        k = _int(parts[0])
        if len(parts) < 1 + k:
            raise MeshFormatError("truncated OFF face record")
        # anything after the k indices is per-face colour
        polys.append([_int(t) for t in parts[1:1 + k]])
    return _build(verts, _fan(polys))


def _save_off(mesh: Mesh, precision) -> bytes:
    fmt = _fmt(precision)
    out = io.StringIO()
    out.write("OFF\n")
    out.write(f"{mesh.n_vertices} {mesh.n_faces} 0\n")
    for x, y, z in mesh.vertices.tolist():
        out.write(f"{fmt(x)} {fmt(y)} {fmt(z)}\n")
    for a, b, c in mesh.faces.tolist():
        out.write(f"3 {a} {b} {c}\n")
    return out.getvalue().encode()


# --- PLY -------------------------------------------------------------------

_PLY_TYPES = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def _parse_ply_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MeshFormatError("missing PLY header")
    body_start = data.index(b"\n", end) + 1
    fmt = None
    elements = []
    for raw in data[:end].decode("ascii", "replace").splitlines():
        parts = raw.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], _int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MeshFormatError("PLY property before element")
            if parts[1] == "list":
                elements[-1][2].append((parts[4], ("list", parts[2], parts[3])))
            else:
                elements[-1][2].append((parts[2], parts[1]))
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise MeshFormatError(f"unsupported PLY format {fmt!r}")
    return fmt, elements, body_start


def _load_ply(data: bytes) -> Mesh:
    fmt, elements, start = _parse_ply_header(data)
    verts, polys = None, []
    if fmt == "ascii":
        tokens = data[start:].decode("ascii", "replace").split()
        pos = 0
        for name, count, props in elements:
            rows = []
            for _ in range(count):
                row = {}
                for pname, ptype in props:
                    if pos >= len(tokens):
                        raise MeshFormatError("truncated PLY body")
                    if isinstance(ptype, tuple):
                        k = _int(tokens[pos])
                        row[pname] = [_int(t) for t in tokens[pos + 1:pos + 1 + k]]
                        pos += 1 + k
                    else:
                        row[pname] = _float(tokens[pos])
                        pos += 1
                rows.append(row)
            if name == "vertex":
                verts = [[r["x"], r["y"], r["z"]] for r in rows]
            elif name == "face":
                key = "vertex_indices" if rows and "vertex_indices" in rows[0] else "vertex_index"
                polys = [r[key] for r in rows] if rows else []
    else:
        endian = "<" if fmt == "binary_little_endian" else ">"
        pos = start
        for name, count, props in elements:
            rows = []
            for _ in range(count):
                row = {}
                for pname, ptype in props:
                    try:
                        if isinstance(ptype, tuple):
                            cfmt = endian + _PLY_TYPES[ptype[1]]
                            ifmt = _PLY_TYPES[ptype[2]]
                            (k,) = struct.unpack_from(cfmt, data, pos)
                            pos += struct.calcsize(cfmt)
                            lfmt = f"{endian}{k}{ifmt}"
                            row[pname] = list(struct.unpack_from(lfmt, data, pos))
                            pos += struct.calcsize(lfmt)
                        else:
                            sfmt = endian + _PLY_TYPES[ptype]
                            (row[pname],) = struct.unpack_from(sfmt, data, pos)
                            pos += struct.calcsize(sfmt)
                    except (struct.error, KeyError) as exc:
                        raise MeshFormatError(f"bad binary PLY body: {exc}") from None
                rows.append(row)
            if name == "vertex":
                verts = [[r["x"], r["y"], r["z"]] for r in rows]
            elif name == "face":
                key = "vertex_indices" if rows and "vertex_indices" in rows[0] else "vertex_index"
                polys = [r[key] for r in rows] if rows else []
    if verts is None:
        raise MeshFormatError("PLY has no vertex element")
    for p in polys:
        for i in p:
            if i < 0 or i >= len(verts):
                raise MeshFormatError("face index out of range")
    return _build(verts, _fan(polys))


def _save_ply(mesh: Mesh, precision) -> bytes:
    fmt = _fmt(precision)
    out = io.StringIO()
    out.write("ply\nformat ascii 1.0\n")
    out.write(f"element vertex {mesh.n_vertices}\n")
    out.write("property double x\nproperty double y\nproperty double z\n")
    out.write(f"element face {mesh.n_faces}\n")
    out.write("property list uchar int vertex_indices\nend_header\n")
    for x, y, z in mesh.vertices.tolist():
        out.write(f"{fmt(x)} {fmt(y)} {fmt(z)}\n")
    for a, b, c in mesh.faces.tolist():
        out.write(f"3 {a} {b} {c}\n")
    return out.getvalue().encode()


# --- STL -------------------------------------------------------------------

def _merge_soup(tri_vertices: np.ndarray) -> Mesh:
    pts = tri_vertices.reshape(-1, 3)
    if len(pts) == 0:
        return Mesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64))
    uniq, first, inverse = np.unique(pts, axis=0, return_index=True, return_inverse=True)
    # keep vertices in order of first appearance
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    faces = rank[inverse.ravel()].reshape(-1, 3)
    return Mesh(uniq[order], faces)


def _load_stl(data: bytes) -> Mesh:
    if len(data) >= 84:
        (n,) = struct.unpack_from("<I", data, 80)
        if 84 + 50 * n == len(data):
            rec = np.frombuffer(
                data, offset=84, count=n,
                dtype=np.dtype([("n", "<f4", 3), ("v", "<f4", (3, 3)), ("a", "<u2")]),
            )
            return _merge_soup(rec["v"].astype(np.float64))
    text = data.decode("ascii", "replace")
    if not text.lstrip().startswith("solid"):
        raise MeshFormatError("not a valid STL file")
    pts = []
    for raw in text.splitlines():
        parts = raw.split()
        if parts and parts[0] == "vertex":
            if len(parts) != 4:
                raise MeshFormatError("bad STL vertex record")
            pts.append([_float(t) for t in parts[1:]])
    if len(pts) % 3:
        raise MeshFormatError("STL vertex count is not a multiple of three")
    return _merge_soup(np.asarray(pts, dtype=np.float64))


def _save_stl(mesh: Mesh, precision) -> bytes:
    fmt = _fmt(precision)
    v, f = mesh.vertices, mesh.faces
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    norm = np.linalg.norm(cross, axis=1, keepdims=True)
    n = np.divide(cross, norm, out=np.zeros_like(cross), where=norm > 0)
    out = io.StringIO()
    out.write("solid mesh\n")
    for k in range(len(f)):
        out.write("  facet normal {} {} {}\n    outer loop\n".format(*map(fmt, n[k].tolist())))
        for i in f[k]:
            out.write("      vertex {} {} {}\n".format(*map(fmt, v[i].tolist())))
        out.write("    endloop\n  endfacet\n")
    out.write("endsolid mesh\n")
    return out.getvalue().encode()


_LOADERS = {"obj": _load_obj, "off": _load_off, "ply": _load_ply, "stl": _load_stl}
_SAVERS = {"obj": _save_obj, "off": _save_off, "ply": _save_ply, "stl": _save_stl}


def load_mesh(source, format: str | None = None) -> Mesh:
    """Parse a mesh from bytes, a path or a file object."""
    if format is None:
        if not isinstance(source, (str, os.PathLike)):
            raise MeshFormatError("format is required when reading from a stream")
        format = format_from_path(source)
    format = format.lower()
    if format not in _LOADERS:
        raise MeshFormatError(f"unsupported format {format!r}")
    return _LOADERS[format](_read_bytes(source))


def save_mesh(mesh: Mesh, format: str, precision: int | None = None) -> bytes:
    """Serialise ``mesh``; coordinates use ``precision`` significant digits.

    ``precision=None`` writes the shortest repr of each float, which makes
    the round trip exact for arbitrary coordinates.
    """
    format = format.lower()
    if format not in _SAVERS:
        raise MeshFormatError(f"unsupported format {format!r}")
    return _SAVERS[format](mesh, precision)


def write_mesh(mesh: Mesh, path, format: str | None = None, precision: int | None = None):
    path = Path(path)
    path.write_bytes(save_mesh(mesh, format or format_from_path(path), precision))
