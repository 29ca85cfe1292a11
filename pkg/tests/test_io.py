import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cortexgeo.io import MeshFormatError, format_from_path, load_mesh, save_mesh, write_mesh
from cortexgeo.mesh import Mesh
from cortexgeo.template import icosahedron

from oracles import tetrahedron

FORMATS = ["obj", "off", "ply", "stl"]


def test_off_tetrahedron_loads():
    text = b"""OFF
4 4 0
0 0 0
1 0 0
0 1 0
0 0 1
3 0 2 1
3 0 1 3
3 0 3 2
3 1 2 3
"""
    m = load_mesh(io.BytesIO(text), "off")
    assert (m.n_vertices, m.n_faces) == (4, 4)


def test_obj_quad_is_fan_triangulated():
    text = b"v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n"
    m = load_mesh(io.BytesIO(text), "obj")
    assert m.faces.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_obj_negative_and_slashed_indices():
    text = b"v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf -3//1 -2//1 -1//1\n"
    assert load_mesh(io.BytesIO(text), "obj").faces.tolist() == [[0, 1, 2]]


def test_off_header_and_counts():
    lines = save_mesh(tetrahedron(), "off").decode().splitlines()
    assert lines[0] == "OFF"
    assert lines[1] == "4 4 0"


def test_ply_element_counts():
    text = save_mesh(icosahedron(), "ply").decode()
    assert "element vertex 12" in text
    assert "element face 20" in text


@pytest.mark.parametrize("fmt", FORMATS)
def test_empty_mesh_writes_a_valid_empty_file(fmt):
    empty = Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    back = load_mesh(io.BytesIO(save_mesh(empty, fmt)), fmt)
    assert back.n_vertices == 0 and back.n_faces == 0


@pytest.mark.parametrize("fmt", FORMATS)
def test_lossless_round_trip_of_500_vertex_mesh(fmt):
    rng = np.random.default_rng(3)
    v = rng.standard_normal((500, 3))
    faces = np.array([rng.choice(500, 3, replace=False) for _ in range(900)])
    m = Mesh(v, faces)
    back = load_mesh(io.BytesIO(save_mesh(m, fmt)), fmt)
    if fmt == "stl":
        # STL has no shared vertices; vertices reappear in first-use order
        used = np.unique(faces)
        assert back.n_vertices == len(used)
        np.testing.assert_array_equal(back.vertices[back.faces], m.vertices[m.faces])
    else:
        np.testing.assert_array_equal(back.vertices, m.vertices)
        np.testing.assert_array_equal(back.faces, m.faces)


def test_binary_stl_reads():
    m = tetrahedron()
    buf = io.BytesIO()
    buf.write(b"\0" * 80)
    buf.write(struct.pack("<I", m.n_faces))
    for f in m.faces:
        buf.write(struct.pack("<3f", 0, 0, 0))
        for p in m.vertices[f]:
            buf.write(struct.pack("<3f", *p))
        buf.write(b"\0\0")
    back = load_mesh(io.BytesIO(buf.getvalue()), "stl")
    assert (back.n_vertices, back.n_faces) == (4, 4)
    np.testing.assert_allclose(back.vertices[back.faces], m.vertices[m.faces], atol=1e-7)


def test_binary_ply_reads():
    m = tetrahedron()
    head = ("ply\nformat binary_little_endian 1.0\nelement vertex 4\nproperty float x\n"
            "property float y\nproperty float z\nelement face 4\n"
            "property list uchar int vertex_indices\nend_header\n").encode()
    body = b"".join(struct.pack("<3f", *p) for p in m.vertices)
    body += b"".join(struct.pack("<B3i", 3, *f) for f in m.faces.tolist())
    back = load_mesh(io.BytesIO(head + body), "ply")
    np.testing.assert_array_equal(back.faces, m.faces)


def test_format_inference_and_errors(tmp_path):
    assert format_from_path("a/b.OBJ") == "obj"
    with pytest.raises(MeshFormatError):
        format_from_path("mesh.xyz")
    with pytest.raises(MeshFormatError):
        load_mesh(io.BytesIO(b"OFF\n3 1 0\n0 0 0\n"), "off")
    p = tmp_path / "t.ply"
    write_mesh(tetrahedron(), p)
    assert load_mesh(p).n_faces == 4


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["obj", "off", "ply"]),
       st.lists(st.tuples(*[st.floats(-1e6, 1e6, allow_nan=False)] * 3), min_size=3, max_size=30))
def test_round_trip_property(fmt, pts):
    v = np.array(pts, dtype=np.float64)
    n = len(v)
    faces = np.array([[i, (i + 1) % n, (i + 2) % n] for i in range(n)])
    m = Mesh(v, faces)
    back = load_mesh(io.BytesIO(save_mesh(m, fmt)), fmt)
    np.testing.assert_array_equal(back.vertices, m.vertices)
    np.testing.assert_array_equal(back.faces, m.faces)
