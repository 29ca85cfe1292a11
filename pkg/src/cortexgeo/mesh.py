"""Indexed triangle meshes: adjacency, topology, normals and subdivision."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional
import warnings

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph


class MeshError(ValueError):
    """Raised for meshes that violate structural invariants."""


class NonManifoldError(MeshError):
    pass


def _readonly(a):
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangle surface given by vertex positions and counter-clockwise faces.

    Arrays are copied on construction and frozen, so a ``Mesh`` can be shared
    freely. Derived data (adjacency, normals, ...) is cached on first use.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64, copy=True)
        f = np.array(self.faces, dtype=np.int64, copy=True)
        if v.size == 0:
            v = v.reshape(0, 3)
        if f.size == 0:
            f = f.reshape(0, 3)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must have shape (V, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must have shape (F, 3), got {f.shape}")
        if not np.all(np.isfinite(v)):
            raise MeshError("vertex coordinates must be finite")
        if len(f):
            if f.min() < 0 or f.max() >= len(v):
                raise MeshError("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise MeshError("faces must reference three distinct vertices")
        object.__setattr__(self, "vertices", _readonly(v))
        object.__setattr__(self, "faces", _readonly(f))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> "Mesh":
        """Same connectivity, new positions."""
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise MeshError(
                f"vertex array shape {vertices.shape} does not match {self.vertices.shape}"
            )
        out = Mesh(vertices, self.faces)
        # connectivity-only caches carry over
        for name in ("adjacency", "edge_faces", "face_pairs"):
            if name in self.__dict__:
                out.__dict__[name] = self.__dict__[name]
        return out

    @cached_property
    def adjacency(self) -> "AdjacencyInfo":
        return build_adjacency(self)

    @cached_property
    def edge_faces(self):
        """Edge/face incidence as ``(edges, inverse, face_of, counts)``.

        ``edges`` is the sorted unique edge list (same as ``adjacency.edges``);
        half-edge ``h`` of face ``face_of[h]`` is edge ``inverse[h]``, with
        half-edges ordered (0,1) for all faces, then (1,2), then (2,0).
        """
        return _edge_face_incidence(self)

    @cached_property
    def face_pairs(self) -> np.ndarray:
        """Pairs of faces sharing an edge, shape (P, 2), ``f1 < f2``."""
        return _adjacent_face_pairs(self)

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def bounding_box_diagonal(self) -> float:
        if self.n_vertices == 0:
            return 0.0
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    def is_manifold(self) -> bool:
        return manifold_problems(self) is None

    def check_manifold(self):
        problem = manifold_problems(self)
        if problem is not None:
            raise NonManifoldError(problem)


@dataclass(frozen=True, eq=False)
class AdjacencyInfo:
    """Vertex graph of a mesh.

    ``edges`` holds each undirected edge once as ``(i, j)`` with ``i < j``,
    sorted lexicographically. Neighbours are stored in CSR form: the
    neighbours of vertex ``i`` are ``indices[indptr[i]:indptr[i + 1]]``,
    in ascending order.
    """

    edges: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    degree: np.ndarray

    @property
    def n_vertices(self) -> int:
        return len(self.degree)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    @cached_property
    def matrix(self) -> sparse.csr_matrix:
        """Binary symmetric adjacency matrix A."""
        n = self.n_vertices
        data = np.ones(len(self.indices))
        return sparse.csr_matrix((data, self.indices, self.indptr), shape=(n, n))

    @cached_property
    def laplacian(self) -> sparse.csr_matrix:
        """Uniform Laplacian D^-1 A - I; rows of isolated vertices are zero."""
        n = self.n_vertices
        deg = self.degree.astype(np.float64)
        inv = np.divide(1.0, deg, out=np.zeros(n), where=deg > 0)
        lap = sparse.diags(inv) @ self.matrix - sparse.diags((deg > 0).astype(np.float64))
        return lap.tocsr()


def _sorted_edges(faces: np.ndarray) -> np.ndarray:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return e


def build_adjacency(mesh: Mesh) -> AdjacencyInfo:
    n = mesh.n_vertices
    if mesh.n_faces:
        edges = np.unique(_sorted_edges(mesh.faces), axis=0)
    else:
        edges = np.empty((0, 2), dtype=np.int64)
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    degree = np.bincount(rows, minlength=n).astype(np.int64)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(degree, out=indptr[1:])
    return AdjacencyInfo(
        edges=_readonly(edges.astype(np.int64)),
        indptr=_readonly(indptr),
        indices=_readonly(cols.astype(np.int64)),
        degree=_readonly(degree),
    )


def _edge_face_incidence(mesh: Mesh):
    f = mesh.faces
    nf = len(f)
    e = _sorted_edges(f)
    face_of = np.tile(np.arange(nf), 3)
    edges, inverse = np.unique(e, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    counts = np.bincount(inverse, minlength=len(edges))
    return edges, inverse, face_of, counts


def _adjacent_face_pairs(mesh: Mesh) -> np.ndarray:
    edges, inverse, face_of, counts = mesh.edge_faces
    if len(edges) == 0:
        return np.empty((0, 2), dtype=np.int64)
    order = np.argsort(inverse, kind="stable")
    faces_sorted = face_of[order]
    starts = np.zeros(len(edges) + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])
    pairs = []
    two = np.flatnonzero(counts == 2)
    if len(two):
        pairs.append(np.stack([faces_sorted[starts[two]], faces_sorted[starts[two] + 1]], axis=1))
    for k in np.flatnonzero(counts > 2):
        fs = faces_sorted[starts[k]:starts[k + 1]]
        ii, jj = np.triu_indices(len(fs), 1)
        pairs.append(np.stack([fs[ii], fs[jj]], axis=1))
    if not pairs:
        return np.empty((0, 2), dtype=np.int64)
    p = np.concatenate(pairs)
    p.sort(axis=1)
    return np.unique(p, axis=0)


def manifold_problems(mesh: Mesh) -> Optional[str]:
    """Describe the first manifoldness violation, or return ``None``.

    Checks that every edge has at most two incident faces and that the faces
    around every vertex form a single fan.
    """
    if mesh.n_faces == 0:
        return None
    edges, inverse, face_of, counts = mesh.edge_faces
    if np.any(counts > 2):
        k = int(np.flatnonzero(counts > 2)[0])
        return f"edge {tuple(int(x) for x in edges[k])} has {int(counts[k])} incident faces"
    f = mesh.faces
    nf = len(f)
    # corner id = 3 * face + slot; corners at the same vertex across a shared
    # edge are joined, then each vertex must see exactly one corner component
    corner_vertex = f.ravel()
    e_local = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    slot_a = np.repeat([0, 1, 2], nf)
    slot_b = np.repeat([1, 2, 0], nf)
    order = np.argsort(inverse, kind="stable")
    inv_sorted = inverse[order]
    first = np.r_[True, inv_sorted[1:] != inv_sorted[:-1]]
    starts = np.flatnonzero(first)
    shared = starts[counts[inv_sorted[starts]] == 2]
    h1, h2 = order[shared], order[shared + 1]
    fa, fb = face_of[h1], face_of[h2]
    va1, vb1 = e_local[h1, 0], e_local[h1, 1]
    ca_a = 3 * fa + slot_a[h1]
    ca_b = 3 * fa + slot_b[h1]
    # locate the same vertices inside face fb
    fb_rows = f[fb]
    cb_a = 3 * fb + np.argmax(fb_rows == va1[:, None], axis=1)
    cb_b = 3 * fb + np.argmax(fb_rows == vb1[:, None], axis=1)
    rows = np.concatenate([ca_a, ca_b])
    cols = np.concatenate([cb_a, cb_b])
    n = 3 * nf
    g = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, labels = csgraph.connected_components(g, directed=False)
    pairs = np.unique(np.stack([corner_vertex, labels], axis=1), axis=0)
    fans = np.bincount(pairs[:, 0], minlength=mesh.n_vertices)
    if np.any(fans > 1):
        v = int(np.flatnonzero(fans > 1)[0])
        return f"vertex {v} joins {int(fans[v])} separate face fans"
    return None


@dataclass(frozen=True)
class TopologyReport:
    vertex_count: int
    edge_count: int
    face_count: int
    euler_characteristic: int
    connected_components: int
    boundary_edge_count: int
    # one entry per connected component; None where the component has boundary
    genus_per_component: tuple = field(default=())

    @property
    def genus(self) -> Optional[int]:
        """Total genus, or ``None`` if any component is open."""
        if any(g is None for g in self.genus_per_component):
            return None
        return int(sum(self.genus_per_component))

    def as_dict(self) -> dict:
        return {
            "V": self.vertex_count,
            "E": self.edge_count,
            "F": self.face_count,
            "chi": self.euler_characteristic,
            "genus": self.genus,
            "cc": self.connected_components,
            "boundary_edges": self.boundary_edge_count,
        }


def topology_report(mesh: Mesh) -> TopologyReport:
    adj = mesh.adjacency
    V, E, F = mesh.n_vertices, adj.n_edges, mesh.n_faces
    if F == 0:
        return TopologyReport(V, E, F, V - E + F, 0, 0, ())
    _, labels = csgraph.connected_components(adj.matrix, directed=False)
    used = np.zeros(V, dtype=bool)
    used[mesh.faces.ravel()] = True
    # renumber components among referenced vertices only
    comp_ids, comp = np.unique(labels[used], return_inverse=True)
    n_cc = len(comp_ids)
    vlabel = np.full(V, -1)
    vlabel[used] = comp
    v_per = np.bincount(comp, minlength=n_cc)
    e_per = np.bincount(vlabel[adj.edges[:, 0]], minlength=n_cc)
    f_per = np.bincount(vlabel[mesh.faces[:, 0]], minlength=n_cc)
    edges, inverse, face_of, counts = mesh.edge_faces
    boundary = counts == 1
    b_per = np.bincount(vlabel[edges[boundary, 0]], minlength=n_cc)
    genus = []
    for c in range(n_cc):
        chi = int(v_per[c] - e_per[c] + f_per[c])
        if b_per[c] > 0 or (2 - chi) % 2:
            genus.append(None)
        else:
            genus.append((2 - chi) // 2)
    return TopologyReport(
        vertex_count=V,
        edge_count=E,
        face_count=F,
        euler_characteristic=V - E + F,
        connected_components=n_cc,
        boundary_edge_count=int(boundary.sum()),
        genus_per_component=tuple(genus),
    )


def subdivide_midpoint(mesh: Mesh, levels: int = 1) -> Mesh:
    """Split every triangle into four by inserting edge midpoints.

    Each level maps (V, F) to (V + E, 4F) and leaves the surface geometry
    unchanged.
    """
    if int(levels) != levels or levels < 1:
        raise ValueError(f"levels must be a positive integer, got {levels}")
    v, f = mesh.vertices, mesh.faces
    for _ in range(int(levels)):
        n_v = len(v)
        e = _sorted_edges(f)
        edges, inverse = np.unique(e, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        if n_v + len(edges) > np.iinfo(np.int64).max // 4:
            raise OverflowError("subdivision would overflow the vertex index type")
        nf = len(f)
        mid = n_v + inverse
        ab, bc, ca = mid[:nf], mid[nf:2 * nf], mid[2 * nf:]
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        new_faces = np.concatenate([
            np.stack([a, ab, ca], axis=1),
            np.stack([b, bc, ab], axis=1),
            np.stack([c, ca, bc], axis=1),
            np.stack([ab, bc, ca], axis=1),
        ])
        mids = 0.5 * (v[edges[:, 0]] + v[edges[:, 1]])
        v = np.concatenate([v, mids])
        f = new_faces
    return Mesh(v, f)


@dataclass(frozen=True)
class MeshNormals:
    face_normals: np.ndarray
    vertex_normals: np.ndarray
    degenerate_faces: np.ndarray  # bool per face

    @property
    def n_degenerate(self) -> int:
        return int(self.degenerate_faces.sum())


def vertex_and_face_normals(mesh: Mesh, eps: float = 1e-300) -> MeshNormals:
    """Unit face normals and area-weighted unit vertex normals.

    Zero-area faces get a zero normal and are flagged; vertices whose
    incident faces cancel out also get a zero normal.
    """
    v, f = mesh.vertices, mesh.faces
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    norm = np.linalg.norm(cross, axis=1)
    degenerate = norm <= eps
    fn = np.zeros_like(cross)
    ok = ~degenerate
    fn[ok] = cross[ok] / norm[ok, None]
    if degenerate.any():
        warnings.warn(f"{int(degenerate.sum())} degenerate faces get zero normals", stacklevel=2)
    acc = np.zeros_like(v)
    for k in range(3):
        np.add.at(acc, f[:, k], cross)
    vnorm = np.linalg.norm(acc, axis=1)
    vn = np.zeros_like(acc)
    good = vnorm > eps
    vn[good] = acc[good] / vnorm[good, None]
    return MeshNormals(fn, vn, degenerate)


def uniform_laplacian_apply(adj: AdjacencyInfo, values) -> np.ndarray:
    """Neighbour mean minus own value, per vertex; zero for isolated vertices."""
    x = np.asarray(values, dtype=np.float64)
    if len(x) != adj.n_vertices:
        raise ValueError(f"field has {len(x)} rows, mesh has {adj.n_vertices} vertices")
    return adj.laplacian @ x
