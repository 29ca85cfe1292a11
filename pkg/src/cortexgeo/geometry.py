"""Discrete mean curvature, curvature weights and barycentric surface sampling."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

from .mesh import Mesh, MeshError, vertex_and_face_normals

COT_CLAMP = 1e4
AREA_FLOOR = 1e-12
KAPPA_MAX = 5.0


@dataclass(frozen=True)
class CurvatureField:
    """Per-vertex absolute mean curvature |H| and mixed Voronoi area.

    ``flagged`` marks vertices whose curvature was forced to zero: boundary
    vertices, vertices in no face, and vertices with zero mixed area.
    """

    mean_curvature: np.ndarray
    mixed_area: np.ndarray
    flagged: np.ndarray


def _cotangents(x0, x1, x2):
    """Cotangent of the angle at x0 in triangle (x0, x1, x2), clamped."""
    u = x1 - x0
    w = x2 - x0
    dot = np.einsum("ij,ij->i", u, w)
    cross = np.linalg.norm(np.cross(u, w), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cot = dot / cross
    cot = np.where(cross > 0, cot, np.sign(dot) * COT_CLAMP)
    return np.clip(cot, -COT_CLAMP, COT_CLAMP)


def mean_curvature(mesh: Mesh) -> CurvatureField:
    """Absolute discrete mean curvature with the cotangent formula.

    Follows Meyer, Desbrun, Schröder & Barr (2003): the mean-curvature
    normal is K(i) = 1/(2 A_mixed) Σ_j (cot α_ij + cot β_ij)(x_i - x_j) and
    |H| = |K| / 2, where A_mixed is the Voronoi area with the obtuse-triangle
    fallback. Boundary vertices are reported as zero and flagged.
    """
    mesh.check_manifold()
    x, f = mesh.vertices, mesh.faces
    nv = mesh.n_vertices
    K = np.zeros((nv, 3))
    area = np.zeros(nv)
    if mesh.n_faces:
        p = [x[f[:, k]] for k in range(3)]
        cot = [_cotangents(p[k], p[(k + 1) % 3], p[(k + 2) % 3]) for k in range(3)]
        tri_area = 0.5 * np.linalg.norm(np.cross(p[1] - p[0], p[2] - p[0]), axis=1)
        obtuse = [cot[k] < 0 for k in range(3)]
        any_obtuse = obtuse[0] | obtuse[1] | obtuse[2]
        for k in range(3):
            a, b = (k + 1) % 3, (k + 2) % 3
            # corner k sees edge (a, b)
            w = cot[k][:, None] * (p[a] - p[b])
            np.add.at(K, f[:, a], w)
            np.add.at(K, f[:, b], -w)
        for i in range(3):
            j, l = (i + 1) % 3, (i + 2) % 3
            voronoi = (np.sum((p[i] - p[j]) ** 2, axis=1) * cot[l]
                       + np.sum((p[i] - p[l]) ** 2, axis=1) * cot[j]) / 8.0
            a_i = np.where(any_obtuse, np.where(obtuse[i], tri_area / 2.0, tri_area / 4.0), voronoi)
            np.add.at(area, f[:, i], a_i)

    flagged = area <= 0
    edges, _, _, counts = mesh.edge_faces
    boundary = np.zeros(nv, dtype=bool)
    if len(edges):
        boundary[edges[counts == 1].ravel()] = True
    flagged |= boundary
    safe_area = np.maximum(area, AREA_FLOOR)
    H = np.linalg.norm(K, axis=1) / (2.0 * safe_area) / 2.0
    H[flagged] = 0.0
    return CurvatureField(H, area, flagged)


def curvature_weight(curv, kappa_max: float = KAPPA_MAX) -> np.ndarray:
    """κ = min(1 + curv, κ_max), per vertex."""
    if kappa_max < 1:
        raise ValueError(f"kappa_max must be >= 1, got {kappa_max}")
    values = curv.mean_curvature if isinstance(curv, CurvatureField) else np.asarray(curv, float)
    if np.any(values < 0) or not np.all(np.isfinite(values)):
        raise ValueError("curvature values must be finite and non-negative")
    return np.minimum(1.0 + values, kappa_max)


def curvature_csv(curv: CurvatureField, kappa_max: float = KAPPA_MAX) -> str:
    kappa = curvature_weight(curv, kappa_max)
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["vertex_id", "mean_curvature", "kappa"])
    for i, (h, k) in enumerate(zip(curv.mean_curvature.tolist(), kappa.tolist())):
        w.writerow([i, repr(h), repr(k)])
    return out.getvalue()


@dataclass(frozen=True, eq=False)
class SampledCloud:
    """Oriented points on a mesh with their face and barycentric provenance.

    ``point = Σ_k barycentric[k] · vertices[faces[face_id, k]]``.
    ``normal_source`` is ``"face"`` for area samples (normal of the source
    face) or ``"vertex"`` for vertex clouds (area-weighted vertex normal of
    ``vertex_ids``).
    """

    points: np.ndarray
    normals: np.ndarray
    face_id: np.ndarray
    barycentric: np.ndarray
    curvature_weight: Optional[np.ndarray] = None
    normal_source: str = "face"
    vertex_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.points)
        if self.points.shape != (n, 3) or self.normals.shape != (n, 3):
            raise ValueError("points and normals must both have shape (N, 3)")
        if self.face_id.shape != (n,) or self.barycentric.shape != (n, 3):
            raise ValueError("face_id and barycentric must match the point count")
        if self.curvature_weight is not None and self.curvature_weight.shape != (n,):
            raise ValueError("curvature_weight must have one value per point")
        if self.normal_source not in ("face", "vertex"):
            raise ValueError(f"unknown normal source {self.normal_source!r}")
        if self.normal_source == "vertex" and self.vertex_ids is None:
            raise ValueError("vertex clouds need vertex_ids")

    def __len__(self):
        return len(self.points)

    @cached_property
    def point_index(self):
        """KD-tree over ``points``, built on first use."""
        from .spatial import PointIndex
        return PointIndex(self.points)

    def with_weights(self, weights) -> "SampledCloud":
        w = None if weights is None else np.asarray(weights, dtype=np.float64)
        return SampledCloud(self.points, self.normals, self.face_id, self.barycentric,
                            w, self.normal_source, self.vertex_ids)

    def subset(self, idx) -> "SampledCloud":
        idx = np.asarray(idx)
        w = None if self.curvature_weight is None else self.curvature_weight[idx]
        vid = None if self.vertex_ids is None else self.vertex_ids[idx]
        return SampledCloud(self.points[idx], self.normals[idx], self.face_id[idx],
                            self.barycentric[idx], w, self.normal_source, vid)


def _interp(mesh, face_id, bary, scalars):
    s = np.asarray(scalars, dtype=np.float64)
    if s.shape != (mesh.n_vertices,):
        raise ValueError("vertex_scalars must have one value per vertex")
    return np.einsum("ij,ij->i", s[mesh.faces[face_id]], bary)


def sample_surface(mesh: Mesh, n: int, seed: int = 0, vertex_scalars=None) -> SampledCloud:
    """Draw ``n`` area-uniform points with barycentric provenance.

    Faces are picked with probability proportional to area, barycentric
    coordinates are uniform on the simplex, and ``vertex_scalars`` (e.g.
    curvature weights) are interpolated barycentrically. The generator is
    Philox keyed by ``seed``, so equal seeds give identical clouds.
    """
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n}")
    areas = mesh.face_areas()
    total = float(areas.sum()) if len(areas) else 0.0
    if not total > 0:
        raise MeshError("cannot sample a mesh with zero total area")
    rng = np.random.Generator(np.random.Philox(int(seed)))
    r = rng.random((int(n), 3))
    cum = np.cumsum(areas)
    face_id = np.searchsorted(cum, r[:, 0] * cum[-1], side="right")
    # zero-area faces own an empty interval of the CDF and are never picked
    face_id = np.minimum(face_id, len(areas) - 1)
    s = np.sqrt(r[:, 1])
    bary = np.stack([1.0 - s, s * (1.0 - r[:, 2]), s * r[:, 2]], axis=1)
    return cloud_on_mesh(mesh, face_id, bary, vertex_scalars)


def cloud_on_mesh(mesh: Mesh, face_id, barycentric, vertex_scalars=None,
                  normal_source: str = "face", vertex_ids=None) -> SampledCloud:
    """Evaluate fixed sampling parameters on (possibly moved) mesh vertices."""
    face_id = np.asarray(face_id, dtype=np.int64)
    bary = np.asarray(barycentric, dtype=np.float64)
    tri = mesh.vertices[mesh.faces[face_id]]
    points = np.einsum("ij,ijk->ik", bary, tri)
    normals = vertex_and_face_normals(mesh)
    if normal_source == "face":
        nrm = normals.face_normals[face_id]
    else:
        nrm = normals.vertex_normals[vertex_ids]
    w = None if vertex_scalars is None else _interp(mesh, face_id, bary, vertex_scalars)
    return SampledCloud(points, nrm, face_id, bary, w, normal_source,
                        None if vertex_ids is None else np.asarray(vertex_ids))


def reposition(cloud: SampledCloud, mesh: Mesh) -> SampledCloud:
    """Recompute ``cloud`` on ``mesh`` keeping faces, weights and barycentrics."""
    out = cloud_on_mesh(mesh, cloud.face_id, cloud.barycentric, None,
                        cloud.normal_source, cloud.vertex_ids)
    return out.with_weights(cloud.curvature_weight)


def resample_as_vertices(mesh: Mesh, vertex_scalars=None) -> SampledCloud:
    """One point per vertex, carrying the vertex normal and scalars.

    Each point records an incident face with a one-hot barycentric weight so
    the reconstruction identity still holds. Vertices in no face get
    ``face_id = -1``.
    """
    nv = mesh.n_vertices
    face_id = np.full(nv, -1, dtype=np.int64)
    bary = np.zeros((nv, 3))
    f = mesh.faces
    # lowest incident face, first corner within it
    flat = f.ravel()
    first = np.full(nv, -1, dtype=np.int64)
    order = np.argsort(flat, kind="stable")
    verts_sorted = flat[order]
    lead = np.r_[True, verts_sorted[1:] != verts_sorted[:-1]] if len(flat) else np.zeros(0, bool)
    first[verts_sorted[lead]] = order[lead]
    used = first >= 0
    face_id[used] = first[used] // 3
    bary[np.flatnonzero(used), first[used] % 3] = 1.0
    normals = vertex_and_face_normals(mesh).vertex_normals
    w = None
    if vertex_scalars is not None:
        w = np.asarray(vertex_scalars, dtype=np.float64)
        if w.shape != (nv,):
            raise ValueError("vertex_scalars must have one value per vertex")
        w = w.copy()
    return SampledCloud(mesh.vertices.copy(), normals, face_id, bary, w, "vertex",
                        np.arange(nv))


def face_normal_vjp(mesh: Mesh, grad_cross: np.ndarray) -> np.ndarray:
    """Pull back gradients on unnormalised face normals (x1-x0)×(x2-x0)."""
    x, f = mesh.vertices, mesh.faces
    e1 = x[f[:, 1]] - x[f[:, 0]]
    e2 = x[f[:, 2]] - x[f[:, 0]]
    g1 = np.cross(e2, grad_cross)
    g2 = np.cross(grad_cross, e1)
    out = np.zeros_like(x)
    np.add.at(out, f[:, 1], g1)
    np.add.at(out, f[:, 2], g2)
    np.add.at(out, f[:, 0], -(g1 + g2))
    return out


def _unit_vjp(vec, grad_unit):
    """Gradient through v -> v/|v| for rows of ``vec``; zero rows give zero."""
    norm = np.linalg.norm(vec, axis=1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    u = vec / safe
    g = (grad_unit - np.sum(grad_unit * u, axis=1, keepdims=True) * u) / safe
    return np.where(norm > 0, g, 0.0)


def cloud_vjp(mesh: Mesh, cloud: SampledCloud, grad_points=None, grad_normals=None) -> np.ndarray:
    """Gradient with respect to mesh vertices from per-point gradients.

    Points depend on vertices through the barycentric combination; normals
    through the face (or area-weighted vertex) normal and its normalisation.
    """
    x, f = mesh.vertices, mesh.faces
    out = np.zeros_like(x)
    valid = cloud.face_id >= 0
    if grad_points is not None:
        gp = np.asarray(grad_points)[valid]
        fid = cloud.face_id[valid]
        bary = cloud.barycentric[valid]
        for k in range(3):
            np.add.at(out, f[fid, k], bary[:, k, None] * gp)
    if grad_normals is not None:
        gn = np.asarray(grad_normals)
        cross = np.cross(x[f[:, 1]] - x[f[:, 0]], x[f[:, 2]] - x[f[:, 0]])
        g_cross = np.zeros_like(cross)
        if cloud.normal_source == "face":
            g_unit = np.zeros_like(cross)
            np.add.at(g_unit, cloud.face_id[valid], gn[valid])
            g_cross = _unit_vjp(cross, g_unit)
        else:
            acc = np.zeros_like(x)
            for k in range(3):
                np.add.at(acc, f[:, k], cross)
            g_unit = np.zeros_like(x)
            np.add.at(g_unit, cloud.vertex_ids, gn)
            g_acc = _unit_vjp(acc, g_unit)
            g_cross = g_acc[f[:, 0]] + g_acc[f[:, 1]] + g_acc[f[:, 2]]
        out += face_normal_vjp(mesh, g_cross)
    return out
