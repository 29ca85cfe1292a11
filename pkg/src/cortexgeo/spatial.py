"""Nearest-neighbour indices for point sets and triangle surfaces.

``PointIndex`` wraps scipy's KD-tree (median splits) and adds deterministic
tie-breaking by lowest point index. ``SurfaceIndex`` answers exact
closest-point queries against a triangle mesh using a tree over face
centroids with per-face bounding spheres for pruning.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from ._threads import get_threads
from .mesh import Mesh

GEO_EPS = 1e-10


class EmptyIndexError(ValueError):
    pass


def _as_points(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    if p.ndim == 1:
        p = p.reshape(1, -1)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) point array, got shape {p.shape}")
    return p


_SORT_MIN = 4096


def _morton_order(points, bits: int = 10) -> np.ndarray:
    """Permutation putting points in Z-order; spatially close queries then share tree paths."""
    lo = points.min(axis=0)
    span = float(np.ptp(points, axis=0).max()) or 1.0
    cells = ((points - lo) * ((2 ** bits - 1) / span)).astype(np.uint64)
    code = np.zeros(len(points), dtype=np.uint64)
    for b in range(bits):
        for d in range(3):
            code |= ((cells[:, d] >> np.uint64(b)) & np.uint64(1)) << np.uint64(3 * b + d)
    return np.argsort(code, kind="stable")


class PointIndex:
    """KD-tree over a fixed 3D point set."""

    def __init__(self, points):
        pts = _as_points(points)
        if len(pts) == 0:
            raise EmptyIndexError("cannot index an empty point set")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        self.points = pts
        self.points.setflags(write=False)
        self.tree = cKDTree(pts, balanced_tree=True, compact_nodes=True)

    def __len__(self):
        return len(self.points)

    def nearest(self, queries):
        """Index and distance of the nearest point for every query.

        Exact ties are resolved towards the lowest point index.
        """
        q = _as_points(queries)
        n = len(self.points)
        if n == 1:
            idx = np.zeros(len(q), dtype=np.int64)
            return idx, np.linalg.norm(q - self.points[0], axis=1)
        order = _morton_order(q) if len(q) >= _SORT_MIN and np.isfinite(q).all() else None
        dist, idx = self.tree.query(q if order is None else q[order], k=2, workers=get_threads())
        if order is not None:
            # per-query results do not depend on the order they are issued in
            back = np.empty_like(order)
            back[order] = np.arange(len(order))
            dist, idx = dist[back], idx[back]
        idx = idx[:, 0].astype(np.int64)
        d0 = np.sum((q - self.points[idx]) ** 2, axis=1)
        tied = np.flatnonzero(dist[:, 1] <= dist[:, 0] * (1 + 1e-12) + 1e-300)
        if len(tied):
            idx[tied] = self._break_ties(q[tied], dist[tied, 0], 1)[:, 0]
            d0[tied] = np.sum((q[tied] - self.points[idx[tied]]) ** 2, axis=1)
        return idx, np.sqrt(d0)

    def _break_ties(self, q, radius, k):
        r = radius * (1 + 1e-9) + 1e-300
        out = np.empty((len(q), k), dtype=np.int64)
        lists = self.tree.query_ball_point(q, r, workers=get_threads())
        for row, cand in enumerate(lists):
            cand = np.asarray(cand, dtype=np.int64)
            d = np.sum((self.points[cand] - q[row]) ** 2, axis=1)
            order = np.lexsort((cand, d))
            out[row] = cand[order[:k]]
        return out

    def knn(self, query, k: int):
        """The ``k`` nearest points to a single query, ascending distance.

        Returns ``(indices, distances)``; equal distances are ordered by
        point index.
        """
        q = _as_points(query)
        if len(q) != 1:
            raise ValueError("knn takes a single query point")
        n = len(self.points)
        if int(k) != k or k < 1:
            raise ValueError(f"k must be a positive integer, got {k}")
        if k > n:
            raise ValueError(f"k={k} exceeds the number of indexed points ({n})")
        dist, _ = self.tree.query(q[0], k=int(k))
        radius = float(np.atleast_1d(dist)[-1])
        cand = np.asarray(
            self.tree.query_ball_point(q[0], radius * (1 + 1e-9) + 1e-300), dtype=np.int64
        )
        d2 = np.sum((self.points[cand] - q[0]) ** 2, axis=1)
        order = np.lexsort((cand, d2))[:k]
        return cand[order], np.sqrt(d2[order])


def build_point_index(points) -> PointIndex:
    return PointIndex(points)


def knn(index: PointIndex, query, k: int):
    return index.knn(query, k)


# --- point / triangle ---------------------------------------------------------

def closest_point_on_triangles(p, a, b, c):
    """Closest point on each triangle (a, b, c) to the matching query ``p``.

    All inputs have shape (N, 3). Uses the Voronoi-region classification of
    Ericson, "Real-Time Collision Detection", 5.1.5.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    in_a = (d1 <= 0) & (d2 <= 0)
    in_b = (d3 >= 0) & (d4 <= d3)
    in_c = (d6 >= 0) & (d5 <= d6)
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    on_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom

    out = a + ab * v[:, None] + ac * w[:, None]
    for mask, value in (
        (on_bc, lambda m: b[m] + (c[m] - b[m]) * t_bc[m, None]),
        (on_ac, lambda m: a[m] + ac[m] * t_ac[m, None]),
        (on_ab, lambda m: a[m] + ab[m] * t_ab[m, None]),
        (in_c, lambda m: c[m]),
        (in_b, lambda m: b[m]),
        (in_a, lambda m: a[m]),
    ):
        # later assignments win, giving the same precedence as the scalar routine
        if mask.any():
            out[mask] = value(mask)
    bad = ~np.all(np.isfinite(out), axis=1)
    if bad.any():
        out[bad] = _closest_on_degenerate(p[bad], a[bad], b[bad], c[bad])
    return out


def _closest_on_segment(p, a, b):
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    t = np.divide(np.einsum("ij,ij->i", p - a, ab), denom, out=np.zeros(len(p)), where=denom > 0)
    return a + ab * np.clip(t, 0.0, 1.0)[:, None]


def _closest_on_degenerate(p, a, b, c):
    cands = np.stack([_closest_on_segment(p, a, b),
                      _closest_on_segment(p, b, c),
                      _closest_on_segment(p, c, a)], axis=1)
    d = np.sum((cands - p[:, None]) ** 2, axis=2)
    return cands[np.arange(len(p)), np.argmin(d, axis=1)]


@dataclass(frozen=True)
class SurfaceHit:
    points: np.ndarray
    face_ids: np.ndarray
    distances: np.ndarray


class SurfaceIndex:
    """Exact closest-point queries against the faces of a mesh."""

    def __init__(self, mesh: Mesh):
        if mesh.n_faces == 0:
            raise EmptyIndexError("cannot index a mesh without faces")
        self.mesh = mesh
        tri = mesh.vertices[mesh.faces]
        self._tri = tri
        self.centroids = tri.mean(axis=1)
        self.radii = np.max(np.linalg.norm(tri - self.centroids[:, None], axis=2), axis=1)
        self.max_radius = float(self.radii.max())
        self.tree = cKDTree(self.centroids, balanced_tree=True)

    def _exact(self, q, faces):
        t = self._tri[faces]
        cp = closest_point_on_triangles(q, t[:, 0], t[:, 1], t[:, 2])
        return cp, np.sum((cp - q) ** 2, axis=1)

    def query(self, points, chunk: int = 65536) -> SurfaceHit:
        """Closest surface point, face and distance for every query point.

        Among faces at exactly equal distance the lowest face index wins.
        """
        q_all = _as_points(points)
        n = len(q_all)
        out_p = np.empty((n, 3))
        out_f = np.empty(n, dtype=np.int64)
        out_d = np.empty(n)
        k0 = min(4, len(self.centroids))
        for s in range(0, n, chunk):
            q = q_all[s:s + chunk]
            _, seed = self.tree.query(q, k=k0, workers=get_threads())
            seed = np.asarray(seed).reshape(len(q), k0)
            rows = np.repeat(np.arange(len(q)), k0)
            _, d2 = self._exact(q[rows], seed.ravel())
            upper = np.sqrt(d2.reshape(len(q), k0).min(axis=1))
            # any face that can beat the upper bound has its centroid within
            # upper + radius of the query
            lists = self.tree.query_ball_point(
                q, upper * (1 + 1e-12) + self.max_radius + 1e-12, workers=get_threads()
            )
            counts = np.fromiter((len(c) for c in lists), dtype=np.int64, count=len(q))
            cand = np.fromiter(
                (i for c in lists for i in c), dtype=np.int64, count=int(counts.sum())
            )
            rows = np.repeat(np.arange(len(q)), counts)
            lower = np.linalg.norm(q[rows] - self.centroids[cand], axis=1) - self.radii[cand]
            keep = lower <= upper[rows] * (1 + 1e-12) + 1e-12
            rows, cand = rows[keep], cand[keep]
            cp, d2 = self._exact(q[rows], cand)
            order = np.lexsort((cand, d2, rows))
            rows_s = rows[order]
            first = np.r_[True, rows_s[1:] != rows_s[:-1]]
            pick = order[first]
            out_p[s:s + chunk] = cp[pick]
            out_f[s:s + chunk] = cand[pick]
            out_d[s:s + chunk] = np.sqrt(d2[pick])
        return SurfaceHit(out_p, out_f, out_d)

    def distance(self, points) -> np.ndarray:
        return self.query(points).distances


def build_surface_index(mesh: Mesh) -> SurfaceIndex:
    return SurfaceIndex(mesh)


def closest_point_on_surface(index: SurfaceIndex, query):
    """``(closest point, face index, distance)`` for a single query point."""
    hit = index.query(_as_points(query)[:1])
    return hit.points[0], int(hit.face_ids[0]), float(hit.distances[0])


# --- triangle / triangle ------------------------------------------------------

def _orient2(a, b, c):
    return (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])


def _segments_cross_2d(p, q, a, b, eps):
    o1 = _orient2(a, b, p)
    o2 = _orient2(a, b, q)
    o3 = _orient2(p, q, a)
    o4 = _orient2(p, q, b)
    straddle_1 = ((o1 <= eps) & (o2 >= -eps)) | ((o1 >= -eps) & (o2 <= eps))
    straddle_2 = ((o3 <= eps) & (o4 >= -eps)) | ((o3 >= -eps) & (o4 <= eps))
    lo1, hi1 = np.minimum(p, q), np.maximum(p, q)
    lo2, hi2 = np.minimum(a, b), np.maximum(a, b)
    boxes = np.all((lo1 <= hi2 + eps) & (lo2 <= hi1 + eps), axis=1)
    return straddle_1 & straddle_2 & boxes


def _inside_2d(x, a, b, c, eps):
    o1 = _orient2(a, b, x)
    o2 = _orient2(b, c, x)
    o3 = _orient2(c, a, x)
    pos = (o1 >= -eps) & (o2 >= -eps) & (o3 >= -eps)
    neg = (o1 <= eps) & (o2 <= eps) & (o3 <= eps)
    return pos | neg


def segment_hits_triangle(p, q, a, b, c, eps: float = GEO_EPS):
    """Vectorised segment/triangle intersection test, contacts within eps count."""
    n = np.cross(b - a, c - a)
    nn = np.linalg.norm(n, axis=1)
    safe = np.where(nn > 0, nn, 1.0)
    n = n / safe[:, None]
    sp = np.einsum("ij,ij->i", p - a, n)
    sq = np.einsum("ij,ij->i", q - a, n)
    same_side = ((sp > eps) & (sq > eps)) | ((sp < -eps) & (sq < -eps))
    in_plane = (np.abs(sp) <= eps) & (np.abs(sq) <= eps)
    result = np.zeros(len(p), dtype=bool)

    cross = ~same_side & ~in_plane & (nn > 0)
    if cross.any():
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.clip(sp[cross] / (sp[cross] - sq[cross]), 0.0, 1.0)
        x = p[cross] + (q[cross] - p[cross]) * t[:, None]
        nc = n[cross]
        ac, bc, cc = a[cross], b[cross], c[cross]
        ok = np.ones(len(x), dtype=bool)
        for u, v in ((ac, bc), (bc, cc), (cc, ac)):
            e = v - u
            side = np.einsum("ij,ij->i", np.cross(e, x - u), nc)
            ok &= side >= -eps * np.maximum(np.linalg.norm(e, axis=1), 1.0)
        result[cross] = ok

    flat = in_plane & (nn > 0)
    if flat.any():
        axis = np.argmax(np.abs(n[flat]), axis=1)
        keep = np.array([[1, 2], [0, 2], [0, 1]])[axis]
        rows = np.arange(len(axis))[:, None]

        def proj(z):
            return z[flat][rows, keep]

        p2, q2, a2, b2, c2 = map(proj, (p, q, a, b, c))
        hit = _inside_2d(p2, a2, b2, c2, eps) | _inside_2d(q2, a2, b2, c2, eps)
        for u, v in ((a2, b2), (b2, c2), (c2, a2)):
            hit |= _segments_cross_2d(p2, q2, u, v, eps)
        result[flat] = hit
    return result


def triangles_intersect(t1, t2, eps: float = GEO_EPS):
    """Pairwise intersection test for triangle arrays of shape (N, 3, 3).

    Two triangles meet iff some edge of one meets the other triangle.
    """
    t1 = np.asarray(t1, dtype=np.float64)
    t2 = np.asarray(t2, dtype=np.float64)
    hit = np.zeros(len(t1), dtype=bool)
    for src, dst in ((t1, t2), (t2, t1)):
        for i, j in ((0, 1), (1, 2), (2, 0)):
            todo = ~hit
            if not todo.any():
                break
            hit[todo] = segment_hits_triangle(
                src[todo, i], src[todo, j], dst[todo, 0], dst[todo, 1], dst[todo, 2], eps
            )
    return hit


def candidate_face_pairs(mesh: Mesh, eps: float = GEO_EPS) -> np.ndarray:
    """Face pairs with overlapping bounding boxes that share no vertex."""
    if mesh.n_faces < 2:
        return np.empty((0, 2), dtype=np.int64)
    tri = mesh.vertices[mesh.faces]
    cen = tri.mean(axis=1)
    rad = np.max(np.linalg.norm(tri - cen[:, None], axis=2), axis=1)
    tree = cKDTree(cen)
    pairs = tree.query_pairs(2 * rad.max() + eps, output_type="ndarray").astype(np.int64)
    if len(pairs) == 0:
        return pairs.reshape(0, 2)
    lo, hi = tri.min(axis=1), tri.max(axis=1)
    i, j = pairs[:, 0], pairs[:, 1]
    overlap = np.all((lo[i] <= hi[j] + eps) & (lo[j] <= hi[i] + eps), axis=1)
    pairs = pairs[overlap]
    f = mesh.faces
    fi, fj = f[pairs[:, 0]], f[pairs[:, 1]]
    shared = np.any(fi[:, :, None] == fj[:, None, :], axis=(1, 2))
    pairs = pairs[~shared]
    pairs.sort(axis=1)
    return pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]


def self_intersections(mesh: Mesh, eps: float = GEO_EPS) -> np.ndarray:
    """Intersecting face pairs ``(f1, f2)``, ``f1 < f2``, that share no vertex.

    Rows are sorted lexicographically.
    """
    pairs = candidate_face_pairs(mesh, eps)
    if len(pairs) == 0:
        return pairs
    tri = mesh.vertices[mesh.faces]
    hits = np.zeros(len(pairs), dtype=bool)
    step = 200_000
    for s in range(0, len(pairs), step):
        p = pairs[s:s + step]
        hits[s:s + step] = triangles_intersect(tri[p[:, 0]], tri[p[:, 1]], eps)
    return pairs[hits]
