"""Mesh losses with analytic gradients.

Every loss returns ``(value, gradient)``. Nearest-neighbour assignments and
ground-truth curvature lookups are held fixed when differentiating, so
gradients are exact wherever the assignment is locally constant (and a valid
subgradient at ties, which resolve to the lowest point index).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .geometry import SampledCloud, cloud_vjp, face_normal_vjp, _unit_vjp
from .mesh import AdjacencyInfo, Mesh
from .spatial import PointIndex

TERMS = ("chamfer", "inter_nc", "laplacian", "intra_nc", "edge")


class LossInputError(ValueError):
    pass


@dataclass(frozen=True)
class Correspondence:
    """Nearest pred point for every gt point and nearest gt point for every pred point."""

    pred_for_gt: np.ndarray
    gt_for_pred: np.ndarray


def correspond(pred: SampledCloud, gt: SampledCloud) -> Correspondence:
    if len(pred) == 0 or len(gt) == 0:
        raise LossInputError("point clouds must be non-empty")
    pred_for_gt, _ = PointIndex(pred.points).nearest(gt.points)
    # the target cloud is reused across iterations, so keep its tree
    gt_for_pred, _ = gt.point_index.nearest(pred.points)
    return Correspondence(pred_for_gt, gt_for_pred)


def _chamfer(pred, gt, kappa, corr):
    corr = corr or correspond(pred, gt)
    m, n = len(gt), len(pred)
    d_gt = gt.points - pred.points[corr.pred_for_gt]        # u - v~
    d_pred = pred.points - gt.points[corr.gt_for_pred]      # v - u~
    k_pred = kappa[corr.gt_for_pred]
    value = (np.sum(kappa * np.sum(d_gt ** 2, axis=1)) / m
             + np.sum(k_pred * np.sum(d_pred ** 2, axis=1)) / n)
    grad = (2.0 / n) * k_pred[:, None] * d_pred
    np.add.at(grad, corr.pred_for_gt, (-2.0 / m) * kappa[:, None] * d_gt)
    return float(value), grad


def chamfer_curvature(pred: SampledCloud, gt: SampledCloud, corr: Optional[Correspondence] = None):
    """Curvature-weighted Chamfer distance and its gradient w.r.t. pred points.

    value = mean_u κ(u)·min_v |u - v|² + mean_v κ(ũ)·min_u |v - u|², with ũ
    the gt point nearest to v. Weights come from ``gt.curvature_weight`` only.
    """
    if gt.curvature_weight is None:
        raise LossInputError("ground-truth cloud carries no curvature weights")
    return _chamfer(pred, gt, np.asarray(gt.curvature_weight, dtype=np.float64), corr)


def chamfer_classic(pred: SampledCloud, gt: SampledCloud, corr: Optional[Correspondence] = None):
    """Plain symmetric Chamfer distance (all weights one)."""
    return _chamfer(pred, gt, np.ones(len(gt)), corr)


def inter_normal_consistency(pred: SampledCloud, gt: SampledCloud,
                             corr: Optional[Correspondence] = None):
    """Cosine distance between normals of nearest-neighbour pairs, both directions.

    Returns ``(value, grad)`` where ``grad`` is taken with respect to the unit
    pred normals; pass it to :func:`cloud_vjp` to reach the vertices. Pairs
    involving a zero normal are skipped (they contribute nothing).
    """
    corr = corr or correspond(pred, gt)
    m, n = len(gt), len(pred)
    pn, gn = pred.normals, gt.normals
    ok_p = np.any(pn != 0, axis=1)
    ok_g = np.any(gn != 0, axis=1)
    a = corr.pred_for_gt
    use_1 = ok_g & ok_p[a]
    b = corr.gt_for_pred
    use_2 = ok_p & ok_g[b]
    cos_1 = np.sum(gn * pn[a], axis=1)
    cos_2 = np.sum(pn * gn[b], axis=1)
    value = np.sum(np.where(use_1, 1.0 - cos_1, 0.0)) / m + np.sum(np.where(use_2, 1.0 - cos_2, 0.0)) / n
    grad = np.where(use_2[:, None], -gn[b] / n, 0.0)
    np.add.at(grad, a[use_1], -gn[use_1] / m)
    return float(value), grad


def _face_cross(mesh: Mesh):
    x, f = mesh.vertices, mesh.faces
    return np.cross(x[f[:, 1]] - x[f[:, 0]], x[f[:, 2]] - x[f[:, 0]])


def intra_normal_consistency(mesh: Mesh, reduction: str = "sum"):
    """Σ over edge-adjacent face pairs of 1 - cos(n(f1), n(f2)).

    ``reduction="mean"`` divides by the number of adjacent pairs instead,
    which makes the value independent of mesh resolution.
    Pairs touching a zero-area face are skipped. Returns
    ``(value, grad_vertices)``; the number of skipped pairs is available via
    :func:`intra_normal_consistency_skips`.
    """
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    pairs = mesh.face_pairs
    cross = _face_cross(mesh)
    norm = np.linalg.norm(cross, axis=1)
    unit = np.divide(cross, norm[:, None], out=np.zeros_like(cross), where=norm[:, None] > 0)
    if len(pairs) == 0:
        return 0.0, np.zeros_like(mesh.vertices)
    i, j = pairs[:, 0], pairs[:, 1]
    ok = (norm[i] > 0) & (norm[j] > 0)
    i, j = i[ok], j[ok]
    cos = np.sum(unit[i] * unit[j], axis=1)
    scale = 1.0 / len(pairs) if reduction == "mean" else 1.0
    value = float(np.sum(1.0 - cos)) * scale
    g_unit = np.zeros_like(cross)
    np.add.at(g_unit, i, -scale * unit[j])
    np.add.at(g_unit, j, -scale * unit[i])
    return value, face_normal_vjp(mesh, _unit_vjp(cross, g_unit))


def intra_normal_consistency_skips(mesh: Mesh) -> int:
    pairs = mesh.face_pairs
    if len(pairs) == 0:
        return 0
    norm = np.linalg.norm(_face_cross(mesh), axis=1)
    return int(np.sum((norm[pairs[:, 0]] == 0) | (norm[pairs[:, 1]] == 0)))


def laplacian_displacement(adj: AdjacencyInfo, disp):
    """Mean norm of the uniform Laplacian of a displacement field.

    The operator D⁻¹A - I is a constant; the gradient is Δᵀ applied to the
    unit residual rows, divided by the vertex count. Rows with zero residual
    contribute a zero subgradient.
    """
    d = np.asarray(disp, dtype=np.float64)
    if d.shape != (adj.n_vertices, 3):
        raise LossInputError(
            f"displacement shape {d.shape} does not match {adj.n_vertices} vertices"
        )
    nv = adj.n_vertices
    r = adj.laplacian @ d
    norm = np.linalg.norm(r, axis=1)
    value = float(np.sum(norm) / nv)
    unit = np.divide(r, norm[:, None], out=np.zeros_like(r), where=norm[:, None] > 0)
    grad = (adj.laplacian.T @ unit) / nv
    return value, grad


def laplacian_absolute(adj: AdjacencyInfo, vertices):
    """Laplacian loss applied to vertex positions instead of displacements."""
    return laplacian_displacement(adj, vertices)


def edge_loss(mesh: Mesh):
    """Mean squared edge length and its gradient."""
    e = mesh.adjacency.edges
    if len(e) == 0:
        raise LossInputError("mesh has no edges")
    x = mesh.vertices
    d = x[e[:, 0]] - x[e[:, 1]]
    value = float(np.sum(d ** 2) / len(e))
    grad = np.zeros_like(x)
    g = (2.0 / len(e)) * d
    np.add.at(grad, e[:, 0], g)
    np.add.at(grad, e[:, 1], -g)
    return value, grad


# --- weights and composition ----------------------------------------------------

@dataclass(frozen=True)
class ClassWeights:
    chamfer: float = 1.0
    inter_nc: float = 0.0
    laplacian: float = 0.0
    intra_nc: float = 0.0
    edge: float = 0.0

    def __post_init__(self):
        for name in TERMS:
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"weight {name} must be a finite non-negative number, got {v}")

    def as_tuple(self):
        return tuple(getattr(self, t) for t in TERMS)


# tuned per-surface weights (white matter / pial)
WM_WEIGHTS = ClassWeights(chamfer=1.0, inter_nc=0.01, laplacian=0.1, intra_nc=0.001, edge=5.0)
PIAL_WEIGHTS = ClassWeights(chamfer=1.0, inter_nc=0.0125, laplacian=0.25, intra_nc=0.00225, edge=5.0)


@dataclass(frozen=True)
class LossWeights:
    classes: Dict[str, ClassWeights] = field(default_factory=dict)

    def __getitem__(self, name) -> ClassWeights:
        try:
            return self.classes[name]
        except KeyError:
            raise KeyError(f"no loss weights for surface class {name!r}") from None

    def __contains__(self, name):
        return name in self.classes

    @classmethod
    def default(cls) -> "LossWeights":
        return cls({"wm": WM_WEIGHTS, "pial": PIAL_WEIGHTS})

    @classmethod
    def from_dict(cls, data) -> "LossWeights":
        if not isinstance(data, dict) or not isinstance(data.get("classes"), dict):
            raise ValueError('weights JSON needs an object under "classes"')
        out = {}
        for name, row in data["classes"].items():
            if not isinstance(row, dict):
                raise ValueError(f"weights for class {name!r} must be an object")
            unknown = set(row) - set(TERMS)
            missing = set(TERMS) - set(row)
            if unknown or missing:
                raise ValueError(
                    f"class {name!r}: unknown keys {sorted(unknown)}, missing keys {sorted(missing)}"
                )
            for t in TERMS:
                if isinstance(row[t], bool) or not isinstance(row[t], (int, float)):
                    raise ValueError(f"class {name!r}: {t} must be a number")
            out[name] = ClassWeights(**{t: float(row[t]) for t in TERMS})
        return cls(out)

    def to_dict(self):
        return {"classes": {k: asdict(v) for k, v in self.classes.items()}}

    @classmethod
    def load(cls, path) -> "LossWeights":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass(frozen=True)
class TermValues:
    chamfer: float
    inter_nc: float
    laplacian: float
    intra_nc: float
    edge: float
    weighted_total: float


@dataclass(frozen=True)
class LossBreakdown:
    """Per (stage, class) loss terms; ``total`` sums the weighted totals."""

    terms: Dict[Tuple[int, str], TermValues]

    @property
    def total(self) -> float:
        return float(sum(t.weighted_total for t in self.terms.values()))


@dataclass(frozen=True, eq=False)
class StageInput:
    """Everything needed to score one deformation stage of one surface class.

    ``mesh`` is the deformed mesh (previous-stage vertices plus
    ``displacement``); ``adjacency`` is the previous-stage adjacency used by
    the displacement Laplacian.
    """

    stage: int
    cls: str
    mesh: Mesh
    adjacency: AdjacencyInfo
    displacement: np.ndarray
    pred_cloud: SampledCloud
    gt_cloud: SampledCloud


def stage_loss(item: StageInput, w: ClassWeights, chamfer: str = "curvature",
               laplacian: str = "displacement", need_grad: bool = True,
               intra_reduction: str = "sum"):
    """Weighted loss of one stage/class and its gradient w.r.t. the displacement."""
    mesh = item.mesh
    corr = correspond(item.pred_cloud, item.gt_cloud)
    if chamfer == "curvature":
        v_ch, g_ch = chamfer_curvature(item.pred_cloud, item.gt_cloud, corr)
    elif chamfer == "classic":
        v_ch, g_ch = chamfer_classic(item.pred_cloud, item.gt_cloud, corr)
    else:
        raise ValueError(f"unknown chamfer variant {chamfer!r}")
    v_nc, g_nc = inter_normal_consistency(item.pred_cloud, item.gt_cloud, corr)
    if laplacian == "displacement":
        v_lap, g_lap = laplacian_displacement(item.adjacency, item.displacement)
    elif laplacian == "absolute":
        v_lap, g_lap = laplacian_absolute(item.adjacency, mesh.vertices)
    else:
        raise ValueError(f"unknown laplacian variant {laplacian!r}")
    v_in, g_in = intra_normal_consistency(mesh, intra_reduction)
    v_ed, g_ed = edge_loss(mesh)
    values = (v_ch, v_nc, v_lap, v_in, v_ed)
    lam = w.as_tuple()
    total = float(sum(l * v for l, v in zip(lam, values)))
    terms = TermValues(*values, weighted_total=total)
    if not need_grad:
        return terms, None
    grad = cloud_vjp(mesh, item.pred_cloud, lam[0] * g_ch, lam[1] * g_nc)
    grad += lam[2] * g_lap + lam[3] * g_in + lam[4] * g_ed
    return terms, grad


def total_mesh_loss(stages, weights: LossWeights, chamfer: str = "curvature",
                    laplacian: str = "displacement", need_grad: bool = True,
                    intra_reduction: str = "sum"):
    """Weighted sum of all mesh terms over stages and surface classes.

    Returns ``(LossBreakdown, grads)`` with ``grads[(stage, cls)]`` the
    gradient with respect to that stage's displacement field.
    """
    terms, grads = {}, {}
    for item in stages:
        w = weights[item.cls]
        t, g = stage_loss(item, w, chamfer, laplacian, need_grad, intra_reduction)
        key = (item.stage, item.cls)
        if key in terms:
            raise LossInputError(f"duplicate stage/class entry {key}")
        terms[key] = t
        grads[key] = g
    return LossBreakdown(terms), grads
