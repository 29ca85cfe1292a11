"""Template deformation by gradient descent on displacement fields.

The template is deformed in a fixed number of stages. Each stage starts
from the previous stage's mesh and optimises a fresh displacement field
against the total mesh loss; faces never change, so the template's topology
is kept. The graph convolution used by mesh-deformation networks is also
provided as a forward/backward pair.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .geometry import (KAPPA_MAX, SampledCloud, curvature_weight, mean_curvature,
                       reposition, resample_as_vertices, sample_surface)
from .losses import LossWeights, StageInput, TERMS, stage_loss
from .mesh import AdjacencyInfo, Mesh, MeshError, TopologyReport, topology_report

log = logging.getLogger(__name__)


class FitError(RuntimeError):
    pass


def apply_displacement(mesh: Mesh, disp) -> Mesh:
    d = np.asarray(disp, dtype=np.float64)
    if d.shape != mesh.vertices.shape:
        raise ValueError(f"displacement shape {d.shape} does not match {mesh.vertices.shape}")
    return mesh.with_vertices(mesh.vertices + d)


# --- graph convolution -----------------------------------------------------------

@dataclass(frozen=True)
class GraphConvParams:
    w0: np.ndarray
    w1: np.ndarray
    b0: np.ndarray
    b1: np.ndarray

    def __post_init__(self):
        w0, w1 = np.asarray(self.w0, float), np.asarray(self.w1, float)
        b0, b1 = np.asarray(self.b0, float), np.asarray(self.b1, float)
        if w0.ndim != 2 or w0.shape != w1.shape:
            raise ValueError("w0 and w1 must be matrices of equal shape (d_out, d_in)")
        if b0.shape != (w0.shape[0],) or b1.shape != (w0.shape[0],):
            raise ValueError("biases must have length d_out")
        for a in (w0, w1, b0, b1):
            if not np.all(np.isfinite(a)):
                raise ValueError("parameters must be finite")
        object.__setattr__(self, "w0", w0)
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "b0", b0)
        object.__setattr__(self, "b1", b1)

    @classmethod
    def random(cls, d_in, d_out, seed=0, scale=1.0):
        rng = np.random.default_rng(seed)
        return cls(scale * rng.standard_normal((d_out, d_in)),
                   scale * rng.standard_normal((d_out, d_in)),
                   scale * rng.standard_normal(d_out),
                   scale * rng.standard_normal(d_out))


def _check_features(features, adj, params):
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] != adj.n_vertices:
        raise ValueError(f"features must have shape ({adj.n_vertices}, d_in), got {f.shape}")
    if f.shape[1] != params.w0.shape[1]:
        raise ValueError(f"feature width {f.shape[1]} does not match d_in={params.w0.shape[1]}")
    return f


def graph_conv_forward(features, adj: AdjacencyInfo, params: GraphConvParams) -> np.ndarray:
    """f'_i = (W0 f_i + b0 + Σ_{j∈N(i)} (W1 f_j + b1)) / (1 + |N(i)|)."""
    f = _check_features(features, adj, params)
    deg = adj.degree.astype(np.float64)[:, None]
    agg = adj.matrix @ f
    out = f @ params.w0.T + params.b0 + agg @ params.w1.T + deg * params.b1
    return out / (1.0 + deg)


@dataclass(frozen=True)
class GraphConvGrads:
    features: np.ndarray
    w0: np.ndarray
    w1: np.ndarray
    b0: np.ndarray
    b1: np.ndarray


def graph_conv_vjp(upstream, features, adj: AdjacencyInfo, params: GraphConvParams) -> GraphConvGrads:
    """Vector-Jacobian product of :func:`graph_conv_forward`."""
    f = _check_features(features, adj, params)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != (f.shape[0], params.w0.shape[0]):
        raise ValueError(f"upstream must have shape ({f.shape[0]}, {params.w0.shape[0]})")
    deg = adj.degree.astype(np.float64)[:, None]
    h = g / (1.0 + deg)
    agg = adj.matrix @ f
    return GraphConvGrads(
        features=h @ params.w0 + (adj.matrix.T @ h) @ params.w1,
        w0=h.T @ f,
        w1=h.T @ agg,
        b0=h.sum(axis=0),
        b1=(deg * h).sum(axis=0),
    )


# --- step rules --------------------------------------------------------------------

class FixedRateStep:
    """Plain gradient descent: x' = x - rate * g."""

    def __init__(self, rate):
        self.rate = rate

    def direction(self, grad):
        return grad

    def commit(self):
        pass


class AdaptiveStep:
    """Per-coordinate scaling by bias-corrected gradient EMAs (Adam-style)."""

    def __init__(self, rate, beta1=0.9, beta2=0.999, eps=1e-12):
        self.rate = rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = self.v = None
        self.t = 0
        self._pending = None

    def direction(self, grad):
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        t = self.t + 1
        m = self.beta1 * self.m + (1 - self.beta1) * grad
        v = self.beta2 * self.v + (1 - self.beta2) * grad ** 2
        self._pending = (t, m, v)
        m_hat = m / (1 - self.beta1 ** t)
        v_hat = v / (1 - self.beta2 ** t)
        return m_hat / (np.sqrt(v_hat) + self.eps)

    def commit(self):
        self.t, self.m, self.v = self._pending


# --- configuration and results --------------------------------------------------------

@dataclass(frozen=True)
class DeformConfig:
    """Settings for :func:`fit`.

    ``rate`` is the initial step size in mesh units (adaptive rule) or the
    gradient multiplier (fixed rule). After a rejected step the rate is
    halved, at most ``max_halvings`` times per iteration; accepted steps
    multiply it by ``rate_growth`` up to the initial rate. ``resample`` is
    ``"stage"`` (one pred sampling per stage and class) or ``"iteration"``.
    ``intra_reduction`` selects a sum or a per-pair mean for the intra-mesh
    normal-consistency term.
    """

    stages: int = 4
    iterations: int = 250
    step_rule: str = "adaptive"
    rate: float = 0.005
    rate_growth: float = 1.0
    max_halvings: int = 20
    tol: float = 0.0
    resample: str = "stage"
    reset_state_per_stage: bool = True
    kappa_max: float = KAPPA_MAX
    chamfer: str = "curvature"
    laplacian: str = "displacement"
    pred_sampling: str = "surface"
    intra_reduction: str = "sum"
    weights: LossWeights = field(default_factory=LossWeights.default)

    def __post_init__(self):
        if self.stages < 1 or self.iterations < 1:
            raise ValueError("stages and iterations must be >= 1")
        if not self.rate > 0:
            raise ValueError("rate must be positive")
        if self.rate_growth < 1:
            raise ValueError("rate_growth must be >= 1")
        if self.step_rule not in ("adaptive", "fixed"):
            raise ValueError(f"unknown step rule {self.step_rule!r}")
        if self.resample not in ("stage", "iteration"):
            raise ValueError(f"unknown resample policy {self.resample!r}")
        if self.chamfer not in ("curvature", "classic"):
            raise ValueError(f"unknown chamfer variant {self.chamfer!r}")
        if self.laplacian not in ("displacement", "absolute"):
            raise ValueError(f"unknown laplacian variant {self.laplacian!r}")
        if self.pred_sampling not in ("surface", "vertices"):
            raise ValueError(f"unknown pred sampling {self.pred_sampling!r}")
        if self.intra_reduction not in ("sum", "mean"):
            raise ValueError(f"unknown intra_reduction {self.intra_reduction!r}")
        if self.tol < 0 or self.max_halvings < 0:
            raise ValueError("tol and max_halvings must be non-negative")
        if self.kappa_max < 1:
            raise ValueError("kappa_max must be >= 1")

    def to_dict(self):
        d = {k: v for k, v in asdict(self).items() if k != "weights"}
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        unknown = set(data) - {f.name for f in cls.__dataclass_fields__.values()}
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        if "weights" in data:
            data["weights"] = LossWeights.from_dict(data["weights"])
        return cls(**data)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TraceRow:
    stage: int
    iteration: int
    cls: str
    chamfer: float
    inter_nc: float
    laplacian: float
    intra_nc: float
    edge: float
    total: float
    step_rate: float
    accepted: bool


TRACE_COLUMNS = ("stage", "iteration", "class") + TERMS + ("total", "step_rate", "accepted")


@dataclass
class FitResult:
    """Per-stage meshes, the optimisation trace and final topology per class."""

    stage_meshes: List[Dict[str, Mesh]]
    trace: List[TraceRow]
    topology: Dict[str, TopologyReport]
    displacements: List[Dict[str, np.ndarray]] = field(default_factory=list)

    @property
    def final(self) -> Dict[str, Mesh]:
        return self.stage_meshes[-1]

    def trace_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in self.trace:
            w.writerow([r.stage, r.iteration, r.cls, repr(r.chamfer), repr(r.inter_nc),
                        repr(r.laplacian), repr(r.intra_nc), repr(r.edge), repr(r.total),
                        repr(r.step_rate), int(r.accepted)])
        return out.getvalue()

    def stage_totals(self, stage: int, cls: str) -> np.ndarray:
        return np.array([r.total for r in self.trace if r.stage == stage and r.cls == cls])


def derived_seed(*keys) -> int:
    """Stable 63-bit seed from a tuple of non-negative integers."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


def ground_truth_clouds(targets: Dict[str, Mesh], kappa_max: float, seed: int) -> Dict[str, SampledCloud]:
    """Vertex-resolution clouds with curvature weights, cut to the smallest size."""
    clouds = {}
    for name in sorted(targets):
        mesh = targets[name]
        kappa = curvature_weight(mean_curvature(mesh), kappa_max)
        clouds[name] = resample_as_vertices(mesh, kappa)
    n_min = min(len(c) for c in clouds.values())
    for k, name in enumerate(sorted(clouds)):
        c = clouds[name]
        if len(c) > n_min:
            rng = np.random.Generator(np.random.Philox(derived_seed(seed, 0, k)))
            keep = np.sort(rng.choice(len(c), size=n_min, replace=False))
            clouds[name] = c.subset(keep)
    return clouds


class _ClassState:
    def __init__(self, name, mesh, gt, rule):
        self.name = name
        self.prev = mesh
        self.disp = np.zeros_like(mesh.vertices)
        self.gt = gt
        self.rule = rule
        self.params = None      # fixed sampling parameters for the pred cloud
        self.done = False


def _pred_cloud(state, mesh, config, seed, stage, it, class_idx):
    if config.pred_sampling == "vertices":
        return resample_as_vertices(mesh)
    if config.resample == "iteration" or state.params is None:
        key = (seed, stage, it if config.resample == "iteration" else 0, class_idx)
        state.params = sample_surface(mesh, len(state.gt), derived_seed(*key))
    return reposition(state.params, mesh)


def fit(templates: Dict[str, Mesh], targets: Dict[str, Mesh], config: DeformConfig = DeformConfig(),
        seed: int = 0) -> FitResult:
    """Deform each template towards its target in ``config.stages`` stages.

    Within a stage every candidate step is evaluated on the same pred
    sampling; a step that raises the class loss is rejected and the rate
    halved. The stage ends after ``config.iterations`` iterations, when the
    relative loss change drops below ``tol``, when the gradient vanishes, or
    when no step is accepted after ``max_halvings`` halvings.
    """
    names = sorted(templates)
    if sorted(targets) != names:
        raise ValueError(f"template classes {names} do not match target classes {sorted(targets)}")
    for name in names:
        if name not in config.weights:
            raise ValueError(f"no loss weights for surface class {name!r}")
        templates[name].check_manifold()
    weights = config.weights
    gt = ground_truth_clouds(targets, config.kappa_max, seed)
    states = [_ClassState(n, templates[n], gt[n], None) for n in names]
    stage_meshes, displacements, trace = [], [], []

    for stage in range(1, config.stages + 1):
        for ci, st in enumerate(states):
            st.disp = np.zeros_like(st.prev.vertices)
            st.params = None
            st.done = False
            st.prev.face_pairs, st.prev.edge_faces  # warm caches shared by with_vertices
            if st.rule is None or config.reset_state_per_stage:
                st.rule = (AdaptiveStep(config.rate) if config.step_rule == "adaptive"
                           else FixedRateStep(config.rate))
            st.rule.rate = config.rate if config.reset_state_per_stage else st.rule.rate

        for it in range(config.iterations):
            if all(st.done for st in states):
                break
            for ci, st in enumerate(states):
                if st.done:
                    continue
                w = weights[st.name]
                mesh = st.prev.with_vertices(st.prev.vertices + st.disp)
                item = StageInput(stage, st.name, mesh, st.prev.adjacency, st.disp,
                                  _pred_cloud(st, mesh, config, seed, stage, it, ci), st.gt)
                terms, grad = stage_loss(item, w, config.chamfer, config.laplacian,
                                         intra_reduction=config.intra_reduction)
                if not np.isfinite(terms.weighted_total) or not np.all(np.isfinite(grad)):
                    raise FitError(f"non-finite loss at stage {stage}, iteration {it}, class {st.name}")
                accepted = False
                rate = st.rule.rate
                if np.any(grad != 0):
                    direction = st.rule.direction(grad)
                    for _ in range(config.max_halvings + 1):
                        cand = st.disp - rate * direction
                        cmesh = st.prev.with_vertices(st.prev.vertices + cand)
                        citem = StageInput(stage, st.name, cmesh, st.prev.adjacency, cand,
                                           reposition(item.pred_cloud, cmesh)
                                           if config.pred_sampling == "surface"
                                           else resample_as_vertices(cmesh), st.gt)
                        cterms, _ = stage_loss(citem, w, config.chamfer, config.laplacian,
                                               need_grad=False,
                                               intra_reduction=config.intra_reduction)
                        if cterms.weighted_total <= terms.weighted_total:
                            accepted = True
                            break
                        rate *= 0.5
                trace.append(TraceRow(stage, it, st.name, terms.chamfer, terms.inter_nc,
                                      terms.laplacian, terms.intra_nc, terms.edge,
                                      terms.weighted_total, rate, accepted))
                if not accepted:
                    st.done = True
                    continue
                st.rule.commit()
                st.disp = cand
                st.rule.rate = min(rate * config.rate_growth, config.rate)
                change = terms.weighted_total - cterms.weighted_total
                if config.tol > 0 and change <= config.tol * max(abs(terms.weighted_total), 1e-300):
                    st.done = True

        stage_meshes.append({st.name: st.prev.with_vertices(st.prev.vertices + st.disp)
                             for st in states})
        displacements.append({st.name: st.disp.copy() for st in states})
        for st in states:
            st.prev = stage_meshes[-1][st.name]
        log.debug("stage %d done", stage)

    topo = {n: topology_report(stage_meshes[-1][n]) for n in names}
    return FitResult(stage_meshes, trace, topo, displacements)
