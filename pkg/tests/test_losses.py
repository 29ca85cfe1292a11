import json

import numpy as np
import pytest

from cortexgeo.geometry import (cloud_vjp, curvature_weight, mean_curvature, reposition,
                                resample_as_vertices, sample_surface)
from cortexgeo.losses import (ClassWeights, LossInputError, LossWeights, PIAL_WEIGHTS, StageInput,
                              WM_WEIGHTS, chamfer_classic, chamfer_curvature, correspond, edge_loss,
                              inter_normal_consistency, intra_normal_consistency,
                              laplacian_absolute, laplacian_displacement, stage_loss,
                              total_mesh_loss)
from cortexgeo.mesh import Mesh
from cortexgeo.template import icosahedron, make_icosphere

from oracles import (brute_chamfer, brute_edges, brute_inter_nc, dense_laplacian, free_cloud,
                     plane_grid, random_sphere_mesh, unit_rows)


def _random_clouds(seed, n=50, m=60):
    rng = np.random.default_rng(seed)
    pred = free_cloud(rng.standard_normal((n, 3)), unit_rows(rng.standard_normal((n, 3))))
    gt = free_cloud(rng.standard_normal((m, 3)), unit_rows(rng.standard_normal((m, 3))),
                    rng.uniform(1, 5, m))
    return pred, gt


# --- chamfer ------------------------------------------------------------------------

def test_coincident_clouds_give_zero():
    pts = np.random.default_rng(0).standard_normal((30, 3))
    v, g = chamfer_curvature(free_cloud(pts), free_cloud(pts, kappa=np.full(30, 3.0)))
    assert v == 0 and np.all(g == 0)


def test_singleton_value_and_gradient():
    a = np.array([0.0, 0.0, 0.0])
    u = np.array([0.3, 0.4, 0.0])
    v, g = chamfer_curvature(free_cloud(u), free_cloud(a, kappa=[2.0]))
    assert v == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(g[0], 4 * 2 * (u - a), atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_chamfer_matches_pairwise_oracle(seed):
    pred, gt = _random_clouds(seed)
    v, _ = chamfer_curvature(pred, gt)
    assert v == pytest.approx(brute_chamfer(pred.points, gt.points, gt.curvature_weight), abs=1e-12)
    v, _ = chamfer_classic(pred, gt)
    assert v == pytest.approx(brute_chamfer(pred.points, gt.points, np.ones(len(gt))), abs=1e-12)


def test_classic_equals_curvature_with_unit_weights():
    pred, gt = _random_clouds(1)
    ones = gt.with_weights(np.ones(len(gt)))
    a, ga = chamfer_classic(pred, gt)
    b, gb = chamfer_curvature(pred, ones)
    assert abs(a - b) <= 1e-15
    np.testing.assert_allclose(ga, gb, rtol=0, atol=1e-15)


def test_classic_singletons():
    v, _ = chamfer_classic(free_cloud([0, 0, 0.7]), free_cloud([0, 0, 0]))
    assert v == pytest.approx(2 * 0.49)


def test_chamfer_input_errors():
    pred, gt = _random_clouds(2)
    with pytest.raises(LossInputError):
        chamfer_curvature(pred, gt.with_weights(None))
    with pytest.raises(LossInputError):
        chamfer_classic(pred.subset(np.array([], dtype=int)), gt)


# --- normal consistency ---------------------------------------------------------------

def test_inter_nc_identical_and_antiparallel():
    pred, _ = _random_clouds(3)
    assert inter_normal_consistency(pred, pred)[0] == pytest.approx(0, abs=1e-15)
    flipped = free_cloud(pred.points, -pred.normals)
    assert inter_normal_consistency(pred, flipped)[0] == pytest.approx(4.0)


@pytest.mark.parametrize("seed", range(5))
def test_inter_nc_matches_oracle(seed):
    pred, gt = _random_clouds(seed)
    v, _ = inter_normal_consistency(pred, gt)
    ref = brute_inter_nc(pred.points, pred.normals, gt.points, gt.normals)
    assert v == pytest.approx(ref, abs=1e-12)


def test_intra_nc_flat_and_folded():
    assert intra_normal_consistency(plane_grid(6))[0] == pytest.approx(0, abs=1e-14)
    folded = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], [[0, 1, 2], [1, 0, 3]])
    assert intra_normal_consistency(folded)[0] == pytest.approx(1.0)


def test_intra_nc_per_pair_drops_with_refinement():
    per_pair = [intra_normal_consistency(make_icosphere(k), "mean")[0] for k in range(5)]
    assert np.all(np.diff(per_pair) < 0)
    total = intra_normal_consistency(make_icosphere(3))
    assert total[0] == pytest.approx(per_pair[3] * len(make_icosphere(3).face_pairs))


# --- laplacian and edges ------------------------------------------------------------------

def test_laplacian_constant_and_zero_fields():
    adj = make_icosphere(2).adjacency
    v, _ = laplacian_displacement(adj, np.tile([0.3, -1.0, 2.0], (adj.n_vertices, 1)))
    assert v == pytest.approx(0, abs=1e-14)
    v, g = laplacian_displacement(adj, np.zeros((adj.n_vertices, 3)))
    assert v == 0 and np.all(g == 0)


def test_laplacian_of_icosahedron_positions_matches_dense():
    m = icosahedron()
    ref = np.mean(np.linalg.norm(dense_laplacian(12, m.faces) @ m.vertices, axis=1))
    assert laplacian_displacement(m.adjacency, m.vertices)[0] == pytest.approx(ref, abs=1e-14)


@pytest.mark.parametrize("seed", range(3))
def test_laplacian_absolute_matches_dense(seed):
    m = random_sphere_mesh(seed)
    ref = np.mean(np.linalg.norm(dense_laplacian(m.n_vertices, m.faces) @ m.vertices, axis=1))
    v, g = laplacian_absolute(m.adjacency, m.vertices)
    assert v == pytest.approx(ref, abs=1e-13)
    v2, g2 = laplacian_displacement(m.adjacency, m.vertices)
    assert v == v2 and np.array_equal(g, g2)


def test_laplacian_harmonic_grid_interior():
    m = plane_grid(7)
    r = np.linalg.norm(dense_laplacian(49, m.faces) @ m.vertices, axis=1)
    interior = np.array([i for i in range(49) if 0 < i // 7 < 6 and 0 < i % 7 < 6])
    # the diagonal split makes the grid neighbourhood symmetric about each vertex
    assert r[interior].max() < 1e-12


def test_laplacian_shape_mismatch():
    with pytest.raises(LossInputError):
        laplacian_displacement(icosahedron().adjacency, np.zeros((11, 3)))


def test_edge_loss_values():
    unit_tet = Mesh([[0, 0, 0], [1, 0, 0], [0.5, np.sqrt(3) / 2, 0],
                     [0.5, np.sqrt(3) / 6, np.sqrt(2 / 3)]], [[0, 1, 2], [0, 3, 1], [1, 3, 2], [0, 2, 3]])
    assert edge_loss(unit_tet)[0] == pytest.approx(1.0)
    m = random_sphere_mesh(1)
    e = np.array(brute_edges(m.faces))
    ref = np.mean(np.sum((m.vertices[e[:, 0]] - m.vertices[e[:, 1]]) ** 2, axis=1))
    assert edge_loss(m)[0] == pytest.approx(ref, abs=1e-14)
    assert edge_loss(m.with_vertices(3 * m.vertices))[0] == pytest.approx(9 * ref)


# --- rigid invariance ---------------------------------------------------------------------

def _rotation(seed):
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((3, 3)))
    return q * np.sign(np.linalg.det(q))


def test_losses_are_rigidly_invariant():
    pred_mesh, gt_mesh = random_sphere_mesh(5), random_sphere_mesh(6, level=3)
    kappa = curvature_weight(mean_curvature(gt_mesh))
    r, t = _rotation(7), np.array([0.3, -2.0, 1.0])
    move = lambda m: m.with_vertices(m.vertices @ r.T + t)
    pc, gc = sample_surface(pred_mesh, 400, 1), resample_as_vertices(gt_mesh, kappa)
    pc2, gc2 = reposition(pc, move(pred_mesh)), resample_as_vertices(move(gt_mesh), kappa)
    assert chamfer_curvature(pc, gc)[0] == pytest.approx(chamfer_curvature(pc2, gc2)[0], abs=1e-9)
    assert inter_normal_consistency(pc, gc)[0] == pytest.approx(inter_normal_consistency(pc2, gc2)[0], abs=1e-9)
    assert edge_loss(pred_mesh)[0] == pytest.approx(edge_loss(move(pred_mesh))[0], abs=1e-9)
    assert intra_normal_consistency(pred_mesh)[0] == pytest.approx(
        intra_normal_consistency(move(pred_mesh))[0], abs=1e-9)
    lap = lambda m: laplacian_absolute(m.adjacency, m.vertices)[0]
    assert lap(pred_mesh) == pytest.approx(lap(move(pred_mesh)), abs=1e-9)


# --- weights and totals ----------------------------------------------------------------------

def test_weight_rows():
    assert WM_WEIGHTS.as_tuple() == (1.0, 0.01, 0.1, 0.001, 5.0)
    assert PIAL_WEIGHTS.as_tuple() == (1.0, 0.0125, 0.25, 0.00225, 5.0)


def test_weights_json_round_trip(tmp_path):
    w = LossWeights.default()
    p = tmp_path / "w.json"
    p.write_text(w.dumps())
    back = LossWeights.load(p)
    assert back["wm"] == WM_WEIGHTS and back["pial"] == PIAL_WEIGHTS


@pytest.mark.parametrize("bad", [
    {},
    {"classes": {"wm": {"chamfer": 1}}},
    {"classes": {"wm": dict(chamfer=1, inter_nc=0, laplacian=0, intra_nc=0, edge=0, extra=1)}},
    {"classes": {"wm": dict(chamfer=-1, inter_nc=0, laplacian=0, intra_nc=0, edge=0)}},
    {"classes": {"wm": dict(chamfer="1", inter_nc=0, laplacian=0, intra_nc=0, edge=0)}},
])
def test_weights_schema_violations(bad):
    with pytest.raises(ValueError):
        LossWeights.from_dict(json.loads(json.dumps(bad)))


def _stage(seed, cls="wm", stage=1):
    prev = random_sphere_mesh(seed)
    disp = 0.02 * np.random.default_rng(seed).standard_normal(prev.vertices.shape)
    mesh = prev.with_vertices(prev.vertices + disp)
    gt_mesh = make_icosphere(3, (1.1, 0.9, 1.0))
    gt = resample_as_vertices(gt_mesh, curvature_weight(mean_curvature(gt_mesh)))
    return StageInput(stage, cls, mesh, prev.adjacency, disp, sample_surface(mesh, 500, seed), gt)


def test_zero_weights_give_zero_total_and_gradient():
    item = _stage(0)
    w = LossWeights({"wm": ClassWeights(0, 0, 0, 0, 0)})
    br, grads = total_mesh_loss([item], w)
    assert br.total == 0
    assert np.all(grads[(1, "wm")] == 0)


def test_chamfer_only_total_reduces_to_chamfer():
    item = _stage(1)
    br, _ = total_mesh_loss([item], LossWeights({"wm": ClassWeights(1, 0, 0, 0, 0)}))
    assert br.total == chamfer_curvature(item.pred_cloud, item.gt_cloud)[0]


def test_weighted_total_is_the_weighted_sum():
    items = [_stage(2, "wm", 1), _stage(3, "pial", 1), _stage(4, "wm", 2)]
    br, _ = total_mesh_loss(items, LossWeights.default())
    for (s, c), t in br.terms.items():
        lam = LossWeights.default()[c].as_tuple()
        parts = (t.chamfer, t.inter_nc, t.laplacian, t.intra_nc, t.edge)
        assert t.weighted_total == pytest.approx(sum(l * v for l, v in zip(lam, parts)), abs=1e-12)
    assert br.total == pytest.approx(sum(t.weighted_total for t in br.terms.values()), abs=1e-12)
    with pytest.raises(LossInputError):
        total_mesh_loss([items[0], items[0]], LossWeights.default())


def test_stage_gradient_matches_finite_differences():
    from oracles import central_fd, rel_error
    item = _stage(5)
    w = WM_WEIGHTS
    prev_vertices = item.mesh.vertices - item.displacement
    corr = correspond(item.pred_cloud, item.gt_cloud)
    _, grad = stage_loss(item, w)

    def f(d):
        mesh = item.mesh.with_vertices(prev_vertices + d)
        pc = reposition(item.pred_cloud, mesh)
        ch = chamfer_curvature(pc, item.gt_cloud, corr)[0]
        nc = inter_normal_consistency(pc, item.gt_cloud, corr)[0]
        lap = laplacian_displacement(item.adjacency, d)[0]
        return (w.chamfer * ch + w.inter_nc * nc + w.laplacian * lap
                + w.intra_nc * intra_normal_consistency(mesh)[0] + w.edge * edge_loss(mesh)[0])

    assert rel_error(grad, central_fd(f, item.displacement)) < 1e-4
