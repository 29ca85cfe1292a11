import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from cortexgeo.cli import main
from cortexgeo.io import load_mesh, write_mesh
from cortexgeo.losses import LossWeights, WM_WEIGHTS
from cortexgeo.template import icosahedron, make_icosphere

from oracles import bumpy_sphere


@pytest.fixture
def meshes(tmp_path):
    paths = {
        "ico": tmp_path / "icosahedron.obj",
        "sphere": tmp_path / "sphere.obj",
        "big": tmp_path / "big.off",
        "bumpy": tmp_path / "bumpy.ply",
    }
    write_mesh(icosahedron(), paths["ico"])
    write_mesh(make_icosphere(2), paths["sphere"])
    write_mesh(make_icosphere(2, (1.5, 1.5, 1.5)), paths["big"])
    write_mesh(bumpy_sphere(3), paths["bumpy"])
    return paths


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_topo_on_icosahedron(meshes, capsys):
    code, out, _ = run(["topo", "--mesh", meshes["ico"]], capsys)
    assert code == 0
    assert json.loads(out) == {"V": 12, "E": 30, "F": 20, "chi": 2, "genus": 0, "cc": 1,
                               "self_intersections": 0}


def test_metrics_on_identical_meshes(meshes, tmp_path, capsys):
    out_path = tmp_path / "m.json"
    code, _, _ = run(["metrics", "--pred", meshes["sphere"], "--gt", meshes["sphere"],
                      "--samples", 100000, "--seed", 7, "--out", out_path], capsys)
    assert code == 0
    rep = json.loads(out_path.read_text())
    assert rep["assd"] < 1e-9 and rep["hd"] < 1e-9
    assert rep["seed"] == 7


def test_fit_writes_mesh_and_monotone_trace(meshes, tmp_path, capsys):
    w = tmp_path / "w.json"
    w.write_text(LossWeights({"wm": WM_WEIGHTS}).dumps())
    out, trace = tmp_path / "fit.obj", tmp_path / "t.csv"
    code, stdout, _ = run(["fit", "--template", meshes["sphere"], "--target", meshes["bumpy"],
                           "--weights", w, "--stages", 2, "--iters", 10, "--seed", 1,
                           "--out", out, "--trace", trace], capsys)
    assert code == 0
    assert json.loads(stdout)["topology"]["genus"] == 0
    fitted = load_mesh(out)
    np.testing.assert_array_equal(fitted.faces, make_icosphere(2).faces)
    rows = list(csv.DictReader(trace.open()))
    for stage in ("1", "2"):
        totals = [float(r["total"]) for r in rows if r["stage"] == stage]
        assert np.all(np.diff(totals) <= 0)


def test_thickness_and_csv(meshes, tmp_path, capsys):
    table = tmp_path / "t.csv"
    code, out, _ = run(["thickness", "--white", meshes["sphere"], "--pial", meshes["big"],
                        "--csv", table], capsys)
    assert code == 0
    assert json.loads(out)["median"] == pytest.approx(0.5, rel=0.05)
    assert len(table.read_text().splitlines()) == 163


def test_smooth_subdivide_curvature_sample(meshes, tmp_path, capsys):
    code, out, _ = run(["smooth", "--mesh", meshes["bumpy"], "--max-iters", 5,
                        "--out", tmp_path / "s.obj"], capsys)
    assert code == 0 and json.loads(out)["iterations"] == 5
    code, out, _ = run(["subdivide", "--mesh", meshes["ico"], "--levels", 1,
                        "--out", tmp_path / "d.obj"], capsys)
    assert code == 0 and json.loads(out)["V"] == 42
    code, out, _ = run(["curvature", "--mesh", meshes["sphere"]], capsys)
    assert code == 0 and out.splitlines()[0] == "vertex_id,mean_curvature,kappa"
    code, out, _ = run(["sample", "--mesh", meshes["sphere"], "--samples", 10], capsys)
    assert code == 0 and len(out.splitlines()) == 11


def test_icp_subcommand(meshes, tmp_path, capsys):
    aligned = tmp_path / "a.obj"
    code, out, _ = run(["icp", "--source", meshes["sphere"], "--target", meshes["sphere"],
                        "--aligned", aligned], capsys)
    assert code == 0
    rep = json.loads(out)
    np.testing.assert_allclose(rep["rotation"], np.eye(3), atol=1e-9)
    assert aligned.exists()


@pytest.mark.parametrize("argv", [
    ["bogus"],
    ["topo", "--mesh", "/does/not/exist.obj"],
    ["metrics", "--pred", "x.obj"],
    ["sample", "--mesh", "m.obj", "--samples", "0"],
    ["metrics", "--pred", "{sphere}", "--gt", "{sphere}", "--percentile", "150"],
])
def test_validation_errors_exit_one(argv, meshes, capsys):
    argv = [a.format(sphere=meshes["sphere"]) for a in argv]
    code, _, err = run(argv, capsys)
    assert code == 1
    assert err.count("\n") == 1 and err.startswith("error:")


def test_bad_weights_schema(meshes, tmp_path, capsys):
    w = tmp_path / "w.json"
    w.write_text(json.dumps({"classes": {"wm": {"chamfer": 1}}}))
    code, _, err = run(["fit", "--template", meshes["sphere"], "--target", meshes["bumpy"],
                        "--weights", w, "--out", tmp_path / "f.obj"], capsys)
    assert code == 1 and "missing" in err


def test_numeric_failure_exits_two(tmp_path, capsys):
    huge = tmp_path / "huge.obj"
    m = make_icosphere(1)
    write_mesh(m.with_vertices(m.vertices * 1e154), huge)
    small = tmp_path / "small.obj"
    write_mesh(m, small)
    code, _, err = run(["fit", "--template", huge, "--target", small, "--stages", 1,
                        "--iters", 1, "--out", tmp_path / "f.obj"], capsys)
    assert code == 2 and err.count("\n") == 1


@pytest.mark.parametrize("cmd", [
    ["metrics", "--pred", "{sphere}", "--gt", "{bumpy}", "--samples", "5000", "--out", "{out}"],
    ["sample", "--mesh", "{bumpy}", "--samples", "2000", "--seed", "3", "--out", "{out}"],
    ["thickness", "--white", "{sphere}", "--pial", "{bumpy}", "--out", "{out}"],
])
def test_outputs_are_byte_identical_across_runs_and_threads(cmd, meshes, tmp_path, capsys):
    blobs = []
    for threads in ("1", "8", "1"):
        out = tmp_path / f"out{threads}{len(blobs)}.txt"
        argv = ["--threads", threads] + [a.format(out=out, **meshes) for a in cmd]
        assert run(argv, capsys)[0] == 0
        blobs.append(out.read_bytes())
    assert blobs[0] == blobs[1] == blobs[2]


def test_console_script_entry(meshes):
    proc = subprocess.run([sys.executable, "-m", "cortexgeo.cli", "topo", "--mesh", str(meshes["ico"])],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["genus"] == 0
