"""Command-line entry point: ``cortexgeo <subcommand> ...``.

Reports go to JSON (stdout or ``--out``), per-vertex and per-iteration
tables to CSV. Exit codes: 0 ok, 1 invalid input, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import _threads
from .geometry import curvature_csv, mean_curvature, sample_surface
from .io import load_mesh, write_mesh
from .losses import LossWeights
from .mesh import MeshError, subdivide_midpoint, topology_report
from .metrics import compare_surfaces, cortical_thickness, icp_rigid
from .optimizer import DeformConfig, FitError, fit
from .spatial import self_intersections
from .template import SmoothConfig, laplacian_smooth


class CliError(Exception):
    """Bad arguments or unreadable inputs (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _emit(text: str, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _mesh(path):
    p = Path(path)
    if not p.is_file():
        raise CliError(f"no such file: {path}")
    return load_mesh(p)


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def _seed(s):
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError(f"seed must be non-negative, got {s}")
    return v


def _cmd_fit(a):
    template, target = _mesh(a.template), _mesh(a.target)
    opts = {}
    if a.config:
        opts = DeformConfig.load(a.config).to_dict()
    if a.weights:
        opts["weights"] = LossWeights.load(a.weights).to_dict()
    for key, val in (("stages", a.stages), ("iterations", a.iters), ("kappa_max", a.kappa_max)):
        if val is not None:
            opts[key] = val
    config = DeformConfig.from_dict(opts)
    if a.cls not in config.weights.classes:
        raise CliError(f"weights have no entry for class {a.cls!r}")
    result = fit({a.cls: template}, {a.cls: target}, config, seed=a.seed)
    write_mesh(result.final[a.cls], a.out)
    if a.trace:
        Path(a.trace).write_text(result.trace_csv())
    summary = {"seed": a.seed, "out": str(a.out), "topology": result.topology[a.cls].as_dict(),
               "final_total": result.trace[-1].total if result.trace else None}
    sys.stdout.write(_dumps(summary))


def _cmd_metrics(a):
    rep = compare_surfaces(_mesh(a.pred), _mesh(a.gt), a.samples, a.seed, a.percentile,
                           a.thresholds)
    _emit(rep.to_json() + "\n", a.out)


def _cmd_thickness(a):
    tm = cortical_thickness(_mesh(a.white), _mesh(a.pial))
    if a.csv:
        Path(a.csv).write_text(tm.to_csv())
    _emit(_dumps(tm.summary()), a.out)


def _cmd_topo(a):
    mesh = _mesh(a.mesh)
    d = topology_report(mesh).as_dict()
    d.pop("boundary_edges", None)
    d["self_intersections"] = int(len(self_intersections(mesh)))
    _emit(_dumps(d), a.out)


def _cmd_smooth(a):
    mesh = _mesh(a.mesh)
    cfg = SmoothConfig(method=a.method, lam=a.lam, eps=a.eps, max_iters=a.max_iters)
    smoothed, iters = laplacian_smooth(mesh, cfg)
    write_mesh(smoothed, a.out)
    sys.stdout.write(_dumps({"iterations": iters, "out": str(a.out)}))


def _cmd_subdivide(a):
    mesh = subdivide_midpoint(_mesh(a.mesh), a.levels)
    write_mesh(mesh, a.out)
    sys.stdout.write(_dumps({"V": mesh.n_vertices, "F": mesh.n_faces, "out": str(a.out)}))


def _cmd_curvature(a):
    _emit(curvature_csv(mean_curvature(_mesh(a.mesh)), a.kappa_max), a.out)


def _cmd_sample(a):
    cloud = sample_surface(_mesh(a.mesh), a.samples, a.seed)
    rows = ["x,y,z,nx,ny,nz,face_id"]
    for p, n, f in zip(cloud.points.tolist(), cloud.normals.tolist(), cloud.face_id.tolist()):
        rows.append(",".join(repr(v) for v in (*p, *n)) + f",{f}")
    _emit("\n".join(rows) + "\n", a.out)


def _cmd_icp(a):
    source, target = _mesh(a.source), _mesh(a.target)
    res = icp_rigid(source.vertices, target, a.max_iters, a.tol)
    if a.aligned:
        write_mesh(res.transform.apply_mesh(source), a.aligned)
    d = {"rotation": res.transform.rotation.tolist(),
         "translation": res.transform.translation.tolist(),
         "mse": res.mse, "iterations": res.iterations, "converged": res.converged}
    _emit(_dumps(d), a.out)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cortexgeo", description="Mesh deformation losses, fitting and surface metrics.")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="worker threads for neighbour queries (default: $CORTEXGEO_THREADS or 1)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("fit", help="deform a template towards a target surface")
    s.add_argument("--template", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--weights")
    s.add_argument("--config", help="DeformConfig JSON")
    s.add_argument("--cls", default="wm", help="surface class used to pick the weight row")
    s.add_argument("--stages", type=_positive_int)
    s.add_argument("--iters", type=_positive_int)
    s.add_argument("--kappa-max", type=float)
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--trace")
    s.set_defaults(run=_cmd_fit)

    s = sub.add_parser("metrics", help="ASSD, Hausdorff and exceedance fractions")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--samples", type=_positive_int, default=100_000)
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--percentile", type=float, default=100.0)
    s.add_argument("--thresholds", type=float, nargs="*", default=[1.0, 2.0])
    s.add_argument("--out")
    s.set_defaults(run=_cmd_metrics)

    s = sub.add_parser("thickness", help="per-vertex white-to-pial distance")
    s.add_argument("--white", required=True)
    s.add_argument("--pial", required=True)
    s.add_argument("--csv")
    s.add_argument("--out")
    s.set_defaults(run=_cmd_thickness)

    s = sub.add_parser("topo", help="topology and self-intersection report")
    s.add_argument("--mesh", required=True)
    s.add_argument("--out")
    s.set_defaults(run=_cmd_topo)

    s = sub.add_parser("smooth", help="Laplacian smoothing until convergence")
    s.add_argument("--mesh", required=True)
    s.add_argument("--method", choices=("uniform", "hc"), default="hc")
    s.add_argument("--lam", type=float, default=1.0)
    s.add_argument("--eps", type=float)
    s.add_argument("--max-iters", type=int, default=1000)
    s.add_argument("--out", required=True)
    s.set_defaults(run=_cmd_smooth)

    s = sub.add_parser("subdivide", help="midpoint subdivision")
    s.add_argument("--mesh", required=True)
    s.add_argument("--levels", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(run=_cmd_subdivide)

    s = sub.add_parser("curvature", help="per-vertex mean curvature and weights (CSV)")
    s.add_argument("--mesh", required=True)
    s.add_argument("--kappa-max", type=float, default=5.0)
    s.add_argument("--out")
    s.set_defaults(run=_cmd_curvature)

    s = sub.add_parser("sample", help="area-uniform surface samples (CSV)")
    s.add_argument("--mesh", required=True)
    s.add_argument("--samples", type=_positive_int, default=10_000)
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--out")
    s.set_defaults(run=_cmd_sample)

    s = sub.add_parser("icp", help="rigidly align source vertices to a target surface")
    s.add_argument("--source", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--max-iters", type=_positive_int, default=100)
    s.add_argument("--tol", type=float, default=1e-10)
    s.add_argument("--aligned")
    s.add_argument("--out")
    s.set_defaults(run=_cmd_icp)
    return p


def _fail(code: int, exc: BaseException) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    sys.stderr.write(f"error: {type(exc).__name__}: {msg}\n")
    return code


def main(argv=None) -> int:
    saved = _threads._threads
    try:
        args = build_parser().parse_args(argv)
        if args.threads is not None:
            _threads.set_threads(args.threads)
        with np.errstate(all="ignore"):
            args.run(args)
    except (CliError, MeshError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        if isinstance(exc, FitError):
            return _fail(2, exc)
        return _fail(1, exc)
    except (FitError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
        return _fail(2, exc)
    finally:
        _threads.set_threads(saved)
    return 0


if __name__ == "__main__":
    sys.exit(main())
